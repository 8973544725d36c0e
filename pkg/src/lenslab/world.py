"""Fixed differentiable stand-ins for the frozen generator and composite reward.

Worlds are built from seeds only, so a small JSON manifest reconstructs them
bit-identically.  Three kinds:

- generic: two-layer smooth net reading the whole latent.
- lowfreq: the net reads only a chosen window of per-patch basis coefficients,
  so the reward provably ignores everything outside that window (the
  high-frequency contribution bound holds with epsilon = 0 by construction).
- isotropic: identity features with a radially symmetric reward; the reward
  gradient treats every basis direction identically (control case).
"""

from __future__ import annotations

from dataclasses import dataclass, field
import hashlib
import json

import numpy as np

from . import autodiff as ad
from . import codec
from .numerics import RngState, ShapeError, as_array

REWARD_WEIGHTS = (0.01, 5.0, 1.0, 0.05)  # cosine, quad-quality, quad-fidelity, bonus
COSINE_EPS = 1e-6


@dataclass
class PromptEmbedding:
    prompt_id: int
    tokens: np.ndarray   # (T, e)
    pooled: np.ndarray   # (e,)
    target: np.ndarray   # (m,) reward optimum for this prompt


class PromptVocab:
    """Fixed table of prompt embeddings and per-prompt reward targets.

    Targets are a fixed smooth function of the pooled embedding (not an
    independent draw), so conditioning learned on training prompts carries
    over to held-out prompts the same way a real reward tracks prompt
    semantics through the embedding.
    """

    def __init__(self, n_prompts: int, n_tokens: int, token_dim: int,
                 feature_dim: int, seed: int, target_scale: float = 1.0):
        self.n_prompts = n_prompts
        self.n_tokens = n_tokens
        self.token_dim = token_dim
        self.feature_dim = feature_dim
        self.seed = seed
        self.target_scale = target_scale
        rng = RngState(seed)
        self._tokens = rng.normal((n_prompts, n_tokens, token_dim))
        embed = rng.normal((token_dim, feature_dim)) / np.sqrt(token_dim)
        pooled = self._tokens.mean(axis=1)
        raw = np.tanh(pooled @ embed)
        self._targets = target_scale * np.sqrt(feature_dim) * raw / np.maximum(
            np.linalg.norm(raw, axis=1, keepdims=True), 1e-9)
        self._tokens.flags.writeable = False
        self._targets.flags.writeable = False

    def prompt(self, c: int) -> PromptEmbedding:
        if not 0 <= int(c) < self.n_prompts:
            raise ValueError(f"unknown prompt id {c} (vocabulary size {self.n_prompts})")
        tokens = self._tokens[int(c)]
        return PromptEmbedding(int(c), tokens, tokens.mean(axis=0), self._targets[int(c)])


@dataclass
class ToyGenerator:
    """Frozen two-layer smooth map (linear -> tanh -> linear) from latent to features.

    input_kind selects how the latent is read:
    - "flat": the flattened latent itself;
    - "coeff_window": per-patch basis coefficients restricted to coeff_indices
      (everything outside the window never enters the computation);
    - "identity": features are the flattened latent (no weights).
    """

    geometry: codec.PatchGeometry
    feature_dim: int
    seed: int
    input_kind: str = "flat"
    hidden_dim: int = 2560
    w1: np.ndarray | None = None
    b1: np.ndarray | None = None
    w2: np.ndarray | None = None
    b2: np.ndarray | None = None
    basis: codec.PatchBasis | None = None
    coeff_indices: np.ndarray | None = None

    def __post_init__(self):
        if self.input_kind == "identity":
            self.feature_dim = int(np.prod(self.geometry.latent_shape))
            return
        in_dim = self.input_dim
        rng = RngState(self.seed)
        if self.w1 is None:
            self.w1 = rng.normal((self.hidden_dim, in_dim)) / np.sqrt(in_dim)
            self.b1 = 0.1 * rng.normal((self.hidden_dim,))
            self.w2 = rng.normal((self.feature_dim, self.hidden_dim)) / np.sqrt(self.hidden_dim)
            self.b2 = 0.1 * rng.normal((self.feature_dim,))
        for arr in (self.w1, self.b1, self.w2, self.b2):
            arr.flags.writeable = False  # frozen after construction

    @property
    def input_dim(self) -> int:
        if self.input_kind == "flat":
            return int(np.prod(self.geometry.latent_shape))
        if self.input_kind == "coeff_window":
            return self.geometry.n_patches * len(self.coeff_indices)
        if self.input_kind == "identity":
            return int(np.prod(self.geometry.latent_shape))
        raise ValueError(f"unknown input_kind {self.input_kind!r}")

    def parameter_count(self) -> int:
        if self.input_kind == "identity":
            return 0
        return sum(a.size for a in (self.w1, self.b1, self.w2, self.b2))

    def forward(self, z):
        """Features for latent z; accepts a raw array or a taped Box."""
        shape = z.shape if isinstance(z, ad.Box) else np.shape(z)
        if tuple(shape) != self.geometry.latent_shape:
            raise ShapeError(f"generator: latent shape {tuple(shape)} != "
                             f"{self.geometry.latent_shape}")
        if self.input_kind == "identity":
            return ad.reshape(z, (self.feature_dim,))
        if self.input_kind == "flat":
            v = ad.reshape(z, (self.input_dim,))
        else:
            patches = codec.unfold(z, self.geometry)
            coeffs = ad.matmul(patches, self.basis.basis)
            window = ad.gather(coeffs, self.coeff_indices, axis=1)
            v = ad.reshape(window, (self.input_dim,))
        hidden = ad.tanh(ad.add(ad.matmul(self.w1, v), self.b1))
        return ad.add(ad.matmul(self.w2, hidden), self.b2)


def generate(generator: ToyGenerator, z):
    return generator.forward(z)


# ---------------------------------------------------------------------------
# Reward field: weighted sum of four smooth components, each bounded above.
# ---------------------------------------------------------------------------


@dataclass
class RewardComponent:
    kind: str            # "cosine" | "quad" | "bonus"
    projection: np.ndarray | None  # (m, m) for cosine/quad
    upper_bound: float

    def evaluate(self, x, prompt: PromptEmbedding):
        t = prompt.target
        if self.kind == "quad":
            resid = ad.sub(ad.matmul(self.projection, x), self.projection @ t)
            return ad.neg(ad.reduce_mean(ad.square(resid)))
        if self.kind == "cosine":
            u = ad.matmul(self.projection, x)
            ref = self.projection @ t
            ref = ref / max(float(np.linalg.norm(ref)), 1e-12)
            inv_norm = ad.rsqrt(ad.add(ad.dot(u, u), np.asarray(COSINE_EPS)))
            return ad.mul(ad.dot(u, ref), inv_norm)
        if self.kind == "bonus":
            return ad.tanh(ad.scale(ad.dot(x, t), 1.0 / t.size))
        raise ValueError(f"unknown reward component kind {self.kind!r}")


@dataclass
class RewardField:
    """Total reward = sum_i weight_i * r_i(x, c); every component differentiable
    and bounded above, so exp(reward) is integrable."""

    components: list          # [(weight, RewardComponent)]
    feature_dim: int
    seed: int
    shift: float = 0.0        # additive constant; gradients never see it

    def evaluate(self, x, prompt: PromptEmbedding):
        shape = x.shape if isinstance(x, ad.Box) else np.shape(x)
        if tuple(shape) != (self.feature_dim,):
            raise ShapeError(f"reward: feature shape {tuple(shape)} != ({self.feature_dim},)")
        total = None
        for weight, component in self.components:
            term = ad.scale(component.evaluate(x, prompt), weight)
            total = term if total is None else ad.add(total, term)
        if self.shift != 0.0:
            total = ad.add(total, np.asarray(self.shift))
        return total

    def upper_bound(self) -> float:
        return sum(w * c.upper_bound for w, c in self.components) + self.shift

    def shifted(self, const: float) -> "RewardField":
        return RewardField(self.components, self.feature_dim, self.seed,
                           self.shift + float(const))


def reward(field: RewardField, x, prompt: PromptEmbedding):
    """Scalar reward; works on raw features or a taped Box."""
    return field.evaluate(x, prompt)


def make_reward_field(feature_dim: int, seed: int,
                      weights=REWARD_WEIGHTS, proj_gain: float = 1.0) -> RewardField:
    rng = RngState(seed)
    m = feature_dim

    def projection():
        return proj_gain * rng.normal((m, m)) / np.sqrt(m)

    components = [
        (weights[0], RewardComponent("cosine", projection(), 1.0)),
        (weights[1], RewardComponent("quad", projection(), 0.0)),
        (weights[2], RewardComponent("quad", projection(), 0.0)),
        (weights[3], RewardComponent("bonus", None, 1.0)),
    ]
    for _, comp in components:
        if comp.projection is not None:
            comp.projection.flags.writeable = False
    return RewardField(components, feature_dim, seed)


# ---------------------------------------------------------------------------
# World assembly and serialization.
# ---------------------------------------------------------------------------


@dataclass
class ToyWorld:
    generator: ToyGenerator
    reward_field: RewardField
    prompts: PromptVocab
    geometry: codec.PatchGeometry
    manifest: dict

    def reward_of_latent(self, z, prompt: PromptEmbedding):
        return self.reward_field.evaluate(self.generator.forward(z), prompt)


_PROMPT_DEFAULTS = dict(n_prompts=16, n_tokens=4, token_dim=8)


def make_generic_world(geometry: codec.PatchGeometry, seed: int = 0,
                       feature_dim: int = 32, hidden_dim: int = 2560,
                       proj_gain: float = 1.0) -> ToyWorld:
    rng = RngState(seed)
    generator = ToyGenerator(geometry, feature_dim, rng.split(1).seed,
                             input_kind="flat", hidden_dim=hidden_dim)
    fld = make_reward_field(feature_dim, rng.split(2).seed, proj_gain=proj_gain)
    prompts = PromptVocab(feature_dim=feature_dim, seed=rng.split(3).seed, **_PROMPT_DEFAULTS)
    manifest = {
        "kind": "generic", "seed": seed, "geometry": geometry.to_dict(),
        "feature_dim": feature_dim, "hidden_dim": hidden_dim,
        "proj_gain": proj_gain, "reward_weights": list(REWARD_WEIGHTS),
        "prompts": dict(_PROMPT_DEFAULTS),
    }
    return ToyWorld(generator, fld, prompts, geometry, manifest)


def make_coeff_world(basis: codec.PatchBasis, indices, seed: int = 0,
                     feature_dim: int = 32, hidden_dim: int = 384,
                     proj_gain: float = 1.0, kind: str = "coeff") -> ToyWorld:
    """World whose reward depends only on the given per-patch coefficient indices."""
    indices = np.asarray(sorted(int(i) for i in indices), dtype=np.int64)
    d = basis.geometry.patch_dim
    if indices.size == 0 or indices[0] < 0 or indices[-1] >= d:
        raise ValueError(f"coefficient indices must lie in [0, {d}), got {indices}")
    rng = RngState(seed)
    generator = ToyGenerator(
        basis.geometry, feature_dim, rng.split(1).seed, input_kind="coeff_window",
        hidden_dim=hidden_dim, basis=basis.noise_mode(), coeff_indices=indices,
    )
    fld = make_reward_field(feature_dim, rng.split(2).seed, proj_gain=proj_gain)
    prompts = PromptVocab(feature_dim=feature_dim, seed=rng.split(3).seed, **_PROMPT_DEFAULTS)
    manifest = {
        "kind": kind, "seed": seed, "geometry": basis.geometry.to_dict(),
        "feature_dim": feature_dim, "hidden_dim": hidden_dim,
        "proj_gain": proj_gain, "reward_weights": list(REWARD_WEIGHTS),
        "prompts": dict(_PROMPT_DEFAULTS), "coeff_indices": indices.tolist(),
    }
    return ToyWorld(generator, fld, prompts, basis.geometry, manifest)


def make_lowfreq_world(basis: codec.PatchBasis, j: int, seed: int = 0,
                       feature_dim: int = 32, hidden_dim: int = 384,
                       proj_gain: float = 1.0) -> ToyWorld:
    """World where the reward reads only the first j coefficients of each patch.

    Perturbing any coefficient with index > j leaves the reward bit-identical,
    so the high-frequency contribution bound holds with epsilon = 0 exactly.
    """
    d = basis.geometry.patch_dim
    if not 1 <= j <= d:
        raise ValueError(f"j={j} outside [1, {d}]")
    world = make_coeff_world(basis, range(j), seed, feature_dim, hidden_dim,
                             proj_gain, kind="lowfreq")
    world.manifest["j"] = int(j)
    return world


def make_isotropic_world(geometry: codec.PatchGeometry, seed: int = 0) -> ToyWorld:
    """Identity features with reward -||x||^2 / 2: every direction equivalent."""
    m = int(np.prod(geometry.latent_shape))
    generator = ToyGenerator(geometry, m, seed, input_kind="identity")
    comp = RewardComponent("quad", np.eye(m), 0.0)
    # -mean(x^2) * (m/2) == -||x||^2 / 2
    fld = RewardField([(m / 2.0, comp)], m, seed)
    # identity projection needs a zero target for every prompt
    prompts = PromptVocab(feature_dim=m, seed=seed, target_scale=0.0, **_PROMPT_DEFAULTS)
    manifest = {"kind": "isotropic", "seed": seed, "geometry": geometry.to_dict()}
    return ToyWorld(generator, fld, prompts, geometry, manifest)


def world_from_manifest(manifest: dict, basis: codec.PatchBasis | None = None) -> ToyWorld:
    geometry = codec.PatchGeometry.from_dict(manifest["geometry"])
    kind = manifest["kind"]
    if kind == "generic":
        return make_generic_world(geometry, manifest["seed"], manifest["feature_dim"],
                                  manifest["hidden_dim"], manifest["proj_gain"])
    if kind in ("lowfreq", "coeff"):
        if basis is None:
            raise ValueError(f"{kind} world needs the basis it was built with")
        world = make_coeff_world(basis, manifest["coeff_indices"], manifest["seed"],
                                 manifest["feature_dim"], manifest["hidden_dim"],
                                 manifest["proj_gain"], kind=kind)
        if "j" in manifest:
            world.manifest["j"] = manifest["j"]
        return world
    if kind == "isotropic":
        return make_isotropic_world(geometry, manifest["seed"])
    raise ValueError(f"unknown world kind {kind!r}")


def save_world(world: ToyWorld, path, basis_file: str | None = None) -> None:
    doc = dict(world.manifest)
    if basis_file is not None:
        with open(basis_file, "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        doc["basis_file"] = str(basis_file)
        doc["basis_sha256"] = digest
    with open(str(path), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_world(path, basis: codec.PatchBasis | None = None) -> ToyWorld:
    with open(str(path)) as fh:
        doc = json.load(fh)
    if basis is None and "basis_file" in doc:
        basis = codec.load_basis(doc["basis_file"])
    return world_from_manifest(doc, basis)


# ---------------------------------------------------------------------------
# High-frequency contribution estimate.
# ---------------------------------------------------------------------------


@dataclass
class EpsilonReport:
    """Monte Carlo estimate of max |r(g(w_L, w_H)) - mean_wH r(g(w_L, w_H))|.

    Witnesses only the sampled points; this is an estimate of the uniform
    bound, never a proof of it.
    """

    estimate: float
    n_low: int
    n_high: int
    reward_min: float
    reward_max: float

    @property
    def reward_range(self) -> float:
        return self.reward_max - self.reward_min


def epsilon_estimate(world: ToyWorld, basis: codec.PatchBasis, c: int,
                     n_low: int, n_high: int, rng: RngState) -> EpsilonReport:
    if n_low < 100 or n_high < 100:
        raise ValueError(f"need >= 100 samples on each side, got {n_low}/{n_high}")
    basis = basis.noise_mode()
    geometry = basis.geometry
    n, k, d = geometry.n_patches, basis.k, geometry.patch_dim
    prompt = world.prompts.prompt(c)
    best = 0.0
    r_min, r_max = np.inf, -np.inf
    for _ in range(n_low):
        w_low = rng.normal((n, k))
        rewards = np.empty(n_high)
        for b in range(n_high):
            w_high = rng.normal((n, d - k))
            z = codec.recon(codec.split_from_coefficients(w_low, w_high, basis), basis)
            rewards[b] = float(world.reward_of_latent(z, prompt))
        r_min = min(r_min, float(rewards.min()))
        r_max = max(r_max, float(rewards.max()))
        best = max(best, float(np.max(np.abs(rewards - rewards.mean()))))
    return EpsilonReport(best, n_low, n_high, r_min, r_max)
