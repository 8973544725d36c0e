"""Numerical verification of the framework's mathematical claims.

Every check pairs the implemented quantity with an independent oracle:
tensor-product Simpson quadrature for tilted-distribution KL bounds, Monte
Carlo for Stein's identity and pushforward KL, closed-form Gaussian KL for
the quadratic approximation, and instrumented multiply-add counts for the
complexity claims.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from . import codec
from . import net as lens_net
from .numerics import NumericalError, RngState
from .world import PromptEmbedding, ToyWorld

QUADRATURE_TOL = 1e-4
NORMALIZATION_TOL = 1e-4


class GridError(NumericalError):
    """Quadrature grid too coarse for the requested tolerance."""


# ---------------------------------------------------------------------------
# Grid densities (Simpson tensor-product quadrature).
# ---------------------------------------------------------------------------


def simpson_axis(n_points: int, lo: float, hi: float):
    """Composite-Simpson nodes and positive weights on [lo, hi] (odd count)."""
    if n_points % 2 == 0:
        n_points += 1
    x = np.linspace(lo, hi, n_points)
    dx = (hi - lo) / (n_points - 1)
    w = np.ones(n_points)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return x, w * (dx / 3.0)


@dataclass
class GridDensity:
    """Density values tabulated on a tensor-product grid."""

    axes: list
    weights: list
    values: np.ndarray
    normalized: bool = False

    def integrate(self, values=None) -> float:
        v = self.values if values is None else values
        for w in reversed(self.weights):
            v = np.tensordot(v, w, axes=([-1], [0]))
        return float(v)

    def normalize(self) -> "GridDensity":
        z = self.integrate()
        if z <= 0:
            raise GridError(f"cannot normalize: integral {z}")
        return GridDensity(self.axes, self.weights, self.values / z, normalized=True)


_AXIS_POINTS = {2: 401, 3: 161, 4: 71}
GRID_HALF_WIDTH = 6.0


def _build_grid(dim: int):
    if dim not in _AXIS_POINTS:
        raise ValueError(f"grid oracle supports total dimension 2..4, got {dim}")
    axes, weights = [], []
    for _ in range(dim):
        x, w = simpson_axis(_AXIS_POINTS[dim], -GRID_HALF_WIDTH, GRID_HALF_WIDTH)
        axes.append(x)
        weights.append(w)
    return axes, weights


@dataclass
class KlReport:
    exact: float
    method: str  # "analytic" | "grid" | "change-of-variables"
    approximation: float
    bound: float
    passed: bool
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"exact": self.exact, "method": self.method,
                "approximation": self.approximation, "bound": self.bound,
                "passed": self.passed, **self.extras}


# ---------------------------------------------------------------------------
# Tilted-distribution approximation bound: when the reward splits into a
# low-frequency part plus a perturbation bounded by epsilon, the KL between
# the fully tilted density and the low-frequency-only tilted density is at
# most 2 * epsilon.  Verified by explicit quadrature, normalizing constants
# and all (the only place in the package where they are computed).
# ---------------------------------------------------------------------------


@dataclass
class TiltInstance:
    name: str
    dim_low: int
    dim_high: int
    epsilon: float
    rbar: callable       # (*low_mesh) -> array, bounded above
    delta: callable      # (*low_mesh, *high_mesh) -> array, |delta| <= epsilon


def verify_tilt_approximation_bound(instance: TiltInstance) -> KlReport:
    dim = instance.dim_low + instance.dim_high
    axes, weights = _build_grid(dim)
    mesh = np.meshgrid(*axes, indexing="ij", sparse=True)
    log_q = sum(-0.5 * m**2 for m in mesh) - 0.5 * dim * np.log(2.0 * np.pi)
    q = GridDensity(axes, weights, np.exp(np.broadcast_to(
        log_q, tuple(len(a) for a in axes)).copy()))
    norm_err = abs(q.integrate() - 1.0)
    if norm_err > NORMALIZATION_TOL:
        raise GridError(f"grid too coarse: Gaussian normalizes to 1 +- {norm_err:.2e}")
    rbar = np.broadcast_to(instance.rbar(*mesh[: instance.dim_low]), q.values.shape)
    delta = np.broadcast_to(
        instance.delta(*mesh), q.values.shape)
    dmax = float(np.max(np.abs(delta)))
    if dmax > instance.epsilon + 1e-12:
        raise ValueError(
            f"{instance.name}: |delta| reaches {dmax:.4g} > epsilon {instance.epsilon}"
        )
    tilted = GridDensity(axes, weights, q.values * np.exp(rbar + delta)).normalize()
    lowfreq_only = GridDensity(axes, weights, q.values * np.exp(rbar)).normalize()
    kl = tilted.integrate(tilted.values * (np.log(tilted.values)
                                           - np.log(lowfreq_only.values)))
    kl = max(kl, 0.0)
    bound = 2.0 * instance.epsilon + QUADRATURE_TOL
    return KlReport(
        exact=kl, method="grid", approximation=0.0, bound=bound,
        passed=kl <= bound,
        extras={"name": instance.name, "epsilon": instance.epsilon,
                "dim": dim, "max_abs_delta": dmax},
    )


def default_tilt_instances() -> list:
    rbars = {
        "well": lambda wl: -wl**2,
        "offset-well": lambda wl: -0.5 * (wl - 1.0) ** 2,
        "wavy": lambda wl: np.sin(2.0 * wl),
    }
    deltas = {
        "zero": lambda eps: (lambda wl, wh: np.zeros(np.broadcast(wl, wh).shape)),
        "sine": lambda eps: (lambda wl, wh: eps * np.sin(wh)),
        "sharp": lambda eps: (lambda wl, wh: eps * np.tanh(10.0 * wh)),
        "mixed": lambda eps: (lambda wl, wh: eps * np.cos(wl + 2.0 * wh)),
    }
    instances = []
    for eps in (0.05, 0.1, 0.5):
        for rb_name, rb in rbars.items():
            for d_name, mk in deltas.items():
                if rb_name == "wavy" and d_name in ("zero", "mixed"):
                    continue  # keep the default set compact
                instances.append(TiltInstance(
                    name=f"{rb_name}/{d_name}/eps={eps}", dim_low=1, dim_high=1,
                    epsilon=eps, rbar=rb, delta=mk(eps),
                ))
    # a pair of 3-D instances: two high-frequency axes / two low-frequency axes
    instances.append(TiltInstance(
        name="well/3d-two-high/eps=0.1", dim_low=1, dim_high=2, epsilon=0.1,
        rbar=lambda wl: -wl**2,
        delta=lambda wl, wh1, wh2: 0.1 * np.sin(wh1) * np.cos(wh2),
    ))
    instances.append(TiltInstance(
        name="well/3d-two-low/eps=0.1", dim_low=2, dim_high=1, epsilon=0.1,
        rbar=lambda w1, w2: -(w1**2 + w2**2) / 2.0,
        delta=lambda w1, w2, wh: 0.1 * np.tanh(5.0 * wh) * np.cos(w1),
    ))
    return instances


# ---------------------------------------------------------------------------
# Stein identity: E[<w, h(w)>] = E[tr J_h(w)] for w ~ N(0, I).
# ---------------------------------------------------------------------------

HUTCHINSON_THRESHOLD = 256
HUTCHINSON_PROBES = 256
STEIN_SIGMA = 4.0


@dataclass
class SteinReport:
    name: str
    dim: int
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    trace_method: str
    n_samples: int
    passed: bool

    @property
    def difference(self) -> float:
        return self.lhs - self.rhs

    @property
    def combined_se(self) -> float:
        return float(np.sqrt(self.lhs_se**2 + self.rhs_se**2))

    def to_dict(self) -> dict:
        return {"name": self.name, "dim": self.dim, "lhs": self.lhs,
                "lhs_se": self.lhs_se, "rhs": self.rhs, "rhs_se": self.rhs_se,
                "difference": self.difference, "combined_se": self.combined_se,
                "trace_method": self.trace_method, "n_samples": self.n_samples,
                "passed": self.passed}


@dataclass
class SteinInstance:
    """A map h: R^n -> R^n with at-most-linear growth.

    kind "linear": h(w) = w A^T + b with an exact analytic trace.
    kind "rowwise": batched smooth net applied row-independently, so basis
    JVPs on one batched tape yield per-sample traces.
    """

    name: str
    dim: int
    kind: str
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    params: dict | None = None

    def batched(self, w):
        """h applied to each row of w; records when w is a Box."""
        if self.kind == "linear":
            out = ad.matmul(w, self.a.T)
            return ad.add_bias(out, self.b) if self.b is not None else out
        p = self.params
        hidden = ad.tanh(ad.add_bias(ad.matmul(w, p["a1"]), p["b1"]))
        out = ad.matmul(hidden, p["a2"])
        if p.get("beta", 0.0):
            out = ad.add(out, ad.scale(w, p["beta"]))
        return out


def linear_growth_probe(instance: SteinInstance, rng: RngState) -> float:
    """Growth exponent estimate; must stay near <= 1 for Stein to apply."""
    w = rng.normal((1, instance.dim))
    n1 = float(np.linalg.norm(instance.batched(w))) + 1e-12
    n2 = float(np.linalg.norm(instance.batched(1024.0 * w))) + 1e-12
    return float(np.log(n2 / n1) / np.log(1024.0))


def verify_stein_identity(instance: SteinInstance, n_samples: int,
                          rng: RngState) -> SteinReport:
    growth = linear_growth_probe(instance, rng.split(99))
    if growth > 1.2:
        raise ValueError(f"{instance.name}: growth exponent {growth:.2f} "
                         "exceeds linear; Stein's identity does not apply")
    n = instance.dim
    w_lhs = rng.split(1).normal((n_samples, n))
    h_lhs = instance.batched(w_lhs)
    inner = np.sum(w_lhs * h_lhs, axis=1)
    lhs = float(np.mean(inner))
    lhs_se = float(np.std(inner, ddof=1) / np.sqrt(n_samples))
    if instance.kind == "linear":
        rhs, rhs_se = float(np.trace(instance.a)), 0.0
        method = "analytic"
    else:
        w_rhs = rng.split(2).normal((n_samples, n))
        _, tape = ad.record(lambda bx: instance.batched(bx["w"]), {"w": w_rhs})
        traces = np.zeros(n_samples)
        if n <= HUTCHINSON_THRESHOLD:
            method = "jvp-basis"
            direction = np.zeros((n_samples, n))
            for i in range(n):
                direction[:] = 0.0
                direction[:, i] = 1.0
                traces += ad.jacobian_vector_product(tape, direction, wrt="w")[:, i]
        else:
            method = "hutchinson"
            probe_rng = rng.split(3)
            for _ in range(HUTCHINSON_PROBES):
                z = np.where(probe_rng.uniform((n_samples, n)) > 0.5, 1.0, -1.0)
                traces += np.sum(z * ad.jacobian_vector_product(tape, z, wrt="w"),
                                 axis=1)
            traces /= HUTCHINSON_PROBES
        rhs = float(np.mean(traces))
        rhs_se = float(np.std(traces, ddof=1) / np.sqrt(n_samples))
    combined = float(np.sqrt(lhs_se**2 + rhs_se**2))
    passed = abs(lhs - rhs) <= STEIN_SIGMA * max(combined, 1e-15)
    return SteinReport(instance.name, n, lhs, lhs_se, rhs, rhs_se, method,
                       n_samples, passed)


def default_stein_instances(seed: int = 0) -> list:
    rng = RngState(seed)
    instances = [
        SteinInstance("zero-map", 8, "linear", a=np.zeros((8, 8))),
        SteinInstance("identity", 8, "linear", a=np.eye(8)),
        SteinInstance("dense-linear", 12, "linear",
                      a=rng.split(1).normal((12, 12)) / np.sqrt(12),
                      b=rng.split(2).normal((12,))),
        SteinInstance("antisymmetric", 10, "linear",
                      a=(lambda m: m - m.T)(rng.split(3).normal((10, 10)))),
        SteinInstance("diagonal-shifted", 6, "linear",
                      a=np.diag(np.linspace(-1.0, 2.0, 6)),
                      b=np.full(6, 0.3)),
    ]
    idx = 0
    for dim in (4, 8, 16, 32):
        for width in (8, 16, 32):
            if len(instances) >= 25:
                break
            r = rng.split(100 + idx)
            idx += 1
            params = {
                "a1": r.normal((dim, width)) / np.sqrt(dim),
                "b1": 0.2 * r.normal((width,)),
                "a2": r.normal((width, dim)) / np.sqrt(width),
                "beta": 0.3 if idx % 2 == 0 else 0.0,
            }
            instances.append(SteinInstance(
                f"rowwise-net-{dim}x{width}-{idx}", dim, "rowwise", params=params))
    while len(instances) < 25:
        idx += 1
        r = rng.split(100 + idx)
        params = {"a1": r.normal((8, 16)) / np.sqrt(8.0),
                  "b1": 0.2 * r.normal((16,)),
                  "a2": r.normal((16, 8)) / 4.0,
                  "beta": 0.1 * idx}
        instances.append(SteinInstance(f"rowwise-extra-{idx}", 8, "rowwise",
                                       params=params))
    return instances[:25]


def stein_check_pointwise(h_fn, dim: int, n_samples: int, rng: RngState,
                          name: str = "custom") -> SteinReport:
    """Per-sample Stein check for maps that cannot be row-batched (e.g. the
    modulation network acting on its flattened input)."""
    w_lhs = rng.split(1).normal((n_samples, dim))
    inner = np.array([float(np.dot(w, h_fn(w))) for w in w_lhs])
    lhs = float(np.mean(inner))
    lhs_se = float(np.std(inner, ddof=1) / np.sqrt(n_samples))
    w_rhs = rng.split(2).normal((n_samples, dim))
    traces = np.zeros(n_samples)
    eye = np.eye(dim)
    for s in range(n_samples):
        _, tape = ad.record(lambda bx: _ensure_box_fn(h_fn)(bx["w"]), {"w": w_rhs[s]})
        traces[s] = sum(
            float(ad.jacobian_vector_product(tape, eye[i], wrt="w")[i])
            for i in range(dim)
        )
    rhs = float(np.mean(traces))
    rhs_se = float(np.std(traces, ddof=1) / np.sqrt(n_samples))
    combined = float(np.sqrt(lhs_se**2 + rhs_se**2))
    passed = abs(lhs - rhs) <= STEIN_SIGMA * max(combined, 1e-15)
    return SteinReport(name, dim, lhs, lhs_se, rhs, rhs_se, "jvp-basis-per-sample",
                       n_samples, passed)


def _ensure_box_fn(h_fn):
    return h_fn


# ---------------------------------------------------------------------------
# Quadratic KL approximation: for the linear residual map h(w) = m * w the
# pushforward of N(0, I) under w + h(w) is N(0, (1+m)^2 I), so the exact KL
# is analytic and the quadratic surrogate |error| bound n(-log(1-M) - M) can
# be tested end to end, including a Monte Carlo cross-check of the exact KL.
# ---------------------------------------------------------------------------


def verify_quadratic_kl_bound(scale_eps: float, dim: int) -> KlReport:
    if not 0.0 <= scale_eps < 1.0:
        raise ValueError(f"linear scale must satisfy 0 <= eps < 1, got {scale_eps}")
    sigma = 1.0 + scale_eps
    exact = 0.5 * dim * (sigma**2 - 1.0 - 2.0 * np.log(sigma))
    approx = 0.5 * dim * scale_eps**2
    if scale_eps == 0.0:
        bound = 0.0
    else:
        bound = dim * (-np.log(1.0 - scale_eps) - scale_eps)
    passed = abs(exact - approx) <= bound + 1e-15
    return KlReport(exact=float(exact), method="change-of-variables",
                    approximation=float(approx), bound=float(bound), passed=passed,
                    extras={"scale": scale_eps, "dim": dim})


def mc_kl_cross_check(scale_eps: float, dim: int, n_samples: int,
                      rng: RngState) -> dict:
    """Monte Carlo estimate of KL(N(0, s^2 I) || N(0, I)) vs the analytic value."""
    sigma = 1.0 + scale_eps
    x = sigma * rng.normal((n_samples, dim))
    log_ratio = 0.5 * np.sum(x * x, axis=1) * (1.0 - 1.0 / sigma**2) \
        - dim * np.log(sigma)
    est = float(np.mean(log_ratio))
    se = float(np.std(log_ratio, ddof=1) / np.sqrt(n_samples))
    exact = float(0.5 * dim * (sigma**2 - 1.0 - 2.0 * np.log(sigma)))
    return {"estimate": est, "se": se, "exact": exact,
            "within_3se": abs(est - exact) <= 3.0 * max(se, 1e-15)}


# ---------------------------------------------------------------------------
# Reward-shift invariance of the training objective: adding a constant to the
# reward shifts the loss by exactly that constant and leaves every gradient
# bit-identical (the normalizing-constant term of the derivation never
# affects optimization).
# ---------------------------------------------------------------------------


def verify_reward_shift_invariance(world: ToyWorld, basis: codec.PatchBasis,
                                   params: lens_net.LensParams, n_samples: int,
                                   rng: RngState, const: float = 5.0) -> dict:
    from .train import sample_loss
    from .world import ToyWorld as TW

    shifted_world = TW(world.generator, world.reward_field.shifted(const),
                       world.prompts, world.geometry, dict(world.manifest))
    noise_basis = basis.noise_mode()
    max_dev = 0.0
    grads_identical = True
    for _ in range(n_samples):
        z0 = rng.normal(basis.geometry.latent_shape)
        c = rng.integers(world.prompts.n_prompts)
        prompt = world.prompts.prompt(c)
        v1, t1, _ = sample_loss(params, world, noise_basis, z0, prompt, 1.0)
        v2, t2, _ = sample_loss(params, shifted_world, noise_basis, z0, prompt, 1.0)
        max_dev = max(max_dev, abs(float(v2) - (float(v1) - const)))
        g1 = ad.backward(t1, np.asarray(1.0))
        g2 = ad.backward(t2, np.asarray(1.0))
        for name in g1:
            if not np.array_equal(g1[name], g2[name]):
                grads_identical = False
    return {"const": const, "max_loss_shift_error": max_dev,
            "gradients_bitwise_identical": grads_identical,
            "n_samples": n_samples,
            "passed": grads_identical and max_dev <= 1e-10}


# ---------------------------------------------------------------------------
# Reward-gradient energy spectrum in the patch basis.
# ---------------------------------------------------------------------------


@dataclass
class GradientEnergySpectrum:
    energies: np.ndarray   # (d,) expected squared projections
    cumulative: np.ndarray  # (d,) nondecreasing, last entry exactly 1
    n_images: int
    n_patches: int

    def rho(self, k: int) -> float:
        return float(self.cumulative[k - 1])

    def write_csv(self, path) -> None:
        with open(str(path), "w") as fh:
            fh.write("j,E_j,rho_j\n")
            for j in range(self.energies.size):
                fh.write(f"{j + 1},{self.energies[j]!r},{self.cumulative[j]!r}\n")


def gradient_energy_spectrum(world: ToyWorld, basis: codec.PatchBasis, prompt_ids,
                             n_images: int, rng: RngState) -> GradientEnergySpectrum:
    """Backpropagate the reward to the initial noise and project patch-wise.

    The energy of basis direction j is the mean squared coefficient of the
    gradient over patches and images; the cumulative ratio tracks how much of
    the reward signal the first k directions carry.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    prompt_ids = list(prompt_ids)
    geometry = basis.geometry
    d = geometry.patch_dim
    acc = np.zeros(d)
    count = 0
    for i in range(n_images):
        z0 = rng.normal(geometry.latent_shape)
        prompt = world.prompts.prompt(int(prompt_ids[i % len(prompt_ids)]))
        _, tape = ad.record(
            lambda bx: world.reward_of_latent(bx["z0"], prompt), {"z0": z0})
        g = ad.backward(tape, np.asarray(1.0))["z0"]
        u = codec.unfold(g, geometry)
        alpha = u @ basis.basis
        acc += np.sum(alpha * alpha, axis=0)
        count += geometry.n_patches
    energies = acc / count
    total = float(np.sum(energies))
    if total <= 0.0:
        raise NumericalError("gradient energy is zero everywhere; spectrum undefined")
    cumulative = np.cumsum(energies) / total
    cumulative[-1] = np.sum(energies) / total  # exactly 1 by construction
    return GradientEnergySpectrum(energies, cumulative, n_images, count)


# ---------------------------------------------------------------------------
# Complexity accounting: instrumented multiply-add counts per component plus
# wall-clock timing, and least-squares fits against the scaling model.
# ---------------------------------------------------------------------------


def _dummy_prompt(prompt_dim: int, n_tokens: int = 4, seed: int = 7) -> PromptEmbedding:
    rng = RngState(seed)
    tokens = rng.normal((n_tokens, prompt_dim))
    return PromptEmbedding(0, tokens, tokens.mean(axis=0), np.zeros(1))


@dataclass
class BenchRow:
    n_tokens: int
    coeff_dim: int
    hidden_dim: int
    n_layers: int
    macs: dict
    parameter_count: int
    median_seconds: float

    @property
    def core_macs(self) -> int:
        return (self.macs.get("self_attn_scores", 0)
                + self.macs.get("self_attn_proj", 0) + self.macs.get("ffn", 0))

    def to_dict(self) -> dict:
        return {"N": self.n_tokens, "k": self.coeff_dim, "h": self.hidden_dim,
                "layers": self.n_layers, "core_macs": self.core_macs,
                "parameter_count": self.parameter_count,
                "median_seconds": self.median_seconds, **{
                    f"macs_{k}": v for k, v in sorted(self.macs.items())}}


def bench_config(config: lens_net.LensConfig, repeats: int = 7,
                 seed: int = 0) -> BenchRow:
    params = lens_net.init_lens_params(config, RngState(seed))
    prompt = _dummy_prompt(config.prompt_dim)
    probe = RngState(seed + 1).normal((config.n_tokens, config.coeff_dim))

    # box the parameters too so every matmul of the pass lands on the tape
    def full_pass(bx):
        boxed = lens_net.LensParams(
            config, {k: bx[k] for k in params.trainable}, params.positional)
        return ad.reduce_sum(lens_net.forward(boxed, bx["w"], prompt))

    _, tape = ad.record(full_pass, {"w": probe, **params.trainable})
    macs = ad.tape_mac_summary(tape)
    times = []
    with threadpool_limits(limits=1):  # thread-pool heuristics would swamp timing
        for _ in range(2):
            lens_net.forward(params, probe, prompt)
        for _ in range(repeats):
            t0 = time.perf_counter()
            lens_net.forward(params, probe, prompt)
            times.append(time.perf_counter() - t0)
    return BenchRow(config.n_tokens, config.coeff_dim, config.hidden_dim,
                    config.n_layers, macs, params.parameter_count(),
                    float(np.median(times)))


def complexity_bench(configs, repeats: int = 7) -> list:
    """Measure every config; configs are (N, k, h) triples or LensConfigs."""
    rows = []
    for cfg in configs:
        if not isinstance(cfg, lens_net.LensConfig):
            n, k, h = cfg
            cfg = lens_net.LensConfig(n_tokens=n, coeff_dim=k, hidden_dim=h)
        rows.append(bench_config(cfg, repeats=repeats))
    return rows


def fit_scaling_model(rows, features, target) -> dict:
    """Relative least squares of target(row) against the feature terms.

    features: list of (name, fn(row) -> float); target: fn(row) -> float.
    Returns coefficients and the worst relative residual over the rows.
    """
    y = np.array([float(target(r)) for r in rows])
    x = np.array([[fn(r) for _, fn in features] for r in rows])
    scaled = x / y[:, None]
    coef, *_ = np.linalg.lstsq(scaled, np.ones_like(y), rcond=None)
    pred = x @ coef
    rel = np.abs(pred - y) / y
    return {"coefficients": {name: float(c) for (name, _), c in zip(features, coef)},
            "max_rel_residual": float(np.max(rel)),
            "residuals": rel.tolist()}


def core_scaling_fit(rows) -> dict:
    """Fit attention+FFN multiply-adds to c1*N^2*h + c2*N*h^2."""
    return fit_scaling_model(
        rows,
        [("N2h", lambda r: r.n_tokens**2 * r.hidden_dim),
         ("Nh2", lambda r: r.n_tokens * r.hidden_dim**2)],
        lambda r: r.core_macs,
    )


def full_scaling_fit(rows) -> dict:
    """Fit the whole forward's multiply-adds to c1*N^2*h + c2*N*h^2 + c3*N*k*h."""
    return fit_scaling_model(
        rows,
        [("N2h", lambda r: r.n_tokens**2 * r.hidden_dim),
         ("Nh2", lambda r: r.n_tokens * r.hidden_dim**2),
         ("Nkh", lambda r: r.n_tokens * r.coeff_dim * r.hidden_dim)],
        lambda r: r.macs["total"],
    )


def modulation_pathway_macs(basis: codec.PatchBasis,
                            config: lens_net.LensConfig) -> int:
    """Multiply-adds of one modulation pass: projection + network + reconstruction."""
    g = basis.geometry
    codec_macs = 2 * g.n_patches * g.patch_dim * basis.k  # w_L = sV' and w_L V'^T
    row = bench_config(config, repeats=1)
    return codec_macs + row.macs["total"]
