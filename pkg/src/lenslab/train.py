"""Reward-regularized training of the coefficient modulation network.

One optimizer step: sample noise, project, perturb the low-frequency block,
reconstruct, generate, score, and update the network parameters with
decoupled-weight-decay Adam under a global gradient-norm clip.  The loss is

    mean over samples of  reg_weight * 0.5 * ||delta||^2  -  reward

so only the modulation parameters move; the world and the basis stay frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
import csv

import numpy as np

from . import autodiff as ad
from . import codec
from . import net as lens_net
from .numerics import NumericalError, RngState
from .world import ToyWorld

CLIP_SLACK = 1e-12


@dataclass
class TrainConfig:
    learning_rate: float = 5e-3
    batch_size: int = 8
    accumulation_steps: int = 1
    grad_clip: float = 1.0
    epochs: int = 1
    steps_per_epoch: int = 3000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    eval_every: int = 500
    reg_weight: float = 1.0
    lr_schedule: str = "cosine"  # "cosine" decays to 5% of the peak; or "constant"
    n_eval_noise: int = 32
    hidden_dim: int = 32
    n_layers: int = 4
    n_heads: int = 4
    train_prompt_fraction: float = 0.75

    def __post_init__(self):
        if self.learning_rate <= 0 or self.grad_clip <= 0 or self.batch_size < 1:
            raise ValueError(f"invalid training config: lr={self.learning_rate}, "
                             f"clip={self.grad_clip}, batch={self.batch_size}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def lr_at(self, step: int) -> float:
        """Learning rate for optimizer step `step` (1-based)."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        frac = (step - 1) / max(self.total_steps - 1, 1)
        floor = 0.05 * self.learning_rate
        return floor + 0.5 * (self.learning_rate - floor) * (1.0 + np.cos(np.pi * frac))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class LossBreakdown:
    total: float
    reg: float
    reward: float
    per_sample_total: list
    per_sample_reg: list
    per_sample_reward: list


@dataclass
class TrainState:
    params: lens_net.LensParams
    m: dict
    v: dict
    step: int
    rng: RngState
    last_grad_norm: float = 0.0
    last_spectral_norm: float = 0.0


def init_train_state(config: TrainConfig, net_config: lens_net.LensConfig) -> TrainState:
    rng = RngState(config.seed)
    params = lens_net.init_lens_params(net_config, rng.split(1))
    m = {name: np.zeros_like(val) for name, val in params.trainable.items()}
    v = {name: np.zeros_like(val) for name, val in params.trainable.items()}
    return TrainState(params, m, v, 0, rng.split(2))


def global_grad_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: dict, clip: float) -> tuple[dict, float]:
    """Scale so the post-clip global norm is at most clip (+ round-off)."""
    norm = global_grad_norm(grads)
    if not np.isfinite(norm):
        raise NumericalError(f"gradient norm is not finite: {norm}")
    if norm > clip:
        factor = clip / norm
        grads = {name: g * factor for name, g in grads.items()}
    return grads, norm


def adamw_update(state: TrainState, grads: dict, config: TrainConfig) -> None:
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    lr, eps, wd = config.lr_at(t), config.eps, config.weight_decay
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name in state.params.trainable:
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / corr1
        v_hat = state.v[name] / corr2
        p = state.params.trainable[name]
        state.params.trainable[name] = p - lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * p)
    state.step = t


def _boxed_params(params: lens_net.LensParams, boxes: dict) -> lens_net.LensParams:
    return lens_net.LensParams(params.config, boxes, params.positional)


def sample_loss(params: lens_net.LensParams, world: ToyWorld,
                noise_basis: codec.PatchBasis, z0: np.ndarray, prompt,
                reg_weight: float):
    """Record the full pipeline loss for one sample; returns (value, tape, parts).

    Gradients flow through reconstruction and the generator, but only the
    network parameters are tape inputs.
    """
    split = codec.proj(z0, noise_basis)

    parts = {}

    def pipeline(boxes):
        bp = _boxed_params(params, boxes)
        delta = lens_net.forward(bp, split.w_low, prompt)
        w_hat = ad.add(split.w_low, delta)
        z_hat = codec.recon_traced(w_hat, split.residual, noise_basis)
        x = world.generator.forward(z_hat)
        r = world.reward_field.evaluate(x, prompt)
        reg = ad.scale(ad.reduce_sum(ad.square(delta)), 0.5)
        parts["reg"] = reg
        parts["reward"] = r
        return ad.sub(ad.scale(reg, reg_weight), r)

    value, tape = ad.record(pipeline, params.trainable)
    return value, tape, parts


def train_step(state: TrainState, world: ToyWorld, basis: codec.PatchBasis,
               prompt_ids, config: TrainConfig) -> tuple[TrainState, LossBreakdown]:
    """One optimizer step over batch_size x accumulation_steps samples."""
    noise_basis = basis.noise_mode()
    latent_shape = basis.geometry.latent_shape
    names = list(state.params.trainable)
    acc = {name: np.zeros_like(state.params.trainable[name]) for name in names}
    totals, regs, rewards = [], [], []
    n_samples = config.batch_size * config.accumulation_steps
    prompt_ids = list(prompt_ids)
    for i in range(n_samples):
        z0 = state.rng.normal(latent_shape)
        prompt = world.prompts.prompt(prompt_ids[i % len(prompt_ids)])
        value, tape, parts = sample_loss(state.params, world, noise_basis, z0,
                                         prompt, config.reg_weight)
        loss = float(value)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {state.step}: {loss}")
        grads = ad.backward(tape, np.asarray(1.0))
        for name in names:
            acc[name] += grads[name]
        totals.append(loss)
        regs.append(float(parts["reg"].value))
        rewards.append(float(parts["reward"].value))
    mean_grads = {name: acc[name] / n_samples for name in names}
    mean_grads, grad_norm = clip_gradients(mean_grads, config.grad_clip)
    if not np.isfinite(grad_norm):
        raise NumericalError("gradient norm NaN")
    adamw_update(state, mean_grads, config)
    state.last_grad_norm = grad_norm
    breakdown = LossBreakdown(
        total=float(np.mean(totals)), reg=float(np.mean(regs)),
        reward=float(np.mean(rewards)), per_sample_total=totals,
        per_sample_reg=regs, per_sample_reward=rewards,
    )
    return state, breakdown


# ---------------------------------------------------------------------------
# Evaluation: paired comparison on shared noise.
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    mean_with: float
    mean_without: float
    std_with: float
    std_without: float
    mean_delta: float
    frac_improved: float
    per_prompt_delta: dict
    n_pairs: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(params: lens_net.LensParams, world: ToyWorld, basis: codec.PatchBasis,
             prompt_ids, n_noise: int, rng: RngState) -> EvalReport:
    """Reward with vs without modulation over shared noise draws.

    Both arms run through the codec round trip, so the paired delta isolates
    the modulation itself.
    """
    if n_noise < 1:
        raise ValueError("n_noise must be >= 1")
    noise_basis = basis.noise_mode()
    with_r, without_r, deltas = [], [], []
    per_prompt: dict = {int(c): [] for c in prompt_ids}
    for _ in range(n_noise):
        z0 = rng.normal(basis.geometry.latent_shape)
        split = codec.proj(z0, noise_basis)
        base_latent = codec.recon(split, noise_basis)
        for c in prompt_ids:
            prompt = world.prompts.prompt(int(c))
            r0 = float(world.reward_of_latent(base_latent, prompt))
            modded = lens_net.modulate(params, split, prompt)
            r1 = float(world.reward_of_latent(codec.recon(modded, noise_basis), prompt))
            with_r.append(r1)
            without_r.append(r0)
            deltas.append(r1 - r0)
            per_prompt[int(c)].append(r1 - r0)
    deltas_arr = np.asarray(deltas)
    return EvalReport(
        mean_with=float(np.mean(with_r)), mean_without=float(np.mean(without_r)),
        std_with=float(np.std(with_r)), std_without=float(np.std(without_r)),
        mean_delta=float(np.mean(deltas_arr)),
        frac_improved=float(np.mean(deltas_arr > 0.0)),
        per_prompt_delta={c: float(np.mean(v)) for c, v in per_prompt.items()},
        n_pairs=len(deltas),
    )


def reward_ascent_oracle(world: ToyWorld, basis: codec.PatchBasis, prompt_ids,
                         n_noise: int, rng: RngState, steps: int = 300,
                         lr: float = 0.05) -> dict:
    """Attainable per-sample reward by direct ascent on the low-frequency block.

    Independent of the modulation network: plain Adam on the coefficients
    themselves, no regularization.  Used to measure the baseline-to-optimum
    gap that training is judged against.
    """
    noise_basis = basis.noise_mode()
    base_rewards, best_rewards = [], []
    for _ in range(n_noise):
        z0 = rng.normal(basis.geometry.latent_shape)
        split = codec.proj(z0, noise_basis)
        for c in prompt_ids:
            prompt = world.prompts.prompt(int(c))

            def objective(boxes):
                z_hat = codec.recon_traced(boxes["w"], split.residual, noise_basis)
                return world.reward_field.evaluate(
                    world.generator.forward(z_hat), prompt)

            w = split.w_low.copy()
            base_rewards.append(float(ad.record(objective, {"w": w})[0]))
            m = np.zeros_like(w)
            v = np.zeros_like(w)
            best = base_rewards[-1]
            for t in range(1, steps + 1):
                value, tape = ad.record(objective, {"w": w})
                best = max(best, float(value))
                g = ad.backward(tape, np.asarray(1.0))["w"]
                m = 0.9 * m + 0.1 * g
                v = 0.999 * v + 0.001 * g * g
                m_hat = m / (1.0 - 0.9**t)
                v_hat = v / (1.0 - 0.999**t)
                w = w + lr * m_hat / (np.sqrt(v_hat) + 1e-8)  # ascent
            value, _ = ad.record(objective, {"w": w})
            best = max(best, float(value))
            best_rewards.append(best)
    return {
        "baseline_mean": float(np.mean(base_rewards)),
        "optimum_mean": float(np.mean(best_rewards)),
        "gap": float(np.mean(best_rewards) - np.mean(base_rewards)),
        "n_pairs": len(base_rewards),
    }


# ---------------------------------------------------------------------------
# Full loop with periodic evaluation and a fixed-column metrics log.
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ["step", "loss", "reg", "reward", "grad_norm", "spectral_norm"]


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)

    def append(self, **kwargs) -> None:
        self.rows.append({col: kwargs.get(col) for col in METRIC_COLUMNS})

    def write_csv(self, path) -> None:
        with open(str(path), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v
                                 for k, v in row.items()})


def split_prompts(world: ToyWorld, fraction: float) -> tuple[list, list]:
    n = world.prompts.n_prompts
    cut = max(1, min(n - 1, int(round(n * fraction))))
    return list(range(cut)), list(range(cut, n))


def train(world: ToyWorld, basis: codec.PatchBasis, config: TrainConfig,
          net_config: lens_net.LensConfig | None = None,
          ) -> tuple[lens_net.LensParams, MetricsLog]:
    """Run the full loop; deterministic given (seed, config, world, basis)."""
    if net_config is None:
        net_config = lens_net.LensConfig(
            n_tokens=basis.geometry.n_patches, coeff_dim=basis.k,
            hidden_dim=config.hidden_dim, n_layers=config.n_layers,
            n_heads=config.n_heads, prompt_dim=world.prompts.token_dim,
        )
    state = init_train_state(config, net_config)
    train_ids, heldout_ids = split_prompts(world, config.train_prompt_fraction)
    eval_rng_seed = RngState(config.seed).split(3).seed
    probe_rng = RngState(config.seed).split(4)
    probe = probe_rng.normal((net_config.n_tokens, net_config.coeff_dim))
    log = MetricsLog()
    batch_rng = RngState(config.seed).split(5)
    for step in range(1, config.total_steps + 1):
        ids = [train_ids[batch_rng.integers(len(train_ids))]
               for _ in range(config.batch_size * config.accumulation_steps)]
        state, breakdown = train_step(state, world, basis, ids, config)
        if step % config.eval_every == 0 or step == config.total_steps:
            report = evaluate(state.params, world, basis, heldout_ids,
                              config.n_eval_noise, RngState(eval_rng_seed))
            spec = lens_net.spectral_norm(
                state.params, probe, world.prompts.prompt(heldout_ids[0]))
            state.last_spectral_norm = spec.estimate
            log.append(step=step, loss=breakdown.total, reg=breakdown.reg,
                       reward=report.mean_with, grad_norm=state.last_grad_norm,
                       spectral_norm=spec.estimate)
    return state.params, log
