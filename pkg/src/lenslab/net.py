"""Prompt-conditioned transformer over patch tokens of low-frequency coefficients.

The network maps an (N, k) coefficient array plus a prompt embedding to an
additive (N, k) perturbation.  Blocks are pre-norm residual: self-attention,
gated cross-attention over prompt tokens, then a feed-forward net.  The output
projection is zero-initialized and every cross-attention gate logit starts at
-2.0, so a fresh network is exactly the zero map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import struct
import warnings

import numpy as np

from . import autodiff as ad
from .codec import CoeffSplit
from .numerics import DivergenceError, RngState, ShapeError, as_array
from .world import PromptEmbedding

NET_MAGIC = b"LENSNET1"
GATE_INIT_LOGIT = -2.0


@dataclass(frozen=True)
class LensConfig:
    n_tokens: int
    coeff_dim: int
    hidden_dim: int = 32
    n_layers: int = 4
    n_heads: int = 4
    prompt_dim: int = 8
    gate_init_logit: float = GATE_INIT_LOGIT

    def __post_init__(self):
        if min(self.n_tokens, self.coeff_dim, self.hidden_dim,
               self.n_layers, self.n_heads, self.prompt_dim) < 1:
            raise ValueError(f"all config dims must be >= 1: {self}")
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_tokens": self.n_tokens, "coeff_dim": self.coeff_dim,
            "hidden_dim": self.hidden_dim, "n_layers": self.n_layers,
            "n_heads": self.n_heads, "prompt_dim": self.prompt_dim,
            "gate_init_logit": self.gate_init_logit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LensConfig":
        return cls(**d)


def sinusoidal_positions(n_tokens: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal table over the flattened patch-grid index."""
    pos = np.arange(n_tokens, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return np.ascontiguousarray(table)


def parameter_names(config: LensConfig) -> list[str]:
    """Canonical (checkpoint) ordering of trainable parameters."""
    names = ["input_proj.w", "input_proj.b", "pooled_proj.w", "pooled_proj.b"]
    for i in range(config.n_layers):
        p = f"layers.{i}"
        names += [f"{p}.ln_self.gain", f"{p}.ln_self.bias"]
        names += [f"{p}.self.{n}" for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]
        names += [f"{p}.ln_cross.gain", f"{p}.ln_cross.bias"]
        names += [f"{p}.cross.{n}" for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]
        names += [f"{p}.cross.gate"]
        names += [f"{p}.ln_ffn.gain", f"{p}.ln_ffn.bias"]
        names += [f"{p}.ffn.{n}" for n in ("w1", "b1", "w2", "b2")]
    names += ["final_ln.gain", "final_ln.bias", "out_proj.w", "out_proj.b"]
    return names


def parameter_shape(name: str, config: LensConfig) -> tuple:
    h, k, e = config.hidden_dim, config.coeff_dim, config.prompt_dim
    leaf = name.rsplit(".", 1)[-1]
    group = name.rsplit(".", 2)[-2] if "." in name else name
    if name == "input_proj.w":
        return (k, h)
    if name == "pooled_proj.w":
        return (e, h)
    if name == "out_proj.w":
        return (h, k)
    if name == "out_proj.b":
        return (k,)
    if leaf in ("gain", "bias"):
        return (h,)
    if leaf == "gate":
        return ()
    if group == "self":
        return (h, h) if leaf.startswith("w") else (h,)
    if group == "cross":
        if leaf in ("wk", "wv"):
            return (e, h)
        return (h, h) if leaf.startswith("w") else (h,)
    if group == "ffn":
        return {"w1": (h, 4 * h), "b1": (4 * h,), "w2": (4 * h, h), "b2": (h,)}[leaf]
    if leaf == "b":
        return (h,)
    raise KeyError(name)


@dataclass
class LensParams:
    """Trainable parameters plus the fixed positional table."""

    config: LensConfig
    trainable: dict
    positional: np.ndarray

    def parameter_count(self) -> int:
        return sum(v.size for v in self.trainable.values())

    def copy(self) -> "LensParams":
        return LensParams(self.config, {k: v.copy() for k, v in self.trainable.items()},
                          self.positional.copy())


def _uniform_fanin(rng: RngState, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return (2.0 * rng.uniform(shape) - 1.0) * bound


def init_lens_params(config: LensConfig, rng: RngState) -> LensParams:
    """Fan-in uniform init; zero output head; gate logits at the configured value."""
    params: dict = {}
    for name in parameter_names(config):
        shape = parameter_shape(name, config)
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("out_proj"):
            params[name] = np.zeros(shape)
        elif leaf == "gate":
            params[name] = np.asarray(config.gate_init_logit)
        elif leaf == "gain":
            params[name] = np.ones(shape)
        elif leaf == "bias":
            params[name] = np.zeros(shape)
        else:
            # linear weights/biases: uniform in +-1/sqrt(fan_in) of the weight
            prefix = name.rsplit(".", 1)[0]
            w_name = name if leaf.startswith("w") else f"{prefix}.w{leaf[1:]}"
            fan_in = parameter_shape(w_name, config)[0]
            params[name] = _uniform_fanin(rng, shape, fan_in)
    return LensParams(config, params,
                      sinusoidal_positions(config.n_tokens, config.hidden_dim))


def _heads(x, n_tokens: int, n_heads: int, head_dim: int):
    t = ad.reshape(x, (n_tokens, n_heads, head_dim))
    return ad.transpose(t, (1, 0, 2))


def _merge_heads(x, n_tokens: int, hidden: int):
    return ad.reshape(ad.transpose(x, (1, 0, 2)), (n_tokens, hidden))


def _attention(q, k, v, n_q: int, n_kv: int, config: LensConfig):
    qh = _heads(q, n_q, config.n_heads, config.head_dim)
    kh = _heads(k, n_kv, config.n_heads, config.head_dim)
    vh = _heads(v, n_kv, config.n_heads, config.head_dim)
    scores = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 2, 1))),
                      1.0 / np.sqrt(config.head_dim))
    return _merge_heads(ad.matmul(ad.softmax(scores), vh), n_q, config.hidden_dim)


def _linear(x, p, prefix):
    return ad.add_bias(ad.matmul(x, p[f"{prefix}.w"]), p[f"{prefix}.b"])


def forward(params: LensParams, w_low, prompt: PromptEmbedding):
    """Predicted coefficient perturbation, shape (N, k).

    Accepts raw arrays or taped Boxes for w_low and parameter values, so the
    same code serves evaluation, training gradients, and Jacobian probes.
    """
    cfg = params.config
    p = params.trainable
    shape = w_low.shape if isinstance(w_low, ad.Box) else np.shape(w_low)
    if tuple(shape) != (cfg.n_tokens, cfg.coeff_dim):
        raise ShapeError(f"forward: coefficients {tuple(shape)} != "
                         f"({cfg.n_tokens}, {cfg.coeff_dim})")
    if prompt.tokens.shape[1] != cfg.prompt_dim:
        raise ShapeError(f"forward: prompt token dim {prompt.tokens.shape[1]} != "
                         f"{cfg.prompt_dim}")
    n = cfg.n_tokens
    with ad.scope("io_proj"):
        x = _linear(w_low, p, "input_proj")
        x = ad.add(x, params.positional)
        pooled_bias = ad.add(ad.matmul(prompt.pooled, p["pooled_proj.w"]),
                             p["pooled_proj.b"])
        x = ad.add_bias(x, pooled_bias)
    for i in range(cfg.n_layers):
        lp = f"layers.{i}"
        u = ad.layer_norm(x, p[f"{lp}.ln_self.gain"], p[f"{lp}.ln_self.bias"])
        with ad.scope("self_attn_proj"):
            q = ad.add_bias(ad.matmul(u, p[f"{lp}.self.wq"]), p[f"{lp}.self.bq"])
            kk = ad.add_bias(ad.matmul(u, p[f"{lp}.self.wk"]), p[f"{lp}.self.bk"])
            v = ad.add_bias(ad.matmul(u, p[f"{lp}.self.wv"]), p[f"{lp}.self.bv"])
        with ad.scope("self_attn_scores"):
            att = _attention(q, kk, v, n, n, cfg)
        with ad.scope("self_attn_proj"):
            att = ad.add_bias(ad.matmul(att, p[f"{lp}.self.wo"]), p[f"{lp}.self.bo"])
        x = ad.add(x, att)

        u = ad.layer_norm(x, p[f"{lp}.ln_cross.gain"], p[f"{lp}.ln_cross.bias"])
        with ad.scope("cross_attn"):
            q = ad.add_bias(ad.matmul(u, p[f"{lp}.cross.wq"]), p[f"{lp}.cross.bq"])
            kk = ad.add_bias(ad.matmul(prompt.tokens, p[f"{lp}.cross.wk"]),
                             p[f"{lp}.cross.bk"])
            v = ad.add_bias(ad.matmul(prompt.tokens, p[f"{lp}.cross.wv"]),
                            p[f"{lp}.cross.bv"])
            att = _attention(q, kk, v, n, prompt.tokens.shape[0], cfg)
            att = ad.add_bias(ad.matmul(att, p[f"{lp}.cross.wo"]), p[f"{lp}.cross.bo"])
            gate = ad.sigmoid(p[f"{lp}.cross.gate"])
            x = ad.add(x, ad.mul(gate, att))

        u = ad.layer_norm(x, p[f"{lp}.ln_ffn.gain"], p[f"{lp}.ln_ffn.bias"])
        with ad.scope("ffn"):
            hdn = ad.tanh(ad.add_bias(ad.matmul(u, p[f"{lp}.ffn.w1"]), p[f"{lp}.ffn.b1"]))
            x = ad.add(x, ad.add_bias(ad.matmul(hdn, p[f"{lp}.ffn.w2"]), p[f"{lp}.ffn.b2"]))

    u = ad.layer_norm(x, p["final_ln.gain"], p["final_ln.bias"])
    with ad.scope("io_proj"):
        return ad.add_bias(ad.matmul(u, p["out_proj.w"]), p["out_proj.b"])


def modulate(params: LensParams, split: CoeffSplit, prompt: PromptEmbedding) -> CoeffSplit:
    """Additive update of the low-frequency block; the residual passes through
    untouched (same array object)."""
    delta = forward(params, split.w_low, prompt)
    return CoeffSplit(split.w_low + delta, split.residual, split.geometry)


# ---------------------------------------------------------------------------
# Jacobian spectral norm by power iteration over JVP / VJP products.
# ---------------------------------------------------------------------------


@dataclass
class SpectralReport:
    estimate: float
    iterations: int
    residual: float
    converged: bool


def spectral_norm_of_tape(tape: ad.Tape, wrt: str, tol: float = 1e-6,
                          max_iter: int = 100, seed: int = 1234) -> SpectralReport:
    """Largest singular value of the Jacobian recorded on the tape."""
    in_shape = tape.nodes[tape.input_index[wrt]].value.shape
    v = RngState(seed).normal(in_shape)
    v /= np.linalg.norm(v)
    sigma_prev = np.inf
    for it in range(1, max_iter + 1):
        u = ad.jacobian_vector_product(tape, v, wrt=wrt)
        sigma = float(np.linalg.norm(u))
        if not np.isfinite(sigma):
            raise DivergenceError("spectral norm: non-finite iterate")
        if sigma == 0.0:
            return SpectralReport(0.0, it, 0.0, True)
        w = ad.backward(tape, u / sigma)[wrt]
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return SpectralReport(sigma, it, 0.0, True)
        v = w / nw
        residual = abs(sigma - sigma_prev)
        if residual < tol:
            return SpectralReport(sigma, it, residual, True)
        sigma_prev = sigma
    return SpectralReport(sigma, max_iter, abs(sigma - sigma_prev), False)


def spectral_norm(params: LensParams, probe_w_low: np.ndarray, prompt: PromptEmbedding,
                  tol: float = 1e-6, max_iter: int = 100) -> SpectralReport:
    """Spectral norm of d(forward)/d(w_low) at the probe point."""
    probe = as_array(probe_w_low)
    if not np.all(np.isfinite(probe)):
        raise ValueError("spectral_norm: probe must be finite")
    _, tape = ad.record(lambda b: forward(params, b["w_low"], prompt),
                        {"w_low": probe})
    return spectral_norm_of_tape(tape, "w_low", tol=tol, max_iter=max_iter)


# ---------------------------------------------------------------------------
# Fixed-point inversion of w -> w + h(w).
# ---------------------------------------------------------------------------


def invert_additive_map(h_fn, target: np.ndarray, tol: float = 1e-10,
                        max_iter: int = 200, measured_norm=None):
    """Solve x + h(x) = target by iterating x <- target - h(x).

    Converges geometrically when h is a contraction; raises DivergenceError
    once the step size grows for 10 consecutive iterations.
    """
    x = as_array(target).copy()
    prev_delta = np.inf
    growth = 0
    for it in range(1, max_iter + 1):
        x_new = as_array(target) - h_fn(x)
        delta = float(np.max(np.abs(x_new - x)))
        if delta < tol:
            return x_new, it
        if delta > prev_delta:
            growth += 1
            if growth >= 10:
                norm_msg = "" if measured_norm is None else \
                    f" (measured Jacobian spectral norm {measured_norm:.4g})"
                raise DivergenceError(
                    f"fixed-point inversion diverging: step grew for {growth} "
                    f"consecutive iterations{norm_msg}"
                )
        else:
            growth = 0
        prev_delta = delta
        x = x_new
    raise DivergenceError(
        f"fixed-point inversion did not reach tol {tol:g} in {max_iter} iterations "
        f"(last step {delta:.3e})"
    )


def invert_fixed_point(params: LensParams, target: np.ndarray, prompt: PromptEmbedding,
                       tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """Preimage of target under w -> w + forward(params, w, prompt).

    Warns when the measured Jacobian spectral norm at the target is >= 1
    (contraction hypothesis violated); divergence is then detected at run time.
    """
    target = as_array(target)
    report = spectral_norm(params, target, prompt)
    if report.estimate >= 1.0:
        warnings.warn(
            f"invert_fixed_point: measured spectral norm {report.estimate:.4g} >= 1; "
            "fixed-point iteration may diverge", RuntimeWarning
        )
    x, _ = invert_additive_map(
        lambda w: forward(params, w, prompt), target, tol=tol, max_iter=max_iter,
        measured_norm=report.estimate,
    )
    return x


# ---------------------------------------------------------------------------
# Checkpoint format: magic "LENSNET1", config header, then the trainable
# tensors in canonical order as little-endian float64; JSON sidecar with the
# config and training metadata.
# ---------------------------------------------------------------------------


def save_checkpoint(params: LensParams, path, metadata: dict | None = None) -> None:
    cfg = params.config
    header = struct.pack("<6i d", cfg.n_tokens, cfg.coeff_dim, cfg.hidden_dim,
                         cfg.n_layers, cfg.n_heads, cfg.prompt_dim,
                         cfg.gate_init_logit)
    chunks = [NET_MAGIC, header]
    for name in parameter_names(cfg):
        chunks.append(np.ascontiguousarray(params.trainable[name]).astype("<f8").tobytes())
    path = str(path)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))
    doc = {"config": cfg.to_dict(), "metadata": metadata or {}}
    with open(path + ".json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> LensParams:
    with open(str(path), "rb") as fh:
        blob = fh.read()
    if blob[:8] != NET_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:8]!r}, expected {NET_MAGIC!r}")
    vals = struct.unpack_from("<6i d", blob, 8)
    cfg = LensConfig(n_tokens=vals[0], coeff_dim=vals[1], hidden_dim=vals[2],
                     n_layers=vals[3], n_heads=vals[4], prompt_dim=vals[5],
                     gate_init_logit=vals[6])
    off = 8 + struct.calcsize("<6i d")
    trainable = {}
    for name in parameter_names(cfg):
        shape = parameter_shape(name, cfg)
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).copy()
        off += 8 * count
        trainable[name] = arr.reshape(shape) if shape else np.asarray(arr[0])
    return LensParams(cfg, trainable, sinusoidal_positions(cfg.n_tokens, cfg.hidden_dim))
