"""Reverse-mode differentiation over compositions of registered primitives.

Define-by-run: op functions accept either raw numpy arrays (plain evaluation)
or Box values bound to a Tape (recording).  A recorded tape can be replayed,
differentiated in reverse (backward), or pushed forward (tangent / JVP), so
the same machinery serves training gradients, Jacobian probes, and spectral
norm estimation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable
import contextlib

import numpy as np

from .numerics import ShapeError, as_array


class UnregisteredPrimitiveError(KeyError):
    """Requested primitive is not in the registry."""


@dataclass
class Primitive:
    name: str
    forward: Callable
    vjp: Callable  # (aux, out_value, parent_values, cotangent) -> list of parent cotangents
    jvp: Callable  # (aux, out_value, parent_values, parent_tangents) -> tangent


_REGISTRY: dict[str, Primitive] = {}


def register(name, forward, vjp, jvp) -> None:
    _REGISTRY[name] = Primitive(name, forward, vjp, jvp)


def primitive(name: str) -> Primitive:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise UnregisteredPrimitiveError(
            f"primitive {name!r} is not registered (known: {sorted(_REGISTRY)})"
        ) from None


def registered_primitives() -> list[str]:
    return sorted(_REGISTRY)


class Node:
    __slots__ = ("op", "value", "parents", "aux", "scope")

    def __init__(self, op, value, parents, aux, scope):
        self.op = op
        self.value = value
        self.parents = parents
        self.aux = aux
        self.scope = scope


class Tape:
    """Topologically ordered record of primitive applications."""

    __slots__ = ("nodes", "input_index", "output_id")

    def __init__(self):
        self.nodes: list[Node] = []
        self.input_index: dict[str, int] = {}
        self.output_id: int | None = None

    def add_node(self, op, value, parents, aux=None, scope=None) -> int:
        self.nodes.append(Node(op, value, tuple(parents), aux, scope))
        return len(self.nodes) - 1

    def add_leaf(self, name: str, value: np.ndarray) -> "Box":
        idx = self.add_node("input", as_array(value), ())
        self.input_index[name] = idx
        return Box(self, idx)

    @property
    def output_value(self) -> np.ndarray:
        return self.nodes[self.output_id].value

    def replay(self) -> np.ndarray:
        """Recompute every node from the leaves; must be bit-identical."""
        values: list[np.ndarray] = [None] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.op in ("input", "const"):
                values[i] = node.value
            else:
                prim = primitive(node.op)
                args = [values[p] for p in node.parents]
                values[i] = prim.forward(*args, **(node.aux or {}))
        return values[self.output_id]


class Box:
    """Value proxy bound to a tape; feeding one into an op records a node."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: Tape, idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape


_SCOPE_STACK: list[str] = []


@contextlib.contextmanager
def scope(label: str):
    """Label nodes recorded inside the block (used for cost attribution)."""
    _SCOPE_STACK.append(label)
    try:
        yield
    finally:
        _SCOPE_STACK.pop()


def _apply(name: str, *args, **aux):
    prim = primitive(name)
    tape = None
    for a in args:
        if isinstance(a, Box):
            tape = a.tape
            break
    if tape is None:
        return prim.forward(*args, **aux)
    parent_ids = []
    raw = []
    for a in args:
        if isinstance(a, Box):
            if a.tape is not tape:
                raise ValueError("cannot mix boxes from different tapes")
            parent_ids.append(a.idx)
            raw.append(a.value)
        else:
            arr = as_array(a)
            parent_ids.append(tape.add_node("const", arr, ()))
            raw.append(arr)
    value = prim.forward(*raw, **aux)
    label = _SCOPE_STACK[-1] if _SCOPE_STACK else None
    idx = tape.add_node(name, value, parent_ids, aux or None, label)
    return Box(tape, idx)


def record(f: Callable, inputs: dict[str, np.ndarray]):
    """Run f on boxed inputs, returning (output value, tape).

    f receives a dict mapping input names to Boxes and must return a Box
    produced by registered primitives.
    """
    tape = Tape()
    boxes = {name: tape.add_leaf(name, value) for name, value in inputs.items()}
    out = f(boxes)
    if not isinstance(out, Box) or out.tape is not tape:
        raise ValueError("recorded function must return a Box built on its own tape")
    tape.output_id = out.idx
    return out.value, tape


def backward(tape: Tape, seed_cotangent) -> dict[str, np.ndarray]:
    """Exact reverse-mode derivative of the recorded composition.

    Returns one gradient per named input (zeros when the output does not
    depend on it).  Accumulation order is fixed, so results are bit-stable.
    """
    seed = as_array(seed_cotangent)
    out_val = tape.output_value
    if seed.shape != out_val.shape:
        raise ShapeError(f"backward: seed shape {seed.shape} != output shape {out_val.shape}")
    cot: list[np.ndarray | None] = [None] * len(tape.nodes)
    cot[tape.output_id] = seed
    for i in range(len(tape.nodes) - 1, -1, -1):
        g = cot[i]
        node = tape.nodes[i]
        if g is None or node.op in ("input", "const"):
            continue
        prim = primitive(node.op)
        parent_values = [tape.nodes[p].value for p in node.parents]
        parent_cots = prim.vjp(node.aux or {}, node.value, parent_values, g)
        for p, pg in zip(node.parents, parent_cots):
            if pg is None:
                continue
            # accumulation always allocates, so aliasing pg to g is safe
            cot[p] = pg if cot[p] is None else cot[p] + pg
    grads = {}
    for name, idx in tape.input_index.items():
        g = cot[idx]
        grads[name] = np.zeros_like(tape.nodes[idx].value) if g is None else as_array(g)
    return grads


def jacobian_vector_product(tape: Tape, direction, wrt: str | None = None) -> np.ndarray:
    """J . direction for the recorded map, by tangent propagation over the tape."""
    if wrt is None:
        if len(tape.input_index) != 1:
            raise ValueError("jacobian_vector_product: specify wrt= for multi-input tapes")
        wrt = next(iter(tape.input_index))
    idx = tape.input_index[wrt]
    direction = as_array(direction)
    in_val = tape.nodes[idx].value
    if direction.shape != in_val.shape:
        raise ShapeError(f"jvp: direction shape {direction.shape} != input shape {in_val.shape}")
    tan: list[np.ndarray | None] = [None] * len(tape.nodes)
    tan[idx] = direction
    for i, node in enumerate(tape.nodes):
        if node.op in ("input", "const"):
            continue
        parent_tans = [tan[p] for p in node.parents]
        if all(t is None for t in parent_tans):
            continue
        prim = primitive(node.op)
        parent_values = [tape.nodes[p].value for p in node.parents]
        tan[i] = prim.jvp(node.aux or {}, node.value, parent_values, parent_tans)
    t = tan[tape.output_id]
    return np.zeros_like(tape.output_value) if t is None else t


# ---------------------------------------------------------------------------
# Primitive rules.
# ---------------------------------------------------------------------------


def _sum_to_scalar(g):
    return np.asarray(np.sum(g))


def _fw_matmul(a, b):
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        return a @ b
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None


def _vjp_matmul(aux, y, parents, g):
    a, b = parents
    na, nb = a.ndim, b.ndim
    if na == 2 and nb == 2:
        return [g @ b.T, a.T @ g]
    if na == 3 and nb == 3:
        return [g @ b.swapaxes(-1, -2), a.swapaxes(-1, -2) @ g]
    if na == 2 and nb == 1:
        return [np.outer(g, b), a.T @ g]
    if na == 1 and nb == 2:
        return [b @ g, np.outer(a, g)]
    if na == 1 and nb == 1:
        return [g * b, g * a]
    raise ShapeError(f"matmul vjp: unsupported ndims {a.shape} @ {b.shape}")


def _jvp_matmul(aux, y, parents, tans):
    a, b = parents
    ta, tb = tans
    out = None
    if ta is not None:
        out = _fw_matmul(ta, b)
    if tb is not None:
        out = _fw_matmul(a, tb) if out is None else out + _fw_matmul(a, tb)
    return out


def _fw_add(a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return a + b


def _vjp_add(aux, y, parents, g):
    a, b = parents
    ga = _sum_to_scalar(g) if a.ndim == 0 and g.ndim != 0 else g
    gb = _sum_to_scalar(g) if b.ndim == 0 and g.ndim != 0 else g
    return [ga, gb]


def _fw_sub(a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return a - b


def _vjp_sub(aux, y, parents, g):
    a, b = parents
    ga = _sum_to_scalar(g) if a.ndim == 0 and g.ndim != 0 else g
    gb = _sum_to_scalar(-g) if b.ndim == 0 and g.ndim != 0 else -g
    return [ga, gb]


def _fw_mul(a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return a * b


def _vjp_mul(aux, y, parents, g):
    a, b = parents
    ga = g * b
    gb = g * a
    if a.ndim == 0 and ga.ndim != 0:
        ga = _sum_to_scalar(ga)
    if b.ndim == 0 and gb.ndim != 0:
        gb = _sum_to_scalar(gb)
    return [ga, gb]


def _jvp_bilinear(fw):
    def jvp(aux, y, parents, tans):
        a, b = parents
        ta, tb = tans
        out = None
        if ta is not None:
            out = fw(ta, b)
        if tb is not None:
            out = fw(a, tb) if out is None else out + fw(a, tb)
        return out

    return jvp


def _fw_add_bias(x, b):
    if x.ndim < 1 or b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: incompatible shapes {x.shape} and {b.shape}")
    return x + b


def _vjp_add_bias(aux, y, parents, g):
    x, b = parents
    return [g, g.reshape(-1, b.shape[0]).sum(axis=0)]


def _fw_scale(a, c):
    return a * c


def _jvp_addsub(sign: float):
    def jvp(aux, y, parents, tans):
        ta, tb = tans
        out = None
        if ta is not None:
            out = ta
        if tb is not None:
            out = sign * tb if out is None else out + sign * tb
        if out is not None and out.shape != y.shape:
            out = np.ascontiguousarray(np.broadcast_to(out, y.shape))
        return out

    return jvp


def _jvp_add_bias(aux, y, parents, tans):
    tx, tb = tans
    if tx is None and tb is None:
        return None
    if tx is None:
        return np.ascontiguousarray(np.broadcast_to(tb, y.shape))
    if tb is None:
        return tx
    return tx + tb


register("matmul", _fw_matmul, _vjp_matmul, _jvp_matmul)
register("add", _fw_add, _vjp_add, _jvp_addsub(1.0))
register("sub", _fw_sub, _vjp_sub, _jvp_addsub(-1.0))
register("mul", _fw_mul, _vjp_mul, _jvp_bilinear(_fw_mul))
register(
    "scale", _fw_scale,
    lambda aux, y, parents, g: [g * aux["c"]],
    lambda aux, y, parents, tans: None if tans[0] is None else tans[0] * aux["c"],
)
register(
    "neg", lambda a: -a,
    lambda aux, y, parents, g: [-g],
    lambda aux, y, parents, tans: None if tans[0] is None else -tans[0],
)
register("add_bias", _fw_add_bias, _vjp_add_bias, _jvp_add_bias)


def _elementwise(name, fw, dy_dx_from_out=None, dy_dx_from_in=None):
    """Register an elementwise op whose derivative is a function of y or x."""

    def vjp(aux, y, parents, g):
        d = dy_dx_from_out(y) if dy_dx_from_out else dy_dx_from_in(parents[0])
        return [g * d]

    def jvp(aux, y, parents, tans):
        if tans[0] is None:
            return None
        d = dy_dx_from_out(y) if dy_dx_from_out else dy_dx_from_in(parents[0])
        return tans[0] * d

    register(name, fw, vjp, jvp)


_elementwise("tanh", np.tanh, dy_dx_from_out=lambda y: 1.0 - y * y)
_elementwise("sigmoid", lambda x: 1.0 / (1.0 + np.exp(-x)), dy_dx_from_out=lambda y: y * (1.0 - y))
_elementwise("square", lambda x: x * x, dy_dx_from_in=lambda x: 2.0 * x)
_elementwise("exp", np.exp, dy_dx_from_out=lambda y: y)
_elementwise("rsqrt", lambda x: x**-0.5, dy_dx_from_out=lambda y: -0.5 * y**3)


def _fw_softmax(x):
    z = x - np.max(x, axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= np.sum(z, axis=-1, keepdims=True)
    return z


def _vjp_softmax(aux, y, parents, g):
    return [y * (g - np.sum(g * y, axis=-1, keepdims=True))]


def _jvp_softmax(aux, y, parents, tans):
    t = tans[0]
    if t is None:
        return None
    return y * (t - np.sum(t * y, axis=-1, keepdims=True))


register("softmax", _fw_softmax, _vjp_softmax, _jvp_softmax)


def _fw_layer_norm(x, gain, bias, eps=1e-5):
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv * gain + bias


def _ln_stats(x, eps):
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc, inv


def _vjp_layer_norm(aux, y, parents, g):
    x, gain, bias = parents
    eps = aux.get("eps", 1e-5)
    xc, inv = _ln_stats(x, eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))
    g_bias = np.sum(g, axis=lead) if lead else g
    g_gain = np.sum(g * xhat, axis=lead) if lead else g * xhat
    gx_hat = g * gain
    gx = inv * (
        gx_hat
        - np.mean(gx_hat, axis=-1, keepdims=True)
        - xhat * np.mean(gx_hat * xhat, axis=-1, keepdims=True)
    )
    return [gx, g_gain, g_bias]


def _jvp_layer_norm(aux, y, parents, tans):
    x, gain, bias = parents
    tx, tgain, tbias = tans
    eps = aux.get("eps", 1e-5)
    xc, inv = _ln_stats(x, eps)
    xhat = xc * inv
    out = None
    if tx is not None:
        txc = tx - np.mean(tx, axis=-1, keepdims=True)
        tvar = 2.0 * np.mean(xc * txc, axis=-1, keepdims=True)
        tinv = -0.5 * inv**3 * tvar
        out = (txc * inv + xc * tinv) * gain
    if tgain is not None:
        term = xhat * tgain
        out = term if out is None else out + term
    if tbias is not None:
        term = np.broadcast_to(tbias, y.shape)
        out = term.copy() if out is None else out + term
    return out


register("layer_norm", _fw_layer_norm, _vjp_layer_norm, _jvp_layer_norm)


register(
    "reduce_sum", lambda x: np.asarray(np.sum(x)),
    lambda aux, y, parents, g: [np.full_like(parents[0], float(g))],
    lambda aux, y, parents, tans: None if tans[0] is None else np.asarray(np.sum(tans[0])),
)
register(
    "reduce_mean", lambda x: np.asarray(np.mean(x)),
    lambda aux, y, parents, g: [np.full_like(parents[0], float(g) / parents[0].size)],
    lambda aux, y, parents, tans: None if tans[0] is None else np.asarray(np.mean(tans[0])),
)


def _fw_gather(x, idx=None, axis=0):
    return np.take(x, idx, axis=axis)


def _vjp_gather(aux, y, parents, g):
    x = parents[0]
    out = np.zeros_like(x)
    sl = [slice(None)] * x.ndim
    sl[aux["axis"]] = aux["idx"]
    np.add.at(out, tuple(sl), g)
    return [out]


register(
    "gather", _fw_gather, _vjp_gather,
    lambda aux, y, parents, tans: None if tans[0] is None
    else np.take(tans[0], aux["idx"], axis=aux["axis"]),
)


def _fw_concat(*parts, axis=0):
    return np.concatenate(parts, axis=axis)


def _vjp_concat(aux, y, parents, g):
    sizes = [p.shape[aux["axis"]] for p in parents]
    return list(np.split(g, np.cumsum(sizes)[:-1], axis=aux["axis"]))


def _jvp_concat(aux, y, parents, tans):
    parts = [t if t is not None else np.zeros_like(p) for p, t in zip(parents, tans)]
    return np.concatenate(parts, axis=aux["axis"])


register("concat", _fw_concat, _vjp_concat, _jvp_concat)


def _fw_transpose(x, axes=None):
    if axes is not None and sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {tuple(axes)} invalid for shape {x.shape}")
    return np.ascontiguousarray(np.transpose(x, axes))


def _inv_axes(axes, ndim):
    if axes is None:
        return None
    inv = [0] * ndim
    for i, a in enumerate(axes):
        inv[a] = i
    return tuple(inv)


register(
    "transpose", _fw_transpose,
    lambda aux, y, parents, g: [
        np.ascontiguousarray(np.transpose(g, _inv_axes(aux.get("axes"), parents[0].ndim)))
    ],
    lambda aux, y, parents, tans: None if tans[0] is None else _fw_transpose(tans[0], aux.get("axes")),
)


def _fw_reshape(x, shape=None):
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
    return x.reshape(shape)


register(
    "reshape", _fw_reshape,
    lambda aux, y, parents, g: [g.reshape(parents[0].shape)],
    lambda aux, y, parents, tans: None if tans[0] is None else tans[0].reshape(aux["shape"]),
)


# Public op functions (usable on raw arrays or Boxes).


def matmul(a, b):
    return _apply("matmul", a, b)


def add(a, b):
    return _apply("add", a, b)


def sub(a, b):
    return _apply("sub", a, b)


def mul(a, b):
    return _apply("mul", a, b)


def scale(a, c: float):
    return _apply("scale", a, c=float(c))


def neg(a):
    return _apply("neg", a)


def add_bias(x, b):
    return _apply("add_bias", x, b)


def tanh(x):
    return _apply("tanh", x)


def sigmoid(x):
    return _apply("sigmoid", x)


def square(x):
    return _apply("square", x)


def exp(x):
    return _apply("exp", x)


def rsqrt(x):
    return _apply("rsqrt", x)


def softmax(x):
    return _apply("softmax", x)


def layer_norm(x, gain, bias, eps: float = 1e-5):
    return _apply("layer_norm", x, gain, bias, eps=float(eps))


def reduce_sum(x):
    return _apply("reduce_sum", x)


def reduce_mean(x):
    return _apply("reduce_mean", x)


def gather(x, idx, axis: int = 0):
    return _apply("gather", x, idx=np.asarray(idx, dtype=np.int64), axis=int(axis))


def concat(parts, axis: int = 0):
    return _apply("concat", *parts, axis=int(axis))


def transpose(x, axes=None):
    return _apply("transpose", x, axes=None if axes is None else tuple(int(a) for a in axes))


def reshape(x, shape):
    return _apply("reshape", x, shape=tuple(int(s) for s in shape))


def dot(a, b):
    """Inner product of two vectors (scalar output)."""
    return matmul(a, b)


# ---------------------------------------------------------------------------
# Cost instrumentation: multiply-add counts of recorded matmuls, bucketed by
# the scope label active when each node was recorded.  Elementwise work is
# excluded by convention (standard transformer FLOPs accounting).
# ---------------------------------------------------------------------------


def _matmul_macs(a_shape, b_shape) -> int:
    na, nb = len(a_shape), len(b_shape)
    if na == 2 and nb == 2:
        return a_shape[0] * a_shape[1] * b_shape[1]
    if na == 3 and nb == 3:
        return a_shape[0] * a_shape[1] * a_shape[2] * b_shape[2]
    if na == 2 and nb == 1:
        return a_shape[0] * a_shape[1]
    if na == 1 and nb == 2:
        return b_shape[0] * b_shape[1]
    if na == 1 and nb == 1:
        return a_shape[0]
    return 0


def tape_mac_summary(tape: Tape) -> dict:
    """Multiply-add count per scope label for one recorded forward pass."""
    summary: dict = {}
    for node in tape.nodes:
        if node.op != "matmul":
            continue
        a, b = (tape.nodes[p].value for p in node.parents)
        macs = _matmul_macs(a.shape, b.shape)
        key = node.scope or "unscoped"
        summary[key] = summary.get(key, 0) + macs
    summary["total"] = sum(v for k, v in summary.items() if k != "total")
    return summary


# ---------------------------------------------------------------------------
# Finite-difference oracle.
# ---------------------------------------------------------------------------

FD_STEP = 1e-5
FD_REL_TOL = 1e-4
_FD_FLOOR = 1e-5


@dataclass
class FiniteDifferenceReport:
    max_rel_error: float
    worst_input: str
    worst_coordinate: tuple
    analytic: float
    numeric: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < FD_REL_TOL


def check_gradients(f, inputs: dict[str, np.ndarray], step: float = FD_STEP,
                    wrt: list[str] | None = None) -> FiniteDifferenceReport:
    """Compare backward() on f against central finite differences.

    f must return a scalar.  Per-coordinate relative error uses an absolute
    floor so coordinates where both gradients vanish do not trip on
    round-off noise.  Reports the worst coordinate found.
    """
    value, tape = record(f, inputs)
    if np.ndim(value) != 0:
        raise ValueError("check_gradients expects a scalar-valued function")
    grads = backward(tape, np.asarray(1.0))
    worst = FiniteDifferenceReport(0.0, "", (), 0.0, 0.0)
    names = wrt if wrt is not None else list(inputs)
    for name in names:
        x = inputs[name]
        g = grads[name]
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(record(f, inputs)[0])
            flat[i] = orig - step
            f_minus = float(record(f, inputs)[0])
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            ad = float(g.reshape(-1)[i])
            rel = abs(ad - fd) / max(abs(ad), abs(fd), _FD_FLOOR)
            if rel > worst.max_rel_error:
                worst = FiniteDifferenceReport(
                    rel, name, np.unravel_index(i, x.shape), ad, fd
                )
    return worst
