"""Dense fp64 array ops, a counter-based Gaussian sampler, and a Jacobi eigensolver.

Everything downstream (codec, network, training, verification) builds on this
module.  All arithmetic is 64-bit; all functions are pure and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericalError(RuntimeError):
    """A numerical procedure produced a non-finite or invalid result."""


class ConvergenceError(NumericalError):
    """An iterative procedure hit its iteration cap before converging."""


class DivergenceError(NumericalError):
    """An iterative procedure is measurably diverging."""


def as_array(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 array (row-major data contract).

    np.asarray with order="C" keeps 0-d arrays 0-d, unlike ascontiguousarray.
    """
    return np.asarray(x, dtype=np.float64, order="C")


# ---------------------------------------------------------------------------
# Counter-based RNG: splitmix64 stream + Box-Muller.
#
# The generator is a pure function of (seed, counter), so streams are
# replayable from any position and child streams can be split off without
# touching the parent.  Implemented directly (rather than via numpy's
# Generator machinery) so the bit stream is stable across library versions.
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV53 = float(2.0**-53)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _stream_words(seed: int, start: int, count: int) -> np.ndarray:
    """64-bit words at positions start..start+count-1 of the seed's stream."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + idx * _GOLDEN)


def _words_to_open_unit(words: np.ndarray) -> np.ndarray:
    # (0, 1]: never 0, so log() below is always finite.
    return ((words >> np.uint64(11)).astype(np.float64) + 1.0) * _INV53


@dataclass
class RngState:
    """Deterministic, splittable random stream.

    Identical (seed, counter) always yields an identical sample stream.  A
    state is single-owner: share streams by calling :meth:`split`, not by
    aliasing.
    """

    seed: int
    counter: int = 0

    def split(self, label: int) -> "RngState":
        """Derive an independent child stream; the parent is not advanced."""
        with np.errstate(over="ignore"):
            child = _mix64(
                np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF)
                ^ _mix64(np.asarray(np.uint64(label) + _GOLDEN))
            )
        return RngState(seed=int(child))

    def uniform(self, shape) -> np.ndarray:
        """i.i.d. uniforms on (0, 1]."""
        shape = _check_shape(shape)
        n = int(np.prod(shape))
        u = _words_to_open_unit(_stream_words(self.seed, self.counter, n))
        self.counter += n
        return u.reshape(shape)

    def normal(self, shape) -> np.ndarray:
        """i.i.d. standard normals via Box-Muller on the uniform stream."""
        shape = _check_shape(shape)
        n = int(np.prod(shape))
        m = (n + 1) // 2
        words = _stream_words(self.seed, self.counter, 2 * m)
        self.counter += 2 * m  # advance by the full pair count even for odd n
        u = _words_to_open_unit(words)
        r = np.sqrt(-2.0 * np.log(u[:m]))
        theta = (2.0 * np.pi) * u[m:]
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return out.reshape(shape)

    def integers(self, n: int, shape=()) -> np.ndarray:
        """Uniform integers in [0, n)."""
        if n < 1:
            raise ValueError(f"integers() needs n >= 1, got {n}")
        u = self.uniform(shape if shape else (1,))
        out = np.minimum((u * n).astype(np.int64), n - 1)
        return out.reshape(shape) if shape else int(out[0])


def _check_shape(shape) -> tuple:
    shape = tuple(int(s) for s in (shape if np.iterable(shape) else (shape,)))
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ShapeError(f"sample shape must be nonempty with all dims >= 1, got {shape}")
    return shape


def sample_standard_gaussian(rng: RngState, shape) -> np.ndarray:
    """Draw i.i.d. N(0,1) entries, advancing rng deterministically."""
    return rng.normal(shape)


# ---------------------------------------------------------------------------
# Array ops: standard semantics, no implicit broadcasting except scalar-tensor.
# ---------------------------------------------------------------------------


def _is_scalar(x) -> bool:
    return np.ndim(x) == 0


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    try:
        if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
            raise ValueError
        return a @ b
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return a + b


def scale(a, c: float) -> np.ndarray:
    return np.asarray(a, dtype=np.float64) * float(c)


def transpose(a: np.ndarray, axes=None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if axes is not None and sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {tuple(axes)} invalid for shape {a.shape}")
    return np.transpose(a, axes)


def reshape(a: np.ndarray, shape) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
    return a.reshape(shape)


def frobenius_norm(a: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.asarray(a, dtype=np.float64) ** 2)))


# ---------------------------------------------------------------------------
# Symmetric eigendecomposition by cyclic Jacobi rotations.
# ---------------------------------------------------------------------------

SYMMETRY_TOL = 1e-9
_OFFDIAG_TOL = 1e-12
_MAX_SWEEPS = 100
SIGN_TOL = 1e-12


@dataclass
class EigenDecomposition:
    """Eigenvalues sorted descending; eigenvector column j pairs with value j."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    sweeps: int = 0
    off_diagonal_residual: float = 0.0


def _offdiag_norm(a: np.ndarray) -> float:
    # zero the diagonal first: subtracting sums of squares would cancel away
    # everything below sqrt(eps) * ||diag||
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def fix_column_signs(v: np.ndarray, tol: float = SIGN_TOL) -> np.ndarray:
    """Flip columns so the first component with |value| > tol is positive."""
    v = v.copy()
    for j in range(v.shape[1]):
        col = v[:, j]
        big = np.abs(col) > tol
        if big.any() and col[int(np.argmax(big))] < 0.0:
            v[:, j] = -col
    return v


def symmetric_eigen(a: np.ndarray, max_sweeps: int = _MAX_SWEEPS) -> EigenDecomposition:
    """Full eigendecomposition of a symmetric matrix.

    Cyclic Jacobi rotations; robust and plainly deterministic for the d <= 512
    sizes used here.  Raises ConvergenceError with the remaining off-diagonal
    residual if the sweep cap is hit.
    """
    a = as_array(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"symmetric_eigen: expected square matrix, got {a.shape}")
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > SYMMETRY_TOL:
        raise ValueError(f"symmetric_eigen: input not symmetric (max |a - a^T| = {asym:.3e})")
    d = a.shape[0]
    a = 0.5 * (a + a.T)
    v = np.eye(d)
    stop = _OFFDIAG_TOL * max(frobenius_norm(a), np.finfo(np.float64).tiny)
    sweeps = 0
    off = _offdiag_norm(a)
    while off > stop:
        if sweeps >= max_sweeps:
            raise ConvergenceError(
                f"symmetric_eigen: no convergence after {max_sweeps} sweeps "
                f"(off-diagonal residual {off:.3e})"
            )
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if tau >= 0.0 else -1.0) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        sweeps += 1
        off = _offdiag_norm(a)
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return EigenDecomposition(
        eigenvalues=vals[order],
        eigenvectors=fix_column_signs(v[:, order]),
        sweeps=sweeps,
        off_diagonal_residual=off,
    )


def random_orthonormal(d: int, rng: RngState) -> np.ndarray:
    """Random orthonormal d x d matrix (QR of a Gaussian draw, signs fixed)."""
    g = rng.normal((d, d))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.where(np.diag(r) == 0.0, 1.0, np.diag(r)))
    return fix_column_signs(np.ascontiguousarray(q))
