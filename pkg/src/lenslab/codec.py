"""Patch-wise PCA codec: basis extraction, projection, and exact reconstruction.

A latent array (C, H, W) is cut into non-overlapping s x s patches across all
channels, each vectorized to length d = C*s^2.  Projection keeps the first k
basis coefficients per patch plus the exact orthogonal residual, so
recon(proj(z)) == z up to round-off for any orthonormal basis.

Patch traversal is fixed: row-major over the patch grid, channel-major within
a patch.  This ordering must stay bit-stable across extraction, projection,
and reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import struct

import numpy as np

from . import autodiff as ad
from .numerics import RngState, ShapeError, as_array, symmetric_eigen

ORTHONORMALITY_TOL = 1e-10
RESIDUAL_TOL = 1e-9
BASIS_MAGIC = b"LENSPCA1"


class InsufficientDataError(ValueError):
    """Not enough patches for a full-rank covariance estimate."""


class DegenerateDataError(ValueError):
    """Patch covariance is numerically rank-deficient."""


@dataclass(frozen=True)
class PatchGeometry:
    channels: int
    height: int
    width: int
    patch_size: int

    def __post_init__(self):
        c, h, w, s = self.channels, self.height, self.width, self.patch_size
        if min(c, h, w, s) < 1:
            raise ValueError(f"geometry dims must be >= 1, got {self}")
        if h % s != 0 or w % s != 0:
            raise ValueError(f"patch size {s} must divide height {h} and width {w}")

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def latent_shape(self) -> tuple:
        return (self.channels, self.height, self.width)

    def to_dict(self) -> dict:
        return {"C": self.channels, "H": self.height, "W": self.width, "s": self.patch_size}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchGeometry":
        return cls(d["C"], d["H"], d["W"], d["s"])


def unfold(z, geometry: PatchGeometry):
    """(C, H, W) -> (N, d) patch matrix.  Works on arrays or taped Boxes."""
    c, h, w, s = geometry.channels, geometry.height, geometry.width, geometry.patch_size
    if tuple(np.shape(z) if not isinstance(z, ad.Box) else z.shape) != (c, h, w):
        got = z.shape if isinstance(z, ad.Box) else np.shape(z)
        raise ShapeError(f"unfold: latent shape {tuple(got)} != geometry {(c, h, w)}")
    gy, gx = h // s, w // s
    t = ad.reshape(z, (c, gy, s, gx, s))
    t = ad.transpose(t, (1, 3, 0, 2, 4))
    return ad.reshape(t, (geometry.n_patches, geometry.patch_dim))


def fold(patches, geometry: PatchGeometry):
    """(N, d) patch matrix -> (C, H, W).  Inverse of unfold."""
    c, h, w, s = geometry.channels, geometry.height, geometry.width, geometry.patch_size
    gy, gx = h // s, w // s
    t = ad.reshape(patches, (gy, gx, c, s, s))
    t = ad.transpose(t, (2, 0, 3, 1, 4))
    return ad.reshape(t, (c, h, w))


@dataclass
class PatchBasis:
    """Orthonormal basis V (columns sorted by descending eigenvalue), patch
    mean, eigenvalues, and the retained low-frequency count k."""

    geometry: PatchGeometry
    basis: np.ndarray        # (d, d)
    mean: np.ndarray         # (d,)
    eigenvalues: np.ndarray  # (d,) nonincreasing
    k: int
    validate: bool = True

    def __post_init__(self):
        d = self.geometry.patch_dim
        self.basis = as_array(self.basis)
        self.mean = as_array(self.mean)
        self.eigenvalues = as_array(self.eigenvalues)
        if self.basis.shape != (d, d) or self.mean.shape != (d,) or self.eigenvalues.shape != (d,):
            raise ShapeError(
                f"basis fields inconsistent with d={d}: V {self.basis.shape}, "
                f"mean {self.mean.shape}, eigenvalues {self.eigenvalues.shape}"
            )
        if not 1 <= self.k <= d:
            raise ValueError(f"k={self.k} outside [1, {d}]")
        if self.validate:
            err = float(np.max(np.abs(self.basis.T @ self.basis - np.eye(d))))
            if err > ORTHONORMALITY_TOL:
                raise ValueError(f"basis not orthonormal: max |V^T V - I| = {err:.3e}")
            if np.any(np.diff(self.eigenvalues) > 1e-12):
                raise ValueError("eigenvalues not sorted nonincreasing")
            if np.any(self.eigenvalues < -1e-10):
                raise ValueError("eigenvalues significantly negative")

    @property
    def low_columns(self) -> np.ndarray:
        """V': the first k basis columns."""
        return self.basis[:, : self.k]

    @property
    def high_columns(self) -> np.ndarray:
        """V'': the remaining d - k columns."""
        return self.basis[:, self.k:]

    def noise_mode(self) -> "PatchBasis":
        """Copy with zero mean, for projecting pure Gaussian noise.

        The stored mean centers dataset patches during basis extraction;
        noise has zero mean by construction, so noise pipelines project
        without centering.
        """
        if not self.mean.any():
            return self
        return PatchBasis(self.geometry, self.basis, np.zeros_like(self.mean),
                          self.eigenvalues, self.k, validate=False)

    def with_k(self, k: int) -> "PatchBasis":
        return PatchBasis(self.geometry, self.basis, self.mean, self.eigenvalues,
                          int(k), validate=False)


@dataclass
class CoeffSplit:
    """Low-frequency coefficients plus the exact orthogonal residual.

    The residual carries the high-frequency content implicitly: it equals the
    component of each centered patch outside span(V'), so no tail basis needs
    to be stored to reconstruct exactly.
    """

    w_low: np.ndarray    # (N, k)
    residual: np.ndarray  # (N, d), orthogonal to span(V') row-wise
    geometry: PatchGeometry


def proj(z: np.ndarray, basis: PatchBasis) -> CoeffSplit:
    """Project a latent onto the basis: w_L = (s - mu) V', residual orthogonal."""
    patches = unfold(as_array(z), basis.geometry)
    centered = patches - basis.mean
    w_low = centered @ basis.low_columns
    residual = centered - w_low @ basis.low_columns.T
    return CoeffSplit(w_low, residual, basis.geometry)


def recon(split: CoeffSplit, basis: PatchBasis) -> np.ndarray:
    """Rebuild the latent: s_i = mu + w_L V'^T + residual, then fold."""
    w_low, residual = as_array(split.w_low), as_array(split.residual)
    d = basis.geometry.patch_dim
    if w_low.shape != (basis.geometry.n_patches, basis.k) or residual.shape[1] != d:
        raise ShapeError(
            f"recon: split shapes {w_low.shape}/{residual.shape} inconsistent with "
            f"basis (N={basis.geometry.n_patches}, k={basis.k}, d={d})"
        )
    patches = basis.mean + w_low @ basis.low_columns.T + residual
    return fold(patches, basis.geometry)


def recon_traced(w_low, residual, basis: PatchBasis):
    """Tape-friendly recon: w_low may be a Box; residual/mean enter as constants."""
    patches = ad.matmul(w_low, basis.low_columns.T)
    patches = ad.add(patches, residual)
    if basis.mean.any():
        patches = ad.add_bias(patches, basis.mean)
    return fold(patches, basis.geometry)


def full_projection(z: np.ndarray, basis: PatchBasis) -> np.ndarray:
    """All d coefficients per patch: (s - mu) V.  Reference path for oracles."""
    patches = unfold(as_array(z), basis.geometry)
    return (patches - basis.mean) @ basis.basis


def split_from_coefficients(w_low: np.ndarray, w_high: np.ndarray,
                            basis: PatchBasis) -> CoeffSplit:
    """Build a CoeffSplit from explicit low/high coefficient blocks."""
    residual = as_array(w_high) @ basis.high_columns.T
    return CoeffSplit(as_array(w_low), residual, basis.geometry)


# ---------------------------------------------------------------------------
# Basis extraction.
# ---------------------------------------------------------------------------

RANK_TOL = 1e-10


def extract_basis(samples, geometry: PatchGeometry, k: int) -> PatchBasis:
    """PCA basis from sample latents: center patches, eigendecompose covariance.

    Requires at least d patches in total; raises DegenerateDataError when the
    covariance is numerically rank-deficient.
    """
    d = geometry.patch_dim
    rows = []
    for z in samples:
        z = as_array(z)
        if z.shape != geometry.latent_shape:
            raise ShapeError(f"sample shape {z.shape} != geometry {geometry.latent_shape}")
        rows.append(unfold(z, geometry))
    patches = np.concatenate(rows, axis=0) if rows else np.zeros((0, d))
    n = patches.shape[0]
    if n < d:
        raise InsufficientDataError(f"need at least d={d} patches, got {n}")
    mean = patches.mean(axis=0)
    centered = patches - mean
    cov = centered.T @ centered / (n - 1)  # unbiased estimator
    eig = symmetric_eigen(cov)
    lam_max = float(eig.eigenvalues[0])
    deficient = int(np.sum(eig.eigenvalues <= RANK_TOL * max(lam_max, 1e-300)))
    if lam_max <= 0.0 or deficient > 0:
        raise DegenerateDataError(
            f"patch covariance rank-deficient: rank {d - deficient} < d={d} "
            f"(smallest eigenvalue {eig.eigenvalues[-1]:.3e})"
        )
    return PatchBasis(geometry, eig.eigenvectors, mean, eig.eigenvalues, k)


def random_basis(geometry: PatchGeometry, k: int, rng: RngState) -> PatchBasis:
    """Random orthonormal basis with a synthetic decaying spectrum (zero mean)."""
    from .numerics import random_orthonormal

    d = geometry.patch_dim
    v = random_orthonormal(d, rng)
    eigenvalues = np.linspace(2.0, 0.5, d)
    return PatchBasis(geometry, v, np.zeros(d), eigenvalues, k)


def permutation_basis(geometry: PatchGeometry, k: int, rng: RngState) -> PatchBasis:
    """Exactly orthonormal basis (permutation matrix, column j = e_perm[j]).

    V^T V equals the identity bitwise, which makes subspace statements
    (gradient energy outside the modulated block, etc.) exact to the last
    bit instead of holding only to round-off.
    """
    d = geometry.patch_dim
    perm = _fisher_yates(d, rng)
    v = np.zeros((d, d))
    v[perm, np.arange(d)] = 1.0
    eigenvalues = np.linspace(2.0, 0.5, d)
    return PatchBasis(geometry, v, np.zeros(d), eigenvalues, k)


def _fisher_yates(n: int, rng: RngState) -> np.ndarray:
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = rng.integers(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def synthetic_latents(geometry: PatchGeometry, n: int, rng: RngState,
                      smoothness: float = 1.0) -> np.ndarray:
    """Synthetic stand-ins for encoder latents: smooth fields plus a noise floor.

    Spatial smoothing concentrates variance in slowly varying directions, so
    the extracted basis has a decaying spectrum like real latent statistics.
    Stand-in only; conclusions drawn from it are trend-level.
    """
    c, h, w = geometry.latent_shape
    white = rng.normal((n, c, h, w))
    if smoothness <= 0:
        return white
    ky = np.exp(-0.5 * (np.arange(h)[:, None] - np.arange(h)[None, :]) ** 2
                / max(smoothness, 1e-6) ** 2)
    kx = np.exp(-0.5 * (np.arange(w)[:, None] - np.arange(w)[None, :]) ** 2
                / max(smoothness, 1e-6) ** 2)
    ky /= np.sqrt(np.sum(ky**2, axis=1, keepdims=True))
    kx /= np.sqrt(np.sum(kx**2, axis=1, keepdims=True))
    smooth = np.einsum("yh,nchw,xw->ncyx", ky, white, kx)
    out = smooth + 0.05 * rng.normal((n, c, h, w))  # noise floor keeps full rank
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# Gaussian preservation check.
# ---------------------------------------------------------------------------

MIN_CHECK_SAMPLES = 10_000


@dataclass
class StatReport:
    n_samples: int
    n_vectors: int
    max_abs_mean: float
    max_abs_var_error: float
    max_abs_offdiag_cov: float
    mean_threshold: float
    var_threshold: float
    cov_threshold: float
    passed: bool
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_vectors": self.n_vectors,
            "max_abs_mean": self.max_abs_mean,
            "max_abs_var_error": self.max_abs_var_error,
            "max_abs_offdiag_cov": self.max_abs_offdiag_cov,
            "mean_threshold": self.mean_threshold,
            "var_threshold": self.var_threshold,
            "cov_threshold": self.cov_threshold,
            "passed": self.passed,
            "failures": self.failures,
        }


def gaussian_preservation_check(basis: PatchBasis, n_samples: int, rng: RngState) -> StatReport:
    """Project pure N(0, I) noise and test that coefficients stay N(0, I).

    Thresholds are 3 sigma in the number of noise draws; with N patches per
    draw the pooled estimates carry an extra sqrt(N) margin, which keeps the
    many off-diagonal covariance tests from tripping on noise.
    """
    if n_samples < MIN_CHECK_SAMPLES:
        raise ValueError(f"need n_samples >= {MIN_CHECK_SAMPLES}, got {n_samples}")
    geometry = basis.geometry
    d = geometry.patch_dim
    n_pool = n_samples * geometry.n_patches
    # vectorized: pool patches over draws, project in one matmul (mean ignored:
    # pure-noise mode)
    z = rng.normal((n_samples,) + geometry.latent_shape)
    s = geometry.patch_size
    gy, gx = geometry.height // s, geometry.width // s
    patches = (
        z.reshape(n_samples, geometry.channels, gy, s, gx, s)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(n_pool, d)
    )
    coeffs = patches @ basis.basis
    mean = coeffs.mean(axis=0)
    var = coeffs.var(axis=0)
    cov = (coeffs - mean).T @ (coeffs - mean) / n_pool
    offdiag = cov - np.diag(np.diag(cov))
    mean_thr = 3.0 / np.sqrt(n_samples)
    var_thr = 3.0 * np.sqrt(2.0 / n_samples)
    cov_thr = 3.0 / np.sqrt(n_samples)
    failures = []
    if np.max(np.abs(mean)) >= mean_thr:
        failures.append(f"mean: max |m| = {np.max(np.abs(mean)):.4g} >= {mean_thr:.4g}")
    if np.max(np.abs(var - 1.0)) >= var_thr:
        failures.append(f"variance: max |v-1| = {np.max(np.abs(var - 1.0)):.4g} >= {var_thr:.4g}")
    if np.max(np.abs(offdiag)) >= cov_thr:
        failures.append(
            f"covariance: max offdiag = {np.max(np.abs(offdiag)):.4g} >= {cov_thr:.4g}"
        )
    return StatReport(
        n_samples=n_samples,
        n_vectors=n_pool,
        max_abs_mean=float(np.max(np.abs(mean))),
        max_abs_var_error=float(np.max(np.abs(var - 1.0))),
        max_abs_offdiag_cov=float(np.max(np.abs(offdiag))),
        mean_threshold=float(mean_thr),
        var_threshold=float(var_thr),
        cov_threshold=float(cov_thr),
        passed=not failures,
        failures=failures,
    )


# ---------------------------------------------------------------------------
# Basis file format: magic "LENSPCA1", little-endian header (C,H,W,s,k int32),
# then mean, eigenvalues, V row-major as float64; JSON sidecar for inspection.
# ---------------------------------------------------------------------------


def save_basis(basis: PatchBasis, path) -> None:
    g = basis.geometry
    header = struct.pack("<5i", g.channels, g.height, g.width, g.patch_size, basis.k)
    payload = b"".join([
        BASIS_MAGIC,
        header,
        basis.mean.astype("<f8").tobytes(),
        basis.eigenvalues.astype("<f8").tobytes(),
        np.ascontiguousarray(basis.basis).astype("<f8").tobytes(),
    ])
    path = str(path)
    with open(path, "wb") as fh:
        fh.write(payload)
    sidecar = {"magic": BASIS_MAGIC.decode(), **g.to_dict(), "k": basis.k, "d": g.patch_dim}
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_basis(path) -> PatchBasis:
    with open(str(path), "rb") as fh:
        blob = fh.read()
    if blob[:8] != BASIS_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:8]!r}, expected {BASIS_MAGIC!r}")
    c, h, w, s, k = struct.unpack_from("<5i", blob, 8)
    geometry = PatchGeometry(c, h, w, s)
    d = geometry.patch_dim
    off = 8 + 20
    mean = np.frombuffer(blob, dtype="<f8", count=d, offset=off).copy()
    off += 8 * d
    eigenvalues = np.frombuffer(blob, dtype="<f8", count=d, offset=off).copy()
    off += 8 * d
    v = np.frombuffer(blob, dtype="<f8", count=d * d, offset=off).reshape(d, d).copy()
    return PatchBasis(geometry, v, mean, eigenvalues, k)
