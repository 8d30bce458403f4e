"""Sparse row-stochastic convolution weights.

Two schemes share the same sparsity pattern (the taper sets of a
SpatialFrame):

* global: a single-bandwidth kernel, w_kj proportional to
  exp(-alpha * d_kj / 2) over the taper set. The kernel prefactor
  1/sqrt(2*pi/alpha) cancels in the normalised ratio and is omitted.
* adaptive: per-site simplex weights psi_k assigned by neighbour rank,
  so spatially close pairs can be nearly independent.

Rows are stored in a fixed (K, m) block layout aligned with the frame's
taper sets; the triplet view drops exact zeros.
"""

from dataclasses import dataclass

import numpy as np

from .frame import SpatialFrame

__all__ = ["SparseWeights", "GlobalWeightParams", "global_kernel_weights",
           "adaptive_weights", "sample_dirichlet", "uniform_psi"]

ROW_SUM_TOL = 1e-12


@dataclass(frozen=True)
class GlobalWeightParams:
    """Kernel bandwidth and the support of its uniform prior (1/distance units)."""
    alpha: float
    prior_lo: float = 1e-6
    prior_hi: float = 1e2

    def __post_init__(self):
        if not (0 < self.prior_lo < self.prior_hi):
            raise ValueError("require 0 < prior_lo < prior_hi")
        if not (self.prior_lo <= self.alpha <= self.prior_hi):
            raise ValueError(f"alpha={self.alpha} outside prior bounds "
                             f"[{self.prior_lo}, {self.prior_hi}]")


class SparseWeights:
    """Row-stochastic K x K weights with at most m nonzeros per row.

    ``cols[k]`` are the taper-set indices of row k (frame ordering) and
    ``vals[k]`` the matching weights. ``triplets()`` yields COO arrays with
    exact zeros dropped.
    """

    __slots__ = ("K", "m", "scheme", "cols", "vals")

    def __init__(self, cols: np.ndarray, vals: np.ndarray, scheme: str, validate: bool = True):
        self.cols = cols
        self.vals = vals
        self.K = cols.shape[0]
        self.m = cols.shape[1]
        self.scheme = scheme
        if validate:
            self.validate()

    def validate(self):
        if self.vals.shape != self.cols.shape:
            raise ValueError("cols/vals shape mismatch")
        if np.any(self.vals < 0) or np.any(self.vals > 1):
            raise ValueError("weights outside [0, 1]")
        rs = self.vals.sum(axis=1)
        bad = np.abs(rs - 1.0) > ROW_SUM_TOL
        if np.any(bad):
            k = int(np.argmax(bad))
            raise ValueError(f"row {k} sums to {rs[k]!r}, not 1 within {ROW_SUM_TOL}")

    def triplets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(rows, cols, weights) arrays in row-major taper order, zeros dropped."""
        rows = np.repeat(np.arange(self.K), self.m)
        cols = self.cols.ravel()
        vals = self.vals.ravel()
        keep = vals > 0.0
        return rows[keep], cols[keep], vals[keep]

    def row_norms_sq(self) -> np.ndarray:
        return np.einsum("km,km->k", self.vals, self.vals)

    def to_dense(self) -> np.ndarray:
        W = np.zeros((self.K, self.K))
        rows = np.repeat(np.arange(self.K), self.m)
        W[rows, self.cols.ravel()] = self.vals.ravel()
        return W

    def copy(self) -> "SparseWeights":
        return SparseWeights(self.cols, self.vals.copy(), self.scheme, validate=False)


def kernel_row_values(taper_dists: np.ndarray, alpha: float) -> np.ndarray:
    """Normalised kernel weights for each taper row, exp((K, m)) -> (K, m).

    Exponents are shifted by the row maximum (self term, distance 0) so a
    row can never underflow to all zeros.
    """
    expo = -0.5 * alpha * taper_dists
    expo = expo - expo.max(axis=1, keepdims=True)
    w = np.exp(expo)
    return w / w.sum(axis=1, keepdims=True)


def global_kernel_weights(frame: SpatialFrame, alpha: float) -> SparseWeights:
    """Tapered single-bandwidth kernel weights (the globally smooth scheme)."""
    if not np.isfinite(alpha) or alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    vals = kernel_row_values(frame.taper_dists, alpha)
    return SparseWeights(frame.taper_sets, vals, "global")


def adaptive_weights(frame: SpatialFrame, psi: np.ndarray) -> SparseWeights:
    """Weights from per-site simplex vectors: w_kj = psi[k, r] where j is the
    r-th closest site to k. The same psi applies at all time points."""
    psi = np.asarray(psi, dtype=float)
    if psi.shape != (frame.K, frame.m):
        raise ValueError(f"psi shape {psi.shape} does not match taper sets "
                         f"({frame.K}, {frame.m})")
    return SparseWeights(frame.taper_sets, psi, "adaptive")


def sample_dirichlet(concentration, rng: np.random.Generator) -> np.ndarray:
    """One draw from Dirichlet(concentration); all-ones is uniform on the simplex."""
    conc = np.asarray(concentration, dtype=float)
    if conc.ndim != 1 or conc.size < 1:
        raise ValueError("concentration must be a nonempty vector")
    if np.any(conc <= 0) or not np.all(np.isfinite(conc)):
        raise ValueError("concentration entries must be positive and finite")
    if conc.size == 1:
        return np.ones(1)
    return rng.dirichlet(conc)


def uniform_psi(frame: SpatialFrame) -> np.ndarray:
    """The (K, m) uniform-simplex state, 1/m on every taper member."""
    return np.full((frame.K, frame.m), 1.0 / frame.m)
