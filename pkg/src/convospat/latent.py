"""AR(1) latent field, its tridiagonal precision, and the convolved field.

The latent variables theta_t(s_j) are spatially unstructured with an
independent AR(1) prior along time for each site; spatial structure enters
only through the convolution phi = W theta. The joint covariance factorises
as tau^2 * (W W^T kron Q^{-1}), which gives closed forms for the variance
and the spatial/temporal correlations of phi.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solveh_banded

from .weights import SparseWeights

__all__ = ["Ar1Params", "precision_matrix", "precision_inverse", "sample_theta_prior",
           "convolve", "phi_moments", "PhiMoments", "overlap_pairs", "pair_correlations"]


@dataclass(frozen=True)
class Ar1Params:
    """Temporal autocorrelation and innovation variance of the latent AR(1)."""
    gamma: float
    tau2: float
    prior_a: float = 1.0
    prior_b: float = 0.01

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if not (np.isfinite(self.tau2) and self.tau2 > 0):
            raise ValueError(f"tau2 must be positive, got {self.tau2}")


def _check_gamma(gamma: float):
    if not (np.isfinite(gamma) and 0.0 <= gamma < 1.0):
        raise ValueError(f"gamma must be in [0, 1), got {gamma}")


def precision_matrix(gamma: float, N: int) -> np.ndarray:
    """The N x N tridiagonal AR(1) precision: diag 1+gamma^2 (last entry 1),
    off-diagonals -gamma. gamma = 0 gives the identity."""
    _check_gamma(gamma)
    if N < 1:
        raise ValueError("N must be >= 1")
    Q = np.zeros((N, N))
    d = np.full(N, 1.0 + gamma * gamma)
    d[-1] = 1.0
    np.fill_diagonal(Q, d)
    if N > 1:
        off = np.full(N - 1, -gamma)
        Q[np.arange(N - 1), np.arange(1, N)] = off
        Q[np.arange(1, N), np.arange(N - 1)] = off
    return Q


def precision_inverse(gamma: float, N: int) -> np.ndarray:
    """Q^{-1} via the banded Cholesky solve (N tridiagonal solves, O(N^2))."""
    _check_gamma(gamma)
    if N < 1:
        raise ValueError("N must be >= 1")
    if N == 1:
        return np.ones((1, 1))
    ab = np.zeros((2, N))
    ab[0, 1:] = -gamma
    ab[1, :] = 1.0 + gamma * gamma
    ab[1, -1] = 1.0
    return solveh_banded(ab, np.eye(N))


def sample_theta_prior(params: Ar1Params, K: int, N: int, rng: np.random.Generator,
                       size: int | None = None) -> np.ndarray:
    """Simulate the AR(1) prior: theta_1 ~ N(0, tau2), theta_t ~ N(gamma*theta_{t-1}, tau2).

    Returns (K, N), or (size, K, N) when ``size`` is given (replicates for
    Monte-Carlo checks). Rows (sites) are mutually independent.
    """
    shape = (K, N) if size is None else (size, K, N)
    eps = rng.standard_normal(shape) * np.sqrt(params.tau2)
    theta = np.empty(shape)
    theta[..., 0] = eps[..., 0]
    for t in range(1, N):
        theta[..., t] = params.gamma * theta[..., t - 1] + eps[..., t]
    return theta


def convolve(weights: SparseWeights, theta: np.ndarray) -> np.ndarray:
    """phi_t(s_k) = sum_j w_kj theta_t(s_j), using the sparse rows: O(K m N)."""
    theta = np.asarray(theta)
    if theta.shape[0] != weights.K:
        raise ValueError(f"theta has {theta.shape[0]} rows, weights expect {weights.K}")
    # theta[cols] gathers (K, m, N); contract over the taper slots.
    return np.einsum("km,kmn->kn", weights.vals, theta[weights.cols])


def overlap_pairs(cols: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Index machinery for all site pairs (k <= i) whose taper sets overlap.

    Returns (pair_k, pair_i, flat_k_slots, flat_i_slots, reduce_starts):
    for pair p, the shared taper members are at row slots
    flat_k_slots[reduce_starts[p]:reduce_starts[p+1]] of row pair_k[p] and
    the matching slots of row pair_i[p].
    """
    K, m = cols.shape
    members = [dict(zip(cols[k].tolist(), range(m))) for k in range(K)]
    touching: list[set[int]] = [set() for _ in range(K)]
    for k in range(K):
        for j in cols[k]:
            touching[int(j)].add(k)
    pair_k, pair_i, slots_k, slots_i, counts = [], [], [], [], []
    for k in range(K):
        partners = set()
        for j in cols[k]:
            partners.update(touching[int(j)])
        for i in sorted(partners):
            if i < k:
                continue
            shared = [(sk, members[i][j]) for j, sk in members[k].items() if j in members[i]]
            shared.sort()
            pair_k.append(k)
            pair_i.append(i)
            slots_k.extend(s for s, _ in shared)
            slots_i.extend(s for _, s in shared)
            counts.append(len(shared))
    starts = np.concatenate(([0], np.cumsum(counts)))[:-1].astype(np.int64)
    return (np.asarray(pair_k, dtype=np.int64), np.asarray(pair_i, dtype=np.int64),
            np.asarray(slots_k, dtype=np.int64), np.asarray(slots_i, dtype=np.int64),
            starts)


def pair_correlations(weights: SparseWeights, pairs=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Spatial correlations sum_j w_kj w_ij / sqrt(|w_k|^2 |w_i|^2) for every
    overlapping pair k <= i. Returns (pair_k, pair_i, corr)."""
    if pairs is None:
        pairs = overlap_pairs(weights.cols)
    pk, pi, sk, si, starts = pairs
    if pk.size == 0:
        return pk, pi, np.zeros(0)
    counts = np.diff(np.append(starts, sk.size))
    prod = weights.vals[np.repeat(pk, counts), sk] * weights.vals[np.repeat(pi, counts), si]
    dots = np.add.reduceat(prod, starts)
    norms = np.sqrt(weights.row_norms_sq())
    corr = dots / (norms[pk] * norms[pi])
    return pk, pi, corr


@dataclass(frozen=True)
class PhiMoments:
    """Closed-form prior moments of the convolved field."""
    variance: np.ndarray       # (K, N)
    temporal_corr: np.ndarray  # (N, N)
    pair_k: np.ndarray         # overlapping pairs, k <= i
    pair_i: np.ndarray
    spatial_corr: np.ndarray   # correlation per overlapping pair

    def spatial_corr_dense(self, K: int) -> np.ndarray:
        """(K, K) matrix; pairs with disjoint taper sets are exactly 0."""
        S = np.zeros((K, K))
        S[self.pair_k, self.pair_i] = self.spatial_corr
        S[self.pair_i, self.pair_k] = self.spatial_corr
        return S


def phi_moments(weights: SparseWeights, params: Ar1Params, N: int) -> PhiMoments:
    """Variance and spatial/temporal correlations of phi_t(s_k) under the prior.

    var(k, t) = tau2 [Q^{-1}]_tt sum_j w_kj^2; the temporal correlation depends
    only on Q and the spatial correlation only on W (they separate).
    """
    Qinv = precision_inverse(params.gamma, N)
    dq = np.diag(Qinv)
    temporal = Qinv / np.sqrt(np.outer(dq, dq))
    variance = params.tau2 * np.outer(weights.row_norms_sq(), dq)
    pk, pi, corr = pair_correlations(weights)
    return PhiMoments(variance, temporal, pk, pi, corr)
