"""Poisson data model: counts against scaled expected counts with a
log-linear rate driven by covariates plus the convolved latent field.

The log factorial term is kept in every likelihood value (via gammaln) so
that WAIC and LMPL are computed on proper density values, not up to a
constant.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .frame import SpatialFrame
from .weights import SparseWeights

__all__ = ["ObservationPanel", "RegressionParams", "log_rate", "poisson_loglik",
           "pointwise_loglik", "theta_conditional_logdensity", "reverse_index"]


@dataclass(frozen=True)
class RegressionParams:
    """Regression coefficients with their weakly informative Gaussian prior."""
    beta: np.ndarray
    prior_var_scale: float = 1000.0

    def log_prior(self) -> float:
        b = np.asarray(self.beta)
        return float(-0.5 * np.dot(b, b) / self.prior_var_scale
                     - 0.5 * b.size * np.log(2.0 * np.pi * self.prior_var_scale))


class ObservationPanel:
    """Counts Y, scaled expected counts E and covariates over K sites x N times.

    ``X`` holds the standardised design (intercept column of ones first;
    non-indicator covariates divided by their sample SD). ``x_raw`` keeps the
    covariates as supplied, so files can be round-tripped byte-exactly.
    ``covariate_sds`` is 1 for the intercept and for 0/1 indicator columns.
    """

    def __init__(self, Y: np.ndarray, E: np.ndarray, x_raw: np.ndarray,
                 covariate_names: list[str]):
        Y = np.asarray(Y)
        E = np.asarray(E, dtype=float)
        x_raw = np.asarray(x_raw, dtype=float)
        if Y.ndim != 2 or E.shape != Y.shape:
            raise ValueError(f"Y and E must be matching K x N arrays, got {Y.shape} and {E.shape}")
        if x_raw.shape[:2] != Y.shape:
            raise ValueError(f"covariate array shape {x_raw.shape} does not match panel {Y.shape}")
        if len(covariate_names) != x_raw.shape[2]:
            raise ValueError("one name per covariate column required")
        if np.any(Y < 0) or np.any(Y != np.floor(Y)):
            raise ValueError("Y must contain nonnegative integers")
        if np.any(~np.isfinite(E)) or np.any(E <= 0):
            raise ValueError("E must be positive (zero expected counts are rejected)")
        if np.any(~np.isfinite(x_raw)):
            raise ValueError("covariates must be finite")

        self.Y = Y.astype(np.int64)
        self.E = E
        self.x_raw = x_raw
        self.covariate_names = list(covariate_names)
        self.K, self.N = Y.shape
        self.p = 1 + x_raw.shape[2]

        sds = np.ones(self.p)
        X = np.empty((self.K, self.N, self.p))
        X[:, :, 0] = 1.0
        for i in range(x_raw.shape[2]):
            col = x_raw[:, :, i]
            if _is_indicator(col):
                sds[i + 1] = 1.0
            else:
                sd = float(np.std(col, ddof=1))
                sds[i + 1] = sd if sd > 0 else 1.0
            X[:, :, i + 1] = col / sds[i + 1]
        self.X = X
        self.covariate_sds = sds
        self.log_E = np.log(self.E)
        self.log_y_factorial = gammaln(self.Y + 1.0)

    @property
    def names(self) -> list[str]:
        """Parameter names including the intercept, aligned with X columns."""
        return ["intercept"] + self.covariate_names

    def linear_predictor(self, beta: np.ndarray) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (self.p,):
            raise ValueError(f"beta must have length {self.p}, got {beta.shape}")
        return np.einsum("knp,p->kn", self.X, beta)


def _is_indicator(col: np.ndarray) -> bool:
    return bool(np.all((col == 0.0) | (col == 1.0)))


def log_rate(panel: ObservationPanel, beta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """ln R_t(s_k) = x_t(s_k)' beta + phi_t(s_k)."""
    phi = np.asarray(phi)
    if phi.shape != (panel.K, panel.N):
        raise ValueError(f"phi shape {phi.shape} does not match panel ({panel.K}, {panel.N})")
    return panel.linear_predictor(beta) + phi


def pointwise_loglik(panel: ObservationPanel, lnr: np.ndarray) -> np.ndarray:
    """Per-cell Poisson log density of Y_kt with mean E_kt exp(lnr_kt)."""
    lnr = np.asarray(lnr)
    if lnr.shape != (panel.K, panel.N):
        raise ValueError("log-rate shape mismatch")
    if np.any(~np.isfinite(lnr)):
        raise ValueError("non-finite log rates")
    return (panel.Y * (panel.log_E + lnr) - panel.E * np.exp(lnr)
            - panel.log_y_factorial)


def poisson_loglik(panel: ObservationPanel, lnr: np.ndarray) -> float:
    """Total Poisson log likelihood over all cells."""
    return float(pointwise_loglik(panel, lnr).sum())


def reverse_index(frame: SpatialFrame) -> list[np.ndarray]:
    """For each site j, the rows k whose taper set contains j, with the slot:
    an array of (k, slot) pairs such that frame.taper_sets[k, slot] == j."""
    rev: list[list[tuple[int, int]]] = [[] for _ in range(frame.K)]
    for k in range(frame.K):
        for slot, j in enumerate(frame.taper_sets[k]):
            rev[int(j)].append((k, slot))
    return [np.asarray(r, dtype=np.int64) for r in rev]


def theta_conditional_logdensity(panel: ObservationPanel, weights: SparseWeights,
                                 beta: np.ndarray, theta: np.ndarray,
                                 gamma: float, tau2: float,
                                 j: int, t: int, theta_star: float,
                                 rev: list[np.ndarray] | None = None) -> float:
    """Log full-conditional density of theta_t(s_j) at theta_star, up to a
    constant not involving theta_star.

    Only the rows k with j in their taper set contribute likelihood terms at
    time t (the payoff of the taper); the AR(1) part contributes the backward
    term, or the N(0, tau2) prior term at t = 1, plus the forward term when
    t < N.
    """
    K, N = theta.shape
    if not (0 <= j < K and 0 <= t < N):
        raise IndexError(f"(j={j}, t={t}) outside field of shape {theta.shape}")
    if rev is None:
        entries = np.asarray([(k, s) for k in range(weights.K)
                              for s in range(weights.m)
                              if weights.cols[k, s] == j], dtype=np.int64)
    else:
        entries = rev[j]
    rows = entries[:, 0]

    xb = panel.linear_predictor(beta)
    theta_mod = theta.copy()
    theta_mod[j, t] = theta_star
    phi_rows = np.einsum("rm,rm->r", weights.vals[rows],
                         theta_mod[weights.cols[rows], t])
    lnr = xb[rows, t] + phi_rows
    lik = float(np.sum(panel.Y[rows, t] * lnr - panel.E[rows, t] * np.exp(lnr)))

    prev = theta[j, t - 1] if t > 0 else 0.0
    quad = (theta_star - gamma * prev) ** 2
    if t + 1 < N:
        quad += (theta[j, t + 1] - gamma * theta_star) ** 2
    return lik - quad / (2.0 * tau2)
