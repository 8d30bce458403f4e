"""Model fit statistics and posterior summaries.

WAIC uses the variance form of the effective-parameter count; LMPL sums the
log conditional predictive ordinates, each computed as the stabilised
harmonic mean of the pointwise likelihood draws. Lower WAIC and higher LMPL
both indicate better fit.
"""

from dataclasses import dataclass
import warnings

import numpy as np
from scipy.special import logsumexp

__all__ = ["FitStatistics", "ParameterSummary", "waic", "lmpl", "fit_statistics",
           "summarize", "summarize_samples"]


@dataclass(frozen=True)
class FitStatistics:
    waic: float
    p_w: float
    lppd: float
    lmpl: float


@dataclass(frozen=True)
class ParameterSummary:
    """Posterior median and equal-tailed 95% interval; covariate rows carry
    the relative rate for a one-SD increase, exp(beta * SD)."""
    name: str
    median: float
    lo95: float
    hi95: float
    rr_median: float | None = None
    rr_lo95: float | None = None
    rr_hi95: float | None = None


def _check_draws(ll: np.ndarray) -> np.ndarray:
    ll = np.asarray(ll, dtype=float)
    if ll.ndim != 2:
        raise ValueError(f"expected a draws x cells matrix, got shape {ll.shape}")
    if ll.shape[0] < 2:
        raise ValueError("need at least 2 retained draws")
    return ll


def waic(pointwise_loglik_draws: np.ndarray) -> tuple[float, float, float]:
    """(waic, p_w, lppd) from an S x C matrix of pointwise log likelihoods.

    lppd_c = log mean_s exp(l_sc) with max-shift stabilisation;
    p_c = sample variance over draws; waic = -2 (lppd - p_w).
    """
    ll = _check_draws(pointwise_loglik_draws)
    S = ll.shape[0]
    lppd_c = logsumexp(ll, axis=0) - np.log(S)
    p_c = ll.var(axis=0, ddof=1)
    lppd = float(lppd_c.sum())
    p_w = float(p_c.sum())
    return -2.0 * (lppd - p_w), p_w, lppd


def lmpl(pointwise_loglik_draws: np.ndarray) -> float:
    """Sum of log CPOs, CPO_c = S / sum_s exp(-l_sc) (harmonic mean of the
    pointwise likelihoods). Cells whose CPO underflows to zero contribute
    -inf and raise a warning."""
    ll = _check_draws(pointwise_loglik_draws)
    S = ll.shape[0]
    log_cpo = np.log(S) - logsumexp(-ll, axis=0)
    if np.any(~np.isfinite(log_cpo)):
        n_bad = int(np.sum(~np.isfinite(log_cpo)))
        warnings.warn(f"{n_bad} cell(s) have CPO underflowing to 0; LMPL is -inf",
                      stacklevel=2)
    return float(log_cpo.sum())


def fit_statistics(pointwise_loglik_draws: np.ndarray) -> FitStatistics:
    w, p_w, lppd = waic(pointwise_loglik_draws)
    return FitStatistics(waic=w, p_w=p_w, lppd=lppd, lmpl=lmpl(pointwise_loglik_draws))


def _quantiles(draws: np.ndarray) -> tuple[float, float, float]:
    lo, med, hi = np.percentile(draws, [2.5, 50.0, 97.5], method="linear")
    return float(med), float(lo), float(hi)


def summarize(draws_by_name: dict[str, np.ndarray],
              covariate_sds: dict[str, float] | None = None) -> list[ParameterSummary]:
    """Median and 95% interval per parameter.

    For names present in ``covariate_sds`` the draws are on the standardised
    scale; they are reported on the raw scale (draw / SD) together with the
    relative rate for a one-SD covariate increase, exp(raw beta * SD). The
    transform is monotone, so RR quantiles are the exact transforms of the
    beta quantiles (taking quantiles after exponentiating would differ at
    interpolation precision only).
    """
    covariate_sds = covariate_sds or {}
    out = []
    for name, draws in draws_by_name.items():
        draws = np.asarray(draws, dtype=float)
        if name in covariate_sds:
            sd = float(covariate_sds[name])
            med, lo, hi = _quantiles(draws / sd)
            out.append(ParameterSummary(name, med, lo, hi,
                                        float(np.exp(sd * med)),
                                        float(np.exp(sd * lo)),
                                        float(np.exp(sd * hi))))
        else:
            med, lo, hi = _quantiles(draws)
            out.append(ParameterSummary(name, med, lo, hi))
    return out


def summarize_samples(samples) -> list[ParameterSummary]:
    """Summaries for a PosteriorSamples object: covariate effects (raw scale
    plus relative rates), then gamma, tau2 and alpha when present."""
    draws: dict[str, np.ndarray] = {}
    sds: dict[str, float] = {}
    for i, name in enumerate(samples.param_names):
        draws[name] = samples.beta[:, i]
        sds[name] = float(samples.covariate_sds[i])
    draws["gamma"] = samples.gamma
    draws["tau2"] = samples.tau2
    if samples.alpha is not None:
        draws["alpha"] = samples.alpha
    return summarize(draws, sds)
