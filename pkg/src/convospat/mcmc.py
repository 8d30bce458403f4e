"""Posterior sampling for the global-kernel and adaptive-weight models.

Metropolis updates for beta, the latent field, gamma and the weight
parameters (bandwidth or per-site simplex vectors), with a conjugate Gibbs
draw for tau2. Proposal scales adapt during burn-in only, so retained
samples come from a fixed kernel.

The latent-field sweep is single-site Metropolis for every (j, t), executed
in batches: sites are grouped so that no two sites in a group share an
affected likelihood row (a greedy colouring of the taper-overlap graph) and
time points are split by parity, which makes every coordinate in a batch
conditionally independent of the others. Acceptance decisions are therefore
identical in law to a sequential scan, but each batch is one vectorised
evaluation.
"""

from dataclasses import dataclass
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from scipy.special import gammaln

from .frame import SpatialFrame
from .latent import convolve
from .model import ObservationPanel, pointwise_loglik, reverse_index
from .weights import SparseWeights, adaptive_weights, global_kernel_weights, \
    kernel_row_values, uniform_psi

__all__ = ["ChainConfig", "ModelState", "PosteriorSamples", "ChainSampler",
           "run_chains", "geweke", "joint_log_posterior", "InitializationError"]

THREADS_ENV = "CONVOSPAT_THREADS"
PSI_FLOOR = 1e-12
PSI_EPS = 0.01
# the field-preserving bandwidth move uses a dense solve; skip it for frames
# too large for that to be worthwhile
MORPH_MAX_SITES = 500


class InitializationError(RuntimeError):
    pass


@dataclass
class ChainConfig:
    """Chain lengths, seeding and proposal tuning.

    The length defaults follow the estimation protocol used for the full
    analysis (3 chains, 100k burn-in, 100k kept thinned by 10); desk runs
    should pass much smaller values.
    """
    n_burnin: int = 100_000
    n_keep: int = 100_000
    thin: int = 10
    n_chains: int = 3
    seed: int = 0
    beta_scale: float = 0.05
    theta_scale: float = 0.5
    gamma_scale: float = 0.1
    alpha_scale: float = 0.5          # random walk scale on ln(alpha)
    psi_concentration: float = 40.0   # Dirichlet proposal concentration
    shift_scale: float = 0.1          # intercept/field recentering move
    morph_scale: float = 0.5          # field-preserving bandwidth move, on ln(alpha)
    n_theta_sweeps: int = 2           # latent-field sweeps per iteration
    n_alpha_updates: int = 3          # bandwidth proposals per iteration
    adapt_interval: int = 100
    target_accept: float = 0.44       # scalar updates
    target_accept_psi: float = 0.25   # simplex block updates
    alpha_prior_lo: float = 1e-6
    alpha_prior_hi: float = 1e2
    field_thin: int = 1               # extra thinning of stored phi/psi fields
    debug: bool = False

    def __post_init__(self):
        if self.n_burnin < 0 or self.n_keep < 1 or self.thin < 1:
            raise ValueError("chain lengths must be positive (burn-in may be 0)")
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if not (0.0 < self.target_accept < 1.0 and 0.0 < self.target_accept_psi < 1.0):
            raise ValueError("acceptance targets must lie in (0, 1)")
        if not (0 < self.alpha_prior_lo < self.alpha_prior_hi):
            raise ValueError("require 0 < alpha_prior_lo < alpha_prior_hi")
        if self.field_thin < 1 or self.adapt_interval < 1:
            raise ValueError("field_thin and adapt_interval must be >= 1")

    @property
    def n_retained(self) -> int:
        return self.n_keep // self.thin


@dataclass
class ModelState:
    """Current values of one chain, with the derived caches kept consistent:
    phi = W theta columnwise and xb = X beta."""
    beta: np.ndarray
    theta: np.ndarray
    gamma: float
    tau2: float
    alpha: float | None
    psi: np.ndarray | None
    weights: SparseWeights
    phi: np.ndarray
    xb: np.ndarray


@dataclass
class PosteriorSamples:
    """Pooled retained draws from all chains, in chain order."""
    scheme: str
    param_names: list[str]
    covariate_sds: np.ndarray
    m: int
    beta: np.ndarray              # (S, p)
    gamma: np.ndarray             # (S,)
    tau2: np.ndarray              # (S,)
    alpha: np.ndarray | None      # (S,) global scheme
    psi: np.ndarray | None        # (Sf, K, m) adaptive scheme
    phi: np.ndarray               # (Sf, K, N)
    pointwise_loglik: np.ndarray  # (S, K*N), cell index k*N + t
    chain_id: np.ndarray          # (S,)
    iteration: np.ndarray         # (S,) kept-phase iteration the draw came from
    field_draw: np.ndarray        # (Sf,) indices into the S axis
    chain_seconds: list[float]
    sampling_seconds: float

    @property
    def n_draws(self) -> int:
        return self.beta.shape[0]


def chain_seeds(seed: int, n_chains: int) -> list[np.random.SeedSequence]:
    """Per-chain seeds: children of SeedSequence(seed), one per chain index."""
    return np.random.SeedSequence(seed).spawn(n_chains)


def build_color_classes(frame: SpatialFrame) -> list[np.ndarray]:
    """Greedy colouring of the site graph where j ~ j' when some taper set
    contains both (they would touch the same likelihood rows)."""
    K = frame.K
    adj: list[set[int]] = [set() for _ in range(K)]
    for k in range(K):
        mem = [int(j) for j in frame.taper_sets[k]]
        for a in mem:
            adj[a].update(mem)
    color = np.full(K, -1, dtype=np.int64)
    for j in range(K):
        used = {int(color[i]) for i in adj[j] if color[i] >= 0}
        c = 0
        while c in used:
            c += 1
        color[j] = c
    return [np.nonzero(color == c)[0] for c in range(int(color.max()) + 1)]


class _ClassIndex:
    """Flattened reverse-index arrays for one colour class, with the per-time-
    parity gather machinery precomputed (the sweep is overhead-bound)."""

    __slots__ = ("sites", "rows", "slots", "owner", "starts", "Yv", "Ev", "parity")

    def __init__(self, sites, rev, panel):
        self.sites = sites
        entries = [rev[int(j)] for j in sites]
        counts = np.array([e.shape[0] for e in entries])
        flat = np.concatenate(entries, axis=0)
        self.rows = flat[:, 0]
        self.slots = flat[:, 1]
        self.owner = np.repeat(np.arange(sites.size), counts)
        self.starts = np.concatenate(([0], np.cumsum(counts)))[:-1]
        self.Yv = panel.Y[self.rows].astype(float)
        self.Ev = panel.E[self.rows]
        N = panel.N
        self.parity = []
        for p in (0, 1):
            tsel = np.arange(p, N, 2)
            if tsel.size == 0:
                self.parity.append(None)
                continue
            hp = tsel > 0
            hn = tsel < N - 1
            self.parity.append({
                "tsel": tsel,
                "rix": np.ix_(self.rows, tsel),
                "six": np.ix_(sites, tsel),
                "six_prev": np.ix_(sites, tsel[hp] - 1),
                "six_next": np.ix_(sites, tsel[hn] + 1),
                "hp": hp,
                "hn": hn,
                "Yv": np.ascontiguousarray(self.Yv[:, tsel]),
                "Ev": np.ascontiguousarray(self.Ev[:, tsel]),
            })


def _ar1_sums(theta: np.ndarray) -> tuple[float, float, float]:
    """(S0, S1, S2) with sse(gamma) = S0 - 2 gamma S1 + gamma^2 S2, where
    S0 = sum theta_1^2 + sum_{t>=2} theta_t^2."""
    s0 = float(np.einsum("kn,kn->", theta, theta))
    if theta.shape[1] < 2:
        return s0, 0.0, 0.0
    a, b = theta[:, 1:], theta[:, :-1]
    s1 = float(np.einsum("kn,kn->", a, b))
    s2 = float(np.einsum("kn,kn->", b, b))
    return s0, s1, s2


def ar1_sse(theta: np.ndarray, gamma: float) -> float:
    """sum_j [theta_1^2 + sum_{t>=2} (theta_t - gamma theta_{t-1})^2]."""
    s0, s1, s2 = _ar1_sums(theta)
    return s0 - 2.0 * gamma * s1 + gamma * gamma * s2


def _fold_unit(x: float) -> float:
    """Reflect into [0, 1]: triangle wave with period 2."""
    r = math.fmod(x, 2.0)
    if r < 0.0:
        r += 2.0
    return 2.0 - r if r > 1.0 else r


class ChainSampler:
    """One chain: owns its ModelState, RNG and proposal scales."""

    def __init__(self, panel: ObservationPanel, frame: SpatialFrame, scheme: str,
                 config: ChainConfig, rng: np.random.Generator):
        if scheme not in ("global", "adaptive"):
            raise ValueError(f"scheme must be 'global' or 'adaptive', got {scheme!r}")
        self.panel = panel
        self.frame = frame
        self.scheme = scheme
        self.config = config
        self.rng = rng
        self.K, self.N = panel.K, panel.N
        self.p = panel.p

        rev = reverse_index(frame)
        self.classes = [_ClassIndex(sites, rev, panel) for sites in build_color_classes(frame)]

        beta = np.zeros(self.p)
        beta[0] = math.log((float(panel.Y.sum()) + 0.5) / float(panel.E.sum()))
        theta = np.zeros((self.K, self.N))
        if scheme == "global":
            alpha = math.exp(0.5 * (math.log(config.alpha_prior_lo)
                                    + math.log(config.alpha_prior_hi)))
            psi = None
            weights = global_kernel_weights(frame, alpha)
        else:
            alpha = None
            psi = uniform_psi(frame)
            weights = adaptive_weights(frame, psi.copy())
        self.state = ModelState(beta=beta, theta=theta, gamma=0.5, tau2=0.1,
                                alpha=alpha, psi=psi, weights=weights,
                                phi=convolve(weights, theta),
                                xb=panel.linear_predictor(beta))

        # sum_{k,t} Y_kt x_kti, reused by every beta proposal
        self._syx = np.einsum("kn,knp->p", panel.Y.astype(float), panel.X)

        self.beta_scales = np.full(self.p, config.beta_scale)
        self.theta_scales = np.full((self.K, self.N), config.theta_scale)
        self.gamma_scale = config.gamma_scale
        self.alpha_scale = config.alpha_scale
        self.shift_scale = config.shift_scale
        self.morph_scale = config.morph_scale
        self.psi_conc = np.full(self.K, config.psi_concentration)
        self._dense_rows = np.repeat(np.arange(self.K), frame.m)
        self.adapting = False
        self._adapt_window = 0
        self._reset_window_counters()
        self._reset_lifetime_counters()
        self.iterations_done = 0

        if not np.isfinite(self.loglik()):
            raise InitializationError(
                "non-finite log likelihood at the initial state: "
                f"beta0={beta[0]!r}, max |ln rate|={float(np.abs(self.state.xb + self.state.phi).max())!r}")

    # -- bookkeeping ------------------------------------------------------

    def _reset_window_counters(self):
        self._win_theta_acc = np.zeros((self.K, self.N))
        self._win_theta_try = 0
        self._win_beta_acc = np.zeros(self.p)
        self._win_gamma_acc = 0
        self._win_alpha_acc = 0
        self._win_shift_acc = 0
        self._win_psi_acc = np.zeros(self.K)
        self._win_iters = 0

    def _reset_lifetime_counters(self):
        self.theta_acc = np.zeros((self.K, self.N))
        self.theta_try = 0
        self.beta_acc = np.zeros(self.p)
        self.gamma_acc = 0
        self.alpha_acc = 0
        self.shift_acc = 0
        self.morph_acc = 0
        self.psi_acc = np.zeros(self.K)
        self.iters_counted = 0

    def loglik(self) -> float:
        return float(pointwise_loglik(self.panel, self.state.xb + self.state.phi).sum())

    def pointwise(self) -> np.ndarray:
        return pointwise_loglik(self.panel, self.state.xb + self.state.phi)

    # -- update steps ------------------------------------------------------

    def update_theta(self):
        st = self.state
        rng = self.rng
        gamma, tau2 = st.gamma, st.tau2
        theta, phi, xb = st.theta, st.phi, st.xb
        w_all = st.weights.vals
        for parity in (0, 1):
            for ci, info in enumerate(self.classes):
                px = info.parity[parity]
                if px is None:
                    continue
                sites = info.sites
                B, T = sites.size, px["tsel"].size
                w = w_all[info.rows, info.slots]
                rix, six = px["rix"], px["six"]
                lnr0 = xb[rix] + phi[rix]
                delta = rng.standard_normal((B, T)) * self.theta_scales[six]
                dlnr = w[:, None] * delta[info.owner]
                dterm = self._theta_lik_delta(ci, parity, lnr0, lnr0 + dlnr)
                dlik = np.add.reduceat(dterm, info.starts, axis=0)

                th = theta[six]
                thn = th + delta
                prev = np.zeros((B, T))
                prev[:, px["hp"]] = theta[px["six_prev"]]
                dquad = (thn - gamma * prev) ** 2 - (th - gamma * prev) ** 2
                hn = px["hn"]
                if hn.any():
                    nxt = theta[px["six_next"]]
                    dquad[:, hn] += ((nxt - gamma * thn[:, hn]) ** 2
                                     - (nxt - gamma * th[:, hn]) ** 2)
                logacc = dlik - dquad / (2.0 * tau2)

                acc = np.log(rng.random((B, T))) < logacc
                theta[six] = np.where(acc, thn, th)
                phi[rix] += dlnr * acc[info.owner]
                if self.adapting:
                    self._win_theta_acc[six] += acc
                self.theta_acc[six] += acc
        self._win_theta_try += 1
        self.theta_try += 1

    def _theta_lik_delta(self, ci: int, parity: int, lnr0, lnr1):
        # Poisson term differences for the affected rows; a test harness can
        # substitute another pointwise likelihood here.
        px = self.classes[ci].parity[parity]
        with np.errstate(over="ignore"):
            return (px["Yv"] * (lnr1 - lnr0)
                    - px["Ev"] * (np.exp(lnr1) - np.exp(lnr0)))

    def update_beta(self):
        st = self.state
        panel = self.panel
        prior_var = 1000.0
        for i in range(self.p):
            delta = self.rng.normal() * self.beta_scales[i]
            bn = st.beta[i] + delta
            dxb = panel.X[:, :, i] * delta
            lnr0 = st.xb + st.phi
            with np.errstate(over="ignore"):
                dlik = delta * self._syx[i] - float(
                    (panel.E * (np.exp(lnr0 + dxb) - np.exp(lnr0))).sum())
            dprior = -(bn * bn - st.beta[i] ** 2) / (2.0 * prior_var)
            logacc = dlik + dprior
            if np.isfinite(logacc) and math.log(self.rng.random()) < logacc:
                st.beta[i] = bn
                st.xb += dxb
                if self.adapting:
                    self._win_beta_acc[i] += 1
                self.beta_acc[i] += 1

    def update_shift(self):
        # Interweaving move along the intercept/field-mean ridge: beta0 + d,
        # theta - d leaves every log rate unchanged (rows of W sum to 1), so
        # only the AR prior and the intercept prior enter the ratio.
        st = self.state
        d = self.rng.normal() * self.shift_scale
        g = st.gamma
        th = st.theta
        lin = float(th[:, 0].sum())
        quad = float(self.K)
        if self.N > 1:
            lin += (1.0 - g) * float((th[:, 1:] - g * th[:, :-1]).sum())
            quad += self.K * (self.N - 1) * (1.0 - g) ** 2
        d_sse = -2.0 * d * lin + d * d * quad
        b0 = st.beta[0]
        b0n = b0 + d
        logacc = -d_sse / (2.0 * st.tau2) - (b0n * b0n - b0 * b0) / 2000.0
        if math.log(self.rng.random()) < logacc:
            st.beta[0] = b0n
            st.theta -= d
            st.xb += d
            st.phi -= d
            if self.adapting:
                self._win_shift_acc += 1
            self.shift_acc += 1

    def update_alpha_morph(self):
        # Sufficient-parameterisation move for the bandwidth: propose alpha*
        # and deterministically morph the rest of the state so the fitted
        # surface survives: theta* = W(alpha*)^-1 W(alpha) theta (likelihood
        # invariant up to rounding) and tau2* = tau2 * sse(theta*)/sse(theta)
        # (the AR quadratic form cancels). The ratio is then the AR and tau2
        # normalisations against the transform Jacobian, which lets alpha
        # cross ridges the conditional random walk cannot. The acceptance is
        # non-monotone in step size, so the proposal mixes a local and a long
        # jump rather than adapting.
        st = self.state
        cfg = self.config
        la0 = math.log(st.alpha)
        width = self.morph_scale * (4.0 if self.rng.random() < 0.5 else 1.0)
        la1 = la0 + self.rng.normal() * width
        a1 = math.exp(la1)
        sse0 = ar1_sse(st.theta, st.gamma)
        if not (cfg.alpha_prior_lo <= a1 <= cfg.alpha_prior_hi) or sse0 <= 0.0:
            return
        vals1 = kernel_row_values(self.frame.taper_dists, a1)
        dense1 = self._dense_weights(vals1)
        try:
            theta1 = np.linalg.solve(dense1, st.phi)
        except np.linalg.LinAlgError:
            return
        if not np.all(np.isfinite(theta1)):
            return
        # only |det| enters the Jacobian; sign 0 means a singular weight matrix
        sign0, logdet0 = np.linalg.slogdet(self._dense_weights(st.weights.vals))
        sign1, logdet1 = np.linalg.slogdet(dense1)
        if sign0 == 0 or sign1 == 0 or not (np.isfinite(logdet0) and np.isfinite(logdet1)):
            return
        sse1 = ar1_sse(theta1, st.gamma)
        if sse1 <= 0.0:
            return
        c = sse1 / sse0
        tau2_new = st.tau2 * c
        phi1 = np.einsum("km,kmn->kn", vals1, theta1[st.weights.cols])
        lnr0 = st.xb + st.phi
        lnr1 = st.xb + phi1
        with np.errstate(over="ignore"):
            dlik = float((self.panel.Y * (lnr1 - lnr0)
                          - self.panel.E * (np.exp(lnr1) - np.exp(lnr0))).sum())
        a, b = 1.0, 0.01
        lc = math.log(c)
        logacc = (dlik - 0.5 * self.K * self.N * lc - (a + 1.0) * lc
                  - b * (1.0 / tau2_new - 1.0 / st.tau2)
                  + self.N * (logdet0 - logdet1) + lc + (la1 - la0))
        if np.isfinite(logacc) and math.log(self.rng.random()) < logacc:
            st.alpha = a1
            st.weights = SparseWeights(st.weights.cols, vals1, "global", validate=False)
            st.theta = theta1
            st.tau2 = tau2_new
            st.phi = phi1
            self.morph_acc += 1

    def _dense_weights(self, vals: np.ndarray) -> np.ndarray:
        W = np.zeros((self.K, self.K))
        W[self._dense_rows, self.state.weights.cols.ravel()] = vals.ravel()
        return W

    def update_gamma(self):
        st = self.state
        g0 = st.gamma
        g1 = _fold_unit(g0 + self.rng.normal() * self.gamma_scale)
        if g1 >= 1.0:
            return
        _, s1, s2 = _ar1_sums(st.theta)
        d_sse = (-2.0 * g1 * s1 + g1 * g1 * s2) - (-2.0 * g0 * s1 + g0 * g0 * s2)
        logacc = -d_sse / (2.0 * st.tau2)
        if math.log(self.rng.random()) < logacc:
            st.gamma = g1
            if self.adapting:
                self._win_gamma_acc += 1
            self.gamma_acc += 1

    def update_tau2(self):
        st = self.state
        shape = 1.0 + 0.5 * self.K * self.N
        rate = 0.01 + 0.5 * ar1_sse(st.theta, st.gamma)
        st.tau2 = rate / self.rng.gamma(shape)

    def update_alpha(self):
        st = self.state
        cfg = self.config
        la0 = math.log(st.alpha)
        la1 = la0 + self.rng.normal() * self.alpha_scale
        a1 = math.exp(la1)
        if not (cfg.alpha_prior_lo <= a1 <= cfg.alpha_prior_hi):
            return
        vals1 = kernel_row_values(self.frame.taper_dists, a1)
        phi1 = np.einsum("km,kmn->kn", vals1, st.theta[st.weights.cols])
        lnr0 = st.xb + st.phi
        lnr1 = st.xb + phi1
        with np.errstate(over="ignore"):
            dlik = float((self.panel.Y * (lnr1 - lnr0)
                          - self.panel.E * (np.exp(lnr1) - np.exp(lnr0))).sum())
        logacc = dlik + (la1 - la0)  # log-scale walk over a flat prior on alpha
        if np.isfinite(logacc) and math.log(self.rng.random()) < logacc:
            st.alpha = a1
            st.weights = SparseWeights(st.weights.cols, vals1, "global", validate=False)
            st.phi = phi1
            if self.adapting:
                self._win_alpha_acc += 1
            self.alpha_acc += 1

    def update_psi(self):
        st = self.state
        rng = self.rng
        psi0 = st.psi
        conc = self.psi_conc[:, None]
        a_fwd = conc * psi0 + PSI_EPS
        draws = rng.gamma(a_fwd)
        rowsum = draws.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            psi1 = draws / rowsum
        ok = (rowsum.ravel() > 0) & (psi1 > PSI_FLOOR).all(axis=1)
        psi1 = np.where(ok[:, None], psi1, 1.0 / self.frame.m)  # placeholder rows, never accepted

        a_rev = conc * psi1 + PSI_EPS
        lq_fwd = _dirichlet_logpdf_rows(a_fwd, psi1)
        lq_rev = _dirichlet_logpdf_rows(a_rev, psi0)

        phi1 = np.einsum("km,kmn->kn", psi1, st.theta[st.weights.cols])
        lnr0 = st.xb + st.phi
        lnr1 = st.xb + phi1
        with np.errstate(over="ignore"):
            dlik = (self.panel.Y * (lnr1 - lnr0)
                    - self.panel.E * (np.exp(lnr1) - np.exp(lnr0))).sum(axis=1)
        logacc = dlik + lq_rev - lq_fwd  # flat Dirichlet(1,..,1) prior cancels
        acc = ok & np.isfinite(logacc) & (np.log(rng.random(self.K)) < logacc)
        if acc.any():
            psi0[acc] = psi1[acc]
            st.weights.vals[acc] = psi1[acc]
            st.phi[acc] = phi1[acc]
        if self.adapting:
            self._win_psi_acc += acc
        self.psi_acc += acc

    # -- orchestration -----------------------------------------------------

    def iterate(self):
        for _ in range(self.config.n_theta_sweeps):
            self.update_theta()
        self.update_beta()
        self.update_shift()
        self.update_gamma()
        self.update_tau2()
        if self.scheme == "global":
            for _ in range(self.config.n_alpha_updates):
                self.update_alpha()
            if self.K <= MORPH_MAX_SITES:
                self.update_alpha_morph()
        else:
            self.update_psi()
        self.iterations_done += 1
        self.iters_counted += 1
        if self.adapting:
            self._win_iters += 1
            if self._win_iters >= self.config.adapt_interval:
                self._adapt()
        # Incremental phi/xb updates accumulate rounding; rebuild periodically
        # (after the debug check so drift would actually be caught).
        if self.iterations_done % 1000 == 0:
            if self.config.debug:
                self.check_caches()
            self.refresh_caches()

    def _adapt(self):
        self._adapt_window += 1
        step = 1.0 / math.sqrt(self._adapt_window)
        n = self._win_iters
        tgt = self.config.target_accept

        rate = self._win_theta_acc / max(self._win_theta_try, 1)
        self.theta_scales = np.clip(self.theta_scales * np.exp((rate - tgt) * step),
                                    1e-3, 50.0)
        self.beta_scales = np.clip(self.beta_scales * np.exp((self._win_beta_acc / n - tgt) * step),
                                   1e-5, 50.0)
        self.gamma_scale = float(np.clip(self.gamma_scale * math.exp((self._win_gamma_acc / n - tgt) * step),
                                         1e-5, 10.0))
        self.shift_scale = float(np.clip(self.shift_scale * math.exp((self._win_shift_acc / n - tgt) * step),
                                         1e-5, 10.0))
        if self.scheme == "global":
            self.alpha_scale = float(np.clip(self.alpha_scale * math.exp((self._win_alpha_acc / n - tgt) * step),
                                             1e-5, 10.0))
        else:
            rate_psi = self._win_psi_acc / n
            self.psi_conc = np.clip(self.psi_conc * np.exp((self.config.target_accept_psi - rate_psi) * step),
                                    0.5, 1e8)
        self._reset_window_counters()

    def check_caches(self, tol: float = 1e-8):
        st = self.state
        phi_err = float(np.abs(st.phi - convolve(st.weights, st.theta)).max())
        xb_err = float(np.abs(st.xb - self.panel.linear_predictor(st.beta)).max())
        if phi_err > tol or xb_err > tol:
            raise AssertionError(f"cache drift: phi {phi_err:.3e}, xb {xb_err:.3e}")

    def refresh_caches(self):
        st = self.state
        st.phi = convolve(st.weights, st.theta)
        st.xb = self.panel.linear_predictor(st.beta)

    def run(self) -> dict:
        """Burn-in with adaptation, then the keep phase retaining every
        thin-th draw. Returns the chain's record arrays."""
        cfg = self.config
        self.adapting = True
        for _ in range(cfg.n_burnin):
            self.iterate()
        self.adapting = False
        self.refresh_caches()
        self._reset_lifetime_counters()

        S = cfg.n_retained
        K, N, p = self.K, self.N, self.p
        rec = {
            "beta": np.empty((S, p)),
            "gamma": np.empty(S),
            "tau2": np.empty(S),
            "alpha": np.empty(S) if self.scheme == "global" else None,
            "pointwise": np.empty((S, K * N)),
            "iteration": np.empty(S, dtype=np.int64),
        }
        field_idx = []
        phis, psis = [], []
        s = 0
        for i in range(1, cfg.n_keep + 1):
            self.iterate()
            if i % cfg.thin == 0:
                st = self.state
                rec["beta"][s] = st.beta
                rec["gamma"][s] = st.gamma
                rec["tau2"][s] = st.tau2
                if self.scheme == "global":
                    rec["alpha"][s] = st.alpha
                rec["pointwise"][s] = self.pointwise().ravel()
                rec["iteration"][s] = i
                if s % cfg.field_thin == 0:
                    field_idx.append(s)
                    phis.append(st.phi.copy())
                    if self.scheme == "adaptive":
                        psis.append(st.psi.copy())
                s += 1
        rec["phi"] = np.array(phis)
        rec["psi"] = np.array(psis) if self.scheme == "adaptive" else None
        rec["field_draw"] = np.array(field_idx, dtype=np.int64)
        rec["scales_frozen"] = self._scales_snapshot()
        return rec

    def _scales_snapshot(self) -> dict:
        return {
            "theta": self.theta_scales.copy(),
            "beta": self.beta_scales.copy(),
            "gamma": self.gamma_scale,
            "alpha": self.alpha_scale,
            "shift": self.shift_scale,
            "morph": self.morph_scale,
            "psi": self.psi_conc.copy(),
        }


def _dirichlet_logpdf_rows(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return (((a - 1.0) * np.log(x)).sum(axis=1)
                - gammaln(a).sum(axis=1) + gammaln(a.sum(axis=1)))


def _chain_task(args):
    panel, frame, scheme, config, chain_id = args
    seed = chain_seeds(config.seed, config.n_chains)[chain_id]
    rng = np.random.default_rng(seed)
    sampler = ChainSampler(panel, frame, scheme, config, rng)
    t0 = time.perf_counter()
    rec = sampler.run()
    rec["seconds"] = time.perf_counter() - t0
    return rec


def resolve_workers(n_chains: int) -> int:
    cap = os.environ.get(THREADS_ENV)
    limit = os.cpu_count() or 1
    if cap is not None:
        try:
            limit = max(1, int(cap))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return max(1, min(n_chains, limit))


def run_chains(config: ChainConfig, panel: ObservationPanel, frame: SpatialFrame,
               scheme: str) -> PosteriorSamples:
    """Run n_chains independent chains (concurrently when allowed) and pool
    the retained draws. Output is deterministic given (seed, n_chains),
    independent of scheduling: chain c always uses child seed c of the master
    seed and results are concatenated in chain order."""
    tasks = [(panel, frame, scheme, config, c) for c in range(config.n_chains)]
    t0 = time.perf_counter()
    workers = resolve_workers(config.n_chains)
    if workers > 1:
        try:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                records = list(pool.map(_chain_task, tasks))
        except (OSError, PermissionError):
            records = [_chain_task(t) for t in tasks]
    else:
        records = [_chain_task(t) for t in tasks]
    sampling_seconds = time.perf_counter() - t0

    S = config.n_retained
    pooled_field = []
    for c, rec in enumerate(records):
        pooled_field.append(rec["field_draw"] + c * S)
    samples = PosteriorSamples(
        scheme=scheme,
        param_names=panel.names,
        covariate_sds=panel.covariate_sds.copy(),
        m=frame.m,
        beta=np.concatenate([r["beta"] for r in records]),
        gamma=np.concatenate([r["gamma"] for r in records]),
        tau2=np.concatenate([r["tau2"] for r in records]),
        alpha=(np.concatenate([r["alpha"] for r in records])
               if scheme == "global" else None),
        psi=(np.concatenate([r["psi"] for r in records])
             if scheme == "adaptive" else None),
        phi=np.concatenate([r["phi"] for r in records]),
        pointwise_loglik=np.concatenate([r["pointwise"] for r in records]),
        chain_id=np.repeat(np.arange(config.n_chains), S),
        iteration=np.concatenate([r["iteration"] for r in records]),
        field_draw=np.concatenate(pooled_field),
        chain_seconds=[r["seconds"] for r in records],
        sampling_seconds=sampling_seconds,
    )
    return samples


def geweke(samples, first: float = 0.1, last: float = 0.5) -> float:
    """Convergence z-score comparing the first 10% against the last 50% of a
    scalar chain, with segment variances from non-overlapping batch means
    (batch count = floor(sqrt(segment length))). Returns nan when a segment
    has zero variance (not applicable, e.g. a constant chain)."""
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n < 100:
        raise ValueError(f"chain too short for the diagnostic: {n} < 100")
    a = x[:int(math.floor(first * n))]
    b = x[n - int(math.floor(last * n)):]
    va, vb = _batch_means_variance(a), _batch_means_variance(b)
    if va <= 0.0 or vb <= 0.0:
        return math.nan
    return float((a.mean() - b.mean()) / math.sqrt(va / a.size + vb / b.size))


def _batch_means_variance(seg: np.ndarray) -> float:
    n = seg.size
    nb = int(math.floor(math.sqrt(n)))
    bs = n // nb
    bm = seg[:nb * bs].reshape(nb, bs).mean(axis=1)
    if nb < 2:
        return 0.0
    return float(bs * bm.var(ddof=1))


def joint_log_posterior(panel: ObservationPanel, state: ModelState,
                        alpha_bounds: tuple[float, float] | None = None) -> float:
    """Full joint log posterior density of a state (likelihood + all priors),
    used by consistency tests and debug checks. Weight caches in the state
    are not trusted: phi is recomputed from (weights, theta)."""
    lnr = panel.linear_predictor(state.beta) + convolve(state.weights, state.theta)
    ll = float(pointwise_loglik(panel, lnr).sum())

    K, N = state.theta.shape
    if not (0.0 <= state.gamma < 1.0) or state.tau2 <= 0:
        return -math.inf
    lp = -0.5 * K * N * math.log(2.0 * math.pi * state.tau2) \
        - ar1_sse(state.theta, state.gamma) / (2.0 * state.tau2)
    b = state.beta
    lp += float(-0.5 * np.dot(b, b) / 1000.0 - 0.5 * b.size * math.log(2.0 * math.pi * 1000.0))
    a, bb = 1.0, 0.01
    lp += a * math.log(bb) - math.lgamma(a) - (a + 1.0) * math.log(state.tau2) - bb / state.tau2
    if state.alpha is not None:
        lo, hi = alpha_bounds if alpha_bounds is not None else (1e-6, 1e2)
        if not (lo <= state.alpha <= hi):
            return -math.inf
        lp += -math.log(hi - lo)
    if state.psi is not None:
        m = state.psi.shape[1]
        if np.any(state.psi < 0) or np.any(np.abs(state.psi.sum(axis=1) - 1.0) > 1e-9):
            return -math.inf
        lp += state.psi.shape[0] * float(gammaln(m))  # flat Dirichlet(1,...,1) density
    return ll + lp
