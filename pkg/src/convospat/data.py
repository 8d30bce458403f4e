"""Indirect standardisation, dataset files, and the synthetic-data simulator.

The simulator is the ground-truth source for every verification run: it
draws the latent field from its prior, builds true weights under a chosen
scheme (including a two-cluster boundary scenario that a globally smooth
kernel cannot represent), and generates Poisson counts.
"""

from dataclasses import dataclass
import csv

import numpy as np

from .frame import Location, SpatialFrame, build_taper_sets, load_locations, write_locations
from .latent import Ar1Params, convolve, sample_theta_prior
from .model import ObservationPanel
from .weights import SparseWeights, adaptive_weights, global_kernel_weights, kernel_row_values

__all__ = ["ListSizeTable", "SimulationConfig", "SimulationTruth", "expected_counts",
           "scale_expected", "spr", "simulate_dataset", "load_panel", "write_panel",
           "load_listsizes", "calibrate_alpha"]

DEFAULT_AGE_SEX_GROUPS = tuple(
    f"{sex}_{band}" for sex in ("m", "f")
    for band in ("0-4", "5-14", "15-24", "25-44", "45-64", "65-74", "75-84", "85+")
)


class PanelFormatError(ValueError):
    """A dataset file failed validation; ``where`` names the offending row."""

    def __init__(self, message: str, where: str | None = None):
        super().__init__(message if where is None else f"{where}: {message}")
        self.where = where


@dataclass(frozen=True)
class ListSizeTable:
    """Registered-patient counts per site and age-sex group, with national rates."""
    site_ids: list[str]
    groups: list[str]
    counts: np.ndarray   # (K, G)
    rates: np.ndarray    # (G,) cases per person

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        rates = np.asarray(self.rates, dtype=float)
        if counts.shape != (len(self.site_ids), len(self.groups)):
            raise ValueError("counts shape must be (n sites, n groups)")
        if rates.shape != (len(self.groups),):
            raise ValueError("one national rate per group required")
        if np.any(counts < 0):
            raise ValueError("list sizes must be nonnegative")
        if np.any((rates < 0) | (rates > 1)):
            raise ValueError("rates must lie in [0, 1]")


def expected_counts(table: ListSizeTable) -> tuple[np.ndarray, list[str]]:
    """E_k = sum_g listsize_kg * rate_g per site.

    Sites with E = 0 (all-zero counts or rates) are not fatal: they are
    returned in the flagged-for-exclusion list, mirroring the removal of
    sites with unusable list-size data.
    """
    E = np.asarray(table.counts, dtype=float) @ np.asarray(table.rates, dtype=float)
    flagged = [table.site_ids[k] for k in np.nonzero(E <= 0)[0]]
    return E, flagged


def scale_expected(E_raw: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Rescale expected counts so the grand totals match: sum E = sum Y."""
    E_raw = np.asarray(E_raw, dtype=float)
    Y = np.asarray(Y)
    if np.any(E_raw <= 0):
        raise ValueError("raw expected counts must be positive")
    total_y = float(Y.sum())
    if total_y <= 0:
        raise ValueError("sum of observed counts is zero; cannot scale")
    return E_raw * (total_y / float(E_raw.sum()))


def spr(Y: np.ndarray, E_scaled: np.ndarray) -> np.ndarray:
    """Standardised prescription rate Y/E; 1.0 is the national average."""
    E_scaled = np.asarray(E_scaled, dtype=float)
    if np.any(E_scaled <= 0):
        raise ValueError("scaled expected counts must be positive")
    return np.asarray(Y) / E_scaled


@dataclass
class SimulationConfig:
    """Everything the simulator needs; all truth values are stored in the output."""
    K: int = 100
    N: int = 10
    m: int = 8
    beta: tuple[float, ...] = (0.0,)      # intercept first, one per covariate after
    gamma: float = 0.7
    tau2: float = 0.1
    scheme: str = "global"                # global | adaptive | boundary
    alpha: float | None = None            # global/boundary kernel bandwidth
    psi: np.ndarray | None = None         # explicit adaptive truth, else Dirichlet(1..1)
    target_median_corr: float | None = None  # calibrate alpha when set and alpha is None
    e_lo: float = 50.0
    e_hi: float = 250.0
    seed: int = 0
    side: float = 10.0                    # square side length for site placement


@dataclass
class SimulationTruth:
    """Generating parameters and fields, written alongside the dataset."""
    config: SimulationConfig
    beta: np.ndarray
    gamma: float
    tau2: float
    alpha: float | None
    psi: np.ndarray | None
    theta: np.ndarray
    phi: np.ndarray
    weights: SparseWeights
    cluster: np.ndarray | None = None


def calibrate_alpha(frame: SpatialFrame, target_median_corr: float = 0.5,
                    lo: float = 1e-6, hi: float = 1e2) -> float:
    """Bisection on ln(alpha) until the median spatial correlation over
    within-taper pairs (site k against each non-self member of its taper set)
    hits the target. Returns a clamped bound when the target is unattainable.
    """
    from .latent import overlap_pairs, pair_correlations

    pairs = overlap_pairs(frame.taper_sets)
    pk, pi = pairs[0], pairs[1]
    neighbour = {(min(k, int(j)), max(k, int(j)))
                 for k in range(frame.K) for j in frame.taper_sets[k] if int(j) != k}
    mask = np.array([(int(a), int(b)) in neighbour for a, b in zip(pk, pi)], dtype=bool)
    if not mask.any():
        return float(np.exp(0.5 * (np.log(lo) + np.log(hi))))

    def median_corr(alpha):
        vals = kernel_row_values(frame.taper_dists, alpha)
        w = SparseWeights(frame.taper_sets, vals, "global", validate=False)
        return float(np.median(pair_correlations(w, pairs)[2][mask]))

    if median_corr(lo) <= target_median_corr:
        return lo
    if median_corr(hi) >= target_median_corr:
        return hi
    llo, lhi = np.log(lo), np.log(hi)
    for _ in range(80):
        mid = 0.5 * (llo + lhi)
        if median_corr(np.exp(mid)) > target_median_corr:
            llo = mid
        else:
            lhi = mid
    return float(np.exp(0.5 * (llo + lhi)))


def _boundary_weights(frame: SpatialFrame, alpha: float, cluster: np.ndarray) -> SparseWeights:
    # Kernel weights with cross-cluster taper entries zeroed, renormalised.
    vals = kernel_row_values(frame.taper_dists, alpha)
    same = cluster[frame.taper_sets] == cluster[:, None]
    vals = np.where(same, vals, 0.0)
    vals = vals / vals.sum(axis=1, keepdims=True)
    return SparseWeights(frame.taper_sets, vals, "adaptive")


def simulate_dataset(config: SimulationConfig,
                     rng: np.random.Generator | None = None
                     ) -> tuple[ObservationPanel, SpatialFrame, SimulationTruth]:
    """Generate a synthetic panel with full ground truth.

    Sites are uniform on a square (two abutting squares for the boundary
    scenario); covariates are i.i.d. standard normal; per-site expected
    counts are uniform on [e_lo, e_hi] and constant over time; counts are
    Poisson(E * exp(x'beta + phi)).
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    K, N = config.K, config.N
    if K < 1 or N < 1:
        raise ValueError("K and N must be positive")
    beta = np.asarray(config.beta, dtype=float)

    cluster = None
    if config.scheme == "boundary":
        half = K // 2
        cluster = np.zeros(K, dtype=np.int64)
        cluster[half:] = 1
        xs = np.where(cluster == 0,
                      rng.uniform(0.0, config.side, K),
                      rng.uniform(config.side, 2.0 * config.side, K))
        ys = rng.uniform(0.0, config.side, K)
    else:
        xs = rng.uniform(0.0, config.side, K)
        ys = rng.uniform(0.0, config.side, K)
    width = len(str(K))
    locations = [Location(f"s{k + 1:0{width}d}", float(xs[k]), float(ys[k])) for k in range(K)]
    frame = build_taper_sets(locations, config.m)

    alpha = config.alpha
    psi = None
    if config.scheme in ("global", "boundary"):
        if alpha is None:
            target = config.target_median_corr if config.target_median_corr is not None else 0.5
            alpha = calibrate_alpha(frame, target)
        if config.scheme == "global":
            weights = global_kernel_weights(frame, alpha)
        else:
            weights = _boundary_weights(frame, alpha, cluster)
    elif config.scheme == "adaptive":
        if config.psi is not None:
            psi = np.asarray(config.psi, dtype=float)
        else:
            psi = rng.dirichlet(np.ones(frame.m), size=K)
        weights = adaptive_weights(frame, psi)
    else:
        raise ValueError(f"unknown truth scheme {config.scheme!r}")

    params = Ar1Params(config.gamma, config.tau2)
    theta = sample_theta_prior(params, K, N, rng)
    phi = convolve(weights, theta)

    n_cov = beta.size - 1
    x_raw = rng.standard_normal((K, N, n_cov)) if n_cov > 0 else np.zeros((K, N, 0))
    E = np.repeat(rng.uniform(config.e_lo, config.e_hi, K)[:, None], N, axis=1)
    lnr = phi + beta[0]
    for i in range(n_cov):
        lnr = lnr + beta[i + 1] * x_raw[:, :, i]
    Y = rng.poisson(E * np.exp(lnr))

    names = [f"x{i + 1}" for i in range(n_cov)]
    panel = ObservationPanel(Y, E, x_raw, names)
    truth = SimulationTruth(config, beta, config.gamma, config.tau2, alpha, psi,
                            theta, phi, weights, cluster)
    return panel, frame, truth


# ---------------------------------------------------------------------------
# file formats


def _fmt(x: float) -> str:
    return repr(float(x))


def write_panel(panel: ObservationPanel, frame: SpatialFrame, observations_path,
                locations_path=None) -> None:
    """Write the observations CSV (and optionally the locations CSV).

    Covariates are written on their raw scale so that reloading reproduces
    the panel exactly.
    """
    ids = frame.site_ids()
    with open(observations_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_id", "time", "y", "e"] + panel.covariate_names)
        for k in range(panel.K):
            for t in range(panel.N):
                row = [ids[k], str(t + 1), str(int(panel.Y[k, t])), _fmt(panel.E[k, t])]
                row += [_fmt(v) for v in panel.x_raw[k, t]]
                writer.writerow(row)
    if locations_path is not None:
        write_locations(frame.locations, locations_path)


def load_panel(observations_path, locations_path) -> tuple[ObservationPanel, list[Location]]:
    """Load and validate a dataset; site order comes from the locations file.

    Returns (panel, locations): the caller builds the frame with its chosen
    m. Errors name the offending file row.
    """
    locations = load_locations(locations_path)
    ids = [s.site_id for s in locations]
    index = {sid: k for k, sid in enumerate(ids)}
    K = len(ids)

    with open(observations_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 4 or [h.strip() for h in header[:4]] != ["site_id", "time", "y", "e"]:
            raise PanelFormatError("expected header 'site_id,time,y,e,<covariates...>'",
                                   f"{observations_path}:1")
        cov_names = [h.strip() for h in header[4:]]
        n_cov = len(cov_names)
        cells: dict[tuple[int, int], tuple[int, float, list[float]]] = {}
        max_t = 0
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{observations_path}:{lineno}"
            if len(row) != 4 + n_cov:
                raise PanelFormatError(f"expected {4 + n_cov} fields, got {len(row)}", where)
            sid = row[0]
            if sid not in index:
                raise PanelFormatError(f"unknown site_id {sid!r}", where)
            try:
                t = int(row[1])
            except ValueError:
                raise PanelFormatError(f"time {row[1]!r} is not an integer", where) from None
            if t < 1:
                raise PanelFormatError(f"time must be >= 1, got {t}", where)
            try:
                y_float = float(row[2])
            except ValueError:
                raise PanelFormatError(f"count {row[2]!r} is not a number", where) from None
            if y_float != int(y_float):
                raise PanelFormatError(f"count {row[2]!r} is not an integer", where)
            y = int(y_float)
            if y < 0:
                raise PanelFormatError(f"count must be nonnegative, got {y}", where)
            try:
                e = float(row[3])
            except ValueError:
                raise PanelFormatError(f"expected count {row[3]!r} is not a number", where) from None
            if not (np.isfinite(e) and e > 0):
                raise PanelFormatError(f"expected count must be positive, got {row[3]}", where)
            try:
                covs = [float(v) for v in row[4:]]
            except ValueError:
                raise PanelFormatError("non-numeric covariate value", where) from None
            key = (index[sid], t)
            if key in cells:
                raise PanelFormatError(f"duplicate cell for site {sid!r}, time {t}", where)
            cells[key] = (y, e, covs)
            max_t = max(max_t, t)

    N = max_t
    if N == 0:
        raise PanelFormatError("no observation rows", observations_path)
    missing = [(ids[k], t) for k in range(K) for t in range(1, N + 1) if (k, t) not in cells]
    if missing:
        sid, t = missing[0]
        raise PanelFormatError(f"missing cell for site {sid!r}, time {t} "
                               f"({len(missing)} missing in total)", str(observations_path))

    Y = np.empty((K, N), dtype=np.int64)
    E = np.empty((K, N))
    x_raw = np.empty((K, N, n_cov))
    for (k, t), (y, e, covs) in cells.items():
        Y[k, t - 1] = y
        E[k, t - 1] = e
        x_raw[k, t - 1] = covs
    panel = ObservationPanel(Y, E, x_raw, cov_names)
    return panel, locations


def load_listsizes(listsize_path, rates_path) -> ListSizeTable:
    """Read `site_id,group,count` list sizes and `group,rate` national rates."""
    rates: dict[str, float] = {}
    with open(rates_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["group", "rate"]:
            raise PanelFormatError("expected header 'group,rate'", f"{rates_path}:1")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 or row[0] in rates:
                raise PanelFormatError("bad or duplicate rate row", f"{rates_path}:{lineno}")
            rates[row[0]] = float(row[1])
    groups = list(rates)

    counts: dict[str, dict[str, float]] = {}
    with open(listsize_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["site_id", "group", "count"]:
            raise PanelFormatError("expected header 'site_id,group,count'", f"{listsize_path}:1")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{listsize_path}:{lineno}"
            if len(row) != 3:
                raise PanelFormatError("expected 3 fields", where)
            sid, grp, cnt = row
            if grp not in rates:
                raise PanelFormatError(f"unknown group {grp!r}", where)
            counts.setdefault(sid, {})
            if grp in counts[sid]:
                raise PanelFormatError(f"duplicate group {grp!r} for site {sid!r}", where)
            counts[sid][grp] = float(cnt)

    site_ids = list(counts)
    mat = np.zeros((len(site_ids), len(groups)))
    for i, sid in enumerate(site_ids):
        for g, grp in enumerate(groups):
            mat[i, g] = counts[sid].get(grp, 0.0)
    return ListSizeTable(site_ids, groups, mat, np.array([rates[g] for g in groups]))


def write_truth(truth: SimulationTruth, frame: SpatialFrame, path) -> None:
    """Flat key=value record of every generating parameter plus the phi field."""
    ids = frame.site_ids()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"scheme={truth.config.scheme}\n")
        fh.write(f"K={truth.config.K}\nN={truth.config.N}\nm={truth.config.m}\n")
        fh.write(f"seed={truth.config.seed}\n")
        fh.write("beta=" + ",".join(_fmt(b) for b in truth.beta) + "\n")
        fh.write(f"gamma={_fmt(truth.gamma)}\ntau2={_fmt(truth.tau2)}\n")
        if truth.alpha is not None:
            fh.write(f"alpha={_fmt(truth.alpha)}\n")
        if truth.cluster is not None:
            fh.write("cluster=" + ",".join(str(int(c)) for c in truth.cluster) + "\n")
        if truth.psi is not None:
            for k in range(truth.psi.shape[0]):
                fh.write(f"psi_{ids[k]}=" + ",".join(_fmt(v) for v in truth.psi[k]) + "\n")
        for k in range(truth.phi.shape[0]):
            fh.write(f"phi_{ids[k]}=" + ",".join(_fmt(v) for v in truth.phi[k]) + "\n")


def read_truth(path) -> dict[str, object]:
    """Parse a truth record back into scalars and arrays."""
    out: dict[str, object] = {}
    phi_rows: list[tuple[str, list[float]]] = []
    psi_rows: list[tuple[str, list[float]]] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, val = line.split("=", 1)
            if key.startswith("phi_"):
                phi_rows.append((key[4:], [float(v) for v in val.split(",")]))
            elif key.startswith("psi_"):
                psi_rows.append((key[4:], [float(v) for v in val.split(",")]))
            elif key in ("K", "N", "m", "seed"):
                out[key] = int(val)
            elif key == "scheme":
                out[key] = val
            elif key == "cluster":
                out[key] = np.array([int(v) for v in val.split(",")])
            elif key == "beta":
                out[key] = np.array([float(v) for v in val.split(",")])
            else:
                out[key] = float(val)
    if phi_rows:
        out["phi"] = np.array([r for _, r in phi_rows])
    if psi_rows:
        out["psi"] = np.array([r for _, r in psi_rows])
    return out
