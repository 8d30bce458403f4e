"""Command line pipeline: simulate, fit, assess, correlations, summarize.

Configuration is a flat key=value text file plus a handful of command-line
overrides; every command is deterministic given its config and seed. On
failure the last stderr line is `error:<category>: <message>` and the exit
status is nonzero (2 for usage errors, 1 otherwise). The timing record
written by `fit` is the one output that legitimately differs between runs.
"""

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import data as data_mod
from .assess import fit_statistics, summarize
from .data import SimulationConfig, load_panel, simulate_dataset, write_panel
from .frame import build_taper_sets, load_locations
from .latent import overlap_pairs, pair_correlations
from .mcmc import ChainConfig, geweke, run_chains
from .weights import SparseWeights, kernel_row_values

__all__ = ["main"]


class CliError(Exception):
    category = "internal"
    exit_code = 1

    def __init__(self, message, category=None):
        super().__init__(message)
        if category is not None:
            self.category = category


class UsageError(CliError):
    category = "usage"
    exit_code = 2


_KEY_TYPES = {
    # shared
    "out": str, "seed": int, "observations": str, "locations": str, "samples_dir": str,
    "model": str, "m": int,
    # chains
    "n_chains": int, "n_burnin": int, "n_keep": int, "thin": int,
    "adapt_interval": int, "field_thin": int, "debug": bool,
    "alpha_lo": float, "alpha_hi": float,
    "beta_scale": float, "theta_scale": float, "gamma_scale": float,
    "alpha_scale": float, "psi_concentration": float,
    # simulator
    "k": int, "n": int, "scheme": str, "alpha": float, "gamma": float, "tau2": float,
    "beta": str, "e_lo": float, "e_hi": float, "side": float,
    "target_median_corr": float,
}


def _parse_config_file(path) -> dict:
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc}", "missing-file") from exc
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value", "config")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _KEY_TYPES:
            raise CliError(f"{path}:{lineno}: unknown key {key!r}", "config")
        typ = _KEY_TYPES[key]
        try:
            if typ is bool:
                values[key] = raw.lower() in ("1", "true", "yes")
            else:
                values[key] = typ(raw)
        except ValueError:
            raise CliError(f"{path}:{lineno}: bad value for {key}: {raw!r}", "config") from None
    return values


class RunConfig:
    """Merged config file + command-line overrides for one command."""

    def __init__(self, command: str, values: dict):
        self.command = command
        self.values = values

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        values = _parse_config_file(args.config) if args.config else {}
        for key in ("model", "m", "seed", "out"):
            v = getattr(args, key, None)
            if v is not None:
                values[key] = v
        if "model" in values and values["model"] not in ("global", "adaptive"):
            raise UsageError(f"model must be 'global' or 'adaptive', got {values['model']!r}")
        if "scheme" in values and values["scheme"] not in ("global", "adaptive", "boundary"):
            raise UsageError(f"scheme must be global|adaptive|boundary, got {values['scheme']!r}")
        return cls(args.command, values)

    def require(self, key):
        if key not in self.values:
            raise CliError(f"{self.command} requires {key!r} (config key or flag)", "config")
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def outdir(self) -> Path:
        out = Path(self.require("out"))
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CliError(f"cannot create output directory {out}: {exc}", "io") from exc
        return out


def _fmt(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg: RunConfig):
    beta_raw = cfg.get("beta", "0.0")
    try:
        beta = tuple(float(v) for v in str(beta_raw).split(","))
    except ValueError:
        raise CliError(f"bad beta list: {beta_raw!r}", "config") from None
    sim = SimulationConfig(
        K=cfg.get("k", 100), N=cfg.get("n", 10), m=cfg.get("m", 8),
        beta=beta, gamma=cfg.get("gamma", 0.7), tau2=cfg.get("tau2", 0.1),
        scheme=cfg.get("scheme", "global"), alpha=cfg.get("alpha"),
        target_median_corr=cfg.get("target_median_corr"),
        e_lo=cfg.get("e_lo", 50.0), e_hi=cfg.get("e_hi", 250.0),
        seed=cfg.require("seed"), side=cfg.get("side", 10.0),
    )
    out = cfg.outdir()
    panel, frame, truth = simulate_dataset(sim)
    obs, locs, tru = out / "observations.csv", out / "locations.csv", out / "truth.txt"
    write_panel(panel, frame, obs, locs)
    data_mod.write_truth(truth, frame, tru)
    for p in (obs, locs, tru):
        print(p)


# ---------------------------------------------------------------------------
# fit


def _load_dataset(cfg: RunConfig):
    obs = cfg.require("observations")
    locs = cfg.require("locations")
    for p in (obs, locs):
        if not Path(p).exists():
            raise CliError(f"input file not found: {p}", "missing-file")
    panel, locations = load_panel(obs, locs)
    frame = build_taper_sets(locations, cfg.require("m"))
    return panel, frame


def cmd_fit(cfg: RunConfig):
    model = cfg.require("model")
    panel, frame = _load_dataset(cfg)
    chain_cfg = ChainConfig(
        n_burnin=cfg.get("n_burnin", 100_000),
        n_keep=cfg.get("n_keep", 100_000),
        thin=cfg.get("thin", 10),
        n_chains=cfg.get("n_chains", 3),
        seed=cfg.require("seed"),
        adapt_interval=cfg.get("adapt_interval", 100),
        alpha_prior_lo=cfg.get("alpha_lo", 1e-6),
        alpha_prior_hi=cfg.get("alpha_hi", 1e2),
        field_thin=cfg.get("field_thin", 1),
        debug=cfg.get("debug", False),
        beta_scale=cfg.get("beta_scale", 0.05),
        theta_scale=cfg.get("theta_scale", 0.5),
        gamma_scale=cfg.get("gamma_scale", 0.1),
        alpha_scale=cfg.get("alpha_scale", 0.5),
        psi_concentration=cfg.get("psi_concentration", 40.0),
    )
    out = cfg.outdir()
    t0 = time.perf_counter()
    samples = run_chains(chain_cfg, panel, frame, model)
    command_seconds = time.perf_counter() - t0
    write_fit_outputs(samples, frame, out)
    with open(out / "timing.txt", "w", encoding="utf-8") as fh:
        fh.write(f"sampling_seconds={samples.sampling_seconds!r}\n")
        fh.write(f"command_seconds={command_seconds!r}\n")
        for c, sec in enumerate(samples.chain_seconds):
            fh.write(f"chain_{c}_seconds={sec!r}\n")
    _print_geweke(samples, chain_cfg.n_chains)
    for name in sorted(p.name for p in out.iterdir()):
        print(out / name)


def _print_geweke(samples, n_chains: int):
    per_chain = samples.n_draws // n_chains
    names = [f"beta_{n}" for n in samples.param_names] + ["gamma", "tau2"]
    series = [samples.beta[:, i] for i in range(samples.beta.shape[1])] + \
        [samples.gamma, samples.tau2]
    if samples.alpha is not None:
        names.append("alpha")
        series.append(samples.alpha)
    for c in range(n_chains):
        sel = slice(c * per_chain, (c + 1) * per_chain)
        for name, x in zip(names, series):
            seg = x[sel]
            try:
                z = geweke(seg)
            except ValueError:
                continue
            ztxt = "na" if np.isnan(z) else f"{z:.3f}"
            print(f"# geweke chain={c} param={name} z={ztxt}", file=sys.stderr)


def write_fit_outputs(samples, frame, out: Path):
    per_chain = samples.n_draws // len(samples.chain_seconds)
    beta_cols = [f"beta_{n}" for n in samples.param_names]
    for c in range(len(samples.chain_seconds)):
        path = out / f"samples_chain{c}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            header = ["iteration"] + beta_cols + ["gamma", "tau2"]
            if samples.alpha is not None:
                header.append("alpha")
            writer.writerow(header)
            for s in range(c * per_chain, (c + 1) * per_chain):
                row = [str(int(samples.iteration[s]))]
                row += [_fmt(v) for v in samples.beta[s]]
                row += [_fmt(samples.gamma[s]), _fmt(samples.tau2[s])]
                if samples.alpha is not None:
                    row.append(_fmt(samples.alpha[s]))
                writer.writerow(row)

    np.savetxt(out / "pointwise_loglik.txt", samples.pointwise_loglik, fmt="%.17g")

    with open(out / "covariates.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "sd"])
        for name, sd in zip(samples.param_names, samples.covariate_sds):
            writer.writerow([name, _fmt(sd)])

    if samples.psi is not None:
        ids = frame.site_ids()
        mean_psi = samples.psi.mean(axis=0)
        with open(out / "psi_mean.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["site_id", "rank", "psi_mean"])
            for k in range(frame.K):
                for r in range(frame.m):
                    writer.writerow([ids[k], str(r + 1), _fmt(mean_psi[k, r])])
        with open(out / "psi_samples.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["draw", "site_id", "rank", "value"])
            for s in range(samples.psi.shape[0]):
                for k in range(frame.K):
                    for r in range(frame.m):
                        writer.writerow([str(s), ids[k], str(r + 1), _fmt(samples.psi[s, k, r])])


# ---------------------------------------------------------------------------
# post-processing commands


def _samples_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.get("samples_dir") or cfg.require("out"))
    if not d.is_dir():
        raise CliError(f"samples directory not found: {d}", "missing-file")
    return d


def _read_samples_csvs(d: Path) -> dict[str, np.ndarray]:
    paths = sorted(d.glob("samples_chain*.csv"))
    if not paths:
        raise CliError(f"no samples_chain*.csv in {d}", "missing-file")
    columns: dict[str, list] = {}
    for path in paths:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            for row in reader:
                for name, val in zip(header, row):
                    columns.setdefault(name, []).append(float(val))
    return {name: np.asarray(v) for name, v in columns.items()}


def cmd_assess(cfg: RunConfig):
    d = _samples_dir(cfg)
    path = d / "pointwise_loglik.txt"
    if not path.exists():
        raise CliError(f"missing {path}", "missing-file")
    ll = np.loadtxt(path, ndmin=2)
    stats = fit_statistics(ll)
    out = cfg.outdir()
    report = out / "report.txt"
    with open(report, "w", encoding="utf-8") as fh:
        fh.write(f"waic={stats.waic!r}\n")
        fh.write(f"p_w={stats.p_w!r}\n")
        fh.write(f"lppd={stats.lppd!r}\n")
        fh.write(f"lmpl={stats.lmpl!r}\n")
    print(report)


def cmd_summarize(cfg: RunConfig):
    d = _samples_dir(cfg)
    cols = _read_samples_csvs(d)
    sds_path = d / "covariates.csv"
    if not sds_path.exists():
        raise CliError(f"missing {sds_path}", "missing-file")
    sds: dict[str, float] = {}
    with open(sds_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for name, sd in reader:
            sds[f"beta_{name}"] = float(sd)
    draws = {name: v for name, v in cols.items() if name != "iteration"}
    rows = summarize(draws, sds)
    out = cfg.outdir()
    path = out / "summaries.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "median", "lo95", "hi95", "rr_median", "rr_lo95", "rr_hi95"])
        for r in rows:
            base = [r.name, _fmt(r.median), _fmt(r.lo95), _fmt(r.hi95)]
            if r.rr_median is None:
                base += ["", "", ""]
            else:
                base += [_fmt(r.rr_median), _fmt(r.rr_lo95), _fmt(r.rr_hi95)]
            writer.writerow(base)
    print(path)


def cmd_correlations(cfg: RunConfig):
    d = _samples_dir(cfg)
    model = cfg.require("model")
    locations = load_locations(cfg.require("locations"))
    frame = build_taper_sets(locations, cfg.require("m"))
    pairs = overlap_pairs(frame.taper_sets)
    pk, pi = pairs[0], pairs[1]

    if model == "global":
        cols = _read_samples_csvs(d)
        if "alpha" not in cols:
            raise CliError("samples files carry no alpha column; was the fit global?", "data")
        draws = cols["alpha"]
        corr_draws = np.empty((draws.size, pk.size))
        for s, a in enumerate(draws):
            w = SparseWeights(frame.taper_sets, kernel_row_values(frame.taper_dists, a),
                              "global", validate=False)
            corr_draws[s] = pair_correlations(w, pairs)[2]
    else:
        psi_path = d / "psi_samples.csv"
        if not psi_path.exists():
            raise CliError(f"missing {psi_path}", "missing-file")
        index = {sid: k for k, sid in enumerate(frame.site_ids())}
        draws_list: dict[int, np.ndarray] = {}
        with open(psi_path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                s, sid, rank, value = int(row[0]), row[1], int(row[2]), float(row[3])
                if sid not in index:
                    raise CliError(f"psi sample references unknown site {sid!r}", "data")
                arr = draws_list.setdefault(s, np.zeros((frame.K, frame.m)))
                arr[index[sid], rank - 1] = value
        corr_draws = np.empty((len(draws_list), pk.size))
        for s in sorted(draws_list):
            w = SparseWeights(frame.taper_sets, draws_list[s], "adaptive", validate=False)
            corr_draws[s] = pair_correlations(w, pairs)[2]

    med = np.median(corr_draws, axis=0)
    coords = frame.coords
    ids = frame.site_ids()
    out = cfg.outdir()
    path = out / "correlations.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_k", "site_i", "distance", "spatial_corr"])
        for p in range(pk.size):
            k, i = int(pk[p]), int(pi[p])
            dist = float(np.hypot(coords[k, 0] - coords[i, 0], coords[k, 1] - coords[i, 1]))
            writer.writerow([ids[k], ids[i], _fmt(dist), _fmt(med[p])])
    print(path)


# ---------------------------------------------------------------------------


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "assess": cmd_assess,
    "correlations": cmd_correlations,
    "summarize": cmd_summarize,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convospat",
                                     description="Adaptive spatio-temporal process-convolution models")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--model", default=None, help="global or adaptive")
        p.add_argument("--m", type=int, default=None, help="taper size")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.from_args(args)
        COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"error:{exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, data_mod.PanelFormatError) as exc:
        print(f"error:data: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error:io: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
