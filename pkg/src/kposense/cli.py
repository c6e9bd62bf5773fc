"""Command-line front end.

Every experiment is described by a single JSON document whose "kind"
field names the subcommand it belongs to. Configuration is validated
strictly (unknown keys are rejected) before any computation starts, and
every emitted file carries a provenance header (version, config hash,
seed) as comment lines. All physical quantities are in kappa = 1 units.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 I/O error.
"""
from __future__ import annotations

import argparse
import datetime
import glob as globlib
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import ConvergenceError, OscillatorParams, PriorInterval
from .ekf import EkfConfig, FilterRunawayError, run_ekf
from .estimator import (EnsembleSnapshot, fit_skew_normal, make_histogram,
                        estimator_statistics, tail_fraction,
                        write_fit_series_csv, write_stats_csv)
from .fisher import scan_growth_rate
from .protocol import (ProtocolConfig, protocol_document, run_pipelines,
                       run_protocol, write_protocol_json)
from .simulate import NoiseStream, SimulationError, simulate_truth
from .state_model import ModelContext, filter_vector

KINDS = ("trajectory", "ensemble", "kf-scan", "phi-opt", "protocol", "stats", "fit")


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


REQUIRED = object()


def _take(cfg, schema, path=""):
    """Strictly validate a config dict against {key: (caster, default)}."""
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    unknown = set(cfg) - set(schema)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    out = {}
    for key, (cast, default) in schema.items():
        if key in cfg:
            try:
                out[key] = cast(cfg[key]) if cast is not None else cfg[key]
            except (TypeError, ValueError) as err:
                raise ConfigError(f"{path}{key}: {err}") from err
        elif default is REQUIRED:
            raise ConfigError(f"{path}{key}: required key missing")
        else:
            out[key] = default
    return out


def _params_schema(cfg, path="params."):
    got = _take(cfg, {
        "omega": (float, REQUIRED),
        "epsilon": (float, REQUIRED),
        "kappa": (float, 1.0),
        "eta": (float, 1.0),
        "phi": (float, 0.0),
    }, path)
    return OscillatorParams(**got)


def _prior_schema(cfg, path="prior."):
    got = _take(cfg, {"omega_l": (float, REQUIRED), "omega_h": (float, REQUIRED)}, path)
    return PriorInterval(**got)


def _binning(value):
    if isinstance(value, str):
        if value not in ("fd", "scott", "shorth"):
            raise ValueError(f"unknown binning rule {value!r}")
        return value
    return int(value)


def _config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _headers(kind: str, cfg: dict, seed: int, deterministic: bool) -> list:
    lines = [f"kposense {__version__} {kind}",
             f"config_hash={_config_hash(cfg)} seed={seed}"]
    if not deterministic:
        lines.append(f"generated={datetime.datetime.now().isoformat()}")
    return lines


def _provenance(kind: str, cfg: dict, seed: int, deterministic: bool) -> dict:
    doc = {"version": __version__, "kind": kind,
           "config_hash": _config_hash(cfg), "seed": seed}
    if not deterministic:
        doc["generated"] = datetime.datetime.now().isoformat()
    return doc


def _write_rows(path, header_lines, columns, rows):
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(
                cell if isinstance(cell, str) else f"{cell:.17g}" for cell in row
            ) + "\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_trajectory(cfg, out: Path, seed: int, workers: int, headers, prov) -> int:
    opts = _take(cfg, {
        "kind": (str, REQUIRED), "seed": (int, 0), "out": (str, None),
        "params": (None, REQUIRED), "dt": (float, 0.02),
        "duration": (float, 100.0), "refine": (int, 1),
        "prior": (None, {"omega_l": 0.7, "omega_h": 2.3}),
        "v": (float, 1.0), "f_max": (float, 1e5),
        "restart_policy": (str, "reset-to-init"),
        "max_restarts": (int, 100), "wide": (bool, False),
    })
    params = _params_schema(opts["params"])
    prior = _prior_schema(opts["prior"])
    truth, record = simulate_truth(params, dt=opts["dt"], duration=opts["duration"],
                                   noise=NoiseStream(seed), refine=opts["refine"])
    ctx = ModelContext(epsilon=params.epsilon, kappa=params.kappa,
                       eta=params.eta, phi=params.phi)
    init_cov = [1e-3] * 5 + [opts["v"] * params.kappa ** 2]
    ekf_config = EkfConfig(dt=opts["dt"], f_max=opts["f_max"],
                           init_mean=filter_vector(omega=prior.midpoint),
                           init_cov_diag=init_cov,
                           restart_policy=opts["restart_policy"],
                           max_restarts=opts["max_restarts"],
                           store_every=1 if opts["wide"] else 0)
    traj = run_ekf(record, ekf_config, ctx)

    _write_rows(out / "truth.csv", headers,
                ["step", "t", "X", "P", "sigma_x", "sigma_p", "sigma_xp"],
                [(str(n), t, m[0], m[1], s[0, 0], s[1, 1], s[0, 1])
                 for n, (t, m, s) in enumerate(zip(truth.times, truth.means,
                                                   truth.sigmas))])
    record.write_csv(out / "photocurrent.csv", header_lines=headers)
    record.write_binary(out / "photocurrent.bin")
    traj.write_csv(out / "ekf.csv", wide=opts["wide"], header_lines=headers)
    _write_rows(out / "restarts.csv", headers, ["t", "cause"],
                [(t, cause) for t, cause in zip(traj.restart_times,
                                                traj.restart_causes)])
    return 0


def cmd_ensemble(cfg, out: Path, seed: int, workers: int, headers, prov) -> int:
    opts = _take(cfg, {
        "kind": (str, REQUIRED), "seed": (int, 0), "out": (str, None),
        "params": (None, REQUIRED), "dt": (float, 0.02),
        "duration": (float, 100.0), "n_traj": (int, REQUIRED),
        "snapshot_time": (float, None),
        "prior": (None, {"omega_l": 0.7, "omega_h": 2.3}),
        "v": (float, 1.0), "f_max": (float, 1e5),
        "restart_policy": (str, "reset-to-init"),
        "max_restarts": (int, 10_000),
        "n_estimate_times": (int, 50),
        "binning": (_binning, "shorth"),
        "tail_omega0": (None, None),
    })
    params = _params_schema(opts["params"])
    prior = _prior_schema(opts["prior"])
    t_snap = opts["snapshot_time"] if opts["snapshot_time"] is not None else opts["duration"]
    n_steps = int(round(opts["duration"] / opts["dt"]))
    grid = np.linspace(opts["duration"] / opts["n_estimate_times"],
                       opts["duration"], opts["n_estimate_times"])
    step_idx = np.rint(grid / opts["dt"]).astype(int)
    step_idx = np.append(step_idx, int(round(t_snap / opts["dt"])))
    step_idx = np.unique(np.clip(step_idx, 1, n_steps))
    times = step_idx * opts["dt"]

    samples, restarts, nonfinite, _ = run_pipelines(
        params.omega, params.epsilon, params.kappa, params.eta, params.phi,
        opts["dt"], opts["duration"], seed, 0, opts["n_traj"],
        filter_vector(omega=prior.midpoint),
        np.array([1e-3] * 5 + [opts["v"] * params.kappa ** 2]),
        opts["f_max"], opts["restart_policy"], opts["max_restarts"],
        step_idx, workers=workers)

    rows = [(str(j), t, w) for j in range(samples.shape[0])
            for t, w in zip(times, samples[j])]
    _write_rows(out / "omega_curves.csv", headers, ["traj", "t", "omega_est"], rows)

    snap_col = int(np.argmin(np.abs(times - t_snap)))
    snap = EnsembleSnapshot(t=times[snap_col], samples=samples[:, snap_col])
    _write_rows(out / "snapshot.csv", headers, ["traj", "omega_est"],
                [(str(j), w) for j, w in enumerate(snap.samples)])
    hist = make_histogram(snap, rule=opts["binning"])
    _write_rows(out / "histogram.csv", headers,
                ["bin_lo", "bin_hi", "count", "density"],
                [(lo, hi, str(int(c)), d) for lo, hi, c, d in
                 zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.counts,
                     hist.density)])
    fit = None if hist.degenerate else fit_skew_normal(hist)
    write_fit_series_csv(out / "fit.csv", [snap.t], [fit], header_lines=headers)
    if opts["tail_omega0"] is not None:
        _write_rows(out / "tails.csv", headers, ["omega_0", "fraction"],
                    [(float(w0), tail_fraction(snap, float(w0)))
                     for w0 in opts["tail_omega0"]])
    _write_rows(out / "restart_summary.csv", headers,
                ["threshold_restarts", "nonfinite_restarts"],
                [(str(restarts), str(nonfinite))])
    return 0


def cmd_kf_scan(cfg, out: Path, seed: int, workers: int, headers, prov) -> int:
    opts = _take(cfg, {
        "kind": (str, REQUIRED), "seed": (int, 0), "out": (str, None),
        "omega": (float, REQUIRED), "epsilon": (float, REQUIRED),
        "eta": (float, 1.0), "kappa": (float, 1.0), "n_phases": (int, 256),
    })
    scan = scan_growth_rate(opts["omega"], opts["epsilon"], opts["eta"],
                            opts["kappa"], n_phases=opts["n_phases"])
    extra = [f"phi_opt={scan.argmax_phase:.17g} flat={scan.flat}"]
    scan.write_csv(out / "kf_scan.csv", header_lines=headers + extra)
    return 0


def cmd_phi_opt(cfg, out: Path, seed: int, workers: int, headers, prov) -> int:
    opts = _take(cfg, {
        "kind": (str, REQUIRED), "seed": (int, 0), "out": (str, None),
        "omega": (float, REQUIRED), "epsilon": (float, REQUIRED),
        "eta": (float, 1.0), "kappa": (float, 1.0), "n_phases": (int, 256),
    })
    scan = scan_growth_rate(opts["omega"], opts["epsilon"], opts["eta"],
                            opts["kappa"], n_phases=opts["n_phases"])
    doc = {"phi_opt": scan.argmax_phase, "flat": scan.flat,
           "k_F_max": float(scan.rates.max()), "provenance": prov}
    with open(out / "phi_opt.json", "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    print(f"phi_opt = {scan.argmax_phase:.6f} (k_F = {scan.rates.max():.6g})")
    return 0


def _protocol_config(opts, seed: int, workers: int) -> ProtocolConfig:
    return ProtocolConfig(
        prior=_prior_schema(opts["prior"]), eta=opts["eta"],
        n_traj=opts["n_traj"], n_iterations=opts["n_iterations"],
        t_star=opts["t_star"], t_large=opts["t_large"],
        epsilon_margin=opts["epsilon_margin"], dt=opts["dt"],
        f_max=opts["f_max"], v=opts["v"], kappa=opts["kappa"],
        restart_policy=opts["restart_policy"],
        filter_init=opts["filter_init"], binning=opts["binning"],
        n_estimate_times=opts["n_estimate_times"], base_seed=seed,
        workers=workers)


def _protocol_repeat(args):
    opts, seed, run_index, omega_true = args
    config = _protocol_config(opts, seed, workers=1)
    ss = np.random.SeedSequence((seed, run_index))
    config.base_seed = int(ss.generate_state(1, np.uint64)[0])
    return run_protocol(config, omega_true)


_PROTOCOL_SCHEMA = {
    "kind": (str, REQUIRED), "seed": (int, 0), "out": (str, None),
    "prior": (None, REQUIRED), "eta": (float, REQUIRED),
    "omega_true": (float, REQUIRED),
    "n_traj": (int, 200), "n_iterations": (int, 3),
    "t_star": (float, 300.0), "t_large": (float, None),
    "epsilon_margin": (float, 0.1), "dt": (float, 0.02),
    "f_max": (float, 1e5), "v": (float, 1.0), "kappa": (float, 1.0),
    "restart_policy": (str, "reset-to-init"),
    "filter_init": (str, "prior-midpoint"),
    "binning": (_binning, "shorth"), "n_estimate_times": (int, 24),
    "repeats": (int, 1),
}


def cmd_protocol(cfg, out: Path, seed: int, workers: int, headers, prov) -> int:
    opts = _take(cfg, _PROTOCOL_SCHEMA)
    repeats = opts["repeats"]
    if repeats == 0:
        with open(out / "config_echo.json", "w") as fh:
            json.dump(cfg, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return 0

    if repeats == 1:
        config = _protocol_config(opts, seed, workers)
        all_runs = [run_protocol(config, opts["omega_true"])]
    else:
        tasks = [(opts, seed, r, opts["omega_true"]) for r in range(repeats)]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                all_runs = list(pool.map(_protocol_repeat, tasks))
        else:
            all_runs = [_protocol_repeat(task) for task in tasks]

    failed_any = False
    for r_idx, records in enumerate(all_runs):
        refs = {}
        for rec in records:
            if rec.samples is None:
                continue
            name = f"run_{r_idx:03d}_iter_{rec.index}.csv"
            rec.write_ensemble_csv(out / name, header_lines=headers)
            refs[rec.index] = name
        config = _protocol_config(opts, seed, workers)
        doc = protocol_document(config, opts["omega_true"], records, csv_refs=refs)
        doc["run_index"] = r_idx
        doc["provenance"] = prov
        write_protocol_json(out / f"run_{r_idx:03d}.json", doc)
        if any(rec.failed for rec in records):
            failed_any = True
            with open(out / f"run_{r_idx:03d}.FAILED", "w") as fh:
                fh.write("iteration failure; partial results emitted\n")

    complete = [run for run in all_runs if not any(rec.failed for rec in run)]
    if len(complete) >= 2:
        n_iter = min(len(run) for run in complete)
        for i in range(n_iter):
            times = complete[0][i].times
            curves = np.array([run[i].estimates for run in complete])
            mean, std, mse = estimator_statistics(curves, opts["omega_true"])
            write_stats_csv(out / f"stats_iter_{i}.csv", times, mean, std, mse,
                            header_lines=headers)
    return 3 if failed_any else 0


def cmd_stats(cfg, out: Path, seed: int, workers: int, headers, prov) -> int:
    opts = _take(cfg, {
        "kind": (str, REQUIRED), "seed": (int, 0), "out": (str, None),
        "runs": (None, None), "runs_glob": (str, None),
        "omega_true": (float, None),
    })
    paths = list(opts["runs"] or [])
    if opts["runs_glob"]:
        paths.extend(sorted(globlib.glob(opts["runs_glob"])))
    if len(paths) < 2:
        raise ConfigError("stats needs at least 2 run documents "
                          "(runs list and/or runs_glob)")
    docs = []
    for p in paths:
        with open(p) as fh:
            docs.append(json.load(fh))
    omega_true = opts["omega_true"]
    if omega_true is None:
        omega_true = docs[0]["omega_true"]
    n_iter = min(len(d["iterations"]) for d in docs)
    for i in range(n_iter):
        curves, times = [], None
        for d in docs:
            entry = d["iterations"][i]
            if entry.get("failed") or "estimate_curve" not in entry:
                continue
            t = np.asarray(entry["estimate_curve"]["t"], dtype=float)
            w = np.asarray([np.nan if x is None else x
                            for x in entry["estimate_curve"]["omega_est"]])
            if times is None:
                times = t
            elif len(t) != len(times) or not np.allclose(t, times):
                raise ConfigError(f"iteration {i}: runs disagree on the time grid")
            curves.append(w)
        if len(curves) < 2:
            continue
        mean, std, mse = estimator_statistics(np.array(curves), omega_true)
        write_stats_csv(out / f"stats_iter_{i}.csv", times, mean, std, mse,
                        header_lines=headers)
    return 0


def cmd_fit(cfg, out: Path, seed: int, workers: int, headers, prov) -> int:
    opts = _take(cfg, {
        "kind": (str, REQUIRED), "seed": (int, 0), "out": (str, None),
        "samples_csv": (str, REQUIRED), "column": (str, "omega_est"),
        "binning": (_binning, "shorth"), "t": (float, 0.0),
    })
    with open(opts["samples_csv"]) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    cols = lines[0].split(",")
    if opts["column"] not in cols:
        raise ConfigError(f"column {opts['column']!r} not in {opts['samples_csv']}"
                          f" (have {cols})")
    j = cols.index(opts["column"])
    samples = np.array([float(ln.split(",")[j]) for ln in lines[1:]])
    snap = EnsembleSnapshot(t=opts["t"], samples=samples)
    hist = make_histogram(snap, rule=opts["binning"])
    _write_rows(out / "histogram.csv", headers,
                ["bin_lo", "bin_hi", "count", "density"],
                [(lo, hi, str(int(c)), d) for lo, hi, c, d in
                 zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.counts,
                     hist.density)])
    fit = None if hist.degenerate else fit_skew_normal(hist)
    write_fit_series_csv(out / "fit.csv", [snap.t], [fit], header_lines=headers)
    return 0


_COMMANDS = {
    "trajectory": cmd_trajectory,
    "ensemble": cmd_ensemble,
    "kf-scan": cmd_kf_scan,
    "phi-opt": cmd_phi_opt,
    "protocol": cmd_protocol,
    "stats": cmd_stats,
    "fit": cmd_fit,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kposense",
        description="Frequency sensing with a monitored Kerr parametric "
                    "oscillator: simulation, filtering, and the adaptive "
                    "protocol.")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel trajectory pipelines")
        p.add_argument("--deterministic", action="store_true",
                       help="suppress timestamps in provenance headers")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except OSError as err:
        print(f"error: cannot read config: {err}", file=sys.stderr)
        return 4
    except json.JSONDecodeError as err:
        print(f"error: config is not valid JSON: {err}", file=sys.stderr)
        return 2

    try:
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        kind = cfg.get("kind")
        if kind != args.command:
            raise ConfigError(f"config kind {kind!r} does not match "
                              f"subcommand {args.command!r}")
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        out = Path(args.out if args.out is not None else cfg.get("out") or ".")
        headers = _headers(kind, cfg, seed, args.deterministic)
        prov = _provenance(kind, cfg, seed, args.deterministic)
        out.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[kind](cfg, out, seed, args.workers, headers, prov)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (ValueError, ConvergenceError, SimulationError, FilterRunawayError,
            np.linalg.LinAlgError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
