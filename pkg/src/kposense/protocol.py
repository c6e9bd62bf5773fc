"""Iterative global sensing protocol with adaptive control.

Each iteration simulates an ensemble of monitored-oscillator records at
the current controls (epsilon_i, phi_i), filters every record, fits the
ensemble distribution of frequency estimates at the readout time, and
moves the controls toward the estimated critical point:

    epsilon_{i+1} = midpoint(epsilon_i, eps_c(omega_est)),
    phi_{i+1}     = optimal_phase(omega_est, epsilon_{i+1}, eta).

The initial drive sits a configured margin below eps_c(omega_l), which
keeps the sensor in the normal phase for any true frequency inside the
prior interval.
"""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .dynamics import (OscillatorParams, PriorInterval, critical_amplitude,
                       stability_margin)
from .ekf import EkfConfig, run_ekf_ensemble
from .estimator import (EnsembleSnapshot, SkewNormalFit, fit_skew_normal,
                        make_histogram)
from .fisher import optimal_phase
from .simulate import simulate_record_ensemble
from .state_model import IX_OMEGA, ModelContext, filter_vector


class Controls(NamedTuple):
    epsilon: float
    phi: float
    clamped: bool = False


@dataclass
class ProtocolConfig:
    """Configuration of one protocol run."""

    prior: PriorInterval
    eta: float
    n_traj: int = 200
    n_iterations: int = 3
    t_star: float = 300.0
    t_large: Optional[float] = None      # defaults to t_star
    epsilon_margin: float = 0.1
    dt: float = 0.02
    f_max: float = 1e5
    v: float = 1.0
    kappa: float = 1.0
    restart_policy: str = "reset-to-init"
    filter_init: str = "prior-midpoint"  # or "carry-forward"
    max_restarts: int = 10_000           # per-trajectory budget inside ensembles
    n_estimate_times: int = 24
    binning: object = "shorth"              # rule passed to make_histogram
    base_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.epsilon_margin <= 0:
            raise ValueError("epsilon_margin must be positive")
        if self.epsilon_margin >= critical_amplitude(self.prior.omega_l, self.kappa):
            raise ValueError("epsilon_margin leaves a nonpositive initial drive")
        if self.filter_init not in ("prior-midpoint", "carry-forward"):
            raise ValueError(f"unknown filter_init {self.filter_init!r}")
        if self.t_large is None:
            self.t_large = self.t_star
        if not 0 < self.t_large <= self.t_star:
            raise ValueError("t_large must lie in (0, t_star]")


@dataclass
class IterationRecord:
    """Controls, ensemble summary, and estimate for one iteration."""

    index: int
    epsilon: float
    phi: float
    clamped: bool
    times: np.ndarray = None
    estimates: np.ndarray = None            # fitted mode per time, NaN on failure
    fit: Optional[SkewNormalFit] = None     # at t_large
    omega_est: float = np.nan
    samples: np.ndarray = None              # (n_traj, n_times) estimate matrix
    ensemble_mean: float = np.nan
    ensemble_std: float = np.nan
    sigma_tilde_omega: float = np.nan       # mean filter variance of the frequency
    restart_count: int = 0
    nonfinite_count: int = 0
    unstable_truth: bool = False
    failed: bool = False

    def write_ensemble_csv(self, path, header_lines=None) -> None:
        """Long-format ensemble: columns traj, t, omega_est."""
        with open(path, "w") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            fh.write("traj,t,omega_est\n")
            for j in range(self.samples.shape[0]):
                for t, w in zip(self.times, self.samples[j]):
                    fh.write(f"{j},{t:.17g},{w:.17g}\n")


def update_amplitude(eps_prev: float, eps_target: float) -> float:
    """Midpoint update; strictly between distinct arguments."""
    return 0.5 * (eps_prev + eps_target)


def initial_controls(prior: PriorInterval, margin: float, eta: float,
                     kappa: float = 1.0) -> Controls:
    """Starting drive a safety margin below eps_c(omega_l), phase optimal
    for the prior midpoint."""
    eps_c_low = critical_amplitude(prior.omega_l, kappa)
    if margin <= 0 or margin >= eps_c_low:
        raise ValueError(f"margin must lie in (0, eps_c(omega_l)={eps_c_low:.4g})")
    eps0 = eps_c_low - margin
    phi0 = optimal_phase(prior.midpoint, eps0, eta, kappa)
    return Controls(epsilon=eps0, phi=phi0, clamped=False)


def next_controls(omega_est: float, eps_prev: float, eta: float,
                  kappa: float = 1.0, margin: float = 0.1) -> Controls:
    """Adaptive update toward the critical point of the estimated frequency.

    A negative estimate enters the boundary formula as zero. If the
    midpoint lands on or above the target boundary (possible when the
    estimate drifted below the previous drive), the drive is clamped to
    eps_c(omega_est) - margin/2 and the result is flagged.
    """
    if not np.isfinite(omega_est):
        raise ValueError(f"omega_est must be finite, got {omega_est}")
    target = critical_amplitude(max(omega_est, 0.0), kappa)
    eps_next = update_amplitude(eps_prev, target)
    clamped = False
    if eps_next >= target:
        eps_next = target - 0.5 * margin
        clamped = True
    phi_next = optimal_phase(max(omega_est, 0.0), eps_next, eta, kappa)
    return Controls(epsilon=eps_next, phi=phi_next, clamped=clamped)


def _estimate_step_indices(config: ProtocolConfig) -> np.ndarray:
    n_steps = int(round(config.t_star / config.dt))
    grid = np.linspace(config.t_star / config.n_estimate_times, config.t_star,
                       config.n_estimate_times)
    idx = np.rint(grid / config.dt).astype(int)
    idx = np.append(idx, int(round(config.t_large / config.dt)))
    return np.unique(np.clip(idx, 1, n_steps))


def _ensemble_chunk(args):
    """Simulate + filter a contiguous block of trajectories (picklable task)."""
    (omega_true, epsilon, kappa, eta, phi, dt, duration, base_seed,
     stream_start, n_traj, init_mean, init_cov, f_max, restart_policy,
     max_restarts, step_idx) = args
    params = OscillatorParams(omega=omega_true, epsilon=epsilon, kappa=kappa,
                              eta=eta, phi=phi)
    records = simulate_record_ensemble(params, n_traj, dt=dt, duration=duration,
                                       base_seed=base_seed,
                                       stream_start=stream_start)
    ekf_config = EkfConfig(dt=dt, f_max=f_max, init_mean=init_mean,
                           init_cov_diag=init_cov,
                           restart_policy=restart_policy,
                           max_restarts=max_restarts)
    ctx = ModelContext(epsilon=epsilon, kappa=kappa, eta=eta, phi=phi)
    result = run_ekf_ensemble(records, ekf_config, ctx)
    samples = result.omega_estimates[:, step_idx]
    return (samples, int(result.restart_counts.sum()),
            int(result.nonfinite_counts.sum()),
            result.final_cov_diag[:, IX_OMEGA])


def run_pipelines(omega_true: float, epsilon: float, kappa: float, eta: float,
                  phi: float, dt: float, duration: float, base_seed: int,
                  stream_start: int, n_traj: int, init_mean, init_cov,
                  f_max: float, restart_policy: str, max_restarts: int,
                  step_idx: np.ndarray, workers: int = 1):
    """Run n_traj independent trajectory+filter pipelines.

    Work is split into per-worker chunks of contiguous stream indices;
    results are concatenated in stream order, so the output is independent
    of the worker count. Returns the (n_traj, len(step_idx)) matrix of
    frequency estimates plus restart/nonfinite totals and the final filter
    variance of the frequency entry per trajectory.
    """
    tasks = []
    n_chunks = max(1, min(workers, n_traj))
    bounds = np.linspace(0, n_traj, n_chunks + 1).astype(int)
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if hi > lo:
            tasks.append((omega_true, epsilon, kappa, eta, phi, dt, duration,
                          base_seed, stream_start + lo, hi - lo, init_mean,
                          init_cov, f_max, restart_policy, max_restarts,
                          step_idx))
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_ensemble_chunk, tasks))
    else:
        parts = [_ensemble_chunk(task) for task in tasks]
    samples = np.concatenate([p[0] for p in parts], axis=0)
    restarts = sum(p[1] for p in parts)
    nonfinite = sum(p[2] for p in parts)
    sigma_omega = np.concatenate([p[3] for p in parts])
    return samples, restarts, nonfinite, sigma_omega


def collect_ensemble(config: ProtocolConfig, omega_true: float, epsilon: float,
                     phi: float, omega_guess: float, stream_start: int,
                     step_idx: np.ndarray):
    """Run the n_traj trajectory+filter pipelines of one iteration."""
    init_mean = filter_vector(omega=omega_guess)
    init_cov = np.array([1e-3] * 5 + [config.v * config.kappa ** 2])
    return run_pipelines(omega_true, epsilon, config.kappa, config.eta, phi,
                         config.dt, config.t_star, config.base_seed,
                         stream_start, config.n_traj, init_mean, init_cov,
                         config.f_max, config.restart_policy,
                         config.max_restarts, step_idx, workers=config.workers)


def _fit_estimate_curve(samples: np.ndarray, times: np.ndarray,
                        binning="shorth") -> np.ndarray:
    """Fitted mode at every estimate time; NaN where the fit is unusable."""
    curve = np.full(len(times), np.nan)
    for k, t in enumerate(times):
        snap = EnsembleSnapshot(t=t, samples=samples[:, k])
        try:
            hist = make_histogram(snap, rule=binning)
            if hist.degenerate:
                continue
            fit = fit_skew_normal(hist)
            curve[k] = fit.mode
        except (ValueError, np.linalg.LinAlgError):
            continue
    return curve


def run_protocol(config: ProtocolConfig, omega_true: float) -> list:
    """Execute the adaptive protocol; returns one record per iteration.

    A fit failure at the readout time or an unstable truth configuration
    marks the iteration and halts with the records collected so far.
    """
    controls = initial_controls(config.prior, config.epsilon_margin,
                                config.eta, config.kappa)
    omega_guess = config.prior.midpoint
    step_idx = _estimate_step_indices(config)
    times = step_idx * config.dt
    t_large_col = int(np.argmin(np.abs(times - config.t_large)))
    records = []

    for i in range(config.n_iterations):
        rec = IterationRecord(index=i, epsilon=controls.epsilon,
                              phi=controls.phi, clamped=controls.clamped)
        records.append(rec)
        truth = OscillatorParams(omega=omega_true, epsilon=controls.epsilon,
                                 kappa=config.kappa, eta=config.eta,
                                 phi=controls.phi)
        if stability_margin(truth) >= 0:
            rec.unstable_truth = True
            rec.failed = True
            return records

        samples, restarts, nonfinite, sigma_omega = collect_ensemble(
            config, omega_true, controls.epsilon, controls.phi, omega_guess,
            stream_start=i * config.n_traj, step_idx=step_idx)
        rec.times = times
        rec.samples = samples
        rec.restart_count = restarts
        rec.nonfinite_count = nonfinite
        rec.sigma_tilde_omega = float(sigma_omega.mean())

        at_large = samples[:, t_large_col]
        rec.ensemble_mean = float(at_large.mean())
        rec.ensemble_std = float(at_large.std(ddof=0))
        try:
            hist = make_histogram(EnsembleSnapshot(t=config.t_large, samples=at_large),
                                  rule=config.binning)
            if hist.degenerate:
                raise ValueError("degenerate ensemble at readout time")
            rec.fit = fit_skew_normal(hist)
        except (ValueError, np.linalg.LinAlgError):
            rec.failed = True
            return records
        rec.omega_est = rec.fit.mode
        rec.estimates = _fit_estimate_curve(samples, times, binning=config.binning)

        if i + 1 < config.n_iterations:
            controls = next_controls(rec.omega_est, controls.epsilon,
                                     config.eta, config.kappa,
                                     margin=config.epsilon_margin)
            if config.filter_init == "carry-forward":
                omega_guess = rec.omega_est
    return records


def protocol_document(config: ProtocolConfig, omega_true: float, records,
                      csv_refs: Optional[dict] = None) -> dict:
    """JSON-serializable summary of a protocol run."""
    doc = {
        "omega_true": omega_true,
        "config": {
            "prior": [config.prior.omega_l, config.prior.omega_h],
            "eta": config.eta,
            "n_traj": config.n_traj,
            "n_iterations": config.n_iterations,
            "t_star": config.t_star,
            "t_large": config.t_large,
            "epsilon_margin": config.epsilon_margin,
            "dt": config.dt,
            "f_max": config.f_max,
            "v": config.v,
            "kappa": config.kappa,
            "restart_policy": config.restart_policy,
            "filter_init": config.filter_init,
            "base_seed": config.base_seed,
        },
        "iterations": [],
    }
    for rec in records:
        entry = {
            "index": rec.index,
            "epsilon": rec.epsilon,
            "phi": rec.phi,
            "clamped": rec.clamped,
            "failed": rec.failed,
            "unstable_truth": rec.unstable_truth,
            "omega_est": None if np.isnan(rec.omega_est) else rec.omega_est,
            "ensemble_mean": None if np.isnan(rec.ensemble_mean) else rec.ensemble_mean,
            "ensemble_std": None if np.isnan(rec.ensemble_std) else rec.ensemble_std,
            "sigma_tilde_omega": None if np.isnan(rec.sigma_tilde_omega)
                                 else rec.sigma_tilde_omega,
            "restart_count": rec.restart_count,
            "nonfinite_count": rec.nonfinite_count,
        }
        if rec.fit is not None:
            entry["fit"] = {
                "amplitude": rec.fit.amplitude, "mu": rec.fit.mu,
                "sigma": rec.fit.sigma, "alpha": rec.fit.alpha,
                "mode": rec.fit.mode, "converged": rec.fit.converged,
                "residual": rec.fit.residual,
            }
        if rec.times is not None:
            entry["estimate_curve"] = {
                "t": rec.times.tolist(),
                "omega_est": [None if np.isnan(w) else w for w in rec.estimates]
                             if rec.estimates is not None else None,
            }
        if csv_refs and rec.index in csv_refs:
            entry["ensemble_csv"] = csv_refs[rec.index]
        doc["iterations"].append(entry)
    return doc


def write_protocol_json(path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
