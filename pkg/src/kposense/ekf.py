"""Continuous-discrete extended Kalman filter for the KPO state model.

Each measurement bin is processed in two steps. Prediction applies the
outcome-independent terms,

    x_bar = x + F(x) dt
    S_bar = [1 + (F' - G H) dt] S [1 + (F' - G H) dt]^T,

and the update applies the outcome-dependent ones,

    x <- x_bar + K (delta_y - H x_bar dt),    K = S_bar H^T + G(x_bar)
    S <- (1 - S_bar H^T H dt) S_bar (1 - S_bar H^T H dt)^T
         + S_bar H^T H S_bar dt.

Both covariance maps are congruences plus a rank-1 nonnegative term, so
positive semidefiniteness survives the discretization. Divergence is
handled by monitoring a scaled Frobenius norm of the mean vector and
re-initializing the filter when it crosses a threshold.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .dynamics import PriorInterval
from .simulate import EnsembleRecords, PhotocurrentRecord
from .state_model import (IX_OMEGA, ModelContext, diffusion_G, drift_F,
                          filter_vector, jacobian_F, observation_H)

RESTART_POLICIES = ("reset-to-init", "reset-to-latest-frequency")


class FilterRunawayError(RuntimeError):
    """The restart budget was exhausted."""


@dataclass
class FilterState:
    """EKF mean vector, covariance matrix, and current time."""

    x: np.ndarray
    Sigma: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(6)
        self.Sigma = np.asarray(self.Sigma, dtype=float).reshape(6, 6)

    @property
    def omega_est(self) -> float:
        return float(self.x[IX_OMEGA])

    def copy(self) -> "FilterState":
        return FilterState(self.x.copy(), self.Sigma.copy(), self.t)


@dataclass
class EkfConfig:
    """Filter configuration: step, divergence threshold, initialization."""

    dt: float
    f_max: float = 1e5
    init_mean: np.ndarray = None
    init_cov_diag: np.ndarray = None
    restart_policy: str = "reset-to-init"
    max_restarts: int = 100
    store_every: int = 0            # 0 disables full-state storage

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.f_max <= 0:
            raise ValueError(f"f_max must be positive, got {self.f_max}")
        if self.restart_policy not in RESTART_POLICIES:
            raise ValueError(f"unknown restart policy {self.restart_policy!r}")
        if self.init_mean is None:
            raise ValueError("init_mean is required")
        if self.init_cov_diag is None:
            raise ValueError("init_cov_diag is required")
        self.init_mean = np.asarray(self.init_mean, dtype=float)
        self.init_cov_diag = np.asarray(self.init_cov_diag, dtype=float)
        if np.any(self.init_cov_diag < 0):
            raise ValueError("init_cov_diag entries must be >= 0")


@dataclass
class EkfTrajectory:
    """Recorded filter output over one photocurrent record."""

    times: np.ndarray
    omega_estimates: np.ndarray
    restart_times: list = field(default_factory=list)
    restart_causes: list = field(default_factory=list)
    full_states: Optional[np.ndarray] = None       # (M, 6), decimated
    full_cov_diag: Optional[np.ndarray] = None     # (M, 6), decimated
    store_every: int = 0
    final_state: Optional[FilterState] = None

    @property
    def n_restarts(self) -> int:
        return len(self.restart_times)

    def omega_at(self, t: float) -> float:
        """Estimate at the grid point nearest t."""
        if len(self.times) < 2:
            return float(self.omega_estimates[0])
        i = int(np.clip(np.rint(t / (self.times[1] - self.times[0])), 0,
                        len(self.times) - 1))
        return float(self.omega_estimates[i])

    def write_csv(self, path, wide: bool = False,
                  header_lines: Optional[list] = None) -> None:
        if len(self.times) >= 2:
            restart_steps = {int(np.rint(t / (self.times[1] - self.times[0])))
                             for t in self.restart_times}
        else:
            restart_steps = set()
        with open(path, "w") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            if wide and self.full_states is not None and self.store_every == 1:
                fh.write("step,t,omega_est,restart_flag,X,P,sigma_x,sigma_p,"
                         "sigma_xp,cov_X,cov_P,cov_sx,cov_sp,cov_sxp,cov_omega\n")
                for n, (t, w) in enumerate(zip(self.times, self.omega_estimates)):
                    st = self.full_states[n]
                    cd = self.full_cov_diag[n]
                    cols = [f"{n}", f"{t:.17g}", f"{w:.17g}",
                            f"{int(n in restart_steps)}"]
                    cols += [f"{val:.17g}" for val in st[:5]]
                    cols += [f"{val:.17g}" for val in cd]
                    fh.write(",".join(cols) + "\n")
            else:
                fh.write("step,t,omega_est,restart_flag\n")
                for n, (t, w) in enumerate(zip(self.times, self.omega_estimates)):
                    fh.write(f"{n},{t:.17g},{w:.17g},{int(n in restart_steps)}\n")


class Prediction(NamedTuple):
    x_bar: np.ndarray
    Sigma_bar: np.ndarray


def init_filter(prior: PriorInterval, v: float, ctx: ModelContext) -> FilterState:
    """Standard initialization: vacuum moments, frequency at the prior midpoint.

    The covariance is diagonal with 1e-3 on the moment entries and
    kappa^2 * v on the frequency entry.
    """
    if v <= 0:
        raise ValueError(f"v must be positive, got {v}")
    mean = filter_vector(omega=prior.midpoint)
    cov = np.full(6, 1e-3)
    cov[IX_OMEGA] = ctx.kappa ** 2 * v
    return FilterState(mean, np.diag(cov), t=0.0)


def predict(state: FilterState, ctx: ModelContext, dt: float) -> Prediction:
    """Outcome-independent half step."""
    x = state.x
    F = drift_F(x, ctx)
    J = jacobian_F(x, ctx)
    G = diffusion_G(x, ctx)
    H = observation_H(ctx)
    x_bar = x + F * dt
    M = np.eye(6) + (J - np.outer(G, H)) * dt
    Sigma_bar = M @ state.Sigma @ M.T
    Sigma_bar = 0.5 * (Sigma_bar + Sigma_bar.T)
    if not np.all(np.isfinite(x_bar)):
        raise FloatingPointError("non-finite filter prediction")
    return Prediction(x_bar, Sigma_bar)


def update(pred: Prediction, delta_y: float, ctx: ModelContext,
           dt: float) -> FilterState:
    """Outcome-dependent half step; output covariance is symmetrized."""
    x_bar, Sigma_bar = pred
    H = observation_H(ctx)
    G = diffusion_G(x_bar, ctx)
    u = Sigma_bar @ H
    K = u + G
    innovation = delta_y - float(H @ x_bar) * dt
    x_new = x_bar + K * innovation
    M = np.eye(6) - dt * np.outer(u, H)
    Sigma_new = M @ Sigma_bar @ M.T + dt * np.outer(u, u)
    Sigma_new = 0.5 * (Sigma_new + Sigma_new.T)
    return FilterState(x_new, Sigma_new)


def frobenius_norm(x: np.ndarray, kappa: float = 1.0) -> float:
    """Divergence monitor: moment entries plus the frequency in kappa units."""
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.sum(x[..., :5] ** 2, axis=-1)
                         + (x[..., IX_OMEGA] / kappa) ** 2))


def run_ekf(record: PhotocurrentRecord, config: EkfConfig,
            ctx: ModelContext) -> EkfTrajectory:
    """Filter one record, restarting whenever the divergence monitor trips."""
    if not np.isclose(record.dt, config.dt, rtol=1e-12, atol=0):
        raise ValueError(f"record dt {record.dt} != config dt {config.dt}")
    dt = config.dt
    n_steps = len(record)
    times = dt * np.arange(n_steps + 1)
    omega = np.empty(n_steps + 1)
    restart_times, restart_causes = [], []
    store = config.store_every
    n_stored = n_steps // store + 1 if store else 0
    full_states = np.empty((n_stored, 6)) if store else None
    full_cov = np.empty((n_stored, 6)) if store else None

    state = FilterState(config.init_mean.copy(), np.diag(config.init_cov_diag))
    omega[0] = state.omega_est
    if store:
        full_states[0], full_cov[0] = state.x, np.diag(state.Sigma)

    for n in range(n_steps):
        prev_omega = state.x[IX_OMEGA]
        try:
            with np.errstate(all="ignore"):
                pred = predict(state, ctx, dt)
                state = update(pred, record.increments[n], ctx, dt)
            finite = np.all(np.isfinite(state.x)) and np.all(np.isfinite(state.Sigma))
        except FloatingPointError:
            finite = False
        if not finite:
            cause = "nonfinite"
        elif frobenius_norm(state.x, ctx.kappa) > config.f_max:
            cause = "threshold"
        else:
            cause = None
        if cause is not None:
            mean = config.init_mean.copy()
            if config.restart_policy == "reset-to-latest-frequency":
                mean[IX_OMEGA] = prev_omega
            state = FilterState(mean, np.diag(config.init_cov_diag))
            restart_times.append(times[n + 1])
            restart_causes.append(cause)
            if len(restart_times) > config.max_restarts:
                raise FilterRunawayError(
                    f"more than {config.max_restarts} restarts by t = {times[n + 1]:.4g}")
        state.t = times[n + 1]
        omega[n + 1] = state.omega_est
        if store and (n + 1) % store == 0:
            full_states[(n + 1) // store] = state.x
            full_cov[(n + 1) // store] = np.diag(state.Sigma)

    return EkfTrajectory(times=times, omega_estimates=omega,
                         restart_times=restart_times,
                         restart_causes=restart_causes,
                         full_states=full_states, full_cov_diag=full_cov,
                         store_every=store, final_state=state)


# ---------------------------------------------------------------------------
# Batched runner: all trajectories in lockstep. Context fields may be (B,)
# arrays, and the initialization may differ per row.

@dataclass
class EkfEnsemble:
    """Filter output for a batch of records sharing one time grid."""

    times: np.ndarray
    omega_estimates: np.ndarray            # (B, N+1)
    restart_counts: np.ndarray             # (B,) threshold events
    nonfinite_counts: np.ndarray           # (B,) non-finite events
    restart_times: list                    # list of per-row lists
    final_means: np.ndarray                # (B, 6)
    final_cov_diag: np.ndarray             # (B, 6)
    min_eigenvalue: float = np.nan         # running min of Sigma spectra

    @property
    def n_traj(self) -> int:
        return self.omega_estimates.shape[0]

    def omega_at(self, t: float) -> np.ndarray:
        dt = self.times[1] - self.times[0]
        i = int(np.clip(np.rint(t / dt), 0, len(self.times) - 1))
        return self.omega_estimates[:, i]


def run_ekf_ensemble(records, config: EkfConfig, ctx: ModelContext,
                     track_min_eig: bool = False) -> EkfEnsemble:
    """Filter a batch of records in lockstep.

    records is an EnsembleRecords or a (B, N) increments array at config.dt.
    Rows are processed independently, so the result for any row matches a
    standalone run on that record. track_min_eig additionally monitors the
    smallest eigenvalue of every covariance after every step (a positivity
    audit; roughly doubles the cost).
    """
    if isinstance(records, EnsembleRecords):
        if not np.isclose(records.dt, config.dt, rtol=1e-12, atol=0):
            raise ValueError(f"record dt {records.dt} != config dt {config.dt}")
        increments = records.increments
    else:
        increments = np.asarray(records, dtype=float)
    B, n_steps = increments.shape
    dt = config.dt
    times = dt * np.arange(n_steps + 1)

    x = np.broadcast_to(config.init_mean, (B, 6)).astype(float).copy()
    init_mean = x.copy()
    cov_diag = np.broadcast_to(config.init_cov_diag, (B, 6)).astype(float)
    Sigma = np.zeros((B, 6, 6))
    rows = np.arange(B)
    diag = np.arange(6)
    Sigma[:, diag, diag] = cov_diag

    H = np.broadcast_to(observation_H(ctx), (B, 6)).copy()
    kappa = np.broadcast_to(np.asarray(ctx.kappa, dtype=float), (B,))
    eye6 = np.eye(6)

    omega = np.empty((B, n_steps + 1))
    omega[:, 0] = x[:, IX_OMEGA]
    restart_counts = np.zeros(B, dtype=int)
    nonfinite_counts = np.zeros(B, dtype=int)
    restart_times = [[] for _ in range(B)]
    min_eig = np.inf if track_min_eig else np.nan

    for n in range(n_steps):
        prev_omega = x[:, IX_OMEGA].copy()
        with np.errstate(all="ignore"):
            # prediction
            F = drift_F(x, ctx)
            J = jacobian_F(x, ctx)
            G = diffusion_G(x, ctx)
            x_bar = x + F * dt
            M = eye6 + (J - G[:, :, None] * H[:, None, :]) * dt
            Sigma_bar = M @ Sigma @ np.swapaxes(M, 1, 2)
            Sigma_bar = 0.5 * (Sigma_bar + np.swapaxes(Sigma_bar, 1, 2))
            # update
            G_bar = diffusion_G(x_bar, ctx)
            u = (Sigma_bar @ H[:, :, None])[..., 0]
            K = u + G_bar
            innovation = increments[:, n] - np.einsum("bi,bi->b", H, x_bar) * dt
            x = x_bar + K * innovation[:, None]
            M2 = eye6 - dt * u[:, :, None] * H[:, None, :]
            Sigma = M2 @ Sigma_bar @ np.swapaxes(M2, 1, 2) + dt * u[:, :, None] * u[:, None, :]
            Sigma = 0.5 * (Sigma + np.swapaxes(Sigma, 1, 2))

            finite = np.isfinite(x).all(axis=1) & np.isfinite(Sigma).all(axis=(1, 2))
            norm2 = np.einsum("bi,bi->b", x[:, :5], x[:, :5]) + (x[:, IX_OMEGA] / kappa) ** 2
            tripped = finite & (norm2 > config.f_max ** 2)
        bad = tripped | ~finite
        if np.any(bad):
            idx = rows[bad]
            x[idx] = init_mean[idx]
            if config.restart_policy == "reset-to-latest-frequency":
                x[idx, IX_OMEGA] = prev_omega[idx]
            Sigma[idx] = 0.0
            Sigma[idx[:, None], diag, diag] = cov_diag[idx]
            restart_counts[idx] += tripped[idx]
            nonfinite_counts[idx] += ~finite[idx]
            t_now = times[n + 1]
            for i in idx:
                restart_times[i].append(t_now)
            total = restart_counts + nonfinite_counts
            if np.any(total > config.max_restarts):
                worst = int(np.argmax(total))
                raise FilterRunawayError(
                    f"row {worst}: more than {config.max_restarts} restarts "
                    f"by t = {t_now:.4g}")
        omega[:, n + 1] = x[:, IX_OMEGA]
        if track_min_eig:
            min_eig = min(min_eig, float(np.linalg.eigvalsh(Sigma).min()))

    return EkfEnsemble(times=times, omega_estimates=omega,
                       restart_counts=restart_counts,
                       nonfinite_counts=nonfinite_counts,
                       restart_times=restart_times,
                       final_means=x.copy(),
                       final_cov_diag=Sigma[:, diag, diag].copy(),
                       min_eigenvalue=min_eig)
