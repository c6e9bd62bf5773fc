"""Ground-truth conditional trajectories and synthetic homodyne records.

The conditional mean is advanced by Euler-Maruyama; the conditional
covariance obeys a deterministic (noise-free) flow and is advanced with a
fixed-step 4th-order scheme inside the same loop. The recorded increment
for a time bin [n*dt, (n+1)*dt) is

    delta_y = sqrt(2*kappa*eta) * (X cos(phi) + P sin(phi)) * dt + dw,

evaluated with the pre-step means (Ito convention).

Reproducibility: every trajectory owns a NoiseStream keyed by
(base_seed, stream_index); identical keys reproduce bit-identical
increments, distinct stream indices give independent sequences.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import GaussianState, OscillatorParams, covariance_flow, drift_matrix

_BINARY_MAGIC = b"KPOREC01"
STATE_GUARD = 1e8


class SimulationError(RuntimeError):
    """Truth simulation produced a non-finite or runaway state."""


@dataclass(frozen=True)
class NoiseStream:
    """Reproducible Wiener-increment source for one trajectory."""

    base_seed: int
    stream_index: int = 0

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.base_seed,
                                     spawn_key=(self.stream_index,))
        return np.random.Generator(np.random.PCG64(seq))

    def wiener_increments(self, n: int, dt: float) -> np.ndarray:
        """n Wiener increments with variance dt."""
        return self.generator().normal(0.0, np.sqrt(dt), size=n)


@dataclass
class PhotocurrentRecord:
    """Measured increment sequence and the parameters that generated it."""

    dt: float
    increments: np.ndarray
    params_tag: OscillatorParams

    def __post_init__(self):
        self.increments = np.asarray(self.increments, dtype=float).reshape(-1)

    @property
    def duration(self) -> float:
        return len(self.increments) * self.dt

    def __len__(self) -> int:
        return len(self.increments)

    def write_csv(self, path, header_lines: Optional[list] = None) -> None:
        """Columns step, t, delta_y; t is the start of the time bin."""
        with open(path, "w") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            fh.write("step,t,delta_y\n")
            for n, dy in enumerate(self.increments):
                fh.write(f"{n},{n * self.dt:.17g},{dy:.17g}\n")

    def write_binary(self, path) -> None:
        p = self.params_tag
        head = struct.pack("<d", self.dt) + struct.pack("<Q", len(self))
        head += struct.pack("<5d", p.omega, p.epsilon, p.kappa, p.eta, p.phi)
        with open(path, "wb") as fh:
            fh.write(_BINARY_MAGIC + head)
            fh.write(np.ascontiguousarray(self.increments, dtype="<f8").tobytes())

    @classmethod
    def read_binary(cls, path) -> "PhotocurrentRecord":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:8] != _BINARY_MAGIC:
            raise ValueError(f"{path}: not a photocurrent record container")
        dt, = struct.unpack_from("<d", blob, 8)
        n, = struct.unpack_from("<Q", blob, 16)
        omega, epsilon, kappa, eta, phi = struct.unpack_from("<5d", blob, 24)
        payload = np.frombuffer(blob, dtype="<f8", count=n, offset=64)
        params = OscillatorParams(omega=omega, epsilon=epsilon, kappa=kappa,
                                  eta=eta, phi=phi)
        return cls(dt=dt, increments=payload.copy(), params_tag=params)


@dataclass
class TruthTrajectory:
    """Conditional-moment trajectory on the record grid."""

    times: np.ndarray
    means: np.ndarray      # (N+1, 2)
    sigmas: np.ndarray     # (N+1, 2, 2)

    def __len__(self) -> int:
        return len(self.times)

    def state(self, i: int) -> GaussianState:
        return GaussianState(self.means[i], self.sigmas[i])

    @property
    def states(self):
        return [self.state(i) for i in range(len(self))]

    def min_sigma_eigenvalue(self) -> float:
        sym = 0.5 * (self.sigmas + np.swapaxes(self.sigmas, -1, -2))
        return float(np.linalg.eigvalsh(sym).min())


def _rk4_sigma(sigma: np.ndarray, params: OscillatorParams, dt: float) -> np.ndarray:
    k1 = covariance_flow(sigma, params)
    k2 = covariance_flow(sigma + 0.5 * dt * k1, params)
    k3 = covariance_flow(sigma + 0.5 * dt * k2, params)
    k4 = covariance_flow(sigma + dt * k3, params)
    out = sigma + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return 0.5 * (out + out.T)


def step_truth(state: GaussianState, params: OscillatorParams, dt: float,
               dw: float):
    """Advance the conditional state by one time step.

    Returns the new state and the photocurrent increment delta_y produced
    during the step.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    v = np.array([np.cos(params.phi), np.sin(params.phi)])
    A = drift_matrix(params)
    back = np.sqrt(params.eta * params.kappa / 2.0)
    meas = np.sqrt(2.0 * params.kappa * params.eta)

    delta_y = meas * float(v @ state.r) * dt + dw
    r_new = state.r + (A @ state.r) * dt + back * ((state.sigma - np.eye(2)) @ v) * dw
    sigma_new = _rk4_sigma(state.sigma, params, dt)
    if not (np.all(np.isfinite(r_new)) and np.all(np.isfinite(sigma_new))):
        raise SimulationError("non-finite conditional state after step")
    return GaussianState(r_new, sigma_new), float(delta_y)


def simulate_truth(params: OscillatorParams, init: Optional[GaussianState] = None,
                   dt: float = 0.02, duration: float = 100.0,
                   noise: NoiseStream = NoiseStream(0), refine: int = 1):
    """Simulate one trajectory and its photocurrent record.

    refine > 1 integrates with dt/refine internal substeps per record bin;
    the recorded increment aggregates the substep increments.
    """
    if duration < 0:
        raise ValueError(f"duration must be >= 0, got {duration}")
    if refine < 1:
        raise ValueError(f"refine must be >= 1, got {refine}")
    n_steps = int(round(duration / dt))
    dt_sub = dt / refine
    dws = noise.wiener_increments(n_steps * refine, dt_sub)

    state = (init or GaussianState.vacuum()).copy()
    times = dt * np.arange(n_steps + 1)
    means = np.empty((n_steps + 1, 2))
    sigmas = np.empty((n_steps + 1, 2, 2))
    means[0], sigmas[0] = state.r, state.sigma
    increments = np.empty(n_steps)

    for n in range(n_steps):
        dy = 0.0
        for j in range(refine):
            state, dy_sub = step_truth(state, params, dt_sub, dws[n * refine + j])
            dy += dy_sub
        if np.max(np.abs(state.r)) > STATE_GUARD or np.max(np.abs(state.sigma)) > STATE_GUARD:
            raise SimulationError(
                f"state exceeded guard {STATE_GUARD:g} at step {n + 1} "
                f"(t = {(n + 1) * dt:.4g}); parameters are likely unstable")
        increments[n] = dy
        means[n + 1], sigmas[n + 1] = state.r, state.sigma

    record = PhotocurrentRecord(dt=dt, increments=increments, params_tag=params)
    return TruthTrajectory(times, means, sigmas), record


# ---------------------------------------------------------------------------
# Batched ensemble generation. Parameters may be scalars or (B,) arrays; all
# B trajectories march in lockstep on a shared time grid, each driven by its
# own noise stream.

@dataclass
class EnsembleRecords:
    """Photocurrent increments for a batch of trajectories (B, N)."""

    dt: float
    increments: np.ndarray
    stream_indices: np.ndarray
    params_tag: OscillatorParams
    final_means: np.ndarray = field(default=None, repr=False)
    final_sigmas: np.ndarray = field(default=None, repr=False)

    @property
    def n_traj(self) -> int:
        return self.increments.shape[0]

    def record(self, i: int) -> PhotocurrentRecord:
        return PhotocurrentRecord(self.dt, self.increments[i].copy(),
                                  self.params_tag)


def _batch_arrays(omega, epsilon, kappa, eta, phi, batch: int):
    """Broadcast parameter fields to (B,) float arrays."""
    out = []
    for val in (omega, epsilon, kappa, eta, phi):
        out.append(np.broadcast_to(np.asarray(val, dtype=float), (batch,)).copy())
    return out


def _batched_drift(omega, epsilon, kappa):
    B = len(omega)
    A = np.empty((B, 2, 2))
    A[:, 0, 0] = -0.5 * kappa
    A[:, 0, 1] = omega - epsilon
    A[:, 1, 0] = -omega - epsilon
    A[:, 1, 1] = -0.5 * kappa
    return A


def _batched_cov_flow(sig, A, v, etak, kappa):
    """Covariance flow for (B, 2, 2) states with per-row parameters."""
    lin = A @ sig
    lin = lin + np.swapaxes(lin, -1, -2)
    lin[:, 0, 0] += kappa
    lin[:, 1, 1] += kappa
    dev = sig.copy()
    dev[:, 0, 0] -= 1.0
    dev[:, 1, 1] -= 1.0
    u = (dev @ v[..., None])[..., 0]            # (B, 2) = (sigma - I) v
    return lin - etak[:, None, None] * (u[:, :, None] * u[:, None, :])


def _batched_rk4_sigma(sig, A, v, etak, kappa, dt):
    k1 = _batched_cov_flow(sig, A, v, etak, kappa)
    k2 = _batched_cov_flow(sig + 0.5 * dt * k1, A, v, etak, kappa)
    k3 = _batched_cov_flow(sig + 0.5 * dt * k2, A, v, etak, kappa)
    k4 = _batched_cov_flow(sig + dt * k3, A, v, etak, kappa)
    out = sig + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def simulate_record_ensemble(params: OscillatorParams, n_traj: int,
                             dt: float = 0.02, duration: float = 100.0,
                             base_seed: int = 0, stream_start: int = 0,
                             refine: int = 1,
                             init: Optional[GaussianState] = None) -> EnsembleRecords:
    """Generate n_traj independent records at common parameters."""
    streams = np.arange(stream_start, stream_start + n_traj)
    n_steps = int(round(duration / dt))
    dt_sub = dt / refine
    dw = np.empty((n_traj, n_steps * refine))
    for i, s in enumerate(streams):
        dw[i] = NoiseStream(base_seed, int(s)).wiener_increments(n_steps * refine, dt_sub)
    init = init or GaussianState.vacuum()
    r0 = np.broadcast_to(init.r, (n_traj, 2)).copy()
    s0 = np.broadcast_to(init.sigma, (n_traj, 2, 2)).copy()
    inc, r_fin, s_fin = _record_kernel(
        params.omega, params.epsilon, params.kappa, params.eta, params.phi,
        r0, s0, dw, dt_sub, refine)
    return EnsembleRecords(dt=dt, increments=inc, stream_indices=streams,
                           params_tag=params, final_means=r_fin,
                           final_sigmas=s_fin)


def _record_kernel(omega, epsilon, kappa, eta, phi, r0, sigma0, dw,
                   dt_sub: float, refine: int):
    """Lockstep truth integration; parameters broadcast to the batch.

    dw has shape (B, N*refine); returns (B, N) record increments plus the
    final means and covariances.
    """
    B = dw.shape[0]
    omega, epsilon, kappa, eta, phi = _batch_arrays(omega, epsilon, kappa, eta, phi, B)
    A = _batched_drift(omega, epsilon, kappa)
    v = np.stack([np.cos(phi), np.sin(phi)], axis=-1)       # (B, 2)
    etak = eta * kappa
    back = np.sqrt(0.5 * etak)
    meas = np.sqrt(2.0 * etak)

    r = np.asarray(r0, dtype=float).copy()
    sig = np.asarray(sigma0, dtype=float).copy()
    n_total = dw.shape[1]
    n_rec = n_total // refine
    inc = np.zeros((B, n_rec))

    for j in range(n_total):
        dwj = dw[:, j]
        xphi = np.einsum("bi,bi->b", v, r)
        inc[:, j // refine] += meas * xphi * dt_sub + dwj
        dev_v = ((sig - np.eye(2)) @ v[..., None])[..., 0]
        r = r + (A @ r[..., None])[..., 0] * dt_sub + back[:, None] * dev_v * dwj[:, None]
        sig = _batched_rk4_sigma(sig, A, v, etak, kappa, dt_sub)
        if (j + 1) % 1024 == 0 or j == n_total - 1:
            peak = max(np.abs(r).max(), np.abs(sig).max())
            if not np.isfinite(peak) or peak > STATE_GUARD:
                bad = int(np.argmax(np.abs(r).max(axis=1)))
                raise SimulationError(
                    f"ensemble state exceeded guard {STATE_GUARD:g} near substep "
                    f"{j + 1} (trajectory row {bad}); parameters are likely unstable")
    return inc, r, sig
