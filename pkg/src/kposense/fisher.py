"""Fisher-information growth rate of the homodyne record and phase choice.

The information about the frequency accumulates linearly at long times,
with rate

    k_F = 2 eta kappa lim E[ (d_omega r)^T B (d_omega r) ],

where d_omega r is the sensitivity of the conditional mean to the model
frequency at a fixed measurement record. Writing the mean dynamics in
terms of the record and differentiating gives

    dr = A r dt + sqrt(eta k / 2) (sigma - I) v dw,
    ds = J r dt + [A - eta k (sigma - I) B] s dt
         + sqrt(eta k / 2) (d_omega sigma) v dw,

with s = d_omega r and J = dA/d(omega); the record-feedback term
-eta k (sigma - I) B is what distinguishes the sensitivity drift from the
plain mean drift. Two routes compute k_F:

- Deterministic (primary): once the conditional covariance settles, the
  pair (r, s) obeys a linear SDE with constant coefficients; the
  stationary second moment solves a 4x4 Lyapunov equation, giving k_F
  without sampling noise.
- Monte Carlo (validation): co-integrate (r, s) over an ensemble of
  records and time-average the integrand over the stationary tail.

The optimal homodyne phase maximizes k_F over [0, pi); it is found on a
coarse grid and refined by golden-section search.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import ConvergenceError, OscillatorParams, stability_margin
from .optimize import golden_section_max
from .simulate import NoiseStream

# d(A)/d(omega): rotation generator of the drift matrix.
J_OMEGA = np.array([[0.0, 1.0], [-1.0, 0.0]])


@dataclass
class SensitivityState:
    """Sensitivity pair: s = d_omega r and dsigma = d_omega sigma."""

    s: np.ndarray = field(default_factory=lambda: np.zeros(2))
    dsigma: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float).reshape(2)
        self.dsigma = np.asarray(self.dsigma, dtype=float).reshape(2, 2)


@dataclass
class KfScan:
    """Growth rate sampled over homodyne phases in [0, pi)."""

    phases: np.ndarray
    rates: np.ndarray
    argmax_phase: float
    flat: bool = False

    def write_csv(self, path, header_lines: Optional[list] = None) -> None:
        with open(path, "w") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            fh.write("phi,k_F\n")
            for p, r in zip(self.phases, self.rates):
                fh.write(f"{p:.17g},{r:.17g}\n")


def _require_stable(params: OscillatorParams):
    m = stability_margin(params)
    if m >= 0:
        raise ValueError(f"parameters are not in the normal phase "
                         f"(stability margin {m:.4g} >= 0)")


def _sigma_flow_batch(sig, A, v, etak, kappa):
    """Covariance flow for (M, 2, 2) states; one phase per row."""
    lin = A @ sig
    lin = lin + np.swapaxes(lin, -1, -2)
    lin[..., 0, 0] += kappa
    lin[..., 1, 1] += kappa
    dev = sig.copy()
    dev[..., 0, 0] -= 1.0
    dev[..., 1, 1] -= 1.0
    u = (dev @ v[..., None])[..., 0]
    return lin - etak * u[..., :, None] * u[..., None, :]


def _dsigma_flow_batch(dsig, sig, A, v, etak, kappa):
    """Flow of d_omega sigma along a given sigma; linear in dsig."""
    src = J_OMEGA @ sig
    src = src + np.swapaxes(src, -1, -2)
    lin = A @ dsig
    lin = lin + np.swapaxes(lin, -1, -2)
    dev = sig.copy()
    dev[..., 0, 0] -= 1.0
    dev[..., 1, 1] -= 1.0
    p = (dsig @ v[..., None])[..., 0]
    q = (dev @ v[..., None])[..., 0]
    cross = p[..., :, None] * q[..., None, :] + q[..., :, None] * p[..., None, :]
    return src + lin - etak * cross


def _steady_pair(params: OscillatorParams, phases: np.ndarray,
                 tol: float = 1e-9, t_max: float = 400.0, dt: float = 0.05,
                 warm=None):
    """Relax sigma and d_omega sigma to stationarity for a batch of phases.

    The stop criterion is relative (residual below tol times the state
    scale); the fixed point of the integration map coincides with the flow's
    for any step, so the relax step only has to keep the iteration stable.
    warm optionally supplies (sigma0, dsigma0) starting points, e.g. the
    stationary pair of a nearby phase; the fixed point is unique in the
    normal phase, so warm starts change only the convergence time.
    """
    _require_stable(params)
    phases = np.atleast_1d(np.asarray(phases, dtype=float))
    M = len(phases)
    w, e, k, eta = params.omega, params.epsilon, params.kappa, params.eta
    A = np.array([[-0.5 * k, w - e], [-w - e, -0.5 * k]])
    v = np.stack([np.cos(phases), np.sin(phases)], axis=-1)
    etak = eta * k

    def relax(flow, y0, label):
        # stiff transients can destabilize the fixed-step iteration; retry
        # with a smaller step when the state stops being finite
        step = dt
        for _ in range(5):
            y = y0.copy()
            n_steps = int(round(t_max / step))
            with np.errstate(all="ignore"):
                for n in range(n_steps):
                    k1 = flow(y)
                    if not np.all(np.isfinite(k1)):
                        y = None
                        break
                    if np.max(np.abs(k1)) < tol * (1.0 + np.max(np.abs(y))):
                        return y
                    k2 = flow(y + 0.5 * step * k1)
                    k3 = flow(y + 0.5 * step * k2)
                    k4 = flow(y + step * k3)
                    y = y + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                    y = 0.5 * (y + np.swapaxes(y, -1, -2))
            if y is None or not np.all(np.isfinite(y)):
                step /= 4.0
                continue
            raise ConvergenceError(
                f"{label} relaxation missed tol={tol:g} within t_max={t_max:g} "
                f"(residual {np.max(np.abs(flow(y))):.3g}); parameters are "
                "close to the stability boundary")
        raise ConvergenceError(
            f"{label} relaxation unstable even at step {step * 4:g}")

    if warm is not None:
        sigma0 = np.broadcast_to(warm[0], (M, 2, 2)).copy()
        dsigma0 = np.broadcast_to(warm[1], (M, 2, 2)).copy()
    else:
        sigma0 = np.broadcast_to(np.eye(2), (M, 2, 2)).copy()
        dsigma0 = np.zeros((M, 2, 2))
    sigma_ss = relax(lambda s: _sigma_flow_batch(s, A, v, etak, k),
                     sigma0, "covariance")
    dsigma_ss = relax(lambda d: _dsigma_flow_batch(d, sigma_ss, A, v, etak, k),
                      dsigma0, "sensitivity")
    return sigma_ss, dsigma_ss, A, v


def sensitivity_steady(params: OscillatorParams, tol: float = 1e-10,
                       t_max: float = 400.0) -> np.ndarray:
    """Stationary frequency-sensitivity of the conditional covariance."""
    _, dsigma, _, _ = _steady_pair(params, np.array([params.phi]), tol=tol,
                                   t_max=t_max)
    return dsigma[0]


def solve_lyapunov(M: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Solve M C + C M^T + Q = 0 by vectorization into a dense system.

    Accepts stacked inputs of shape (..., n, n); M and Q must share the
    leading shape.
    """
    M = np.asarray(M, dtype=float)
    Q = np.asarray(Q, dtype=float)
    n = M.shape[-1]
    lead = M.shape[:-2]
    K = np.zeros(lead + (n * n, n * n))
    idx = np.arange(n)
    for i in range(n):
        K[..., n * i:n * i + n, n * i:n * i + n] += M
        for j in range(n):
            K[..., n * i + idx, n * j + idx] += M[..., i, j][..., None]
    try:
        C = np.linalg.solve(K, -Q.reshape(lead + (n * n, 1)))[..., 0]
    except np.linalg.LinAlgError as err:
        raise ConvergenceError(f"singular Lyapunov system: {err}") from err
    return C.reshape(lead + (n, n))


def _rates_from_pair(params: OscillatorParams, v, sigma_ss, dsigma_ss, A):
    """Lyapunov-route k_F values given the stationary (sigma, dsigma) pair."""
    etak = params.eta * params.kappa
    M = len(v)
    dev = sigma_ss.copy()
    dev[..., 0, 0] -= 1.0
    dev[..., 1, 1] -= 1.0
    q1 = (dev @ v[..., None])[..., 0]            # (sigma_ss - I) v
    q2 = (dsigma_ss @ v[..., None])[..., 0]      # (d_omega sigma_ss) v
    # closed-loop drift of the sensitivity: A - eta k (sigma_ss - I) B
    A_cl = A - etak * q1[..., :, None] * v[..., None, :]

    M4 = np.zeros((M, 4, 4))
    M4[:, :2, :2] = A
    M4[:, 2:, :2] = J_OMEGA
    M4[:, 2:, 2:] = A_cl
    pref = np.sqrt(etak / 2.0)
    N = pref * np.concatenate([q1, q2], axis=-1)
    Q = N[..., :, None] * N[..., None, :]
    C = solve_lyapunov(M4, Q)
    rates = 2.0 * etak * np.einsum("mi,mij,mj->m", v, C[:, 2:, 2:], v)
    # the quadratic form is nonnegative up to solver roundoff
    return np.where(np.abs(rates) < 1e-14, np.abs(rates), rates)


def growth_rate_kf_scan(params: OscillatorParams, phases) -> np.ndarray:
    """Deterministic k_F for each phase in one batched solve."""
    phases = np.atleast_1d(np.asarray(phases, dtype=float))
    sigma_ss, dsigma_ss, A, v = _steady_pair(params, phases)
    return _rates_from_pair(params, v, sigma_ss, dsigma_ss, A)


def growth_rate_kf(params: OscillatorParams) -> float:
    """Long-time CFI growth rate at the parameters' own homodyne phase."""
    return float(growth_rate_kf_scan(params, np.array([params.phi]))[0])


def scan_growth_rate(omega: float, epsilon: float, eta: float,
                     kappa: float = 1.0, n_phases: int = 256,
                     refine_tol: float = 1e-4) -> KfScan:
    """Sample k_F on a uniform phase grid over [0, pi) and refine the peak."""
    params = OscillatorParams(omega=omega, epsilon=epsilon, kappa=kappa, eta=eta)
    phases = np.linspace(0.0, np.pi, n_phases, endpoint=False)
    rates = growth_rate_kf_scan(params, phases)
    if rates.max() - rates.min() < 1e-12:
        return KfScan(phases, rates, argmax_phase=0.0, flat=True)
    i = int(np.argmax(rates))
    dphi = np.pi / n_phases
    lo, hi = phases[i] - dphi, phases[i] + dphi

    # warm-start consecutive golden evaluations from the previous fixed point
    warm = list(_steady_pair(params, np.array([phases[i]]))[:2])

    def rate_at(phi):
        sigma_ss, dsigma_ss, A, v = _steady_pair(params, np.array([phi]),
                                                 warm=(warm[0][0], warm[1][0]))
        warm[0], warm[1] = sigma_ss, dsigma_ss
        return float(_rates_from_pair(params, v, sigma_ss, dsigma_ss, A)[0])

    peak = golden_section_max(rate_at, lo, hi, tol=refine_tol)
    return KfScan(phases, rates, argmax_phase=float(np.mod(peak, np.pi)))


def optimal_phase(omega: float, epsilon: float, eta: float,
                  kappa: float = 1.0, n_phases: int = 256) -> float:
    """Homodyne phase maximizing k_F, canonicalized to [0, pi).

    A flat landscape (k_F variation below 1e-12, e.g. eta = 0) returns 0
    with a warning.
    """
    scan = scan_growth_rate(omega, epsilon, eta, kappa, n_phases=n_phases)
    if scan.flat:
        warnings.warn("k_F landscape is flat; returning phase 0", stacklevel=2)
    return scan.argmax_phase


# ---------------------------------------------------------------------------
# Monte Carlo validation route.

def _sensitivity_paths(params: OscillatorParams, n_steps: int, dt: float):
    """Deterministic (sigma, d_omega sigma) flows from the vacuum state.

    Returns per-step coefficients for the (r, d_omega r) integration:
    diffusion vectors u1[n] = sqrt(eta k / 2) (sigma(t_n) - I) v and
    u2[n] = sqrt(eta k / 2) dsigma(t_n) v of shape (n_steps, 2), and the
    closed-loop sensitivity drift A_cl[n] = A - eta k (sigma(t_n) - I) B.
    """
    w, e, k, eta = params.omega, params.epsilon, params.kappa, params.eta
    A = np.array([[-0.5 * k, w - e], [-w - e, -0.5 * k]])
    v = np.array([np.cos(params.phi), np.sin(params.phi)])
    etak = eta * k
    pref = np.sqrt(etak / 2.0)

    def joint_flow(y):
        sig, dsig = y
        return np.stack([
            _sigma_flow_batch(sig[None], A, v[None], etak, k)[0],
            _dsigma_flow_batch(dsig[None], sig[None], A, v[None], etak, k)[0],
        ])

    y = np.stack([np.eye(2), np.zeros((2, 2))])
    u1 = np.empty((n_steps, 2))
    u2 = np.empty((n_steps, 2))
    A_cl = np.empty((n_steps, 2, 2))
    for n in range(n_steps):
        sig, dsig = y
        q1 = (sig - np.eye(2)) @ v
        u1[n] = pref * q1
        u2[n] = pref * (dsig @ v)
        A_cl[n] = A - etak * np.outer(q1, v)
        k1 = joint_flow(y)
        k2 = joint_flow(y + 0.5 * dt * k1)
        k3 = joint_flow(y + 0.5 * dt * k2)
        k4 = joint_flow(y + dt * k3)
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        y = 0.5 * (y + np.swapaxes(y, -1, -2))
    return u1, u2, A_cl, A, v


def _cumulative_at(params: OscillatorParams, record_steps: np.ndarray,
                   dt: float, n_traj: int, noise: NoiseStream,
                   init: Optional[SensitivityState] = None,
                   chunk: int = 4096) -> np.ndarray:
    """Per-trajectory cumulative integral of (v . d_omega r)^2.

    record_steps holds sorted step counts m; column k of the result is the
    left-Riemann sum over the first record_steps[k] steps. Noise is drawn
    chunk-wise from per-trajectory streams to bound memory.
    """
    n_steps = int(record_steps.max())
    u1, u2, A_cl, A, v = _sensitivity_paths(params, n_steps, dt)
    init = init or SensitivityState()
    gens = [NoiseStream(noise.base_seed, noise.stream_index + i).generator()
            for i in range(n_traj)]
    sqdt = np.sqrt(dt)
    r = np.zeros((n_traj, 2))
    s = np.broadcast_to(init.s, (n_traj, 2)).copy()
    cum = np.zeros(n_traj)
    out = np.zeros((n_traj, len(record_steps)))
    done = record_steps.searchsorted(0, side="right")
    n = 0
    while n < n_steps:
        width = min(chunk, n_steps - n)
        dw = np.empty((n_traj, width))
        for i, g in enumerate(gens):
            dw[i] = g.normal(0.0, sqdt, size=width)
        for j in range(width):
            proj = s @ v
            cum += proj * proj * dt
            dwn = dw[:, j][:, None]
            r_new = r + (r @ A.T) * dt + u1[n + j] * dwn
            s = s + (r @ J_OMEGA.T + s @ A_cl[n + j].T) * dt + u2[n + j] * dwn
            r = r_new
            while done < len(record_steps) and record_steps[done] == n + j + 1:
                out[:, done] = cum
                done += 1
        n += width
    return out


def growth_rate_kf_mc(params: OscillatorParams, n_traj: int = 500,
                      duration: float = 200.0,
                      noise: NoiseStream = NoiseStream(0),
                      dt: float = 0.005, burn_fraction: float = 0.5):
    """Monte Carlo estimate of k_F with its standard error.

    Averages 2 eta kappa (v . d_omega r)^2 over the stationary tail of each
    trajectory; the standard error comes from the scatter of per-trajectory
    tail means.
    """
    _require_stable(params)
    n_steps = int(round(duration / dt))
    n_burn = int(round(burn_fraction * n_steps))
    cum = _cumulative_at(params, np.array([n_burn, n_steps]), dt, n_traj, noise)
    scale = 2.0 * params.eta * params.kappa
    per_traj = scale * (cum[:, 1] - cum[:, 0]) / ((n_steps - n_burn) * dt)
    estimate = float(per_traj.mean())
    std_err = float(per_traj.std(ddof=1) / np.sqrt(n_traj)) if n_traj > 1 else 0.0
    return estimate, std_err


def cfi_time(params: OscillatorParams, t_grid, n_traj: int = 500,
             noise: NoiseStream = NoiseStream(0), dt: float = 0.005) -> np.ndarray:
    """Cumulative CFI estimate on a time grid (left-Riemann integral)."""
    _require_stable(params)
    t_grid = np.asarray(t_grid, dtype=float)
    steps = np.clip(np.rint(t_grid / dt).astype(int), 0, None)
    uniq = np.unique(steps)
    cum = _cumulative_at(params, uniq, dt, n_traj, noise)
    mean_cum = cum.mean(axis=0)
    lookup = dict(zip(uniq.tolist(), mean_cum))
    return 2.0 * params.eta * params.kappa * np.array([lookup[m] for m in steps.tolist()])
