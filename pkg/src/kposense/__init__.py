"""Frequency sensing with a continuously monitored Kerr parametric oscillator.

The package simulates homodyne photocurrents of the oscillator in its
Gaussian regime, filters them with a continuous-discrete extended Kalman
filter, quantifies the information rate of the record to pick the homodyne
phase, and runs the adaptive protocol that walks the drive amplitude toward
the critical point while estimating the unknown frequency.
"""

__version__ = "0.1.0"

from .dynamics import (ConvergenceError, GaussianState, OscillatorParams,
                       PriorInterval, critical_amplitude, drift_matrix,
                       measurement_matrix, stability_margin, steady_covariance)
from .ekf import (EkfConfig, EkfEnsemble, EkfTrajectory, FilterRunawayError,
                  FilterState, frobenius_norm, init_filter, predict, run_ekf,
                  run_ekf_ensemble, update)
from .estimator import (EnsembleSnapshot, Histogram, SkewNormalFit,
                        bootstrap_estimate_curves, estimator_statistics,
                        fit_skew_normal, make_histogram, mode_of_fit,
                        skew_normal_pdf, snapshot, tail_fraction)
from .fisher import (KfScan, SensitivityState, cfi_time, growth_rate_kf,
                     growth_rate_kf_mc, growth_rate_kf_scan, optimal_phase,
                     scan_growth_rate, sensitivity_steady, solve_lyapunov)
from .protocol import (Controls, IterationRecord, ProtocolConfig,
                       initial_controls, next_controls, protocol_document,
                       run_protocol, update_amplitude)
from .simulate import (EnsembleRecords, NoiseStream, PhotocurrentRecord,
                       SimulationError, TruthTrajectory,
                       simulate_record_ensemble, simulate_truth, step_truth)
from .state_model import (IX_OMEGA, IX_P, IX_SP, IX_SX, IX_SXP, IX_X,
                          ModelContext, diffusion_G, drift_F, filter_vector,
                          jacobian_F, observation_H)
