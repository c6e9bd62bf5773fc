import json

import numpy as np
import pytest

from kposense.dynamics import PriorInterval, critical_amplitude
from kposense.protocol import (ProtocolConfig, initial_controls,
                               next_controls, protocol_document, run_protocol,
                               update_amplitude, write_protocol_json)


def small_config(**kwargs):
    defaults = dict(prior=PriorInterval(0.7, 2.3), eta=1.0, n_traj=24,
                    n_iterations=2, t_star=20.0, epsilon_margin=0.1,
                    dt=0.02, n_estimate_times=5, base_seed=123, workers=1)
    defaults.update(kwargs)
    return ProtocolConfig(**defaults)


class TestUpdateAmplitude:
    def test_published_sequence(self):
        eps0 = critical_amplitude(0.7) - 0.1
        assert eps0 == pytest.approx(0.7602, abs=1e-3)
        eps1 = update_amplitude(eps0, critical_amplitude(0.953))
        assert eps1 == pytest.approx(0.918, abs=1e-3)
        eps2 = update_amplitude(0.918, critical_amplitude(0.980))
        assert eps2 == pytest.approx(1.009, abs=1e-3)

    def test_fixed_point(self):
        assert update_amplitude(0.8, 0.8) == 0.8

    def test_strict_betweenness(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a, b = np.sort(rng.uniform(0.1, 2.0, size=2))
            if a == b:
                continue
            m = update_amplitude(a, b)
            assert a < m < b


class TestInitialControls:
    def test_reference_point(self):
        c = initial_controls(PriorInterval(0.7, 2.3), margin=0.1, eta=1.0)
        assert c.epsilon == pytest.approx(0.7602, abs=1e-3)
        assert c.phi == pytest.approx(2.996, abs=0.02)
        assert not c.clamped

    def test_margin_bounds(self):
        with pytest.raises(ValueError):
            initial_controls(PriorInterval(0.7, 2.3), margin=0.0, eta=1.0)
        with pytest.raises(ValueError):
            initial_controls(PriorInterval(0.7, 2.3), margin=2.0, eta=1.0)


class TestNextControls:
    def test_follows_midpoint_rule(self):
        c = next_controls(omega_est=0.953, eps_prev=0.7602, eta=1.0)
        assert c.epsilon == pytest.approx(0.918, abs=1e-3)
        assert c.phi == pytest.approx(0.048, abs=0.02)
        assert not c.clamped

    def test_betweenness_preserved(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            w = rng.uniform(0.5, 2.0)
            target = critical_amplitude(w)
            eps_prev = rng.uniform(0.1, target - 1e-6)
            c = next_controls(w, eps_prev, eta=0.4)
            assert eps_prev < c.epsilon < target

    def test_clamped_when_estimate_collapses(self):
        # previous drive far above the new target boundary
        c = next_controls(omega_est=0.1, eps_prev=1.4, eta=0.5, margin=0.1)
        assert c.clamped
        assert c.epsilon == pytest.approx(critical_amplitude(0.1) - 0.05)

    def test_negative_estimate_enters_as_zero(self):
        c = next_controls(omega_est=-0.4, eps_prev=0.2, eta=0.5)
        assert c.epsilon == pytest.approx(
            update_amplitude(0.2, critical_amplitude(0.0)))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            next_controls(np.nan, 0.5, 1.0)


class TestRunProtocol:
    def test_zero_iterations(self):
        records = run_protocol(small_config(n_iterations=0), omega_true=1.0)
        assert records == []

    def test_record_contents_and_determinism(self):
        config = small_config()
        a = run_protocol(config, omega_true=1.0)
        b = run_protocol(small_config(), omega_true=1.0)
        assert len(a) == 2
        for ra, rb in zip(a, b):
            assert ra.epsilon == rb.epsilon
            assert ra.phi == rb.phi
            np.testing.assert_array_equal(ra.samples, rb.samples)
            assert ra.omega_est == rb.omega_est
        rec = a[0]
        assert rec.samples.shape[0] == config.n_traj
        assert rec.times[-1] == pytest.approx(config.t_star)
        assert np.isfinite(rec.omega_est)
        assert rec.fit is not None

    def test_worker_count_does_not_change_results(self):
        a = run_protocol(small_config(workers=1), omega_true=1.0)
        b = run_protocol(small_config(workers=2), omega_true=1.0)
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.samples, rb.samples)
            assert ra.omega_est == rb.omega_est

    def test_midpoint_betweenness_across_iterations(self):
        records = run_protocol(small_config(n_iterations=3, n_traj=32),
                               omega_true=1.0)
        for prev, cur in zip(records, records[1:]):
            target = critical_amplitude(max(prev.omega_est, 0.0))
            if prev.epsilon < target and not cur.clamped:
                assert prev.epsilon < cur.epsilon < target

    def test_unstable_truth_flagged_and_halts(self):
        # a true frequency far below the prior makes the initial drive
        # overcritical for the actual sensor
        records = run_protocol(small_config(), omega_true=0.1)
        assert len(records) == 1
        assert records[0].unstable_truth
        assert records[0].failed

    def test_carry_forward_initialization(self):
        base = run_protocol(small_config(), omega_true=1.0)
        carry = run_protocol(small_config(filter_init="carry-forward"),
                             omega_true=1.0)
        assert base[0].omega_est == carry[0].omega_est
        assert base[1].samples[0, 0] != carry[1].samples[0, 0]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            small_config(epsilon_margin=0.0)
        with pytest.raises(ValueError):
            small_config(epsilon_margin=critical_amplitude(0.7) + 0.1)
        with pytest.raises(ValueError):
            small_config(filter_init="psychic")
        with pytest.raises(ValueError):
            small_config(t_large=25.0)   # beyond t_star


class TestDocument:
    def test_round_trip(self, tmp_path):
        config = small_config()
        records = run_protocol(config, omega_true=1.0)
        doc = protocol_document(config, 1.0, records,
                                csv_refs={0: "iter0.csv"})
        path = tmp_path / "run.json"
        write_protocol_json(path, doc)
        back = json.loads(path.read_text())
        assert back["omega_true"] == 1.0
        assert len(back["iterations"]) == 2
        assert back["iterations"][0]["ensemble_csv"] == "iter0.csv"
        assert back["iterations"][0]["fit"]["sigma"] > 0
        curve = back["iterations"][0]["estimate_curve"]
        assert len(curve["t"]) == len(curve["omega_est"])
