import numpy as np
import pytest

from crossdecode.config import ConfigError, FingerprintConfig
from crossdecode.fingerprint import fit_distortion_indices, linear_fit, run_fingerprint_experiment, simulate_di


class TestFits:
    def test_linear_fit_exact(self):
        x = np.arange(10.0)
        assert linear_fit(x, 2.0 + 0.5 * x) == pytest.approx((2.0, 0.5))

    def test_identical_blocks_give_unit_slope(self):
        rng = np.random.default_rng(0)
        block = rng.normal(size=(4, 1, 30))
        di = np.concatenate([block, block], axis=1)
        beta_self, _, r_w, _ = fit_distortion_indices(di)
        assert beta_self == pytest.approx((0.0, 1.0), abs=1e-12)
        assert r_w == pytest.approx(1.0)

    def test_needs_two_blocks_and_observers(self):
        with pytest.raises(ValueError):
            fit_distortion_indices(np.zeros((3, 1, 5)))
        with pytest.raises(ValueError):
            fit_distortion_indices(np.zeros((1, 2, 5)))


class TestSimulation:
    def test_shapes(self):
        cfg = FingerprintConfig()
        di, ecc, ang = simulate_di(cfg, 0)
        n_loc = cfg.eccentricities * cfg.angles
        assert di.shape == (cfg.observers, cfg.blocks, n_loc)
        assert ecc.shape == ang.shape == (n_loc,)

    def test_deterministic(self):
        a = run_fingerprint_experiment(FingerprintConfig(), 3)
        b = run_fingerprint_experiment(FingerprintConfig(), 3)
        np.testing.assert_array_equal(a.di, b.di)

    def test_no_idiosyncrasy_within_equals_between(self):
        cfg = FingerprintConfig(idio_linear_sd=0.0, idio_nonlinear_sd=0.0, observers=20)
        fit = run_fingerprint_experiment(cfg, 0)
        assert fit.r_within == pytest.approx(fit.r_between, abs=0.05)

    def test_no_shared_component_between_near_zero(self):
        fit = run_fingerprint_experiment(FingerprintConfig(shared_sd=0.0, observers=20), 1)
        assert abs(fit.r_between) < 0.05
        assert fit.r_within > 0.4

    def test_within_exceeds_between_by_default(self):
        fit = run_fingerprint_experiment(FingerprintConfig(), 0)
        assert fit.r_within > fit.r_between > 0

    def test_summary_fields(self):
        s = run_fingerprint_experiment(FingerprintConfig(), 0).summary()
        assert {"beta_self", "beta_others", "r_within", "r_between", "observers", "blocks", "locations"} <= set(s)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            run_fingerprint_experiment(FingerprintConfig(blocks=1), 0)
