import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crossbuild import uncertainty as U
from crossbuild.errors import ContractError
from crossbuild.model import TFTLite

from conftest import random_batch, tiny_config


def interval(lower, upper):
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    return U.IntervalForecast((lower + upper) / 2, lower, upper, upper - lower)


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(n_passes=1), dict(lower=0.0), dict(lower=60.0, upper=40.0), dict(upper=100.0)])
    def test_invalid(self, bad):
        with pytest.raises(ContractError):
            U.MCDropoutConfig(**bad)

    def test_nominal(self):
        assert U.MCDropoutConfig().nominal == pytest.approx(0.95)


class TestPredict:
    def test_zero_dropout_degenerate(self):
        cfg = tiny_config(dropout_rate=0.0)
        model, batch = TFTLite(cfg, seed=1), random_batch(cfg)
        f = U.mc_dropout_predict(model, batch, U.MCDropoutConfig(n_passes=5))
        assert np.all(f.std == 0)
        np.testing.assert_array_equal(f.lower, f.mean)
        np.testing.assert_array_equal(f.upper, f.mean)
        np.testing.assert_array_equal(f.mean, model.forward(batch).data[..., cfg.median_index])

    def test_same_seed_same_forecast(self):
        cfg = tiny_config(dropout_rate=0.3)
        model, batch = TFTLite(cfg, seed=1), random_batch(cfg)
        a = U.mc_dropout_predict(model, batch, U.MCDropoutConfig(n_passes=8, base_seed=4))
        b = U.mc_dropout_predict(model, batch, U.MCDropoutConfig(n_passes=8, base_seed=4))
        for name in ("mean", "lower", "upper", "std"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()

    def test_pass_i_uses_seed_base_plus_i(self):
        cfg = tiny_config(dropout_rate=0.3)
        model, batch = TFTLite(cfg, seed=1), random_batch(cfg)
        samples = U.mc_samples(model, batch, U.MCDropoutConfig(n_passes=3, base_seed=10))
        single = model.forward(batch, mc_dropout=True, rng=np.random.default_rng(12)).data[..., cfg.median_index]
        np.testing.assert_array_equal(samples[2], single)
        assert samples.shape == (3, 5, cfg.horizon) and samples.std(axis=0).any()

    def test_pass_order_invariant(self, rng):
        samples = rng.normal(size=(20, 3, 4))
        cfg = U.MCDropoutConfig(n_passes=20)
        a = U.summarize(samples, cfg)
        b = U.summarize(samples[rng.permutation(20)], cfg)
        for name in ("mean", "lower", "upper", "std"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()

    def test_summary_statistics(self, rng):
        samples = rng.normal(size=(50, 2, 3))
        f = U.summarize(samples, U.MCDropoutConfig())
        np.testing.assert_allclose(f.mean, samples.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(f.std, samples.std(axis=0, ddof=1), rtol=1e-12)
        np.testing.assert_allclose(f.lower, np.percentile(samples, 2.5, axis=0))

    def test_too_few_passes(self):
        with pytest.raises(ContractError):
            U.summarize(np.zeros((1, 2)), U.MCDropoutConfig())


class TestCoverage:
    def test_all_inside(self):
        assert U.picp(interval([0, 0], [1, 1]), [0.5, 0.2]) == 1.0

    def test_bounds_inclusive(self):
        assert U.picp(interval([0, 0], [1, 1]), [0.0, 1.0]) == 1.0

    def test_mask(self):
        assert U.picp(interval([0, 0], [1, 1]), [0.5, 9.0], mask=[True, False]) == 1.0

    def test_sequence_input(self):
        assert U.picp([interval([0], [1]), interval([0], [1])], [0.5, 2.0]) == 0.5

    def test_miw(self):
        assert U.miw(interval([1, 2], [1, 2])) == 0.0
        assert U.miw(interval([0, 5], [0.3, 5.3])) == pytest.approx(0.3)

    def test_lower_above_upper_rejected(self):
        with pytest.raises(ContractError):
            U.IntervalForecast(np.zeros(1), np.ones(1), np.zeros(1), np.zeros(1))

    @given(
        arrays(np.float64, 10, elements=st.floats(-5, 5)),
        arrays(np.float64, 10, elements=st.floats(0, 3)),
        arrays(np.float64, 10, elements=st.floats(-8, 8)),
        st.floats(1e-6, 2),
    )
    def test_widening_never_lowers_coverage(self, lower, width, truth, delta):
        base = interval(lower, lower + width)
        wider = interval(lower - delta, lower + width + delta)
        assert U.picp(wider, truth) >= U.picp(base, truth)
