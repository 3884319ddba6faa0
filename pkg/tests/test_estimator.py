import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from delaycast import GraphForecaster
from delaycast import data as dt
from delaycast.errors import DataError, DimensionError


def small_forecaster(**overrides):
    base = dict(
        history_len=6, horizon=4, embed_dim=4, blocks=2, fc_width=8,
        node_embed_dim=4, epochs=2, batch_size=16, seed=0, milestones="",
    )
    base.update(overrides)
    return GraphForecaster(**base)


def synth_series(seed=0):
    spec = dt.SynthSpec(n_nodes=5, n_steps=300, max_delay=2, noise_sigma=0.1)
    ds, _ = dt.synth_delayed_diffusion(spec, seed=seed)
    return ds


class TestEstimatorContract:
    def test_get_set_params_round_trip(self):
        est = small_forecaster()
        params = est.get_params()
        assert params["history_len"] == 6
        est.set_params(horizon=8)
        assert est.horizon == 8

    def test_clone_preserves_params(self):
        est = small_forecaster(seed=7)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_predict_before_fit_raises(self):
        with pytest.raises(NotFittedError):
            small_forecaster().predict(np.zeros((5, 6, 1)))

    def test_fit_returns_self_and_sets_state(self):
        est = small_forecaster()
        out = est.fit(synth_series())
        assert out is est
        assert hasattr(est, "params_") and hasattr(est, "report_")

    def test_fit_from_raw_array(self):
        rng = np.random.default_rng(0)
        est = small_forecaster(ablation="mg-l")  # raw arrays carry no geometry
        est.fit(rng.normal(size=(200, 4, 1)))
        pred = est.predict(rng.normal(size=(4, 6, 1)))
        assert pred.shape == (4, 4, 1)


class TestPredict:
    def test_shapes_single_and_batched(self):
        est = small_forecaster().fit(synth_series())
        window = synth_series().values[:6].transpose(1, 0, 2)
        single = est.predict(window)
        batch = est.predict(np.stack([window, window]))
        assert single.shape == (5, 4, 1)
        assert batch.shape == (2, 5, 4, 1)
        np.testing.assert_allclose(batch[0], single, atol=1e-12)

    def test_prediction_in_original_units(self):
        ds = synth_series()
        est = small_forecaster(epochs=4).fit(ds)
        window = ds.values[:6].transpose(1, 0, 2)
        pred = est.predict(window)
        # original units: same scale as the raw series, not the normalized one
        assert np.abs(pred).max() < 10 * np.abs(ds.values).max() + 1

    def test_bad_window_shape_rejected(self):
        est = small_forecaster().fit(synth_series())
        with pytest.raises(DimensionError):
            est.predict(np.zeros((5, 7, 1)))

    def test_nan_input_rejected(self):
        est = small_forecaster().fit(synth_series())
        bad = np.zeros((5, 6, 1))
        bad[0, 0, 0] = np.nan
        with pytest.raises(DataError):
            est.predict(bad)

    def test_deterministic_given_seed(self):
        a = small_forecaster().fit(synth_series())
        b = small_forecaster().fit(synth_series())
        window = synth_series().values[10:16].transpose(1, 0, 2)
        np.testing.assert_array_equal(a.predict(window), b.predict(window))


class TestScoreAndEvaluate:
    def test_score_is_negative_mae(self):
        ds = synth_series()
        est = small_forecaster().fit(ds)
        window = ds.values[:6].transpose(1, 0, 2)
        target = ds.values[6:10].transpose(1, 0, 2)
        assert est.score(window, target) == pytest.approx(-np.abs(est.predict(window) - target).mean())

    def test_evaluate_split(self):
        est = small_forecaster().fit(synth_series())
        m, r, horizon = est.evaluate_split("test")
        assert r >= m >= 0
        assert len(horizon) == 4
