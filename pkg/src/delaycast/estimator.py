"""Scikit-learn style estimator wrapping the forecaster.

`GraphForecaster` follows estimator conventions: constructor arguments are
stored verbatim (so `get_params`/`set_params`/`clone` work), fitted state
lives in trailing-underscore attributes, and `predict` refuses to run before
`fit`. The input is a raw series array shaped (T, N, C) (or a
:class:`~delaycast.data.Dataset`); predictions come back in original units.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import blocks, data as dt, engine as eng, train as tr
from .config import RunConfig
from .errors import DataError, DimensionError
from .graphs import NodeGeometry


def _validate_series(x, name: str = "X") -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.isfinite(arr).all():
        raise DataError(f"{name} contains NaN/Inf values")
    return arr


class GraphForecaster(BaseEstimator):
    """Multi-node series forecaster with delay alignment and learned graphs.

    Parameters mirror the run configuration; see :class:`delaycast.config.RunConfig`
    for semantics and defaults. `fit` expects the full raw series (T, N, C)
    and splits it chronologically; `predict` maps history windows (N, L, C)
    or batches (B, N, L, C) to forecasts (.., N, L', C).
    """

    def __init__(
        self,
        history_len: int = 12,
        horizon: int = 12,
        embed_dim: int = 64,
        blocks: int = 4,
        kernel_size: int = 3,
        fc_width: int = 256,
        node_embed_dim: int = 10,
        reference: str = "mean",
        temperature: float = 0.5,
        alpha: float | None = None,
        residual_mode: str = "passthrough",
        normalize_scores: bool = False,
        local_topk: int = 0,
        great_circle_radius: float = 1.0,
        dtype: str = "float64",
        ablation: str = "none",
        split: str = "7:1:2",
        epochs: int = 100,
        batch_size: int = 32,
        base_lr: float = 0.005,
        lr_decay: float = 0.05,
        milestones: str = "50,75",
        min_lr: float = 1e-8,
        clip_norm: float = 5.0,
        seed: int = 0,
    ):
        self.history_len = history_len
        self.horizon = horizon
        self.embed_dim = embed_dim
        self.blocks = blocks
        self.kernel_size = kernel_size
        self.fc_width = fc_width
        self.node_embed_dim = node_embed_dim
        self.reference = reference
        self.temperature = temperature
        self.alpha = alpha
        self.residual_mode = residual_mode
        self.normalize_scores = normalize_scores
        self.local_topk = local_topk
        self.great_circle_radius = great_circle_radius
        self.dtype = dtype
        self.ablation = ablation
        self.split = split
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.lr_decay = lr_decay
        self.milestones = milestones
        self.min_lr = min_lr
        self.clip_norm = clip_norm
        self.seed = seed

    def _run_config(self) -> RunConfig:
        return RunConfig(**{name: getattr(self, name) for name in RunConfig.__dataclass_fields__})

    def fit(self, X, y=None, geometry: NodeGeometry | None = None):
        """Train on a raw series (T, N, C) array or a prepared Dataset."""
        if isinstance(X, dt.Dataset):
            ds = X
        else:
            arr = _validate_series(X)
            if arr.ndim != 3:
                raise DimensionError(f"X must be (T, N, C), got shape {arr.shape}")
            ds = dt.Dataset(values=arr, geometry=geometry, split=self.split)
        run_cfg = self._run_config()
        params, report, cfg, norm = tr.train_loop(run_cfg, ds)
        self.params_ = params
        self.report_ = report
        self.config_ = cfg
        self.dataset_ = norm
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this GraphForecaster is not fitted yet; call fit first")

    def predict(self, X) -> np.ndarray:
        """Forecast (.., N, L', C) in original units from history windows."""
        self._check_fitted()
        arr = _validate_series(X)
        cfg = self.config_
        expected = (cfg.n_nodes, cfg.history_len, cfg.in_channels)
        if arr.ndim not in (3, 4) or arr.shape[-3:] != expected:
            raise DimensionError(f"window shape {arr.shape} does not match fitted (N, L, C) = {expected}")
        eng.set_default_dtype(cfg.dtype)
        scaled = (arr - self.dataset_.norm_mean) / self.dataset_.norm_std
        pred = blocks.forward(scaled, cfg, self.params_, self.dataset_.geometry, mode="eval")
        return dt.denormalize(self.dataset_, pred.data)

    def score(self, X, y) -> float:
        """Negative MAE of predictions against targets (greater is better)."""
        pred = self.predict(X)
        return -tr.mae(pred, _validate_series(y, "y"))

    def evaluate_split(self, split: str = "test") -> tuple[float, float, list[float]]:
        """Denormalized MAE/RMSE and per-horizon MAE over a held-out split."""
        self._check_fitted()
        return tr.evaluate(self.config_, self.params_, self.dataset_, split)
