"""Loss, metrics, Adam, multi-step LR schedule, and the train/eval loops.

Training minimizes mean absolute error on normalized values; reported metrics
are always in original units via the dataset's inverse transform. The loop is
seed-deterministic: init, shuffling and graph noise draw from separate streams
spawned from one seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import blocks, data as dt, engine as eng
from .config import ModelConfig, RunConfig, milestone_list, model_config, serialize_config
from .engine import Tensor
from .errors import DataError, DimensionError, NumericError


# ---------------------------------------------------------------------------
# metrics


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.abs(pred - target).mean())


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.sqrt(((pred - target) ** 2).mean()))


def mae_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Differentiable mean absolute error against a constant target."""
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return eng.tmean(eng.absolute(eng.sub(pred, Tensor(target))))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    state = AdamState(beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place; aborts on non-finite gradients."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}; step aborted")
    state.step += 1
    correct1 = 1.0 - state.beta1**state.step
    correct2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * (g * g)
        m_hat = state.m[name] / correct1
        v_hat = state.v[name] / correct2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most `max_norm`."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return total


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 0.005
    decay: float = 0.05
    milestones: tuple[int, ...] = (50, 75)
    floor: float = 1e-8


def lr_at(epoch: int, schedule: Schedule) -> float:
    passed = sum(1 for m in schedule.milestones if epoch >= m)
    return max(schedule.base_lr * schedule.decay**passed, schedule.floor)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_mae: float
    val_rmse: float


@dataclass
class RunReport:
    config: str
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)
    test_mae: float | None = None
    test_rmse: float | None = None
    horizon_mae: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    wall_time: float = 0.0
    diverged: bool = False

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "epochs": [vars(e) for e in self.epochs],
            "test_mae": self.test_mae,
            "test_rmse": self.test_rmse,
            "horizon_mae": self.horizon_mae,
            "best_epoch": self.best_epoch,
            "wall_time": self.wall_time,
            "diverged": self.diverged,
            "config": self.config,
        }


# ---------------------------------------------------------------------------
# evaluation


def evaluate(
    cfg: ModelConfig,
    params: dict[str, Tensor],
    ds: dt.Dataset,
    split: str,
    batch_size: int = 128,
) -> tuple[float, float, list[float]]:
    """Denormalized MAE/RMSE plus the per-horizon MAE vector over one split."""
    if not ds.is_normalized:
        raise DataError("evaluate expects a normalized dataset (stats drive the inverse transform)")
    count = dt.window_count(ds, cfg.history_len, cfg.horizon, split)
    abs_sum = np.zeros(cfg.horizon)
    sq_sum = 0.0
    per_horizon_count = 0
    for start in range(0, count, batch_size):
        origins = np.arange(start, min(start + batch_size, count))
        x, y = dt.window_batch(ds, cfg.history_len, cfg.horizon, split, origins)
        pred = blocks.forward(x, cfg, params, ds.geometry, mode="eval").data
        err = dt.denormalize(ds, pred) - dt.denormalize(ds, y)
        abs_sum += np.abs(err).sum(axis=(0, 1, 3))
        sq_sum += float((err**2).sum())
        per_horizon_count += err.shape[0] * err.shape[1] * err.shape[3]
    horizon_mae = (abs_sum / per_horizon_count).tolist()
    overall_mae = float(abs_sum.sum() / (per_horizon_count * cfg.horizon))
    overall_rmse = float(np.sqrt(sq_sum / (per_horizon_count * cfg.horizon)))
    return overall_mae, overall_rmse, horizon_mae


def persistence_metrics(ds: dt.Dataset, history_len: int, horizon: int, split: str) -> tuple[float, float, list[float]]:
    """Repeat-last-observation baseline through the same metric path."""
    count = dt.window_count(ds, history_len, horizon, split)
    x, y = dt.window_batch(ds, history_len, horizon, split, np.arange(count))
    pred = np.repeat(x[:, :, -1:, :], horizon, axis=2)
    if ds.is_normalized:
        pred, y = dt.denormalize(ds, pred), dt.denormalize(ds, y)
    err = pred - y
    denom = err.shape[0] * err.shape[1] * err.shape[3]
    horizon_mae = (np.abs(err).sum(axis=(0, 1, 3)) / denom).tolist()
    return mae(pred, y), rmse(pred, y), horizon_mae


# ---------------------------------------------------------------------------
# training loop


def train_loop(
    run_cfg: RunConfig,
    ds: dt.Dataset,
    *,
    log_fn=None,
) -> tuple[dict[str, Tensor], RunReport, ModelConfig, dt.Dataset]:
    """Train on the dataset's train split, track the best-val checkpoint.

    Returns (best params, report, resolved model config, normalized dataset).
    """
    eng.set_default_dtype(run_cfg.dtype)
    cfg = model_config(run_cfg, ds.n_nodes, ds.n_channels, ds.geometry)
    norm = dt.normalize(ds) if not ds.is_normalized else ds

    seed_root = np.random.SeedSequence(run_cfg.seed)
    init_seq, shuffle_seq, noise_seq = seed_root.spawn(3)
    params = blocks.init_params(cfg, np.random.default_rng(init_seq))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    noise_rng = np.random.default_rng(noise_seq)

    report = RunReport(config=serialize_config(run_cfg), seed=run_cfg.seed)
    started = time.monotonic()
    if run_cfg.epochs == 0:
        report.wall_time = time.monotonic() - started
        return params, report, cfg, norm

    schedule = Schedule(
        base_lr=run_cfg.base_lr, decay=run_cfg.lr_decay,
        milestones=milestone_list(run_cfg.milestones), floor=run_cfg.min_lr,
    )
    state = adam_init(params)
    n_windows = dt.window_count(norm, cfg.history_len, cfg.horizon, "train")
    best_val = np.inf
    best_params = blocks.clone_params(params)
    best_epoch = None

    for epoch in range(run_cfg.epochs):
        lr = lr_at(epoch, schedule)
        order = shuffle_rng.permutation(n_windows)
        losses = []
        diverged = False
        for start in range(0, n_windows, run_cfg.batch_size):
            origins = order[start:start + run_cfg.batch_size]
            x, y = dt.window_batch(norm, cfg.history_len, cfg.horizon, "train", origins)
            eng.zero_grad(params)
            try:
                pred = blocks.forward(x, cfg, params, norm.geometry, mode="train", rng=noise_rng)
                loss = mae_loss(pred, y)
                if not np.isfinite(loss.data):
                    raise NumericError("training loss is non-finite")
                eng.backward(loss)
                grads = {name: p.grad if p.grad is not None else np.zeros_like(p.data)
                         for name, p in params.items()}
                clip_gradients(grads, run_cfg.clip_norm)
                adam_step(params, grads, state, lr)
            except NumericError:
                diverged = True
                break
            losses.append(float(loss.data))
        if diverged:
            report.diverged = True
            break
        val_mae, val_rmse, _ = evaluate(cfg, params, norm, "val")
        record = EpochRecord(
            epoch=epoch, lr=lr, train_loss=float(np.mean(losses)),
            val_mae=val_mae, val_rmse=val_rmse,
        )
        report.epochs.append(record)
        if log_fn is not None:
            log_fn(record)
        if val_mae < best_val:
            best_val = val_mae
            best_params = blocks.clone_params(params)
            best_epoch = epoch

    report.best_epoch = best_epoch
    test_mae, test_rmse, horizon_mae = evaluate(cfg, best_params, norm, "test")
    report.test_mae = test_mae
    report.test_rmse = test_rmse
    report.horizon_mae = horizon_mae
    report.wall_time = time.monotonic() - started
    return best_params, report, cfg, norm
