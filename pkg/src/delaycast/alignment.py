"""Series-aligned graph convolution.

Each node's series is compared against a shared reference series via circular
cross-correlation (FFT path, equal to the O(L^2) lag sum), the best lag gives
an integer per-node delay, the series are rotated into alignment, reweighed by
the correlation scores, convolved along time, aggregated over the non-delayed
graph, and rotated back to their original time positions.

Delays are integer argmaxes and stay off the tape; the correlation scores used
for reweighting stay on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eng
from .engine import Tensor
from .errors import ConfigurationError, DimensionError, DomainError


@dataclass
class ProjectionParams:
    """Query/key projection matrices, both mapping width C_in -> D."""

    w_query: Tensor
    w_key: Tensor

    def __post_init__(self):
        if self.w_query.shape != self.w_key.shape:
            raise DimensionError(
                f"query/key projections must share shape, got {self.w_query.shape} vs {self.w_key.shape}"
            )


def parse_reference(strategy: str) -> tuple[str, int | None]:
    """Parse a reference-series strategy: "mean" or "node:<i>"."""
    if strategy == "mean":
        return "mean", None
    if strategy.startswith("node:"):
        try:
            return "node", int(strategy.split(":", 1)[1])
        except ValueError:
            pass
    raise ConfigurationError(f"unknown reference strategy {strategy!r}, expected 'mean' or 'node:<i>'")


def project_qk(x: Tensor, params: ProjectionParams) -> tuple[Tensor, Tensor]:
    """Per-timestep projection of (..., N, L, C_in) to query/key (..., N, L, D)."""
    return eng.matmul(x, params.w_query), eng.matmul(x, params.w_key)


def reference_series(q: Tensor, strategy: str = "mean") -> Tensor:
    """Reduce (..., N, L, D) to the reference series (..., L, D)."""
    kind, index = parse_reference(strategy)
    n = q.shape[-3]
    if kind == "mean":
        return eng.tmean(q, axis=-3)
    if not 0 <= index < n:
        raise DimensionError(f"reference node {index} out of range for {n} nodes")
    return eng.select(q, index, axis=-3)


def correlation_scores(qbar: Tensor, keys: Tensor) -> Tensor:
    """Lag scores (..., N, L): circular cross-correlation, summed over channels."""
    return eng.circular_correlation(qbar, keys)


def delays_from_scores(scores) -> np.ndarray:
    """Per-node integer delay: (L - argmax lag) mod L, first peak on ties."""
    z = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    length = z.shape[-1]
    return np.mod(length - np.argmax(z, axis=-1), length)


def _check_delays(tau: np.ndarray, n: int, length: int) -> np.ndarray:
    tau = np.asarray(tau)
    if not np.issubdtype(tau.dtype, np.integer):
        raise DomainError(f"delays must be integers, got dtype {tau.dtype}")
    if tau.shape[-1] != n:
        raise DimensionError(f"one delay per node required: {tau.shape} vs {n} nodes")
    if tau.size and (tau.min() < 0 or tau.max() >= length):
        raise DomainError(f"delays must lie in [0, {length}), got range [{tau.min()}, {tau.max()}]")
    return tau


def align(x: Tensor, tau: np.ndarray) -> Tensor:
    """Rotate node i's series left by tau_i: out[i, t] = x[i, (t + tau_i) mod L]."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    tau = _check_delays(tau, x.shape[-3], x.shape[-2])
    return eng.roll_time(x, tau)


def align_back(h: Tensor, tau: np.ndarray) -> Tensor:
    """Exact inverse of :func:`align` for the same tau."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    tau = _check_delays(tau, h.shape[-3], h.shape[-2])
    return eng.roll_time(h, -tau.astype(np.int64))


def estimate_delays(x: Tensor, params: ProjectionParams, reference: str = "mean") -> np.ndarray:
    """Project, build the reference, correlate, and take per-node argmax lags."""
    q, k = project_qk(x if isinstance(x, Tensor) else Tensor(x), params)
    qbar = reference_series(q, reference)
    return delays_from_scores(correlation_scores(qbar, k))


def series_aligned_graph_conv(
    x: Tensor,
    adjacency: Tensor,
    params: ProjectionParams,
    conv_kernel: Tensor,
    *,
    reference: str = "mean",
    normalize_scores: bool = False,
    tau_override: np.ndarray | None = None,
    delays_out: list | None = None,
) -> Tensor:
    """Full pipeline of delay-aligned aggregation over the non-delayed graph.

    x: (..., N, L, D). Steps: query/key projection -> reference series ->
    correlation scores -> integer delays (recomputed each call unless
    `tau_override` pins them) -> align -> reweigh by broadcast scores ->
    same-padded time convolution -> node aggregation -> align back.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    q, k = project_qk(x, params)
    qbar = reference_series(q, reference)
    zeta = correlation_scores(qbar, k)
    tau = delays_from_scores(zeta) if tau_override is None else _check_delays(
        tau_override, x.shape[-3], x.shape[-2]
    )
    if delays_out is not None:
        delays_out.append(tau)
    weights = zeta
    if normalize_scores:
        # softmax over lags, shifted for stability; off by default (raw scores)
        e = eng.exp(eng.sub(zeta, Tensor(zeta.data.max(axis=-1, keepdims=True))))
        weights = eng.div(e, _keepdims_sum(e))
    aligned = align(x, tau)
    reweighed = eng.mul(aligned, eng.reshape(weights, weights.shape + (1,)))
    mixed = eng.graph_mix(adjacency, eng.conv1d_same(reweighed, conv_kernel))
    return align_back(mixed, tau)


def _keepdims_sum(t: Tensor) -> Tensor:
    s = eng.tsum(t, axis=-1)
    return eng.reshape(s, s.shape + (1,))
