"""Dense-array computation core with taped reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array plus the backward rule of the operation
that produced it; the implicit tape is the DAG of ``_parents`` links, replayed
once in topological order by :func:`backward`. Ops never mutate their inputs,
and every op broadcasts like numpy with gradients summed back to the original
shapes. 64-bit floats are the default; 32-bit is selectable process-wide via
:func:`set_default_dtype`.

Gradient conventions used by the model on top of this engine: integer delay
argmaxes are computed outside the tape (constants per forward pass), while the
correlation scores that reweight aligned series stay on the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, UsageError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float64


def set_default_dtype(name: str) -> None:
    """Select "float32" or "float64" for all subsequently created tensors."""
    global _default_dtype
    if name not in _DTYPES:
        raise ConfigurationError(f"unknown dtype {name!r}, expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


class Tensor:
    """A dense array plus the tape links needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are lifted to non-trainable tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient produced under numpy broadcasting back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data / b.data

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward_fn)


def neg(a: Tensor) -> Tensor:
    def backward_fn(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward_fn)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward_fn(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), backward_fn)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward_fn(g):
        _accumulate(a, g / a.data)

    return _make(out_data, (a,), backward_fn)


def absolute(a: Tensor) -> Tensor:
    out_data = np.abs(a.data)

    def backward_fn(g):
        _accumulate(a, g * np.sign(a.data))

    return _make(out_data, (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward_fn(g):
        _accumulate(a, g * (a.data > 0))

    return _make(out_data, (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward_fn(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward_fn)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    # log(1 + e^x), stable on both tails
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward_fn(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        _accumulate(a, g * s)

    return _make(out_data, (a,), backward_fn)


def clip_open_unit(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Clamp into [eps, 1-eps]; float sigmoids can round onto 0/1 exactly.

    Pass-through gradient inside the bounds, zero where clamped (the true
    sigmoid derivative there is below eps anyway).
    """
    lo, hi = eps, 1.0 - eps
    out_data = np.clip(a.data, lo, hi)

    def backward_fn(g):
        _accumulate(a, g * ((a.data >= lo) & (a.data <= hi)))

    return _make(out_data, (a,), backward_fn)


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ConfigurationError(f"unknown activation kind {kind!r}, expected 'relu' or 'sigmoid'")


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None) -> Tensor:
    out_data = a.data.sum(axis=axis)

    def backward_fn(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(out_data, (a,), backward_fn)


def tmean(a: Tensor, axis=None) -> Tensor:
    out_data = a.data.mean(axis=axis)
    count = a.data.size if axis is None else a.data.size // out_data.size

    def backward_fn(g):
        scaled = g / count
        if axis is None:
            _accumulate(a, np.broadcast_to(scaled, a.shape).copy())
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(scaled, axis), a.shape).copy())

    return _make(out_data, (a,), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    def backward_fn(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward_fn)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)

    def backward_fn(g):
        _accumulate(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), backward_fn)


def concat(parts, axis: int = -1) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _accumulate(p, piece)

    return _make(out_data, parts, backward_fn)


def select(a: Tensor, index: int, axis: int) -> Tensor:
    """Pick one slice along `axis` (the axis is removed)."""
    if not -a.shape[axis] <= index < a.shape[axis]:
        raise DimensionError(f"index {index} out of range for axis {axis} of size {a.shape[axis]}")
    out_data = np.take(a.data, index, axis=axis)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        idx = [slice(None)] * a.ndim
        idx[axis] = index
        full[tuple(idx)] = g
        _accumulate(a, full)

    return _make(out_data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs 2-D (or stacked) operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward_fn(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            if b.ndim == 2 and g.ndim > 2:
                # stacked lhs against a plain weight: one flat gemm
                _accumulate(b, a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward_fn)


def fully_connected(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map along the trailing axis: x @ w (+ b)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"fully_connected: trailing dim {x.shape[-1]} != weight rows {w.shape[0]}")
    out = matmul(x, w)
    if b is not None:
        out = add(out, _as_tensor(b))
    return out


def conv1d_same(x: Tensor, kernel: Tensor) -> Tensor:
    """1-D convolution along the second-to-last axis with zero "same" padding.

    x: (..., L, D); kernel: (k, D, D_out) with k odd. output: (..., L, D_out),
    out[..., t, e] = sum_{j,d} x[..., t + j - (k-1)/2, d] * kernel[j, d, e]
    (out-of-range positions read as zero).
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if kernel.ndim != 3:
        raise DimensionError(f"conv1d kernel must be (k, D, D_out), got {kernel.shape}")
    k, d_in, _ = kernel.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d kernel size must be odd, got {k}")
    if x.shape[-1] != d_in:
        raise DimensionError(f"conv1d channel mismatch: input {x.shape[-1]}, kernel {d_in}")
    pad = (k - 1) // 2
    length = x.shape[-2]
    d_out = kernel.shape[-1]
    pad_spec = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, pad_spec)
    # im2col: columns[..., t, j*D:(j+1)*D] = xp[..., t+j, :], then one gemm
    columns = np.concatenate([xp[..., j:j + length, :] for j in range(k)], axis=-1)
    kernel2 = kernel.data.reshape(k * d_in, d_out)
    out_shape = x.shape[:-1] + (d_out,)
    out_data = (columns.reshape(-1, k * d_in) @ kernel2).reshape(out_shape)

    def backward_fn(g):
        g2 = g.reshape(-1, d_out)
        if kernel.requires_grad:
            _accumulate(kernel, (columns.reshape(-1, k * d_in).T @ g2).reshape(kernel.shape))
        if x.requires_grad:
            gcols = (g2 @ kernel2.T).reshape(columns.shape)
            gx_pad = np.zeros_like(xp)
            for j in range(k):
                gx_pad[..., j:j + length, :] += gcols[..., j * d_in:(j + 1) * d_in]
            _accumulate(x, gx_pad[..., pad:pad + length, :])

    return _make(out_data, (x, kernel), backward_fn)


def graph_mix(adj: Tensor, x: Tensor) -> Tensor:
    """Aggregate node messages: out[..., i, t, d] = sum_j adj[i, j] * x[..., j, t, d]."""
    adj, x = _as_tensor(adj), _as_tensor(x)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise DimensionError(f"adjacency must be square, got {adj.shape}")
    if x.ndim < 3 or x.shape[-3] != adj.shape[0]:
        raise DimensionError(f"node axis mismatch: adjacency {adj.shape} vs series {x.shape}")
    n = adj.shape[0]
    merged = x.shape[:-2] + (x.shape[-2] * x.shape[-1],)  # (..., N, L*D)
    x3 = x.data.reshape(merged)
    out_data = np.matmul(adj.data, x3).reshape(x.shape)

    def backward_fn(g):
        g3 = g.reshape(merged)
        if adj.requires_grad:
            ga = np.matmul(g3, np.swapaxes(x3, -1, -2))
            if ga.ndim > 2:
                ga = ga.reshape((-1, n, n)).sum(axis=0)
            _accumulate(adj, ga)
        if x.requires_grad:
            _accumulate(x, np.matmul(adj.data.T, g3).reshape(x.shape))

    return _make(out_data, (adj, x), backward_fn)


def roll_time(x: Tensor, shifts: np.ndarray) -> Tensor:
    """Per-node circular left-rotation along the time axis.

    x: (..., N, L, D); shifts: integer array broadcastable to (..., N);
    out[..., i, t, :] = x[..., i, (t + shifts[i]) mod L, :].
    """
    x = _as_tensor(x)
    if x.ndim < 3:
        raise DimensionError(f"roll_time expects (..., N, L, D), got {x.shape}")
    n, length = x.shape[-3], x.shape[-2]
    shifts = np.asarray(shifts, dtype=np.int64)
    if shifts.ndim == 0 or shifts.shape[-1] != n:
        raise DimensionError(f"one shift per node required: {shifts.shape} vs {n} nodes")
    shifts = np.broadcast_to(shifts, x.shape[:-2])
    idx = np.mod(np.arange(length)[None, :] + np.expand_dims(shifts, -1), length)
    idx_b = idx.reshape(shifts.shape[:-1] + (n, length, 1))
    out_data = np.take_along_axis(x.data, idx_b, axis=-2)

    inv = np.mod(np.arange(length)[None, :] - np.expand_dims(shifts, -1), length)
    inv_b = inv.reshape(shifts.shape[:-1] + (n, length, 1))

    def backward_fn(g):
        _accumulate(x, np.take_along_axis(g, inv_b, axis=-2))

    return _make(out_data, (x,), backward_fn)


def circular_correlation(ref: Tensor, keys: Tensor) -> Tensor:
    """Per-node circular cross-correlation against a shared reference series.

    ref: (..., L, D); keys: (..., N, L, D). Output (..., N, L) with
    out[..., i, t] = sum_{d, u} ref[..., u, d] * keys[..., i, (u - t) mod L, d],
    computed in O(L log L) via FFT along the time axis and summed over channels.
    """
    ref, keys = _as_tensor(ref), _as_tensor(keys)
    if ref.ndim < 2 or keys.ndim < 3:
        raise DimensionError(f"need ref (..., L, D) and keys (..., N, L, D), got {ref.shape}, {keys.shape}")
    if ref.shape[-2:] != keys.shape[-2:]:
        raise DimensionError(f"time/channel dims disagree: ref {ref.shape}, keys {keys.shape}")
    length = ref.shape[-2]
    if length < 2:
        raise DimensionError("correlation needs series length >= 2")
    f_ref = np.fft.rfft(ref.data, axis=-2)                   # (..., Lf, D)
    f_keys = np.fft.rfft(keys.data, axis=-2)                 # (..., N, Lf, D)
    spec = (np.expand_dims(f_ref, -3) * np.conj(f_keys)).sum(axis=-1)  # (..., N, Lf)
    out_data = np.fft.irfft(spec, n=length, axis=-1)

    def backward_fn(g):
        f_g = np.fft.rfft(g, axis=-1)                        # (..., N, Lf)
        if ref.requires_grad:
            # circular convolution of g with keys, summed over nodes
            spec_ref = (np.expand_dims(f_g, -1) * f_keys).sum(axis=-3)
            _accumulate(ref, _unbroadcast(np.fft.irfft(spec_ref, n=length, axis=-2), ref.shape))
        if keys.requires_grad:
            spec_keys = np.expand_dims(f_ref, -3) * np.conj(np.expand_dims(f_g, -1))
            _accumulate(keys, np.fft.irfft(spec_keys, n=length, axis=-2))

    return _make(out_data, (ref, keys), backward_fn)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(x) into `.grad` of every tensor reaching `loss`."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise UsageError("backward already ran for this loss; rebuild the graph or reset grads")
    loss._backward_done = True
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_topo_order(loss)):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grad(params) -> None:
    """Clear gradients on a dict or iterable of tensors."""
    tensors = params.values() if isinstance(params, dict) else params
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error between tape and central differences."""

    eps: float
    tol: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def summary(self) -> str:
        status = "OK" if self.ok else f"FAIL ({', '.join(self.failures)})"
        return f"grad check {status}: worst rel err {self.worst:.3e} (eps={self.eps:g}, tol={self.tol:g})"


def grad_check(f, params: dict[str, Tensor], eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of scalar `f()` against central finite differences.

    `f` must be deterministic given `params` (freeze any stochastic inputs).
    Every entry of every parameter is perturbed, so keep sizes desk-scale.
    """
    zero_grad(params)
    loss = f()
    backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in params.items()}

    report = GradCheckReport(eps=eps, tol=tol)
    for name, p in params.items():
        worst = 0.0
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = float(f().data)
            flat[i] = keep - eps
            down = float(f().data)
            flat[i] = keep
            numeric = (up - down) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            scale = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / scale)
        report.max_rel_err[name] = worst
        if worst > tol:
            report.failures.append(name)
    return report
