"""Datasets: container, STGF binary container, normalization, windowing, and a
synthetic delayed-diffusion generator with planted ground-truth delays.

Splits are contiguous and chronological (train, then val, then test).
Normalization statistics come from the train split only and are kept for the
inverse transform; metrics are always computed in original units.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace

import numpy as np

from .config import split_fractions
from .errors import DataError, FormatError
from .graphs import NodeGeometry

STGF_MAGIC = b"STGF"
STGF_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_DTYPE = {"float32": 0, "f32": 0, "float64": 1, "f64": 1}
_COORD_KINDS = {0: None, 1: "planar", 2: "lonlat"}
_KIND_CODES = {None: 0, "planar": 1, "lonlat": 2}


@dataclass(frozen=True)
class Dataset:
    """Raw series (T, N, C) plus geometry, split bounds and norm stats."""

    values: np.ndarray
    geometry: NodeGeometry | None = None
    split: str = "7:1:2"
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise DataError(f"series must be (T, N, C), got shape {values.shape}")
        if not np.isfinite(values).all():
            raise DataError("series contains NaN/Inf values; missing data is not supported")
        if self.geometry is not None and self.geometry.n_nodes != values.shape[1]:
            raise DataError(
                f"geometry covers {self.geometry.n_nodes} nodes but the series has {values.shape[1]}"
            )
        split_fractions(self.split)
        object.__setattr__(self, "values", values)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    @property
    def is_normalized(self) -> bool:
        return self.norm_mean is not None

    def split_bounds(self) -> dict[str, tuple[int, int]]:
        ft, fv, _ = split_fractions(self.split)
        t = self.n_steps
        n_train = int(t * ft)
        n_val = int(t * fv)
        return {
            "train": (0, n_train),
            "val": (n_train, n_train + n_val),
            "test": (n_train + n_val, t),
        }

    def split_values(self, split: str) -> np.ndarray:
        bounds = self.split_bounds()
        if split not in bounds:
            raise DataError(f"unknown split {split!r}, expected train|val|test")
        start, stop = bounds[split]
        return self.values[start:stop]


@dataclass(frozen=True)
class WindowSample:
    """Adjacent, non-overlapping history/target windows inside one split."""

    inputs: np.ndarray  # (N, L, C)
    target: np.ndarray  # (N, L', C)
    origin: int


# ---------------------------------------------------------------------------
# normalization


def normalize(ds: Dataset) -> Dataset:
    """Standardize every split with per-channel train-split mean/std."""
    if ds.is_normalized:
        raise DataError("dataset is already normalized")
    train = ds.split_values("train")
    if train.shape[0] == 0:
        raise DataError("train split is empty; cannot derive normalization stats")
    mean = train.mean(axis=(0, 1))
    std = train.std(axis=(0, 1))
    if np.any(std == 0.0):
        flat = np.flatnonzero(std == 0.0)
        raise DataError(f"constant channel(s) {flat.tolist()} have zero variance")
    return replace(ds, values=(ds.values - mean) / std, norm_mean=mean, norm_std=std)


def denormalize(ds: Dataset, values: np.ndarray) -> np.ndarray:
    """Map model-scale values back to original units using the stored stats."""
    if not ds.is_normalized:
        raise DataError("dataset carries no normalization stats")
    return values * ds.norm_std + ds.norm_mean


# ---------------------------------------------------------------------------
# windowing


def window_count(ds: Dataset, history_len: int, horizon: int, split: str) -> int:
    span = ds.split_values(split).shape[0]
    total = history_len + horizon
    if span < total:
        raise DataError(
            f"split {split!r} holds {span} steps, too short for windows of {history_len}+{horizon}"
        )
    return span - total + 1


def window_batch(ds: Dataset, history_len: int, horizon: int, split: str, origins) -> tuple[np.ndarray, np.ndarray]:
    """Gather (B, N, L, C) inputs and (B, N, L', C) targets at the given origins."""
    values = ds.split_values(split)
    origins = np.asarray(origins, dtype=np.int64)
    count = window_count(ds, history_len, horizon, split)
    if origins.size and (origins.min() < 0 or origins.max() >= count):
        raise DataError(f"window origins out of range [0, {count})")
    x = np.stack([values[o:o + history_len].transpose(1, 0, 2) for o in origins])
    y = np.stack([values[o + history_len:o + history_len + horizon].transpose(1, 0, 2) for o in origins])
    return x, y


def iter_windows(ds: Dataset, history_len: int, horizon: int, split: str):
    """Stride-1 stream of :class:`WindowSample` over one split."""
    count = window_count(ds, history_len, horizon, split)
    values = ds.split_values(split)
    for origin in range(count):
        yield WindowSample(
            inputs=values[origin:origin + history_len].transpose(1, 0, 2),
            target=values[origin + history_len:origin + history_len + horizon].transpose(1, 0, 2),
            origin=origin,
        )


# ---------------------------------------------------------------------------
# synthetic delayed diffusion


@dataclass(frozen=True)
class SynthSpec:
    """Delayed copies of one periodic base signal, plus optional noise.

    `noise_sigma` is relative to the base signal's standard deviation. Node 0
    carries the base signal (delay 0); planted delays are true circular shifts
    because every harmonic divides the series length. `min_period` bounds the
    fastest harmonic (in samples): small values make the series move quickly
    relative to the delays, so misalignment actually costs accuracy.
    """

    n_nodes: int = 16
    n_steps: int = 2000
    max_delay: int = 5
    noise_sigma: float = 0.0
    n_harmonics: int = 3
    min_period: int = 4

    def __post_init__(self):
        if self.n_nodes < 1:
            raise DataError(f"need at least one node, got {self.n_nodes}")
        if self.n_steps < 4:
            raise DataError(f"need at least 4 steps, got {self.n_steps}")
        if not 0 <= self.max_delay < self.n_steps:
            raise DataError(f"max_delay must lie in [0, n_steps), got {self.max_delay}")
        if self.noise_sigma < 0:
            raise DataError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")
        if self.n_harmonics < 1:
            raise DataError(f"need at least one harmonic, got {self.n_harmonics}")
        if self.min_period < 2:
            raise DataError(f"min_period must be at least 2 samples, got {self.min_period}")


def synth_delayed_diffusion(spec: SynthSpec, seed: int) -> tuple[Dataset, np.ndarray]:
    """Generate the dataset plus the planted integer delay of every node."""
    rng = np.random.default_rng(seed)
    t = np.arange(spec.n_steps)
    # fundamental always present: the autocorrelation peak at lag 0 is unique
    cycles = [1]
    if spec.n_harmonics > 1:
        top = max(3, spec.n_steps // spec.min_period)
        extra = rng.choice(np.arange(2, top + 1), size=min(spec.n_harmonics - 1, top - 1), replace=False)
        cycles.extend(int(c) for c in extra)
    amps = np.concatenate([[1.0], rng.uniform(0.3, 1.0, size=len(cycles) - 1)])
    phases = rng.uniform(0, 2 * np.pi, size=len(cycles))
    base = np.zeros(spec.n_steps)
    for cyc, amp, phase in zip(cycles, amps, phases):
        base += amp * np.sin(2 * np.pi * cyc * t / spec.n_steps + phase)

    delays = np.zeros(spec.n_nodes, dtype=np.int64)
    if spec.n_nodes > 1:
        delays[1:] = rng.integers(0, spec.max_delay + 1, size=spec.n_nodes - 1)
    series = np.stack([np.roll(base, d) for d in delays], axis=1)[:, :, None]
    if spec.noise_sigma > 0:
        series = series + rng.normal(0.0, spec.noise_sigma * base.std(), size=series.shape)

    # propagation geometry: radial distance from the source grows with delay
    angles = rng.uniform(0, 2 * np.pi, size=spec.n_nodes)
    radii = delays + rng.uniform(0.0, 0.5, size=spec.n_nodes)
    coords = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    coords[0] = 0.0
    geometry = NodeGeometry(coords=coords, kind="planar")
    return Dataset(values=series, geometry=geometry), delays


# ---------------------------------------------------------------------------
# STGF container


def save_stgf(path, ds: Dataset, dtype: str = "float64") -> None:
    """Write the binary container: header, optional coords, T blocks of N*C."""
    if dtype not in _CODE_FOR_DTYPE:
        raise DataError(f"unsupported dtype {dtype!r}")
    code = _CODE_FOR_DTYPE[dtype]
    coords = None
    kind = None
    if ds.geometry is not None:
        if ds.geometry.coords is None:
            raise DataError("STGF stores coordinates; distance-matrix geometry cannot be embedded")
        coords, kind = ds.geometry.coords, ds.geometry.kind
    with open(path, "wb") as fh:
        fh.write(STGF_MAGIC)
        fh.write(struct.pack("<IIQII", STGF_VERSION, ds.n_nodes, ds.n_steps, ds.n_channels, code))
        fh.write(struct.pack("<B", _KIND_CODES[kind]))
        if coords is not None:
            fh.write(np.ascontiguousarray(coords, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.values, dtype=_DTYPE_CODES[code]).tobytes())


def load_stgf(path, split: str = "7:1:2") -> Dataset:
    """Parse the container; malformed input raises FormatError with an offset."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != STGF_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {STGF_MAGIC!r}", offset=0)
    offset = 4
    try:
        version, n_nodes, n_steps, n_channels, dtype_code = struct.unpack_from("<IIQII", blob, offset)
    except struct.error as exc:
        raise FormatError("truncated header", offset=offset) from exc
    offset += struct.calcsize("<IIQII")
    if version != STGF_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if dtype_code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {dtype_code}", offset=offset - 4)
    try:
        (coord_kind,) = struct.unpack_from("<B", blob, offset)
    except struct.error as exc:
        raise FormatError("truncated coordinate flag", offset=offset) from exc
    offset += 1
    if coord_kind not in _COORD_KINDS:
        raise FormatError(f"unknown coordinate kind {coord_kind}", offset=offset - 1)
    geometry = None
    if coord_kind != 0:
        coord_bytes = n_nodes * 2 * 8
        if len(blob) < offset + coord_bytes:
            raise FormatError("truncated coordinate block", offset=offset)
        coords = np.frombuffer(blob[offset:offset + coord_bytes], dtype="<f8").reshape(n_nodes, 2)
        geometry = NodeGeometry(coords=coords.copy(), kind=_COORD_KINDS[coord_kind])
        offset += coord_bytes
    dtype = _DTYPE_CODES[dtype_code]
    payload = n_steps * n_nodes * n_channels * dtype.itemsize
    if len(blob) < offset + payload:
        raise FormatError(
            f"truncated payload: need {payload} bytes, have {len(blob) - offset}", offset=offset
        )
    if len(blob) > offset + payload:
        raise FormatError("trailing bytes after payload", offset=offset + payload)
    values = np.frombuffer(blob[offset:offset + payload], dtype=dtype).reshape(n_steps, n_nodes, n_channels)
    return Dataset(values=values.copy(), geometry=geometry, split=split)


# ---------------------------------------------------------------------------
# delimited-text import (time,node,channel,value)


def import_text(path, split: str = "7:1:2") -> Dataset:
    """Convert a dense long-format `time,node,channel,value` table."""
    entries = {}
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip().lower() for c in header] != ["time", "node", "channel", "value"]:
            raise DataError(f"expected header time,node,channel,value in {path}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t, n, c = int(row[0]), int(row[1]), int(row[2])
                v = float(row[3])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: bad row {row!r}") from exc
            entries[(t, n, c)] = v
    if not entries:
        raise DataError(f"no rows in {path}")
    times = {t: i for i, t in enumerate(sorted({k[0] for k in entries}))}
    nodes = {n: i for i, n in enumerate(sorted({k[1] for k in entries}))}
    channels = {c: i for i, c in enumerate(sorted({k[2] for k in entries}))}
    if len(entries) != len(times) * len(nodes) * len(channels):
        raise DataError("table is not dense: every (time, node, channel) cell is required")
    values = np.empty((len(times), len(nodes), len(channels)))
    for (t, n, c), v in entries.items():
        values[times[t], nodes[n], channels[c]] = v
    return Dataset(values=values, split=split)
