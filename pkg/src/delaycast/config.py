"""Run configuration: defaults, `key = value` file parsing, serialization.

The run config is the CLI-facing flat key set (model, schedule, and data
fields). The structural :class:`ModelConfig` is resolved from it once the
dataset dimensions and geometry are known.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigurationError, UsageError

ABLATIONS = ("none", "sa", "mg-g", "mg-l")


@dataclass(frozen=True)
class RunConfig:
    """Every tunable knob, file-persistable as sorted `key = value` lines."""

    # model
    embed_dim: int = 64
    blocks: int = 4
    kernel_size: int = 3
    fc_width: int = 256
    node_embed_dim: int = 10
    reference: str = "mean"
    temperature: float = 0.5
    alpha: float | None = None  # None -> mean nonzero squared distance
    residual_mode: str = "passthrough"
    normalize_scores: bool = False
    local_topk: int = 0
    great_circle_radius: float = 1.0
    dtype: str = "float64"
    ablation: str = "none"
    # data
    history_len: int = 12
    horizon: int = 12
    split: str = "7:1:2"
    # training
    epochs: int = 100
    batch_size: int = 32
    base_lr: float = 0.005
    lr_decay: float = 0.05
    milestones: str = "50,75"
    min_lr: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.blocks < 1:
            raise ConfigurationError(f"blocks must be >= 1, got {self.blocks}")
        for name in ("embed_dim", "kernel_size", "fc_width", "node_embed_dim",
                     "history_len", "horizon", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.residual_mode not in ("passthrough", "subtract"):
            raise ConfigurationError(f"residual_mode must be passthrough|subtract, got {self.residual_mode!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32|float64, got {self.dtype!r}")
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        if self.alpha is not None and self.alpha <= 0:
            raise ConfigurationError(f"alpha must be positive (or unset for auto), got {self.alpha}")
        split_fractions(self.split)
        milestone_list(self.milestones)


def split_fractions(spec: str) -> tuple[float, float, float]:
    """Parse "7:1:2"-style ratios into normalized train/val/test fractions."""
    try:
        parts = [float(p) for p in spec.split(":")]
    except ValueError as exc:
        raise ConfigurationError(f"bad split spec {spec!r}") from exc
    if len(parts) != 3 or any(p < 0 for p in parts) or sum(parts) <= 0 or parts[0] <= 0:
        raise ConfigurationError(f"split must be three ratios with a nonempty train part, got {spec!r}")
    total = sum(parts)
    return tuple(p / total for p in parts)


def milestone_list(spec: str) -> tuple[int, ...]:
    """Parse "50,75"-style milestone epochs (empty string allowed)."""
    if not spec.strip():
        return ()
    try:
        values = tuple(int(p) for p in spec.split(","))
    except ValueError as exc:
        raise ConfigurationError(f"bad milestones {spec!r}") from exc
    if any(v < 0 for v in values) or list(values) != sorted(values):
        raise ConfigurationError(f"milestones must be sorted nonnegative epochs, got {spec!r}")
    return values


def _format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name: str, text: str, typ):
    text = text.strip()
    if typ is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise UsageError(f"config key {name!r}: expected a boolean, got {text!r}")
    if typ is int:
        try:
            return int(text)
        except ValueError as exc:
            raise UsageError(f"config key {name!r}: expected an integer, got {text!r}") from exc
    if typ is float:
        try:
            return float(text)
        except ValueError as exc:
            raise UsageError(f"config key {name!r}: expected a number, got {text!r}") from exc
    return text


_OPTIONAL_FLOATS = {"alpha"}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse `key = value` lines over defaults; unknown keys are rejected."""
    known = {f.name: f.type for f in fields(RunConfig)}
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected `key = value`, got {raw!r}")
        name, value = (part.strip() for part in line.split("=", 1))
        if name not in known:
            raise UsageError(f"unknown config key {name!r} (line {lineno})")
        if name in _OPTIONAL_FLOATS:
            overrides[name] = None if value.strip().lower() == "auto" else _parse_value(name, value, float)
            continue
        typ = {"int": int, "float": float, "bool": bool, "str": str}.get(str(known[name]).replace("builtins.", ""), str)
        overrides[name] = _parse_value(name, value, typ)
    cfg = base or RunConfig()
    try:
        return replace(cfg, **overrides)
    except ConfigurationError:
        raise
    except TypeError as exc:
        raise UsageError(str(exc)) from exc


def serialize_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in sorted(fields(RunConfig), key=lambda f: f.name)]
    return "\n".join(lines) + "\n"


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), base)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# resolved structural configuration


@dataclass(frozen=True)
class ModelConfig:
    """Structural model description, resolved against a concrete dataset."""

    n_nodes: int
    history_len: int
    horizon: int
    in_channels: int
    out_channels: int
    embed_dim: int = 64
    blocks: int = 4
    kernel_size: int = 3
    fc_width: int = 256
    node_embed_dim: int = 10
    reference: str = "mean"
    temperature: float = 0.5
    alpha: float | None = None
    residual_mode: str = "passthrough"
    normalize_scores: bool = False
    use_series_aligned: bool = True
    use_global_graphs: bool = True
    use_local_graph: bool = True
    local_feat_dim: int = 2  # 2 with coordinates, 1 with a distance matrix
    distance_metric: str = "euclidean"
    great_circle_radius: float = 1.0
    local_topk: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("n_nodes", "history_len", "horizon", "in_channels", "out_channels",
                     "embed_dim", "blocks", "kernel_size", "fc_width", "node_embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be odd, got {self.kernel_size}")
        if not self.use_global_graphs and not self.use_local_graph:
            raise ConfigurationError("the aligned/plain first branch needs a graph: enable global or local graphs")

    @property
    def branch_count(self) -> int:
        """First branch (aligned or plain) always exists; delayed and local are optional."""
        return 1 + int(self.use_global_graphs) + int(self.use_local_graph)


def model_config(run_cfg: RunConfig, n_nodes: int, channels: int, geometry=None) -> ModelConfig:
    """Resolve the file-level config against dataset dimensions and geometry."""
    use_sa = run_cfg.ablation != "sa"
    use_global = run_cfg.ablation != "mg-g"
    use_local = run_cfg.ablation != "mg-l"
    if use_local and geometry is None:
        raise ConfigurationError(
            "dataset carries no geometry, so the local graph cannot be built; "
            "supply coordinates/distances or run with ablation mg-l"
        )
    local_feat_dim = 2 if (geometry is not None and geometry.coords is not None) else 1
    metric = "great_circle" if (geometry is not None and geometry.kind == "lonlat") else "euclidean"
    return ModelConfig(
        n_nodes=n_nodes,
        history_len=run_cfg.history_len,
        horizon=run_cfg.horizon,
        in_channels=channels,
        out_channels=channels,
        embed_dim=run_cfg.embed_dim,
        blocks=run_cfg.blocks,
        kernel_size=run_cfg.kernel_size,
        fc_width=run_cfg.fc_width,
        node_embed_dim=run_cfg.node_embed_dim,
        reference=run_cfg.reference,
        temperature=run_cfg.temperature,
        alpha=run_cfg.alpha,
        residual_mode=run_cfg.residual_mode,
        normalize_scores=run_cfg.normalize_scores,
        use_series_aligned=use_sa,
        use_global_graphs=use_global,
        use_local_graph=use_local,
        local_feat_dim=local_feat_dim,
        distance_metric=metric,
        great_circle_radius=run_cfg.great_circle_radius,
        local_topk=run_cfg.local_topk,
        dtype=run_cfg.dtype,
    )
