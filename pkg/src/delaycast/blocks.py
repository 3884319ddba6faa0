"""Residual graph/FC forecast blocks and the assembled model.

Each block fuses the delay-aligned branch with plain graph convolutions over
the delayed and local adjacencies, flattens time into node vectors, runs a
temporal MLP, and emits a backward vector (fed to the next block) plus a
forward vector (summed into the forecast). All trainable arrays live in a flat
name -> tensor store so checkpoints are stable across runs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import alignment, engine as eng, graphs
from .alignment import ProjectionParams
from .config import ModelConfig
from .engine import Tensor
from .errors import CompatibilityError, DimensionError, FormatError, NumericError
from .graphs import GeneratorParams, GraphLearnerParams, GraphSet, LocalGraphParams, NodeGeometry

CHECKPOINT_MAGIC = b"DCKP"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# parameter store


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Stable name -> shape map for every trainable array of this config."""
    d, de = cfg.embed_dim, cfg.node_embed_dim
    length, horizon = cfg.history_len, cfg.horizon
    shapes: dict[str, tuple[int, ...]] = {
        "embed.w": (cfg.in_channels, d),
        "embed.b": (d,),
    }
    if cfg.use_global_graphs:
        shapes["graphs.embed_nd"] = (cfg.n_nodes, de)
        shapes["graphs.embed_d"] = (cfg.n_nodes, de)
        shapes["graphs.gen.w1"] = (de, de)
        shapes["graphs.gen.b1"] = (de,)
        shapes["graphs.gen.w2"] = (de, de)
        shapes["graphs.gen.b2"] = (de,)
    if cfg.use_local_graph:
        shapes["graphs.local.w1"] = (cfg.local_feat_dim, 16)
        shapes["graphs.local.b1"] = (16,)
        shapes["graphs.local.w2"] = (16, 1)
        shapes["graphs.local.b2"] = (1,)
    width = length * d
    for m in range(cfg.blocks):
        p = f"block{m}."
        if cfg.use_series_aligned:
            shapes[p + "proj.wq"] = (d, d)
            shapes[p + "proj.wk"] = (d, d)
            shapes[p + "conv"] = (cfg.kernel_size, d, d)
        else:
            shapes[p + "w_first"] = (d, d)
        if cfg.use_global_graphs:
            shapes[p + "w_d"] = (d, d)
        if cfg.use_local_graph:
            shapes[p + "w_l"] = (d, d)
        shapes[p + "fuse.w"] = (cfg.branch_count * d, d)
        shapes[p + "fuse.b"] = (d,)
        shapes[p + "mlp.w1"] = (width, cfg.fc_width)
        shapes[p + "mlp.b1"] = (cfg.fc_width,)
        shapes[p + "mlp.w2"] = (cfg.fc_width, width)
        shapes[p + "mlp.b2"] = (width,)
        shapes[p + "fc_b.w"] = (width, width)
        shapes[p + "fc_b.b"] = (width,)
        shapes[p + "fc_f.w"] = (width, horizon * d)
        shapes[p + "fc_f.b"] = (horizon * d,)
    shapes["head.w"] = (d, cfg.out_channels)
    shapes["head.b"] = (cfg.out_channels,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Draw all trainable arrays in stable name order."""
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.startswith("graphs.embed"):
            data = rng.normal(0.0, 1.0 / np.sqrt(cfg.node_embed_dim), size=shape)
        elif len(shape) >= 2:
            bound = 1.0 / np.sqrt(int(np.prod(shape[:-1])))
            data = rng.uniform(-bound, bound, size=shape)
        elif name == "graphs.local.b1":
            # self-pair features are exactly zero; keep these relu
            # preactivations off the kink
            data = rng.uniform(0.05, 0.15, size=shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {name: Tensor(t.data.copy(), requires_grad=True) for name, t in params.items()}


@dataclass
class BlockParams:
    """Structured view over one block's slice of the flat store."""

    proj: ProjectionParams | None
    conv_kernel: Tensor | None
    w_first: Tensor | None
    w_delayed: Tensor | None
    w_local: Tensor | None
    fuse_w: Tensor
    fuse_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    fcb_w: Tensor
    fcb_b: Tensor
    fcf_w: Tensor
    fcf_b: Tensor


def block_view(cfg: ModelConfig, params: dict[str, Tensor], m: int) -> BlockParams:
    p = f"block{m}."
    aligned = cfg.use_series_aligned
    return BlockParams(
        proj=ProjectionParams(params[p + "proj.wq"], params[p + "proj.wk"]) if aligned else None,
        conv_kernel=params[p + "conv"] if aligned else None,
        w_first=None if aligned else params[p + "w_first"],
        w_delayed=params[p + "w_d"] if cfg.use_global_graphs else None,
        w_local=params[p + "w_l"] if cfg.use_local_graph else None,
        fuse_w=params[p + "fuse.w"],
        fuse_b=params[p + "fuse.b"],
        mlp_w1=params[p + "mlp.w1"],
        mlp_b1=params[p + "mlp.b1"],
        mlp_w2=params[p + "mlp.w2"],
        mlp_b2=params[p + "mlp.b2"],
        fcb_w=params[p + "fc_b.w"],
        fcb_b=params[p + "fc_b.b"],
        fcf_w=params[p + "fc_f.w"],
        fcf_b=params[p + "fc_f.b"],
    )


def graph_learner_view(cfg: ModelConfig, params: dict[str, Tensor]) -> GraphLearnerParams:
    view = GraphLearnerParams()
    if cfg.use_global_graphs:
        view.embed_nd = params["graphs.embed_nd"]
        view.embed_d = params["graphs.embed_d"]
        view.generator = GeneratorParams(
            params["graphs.gen.w1"], params["graphs.gen.b1"],
            params["graphs.gen.w2"], params["graphs.gen.b2"],
        )
    if cfg.use_local_graph:
        view.local = LocalGraphParams(
            params["graphs.local.w1"], params["graphs.local.b1"],
            params["graphs.local.w2"], params["graphs.local.b2"],
        )
    return view


# ---------------------------------------------------------------------------
# model operations


def embed_input(x: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Per-timestep affine lift of raw channels into the working width."""
    return eng.fully_connected(x, params["embed.w"], params["embed.b"])


def build_graph_set(cfg: ModelConfig, params: dict[str, Tensor], geom: NodeGeometry | None,
                    mode: str, rng: np.random.Generator | None) -> GraphSet:
    return graphs.build_graph_set(
        graph_learner_view(cfg, params), geom, mode, rng,
        temperature=cfg.temperature, alpha=cfg.alpha,
        metric=cfg.distance_metric, radius=cfg.great_circle_radius, topk=cfg.local_topk,
    )


def multi_graph_conv(
    xm: Tensor,
    gset: GraphSet,
    cfg: ModelConfig,
    bp: BlockParams,
    tau_override: np.ndarray | None = None,
    delays_out: list | None = None,
) -> Tensor:
    """Fuse the aligned branch with delayed/local graph convolutions."""
    first_graph = gset.non_delayed if cfg.use_global_graphs else gset.local
    branches = []
    if cfg.use_series_aligned:
        branches.append(alignment.series_aligned_graph_conv(
            xm, first_graph, bp.proj, bp.conv_kernel,
            reference=cfg.reference, normalize_scores=cfg.normalize_scores,
            tau_override=tau_override, delays_out=delays_out,
        ))
    else:
        branches.append(eng.matmul(eng.graph_mix(first_graph, xm), bp.w_first))
        if delays_out is not None:
            delays_out.append(None)
    if cfg.use_global_graphs:
        branches.append(eng.matmul(eng.graph_mix(gset.delayed, xm), bp.w_delayed))
    if cfg.use_local_graph:
        branches.append(eng.matmul(eng.graph_mix(gset.local, xm), bp.w_local))
    return eng.fully_connected(eng.concat(branches, axis=-1), bp.fuse_w, bp.fuse_b)


def graph_fc_block(
    xm: Tensor,
    gset: GraphSet,
    cfg: ModelConfig,
    bp: BlockParams,
    tau_override: np.ndarray | None = None,
    delays_out: list | None = None,
) -> tuple[Tensor, Tensor]:
    """One block: multi-graph conv, temporal MLP, backward/forward heads."""
    h0 = multi_graph_conv(xm, gset, cfg, bp, tau_override, delays_out)
    lead = h0.shape[:-3]
    n, width = cfg.n_nodes, cfg.history_len * cfg.embed_dim
    h1 = eng.reshape(h0, lead + (n, width))
    h2 = eng.fully_connected(eng.relu(eng.fully_connected(h1, bp.mlp_w1, bp.mlp_b1)), bp.mlp_w2, bp.mlp_b2)
    xb = eng.reshape(eng.fully_connected(h2, bp.fcb_w, bp.fcb_b), lead + (n, cfg.history_len, cfg.embed_dim))
    xf = eng.reshape(eng.fully_connected(h2, bp.fcf_w, bp.fcf_b), lead + (n, cfg.horizon, cfg.embed_dim))
    return xb, xf


def forward(
    x,
    cfg: ModelConfig,
    params: dict[str, Tensor],
    geom: NodeGeometry | None = None,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    frozen_delays: list | None = None,
    info: dict | None = None,
) -> Tensor:
    """Full model: embed, stack blocks, sum forecast heads, project channels.

    The graph set is built once per call; Gumbel noise (train mode) and
    per-block delays are fresh each call unless `frozen_delays` pins the
    latter. `info`, when given, receives the delays, per-block forecasts and
    the graph set.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    expected = (cfg.n_nodes, cfg.history_len, cfg.in_channels)
    if x.ndim < 3 or x.shape[-3:] != expected:
        raise DimensionError(f"input trailing dims {x.shape} do not match (N, L, C) = {expected}")
    gset = build_graph_set(cfg, params, geom, mode, rng)
    state = embed_input(x, params)
    delays: list = []
    block_forecasts: list[Tensor] = []
    total = None
    for m in range(cfg.blocks):
        bp = block_view(cfg, params, m)
        tau = frozen_delays[m] if frozen_delays is not None else None
        xb, xf = graph_fc_block(state, gset, cfg, bp, tau_override=tau, delays_out=delays)
        if not (np.isfinite(xb.data).all() and np.isfinite(xf.data).all()):
            raise NumericError(f"non-finite values produced in block {m}")
        block_forecasts.append(xf)
        total = xf if total is None else eng.add(total, xf)
        state = xb if cfg.residual_mode == "passthrough" else eng.sub(state, xb)
    out = eng.fully_connected(total, params["head.w"], params["head.b"])
    if info is not None:
        info["delays"] = delays
        info["block_forecasts"] = block_forecasts
        info["graph_set"] = gset
        info["head_contributions"] = [
            eng.matmul(xf, params["head.w"]).data for xf in block_forecasts
        ]
    return out


# ---------------------------------------------------------------------------
# checkpoints: flat named-array container with an explicit manifest


def save_checkpoint(path, params: dict[str, Tensor]) -> None:
    """Write `name/shape` manifest then raw little-endian float64 payloads."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.data.ndim))
            fh.write(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
        for tensor in params.values():
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}", offset=0)
    offset = 4
    try:
        version, count = struct.unpack_from("<II", blob, offset)
    except struct.error as exc:
        raise FormatError("truncated checkpoint header", offset=offset) from exc
    offset += 8
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    manifest: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            if len(blob) < offset + name_len:
                raise struct.error
            offset += name_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
        except struct.error as exc:
            raise FormatError("truncated checkpoint manifest", offset=offset) from exc
        manifest.append((name, tuple(shape)))
    arrays: dict[str, np.ndarray] = {}
    for name, shape in manifest:
        n_values = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 8 * n_values
        if len(blob) < end:
            raise FormatError(f"truncated payload for parameter {name!r}", offset=offset)
        arrays[name] = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise FormatError("trailing bytes after checkpoint payload", offset=offset)
    return arrays


def restore_params(cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """Validate loaded arrays against the config's expected names and shapes."""
    expected = parameter_shapes(cfg)
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise CompatibilityError(
            f"checkpoint does not match the model config (missing: {missing[:4]}, unexpected: {extra[:4]})"
        )
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CompatibilityError(
                f"parameter {name!r} has shape {arrays[name].shape}, config expects {shape}"
            )
    return {name: Tensor(arrays[name], requires_grad=True) for name in expected}
