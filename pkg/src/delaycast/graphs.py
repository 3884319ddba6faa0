"""Multi-scale graph structure learning.

Two global adjacencies come from independent trainable node embeddings pushed
through one shared two-layer generator; the embedding Gram matrix is squashed
into (0,1) and regularized with paired Gumbel noise at a temperature (identity
in eval mode). The local adjacency modulates a Gaussian distance kernel with a
small MLP over relative node features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eng
from .engine import Tensor
from .errors import ConfigurationError, DataError, DimensionError, DomainError

EARTH_RADIUS_KM = 6371.0


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class NodeGeometry:
    """Node coordinates (planar x/y or lon/lat degrees) or a distance matrix."""

    coords: np.ndarray | None = None
    kind: str | None = None  # "planar" | "lonlat" when coords are present
    distances: np.ndarray | None = None

    def __post_init__(self):
        if (self.coords is None) == (self.distances is None):
            raise ConfigurationError("geometry needs exactly one of coordinates or a distance matrix")
        if self.coords is not None:
            coords = np.asarray(self.coords, dtype=float)
            if coords.ndim != 2 or coords.shape[1] != 2:
                raise DimensionError(f"coordinates must be (N, 2), got {coords.shape}")
            if self.kind not in ("planar", "lonlat"):
                raise ConfigurationError(f"coordinate kind must be 'planar' or 'lonlat', got {self.kind!r}")
            if self.kind == "lonlat":
                lon, lat = coords[:, 0], coords[:, 1]
                if np.any(np.abs(lon) > 180.0) or np.any(np.abs(lat) > 90.0):
                    raise DataError("lon/lat out of range: need lon in [-180, 180], lat in [-90, 90]")
            object.__setattr__(self, "coords", coords)
        else:
            d = np.asarray(self.distances, dtype=float)
            if d.ndim != 2 or d.shape[0] != d.shape[1]:
                raise DimensionError(f"distance matrix must be square, got {d.shape}")
            if not np.allclose(d, d.T, atol=1e-9):
                raise DataError("distance matrix must be symmetric")
            if np.any(np.diagonal(d) != 0.0):
                raise DataError("distance matrix must have a zero diagonal")
            if np.any(d < 0) or not np.isfinite(d).all():
                raise DataError("distances must be finite and nonnegative")
            object.__setattr__(self, "distances", d)

    @property
    def n_nodes(self) -> int:
        return len(self.coords) if self.coords is not None else len(self.distances)

    def permuted(self, perm: np.ndarray) -> "NodeGeometry":
        if self.coords is not None:
            return NodeGeometry(coords=self.coords[perm], kind=self.kind)
        return NodeGeometry(distances=self.distances[np.ix_(perm, perm)])


def load_geometry(path) -> NodeGeometry:
    """Read `node,x,y` / `node,lon,lat` tables or a dense N x N distance matrix."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        rest = fh.read()
    header = [c.strip().lower() for c in first.replace("\t", ",").split(",")]
    if header[:3] in (["node", "x", "y"], ["node", "lon", "lat"]):
        rows = [line.split(",") for line in rest.splitlines() if line.strip()]
        try:
            table = np.array([[float(v) for v in row] for row in rows])
        except ValueError as exc:
            raise DataError(f"bad geometry table in {path}: {exc}") from exc
        if table.shape[1] != 3:
            raise DataError(f"geometry table must have 3 columns, got {table.shape[1]}")
        order = np.argsort(table[:, 0], kind="stable")
        kind = "planar" if header[1] == "x" else "lonlat"
        return NodeGeometry(coords=table[order, 1:3], kind=kind)
    # no recognized header: parse the whole file as a dense matrix
    try:
        matrix = np.array([[float(v) for v in line.split()] for line in (first + rest).splitlines() if line.strip()])
    except ValueError as exc:
        raise DataError(f"unrecognized geometry file {path}: {exc}") from exc
    return NodeGeometry(distances=matrix)


def pairwise_distance(geom: NodeGeometry, metric: str = "euclidean", radius: float = 1.0) -> np.ndarray:
    """Symmetric zero-diagonal distances from coordinates (or passthrough)."""
    if geom.distances is not None:
        return geom.distances
    coords = geom.coords
    if metric == "euclidean":
        diff = coords[:, None, :] - coords[None, :, :]
        d = np.sqrt((diff**2).sum(axis=-1))
    elif metric == "great_circle":
        if geom.kind != "lonlat":
            raise ConfigurationError("great_circle distance needs lon/lat coordinates")
        lon = np.radians(coords[:, 0])
        lat = np.radians(coords[:, 1])
        dlat = lat[:, None] - lat[None, :]
        dlon = lon[:, None] - lon[None, :]
        h = np.sin(dlat / 2) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2) ** 2
        d = 2.0 * radius * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    else:
        raise ConfigurationError(f"unknown distance metric {metric!r}")
    np.fill_diagonal(d, 0.0)
    return d


def relative_features(geom: NodeGeometry, metric: str = "euclidean", radius: float = 1.0) -> np.ndarray:
    """Pairwise features for the local-graph MLP: coordinate deltas, else distance."""
    if geom.coords is not None:
        return geom.coords[None, :, :] - geom.coords[:, None, :]  # (N, N, 2)
    return pairwise_distance(geom, metric, radius)[:, :, None]  # (N, N, 1)


def default_alpha(distances: np.ndarray) -> float:
    """Distance-scale default: mean of the nonzero squared distances."""
    sq = distances[distances > 0] ** 2
    return float(sq.mean()) if sq.size else 1.0


# ---------------------------------------------------------------------------
# global graphs


@dataclass
class GeneratorParams:
    """Shared two-layer embedding generator, d_e -> d_e with a relu between."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def generalized_embedding(embedding: Tensor, gen: GeneratorParams) -> Tensor:
    hidden = eng.relu(eng.fully_connected(embedding, gen.w1, gen.b1))
    return eng.fully_connected(hidden, gen.w2, gen.b2)


def global_graph_logits(embedding: Tensor, gen: GeneratorParams) -> Tensor:
    """Pre-squash Gram matrix of the generalized embedding (symmetric)."""
    e = generalized_embedding(embedding, gen)
    return eng.matmul(e, eng.transpose(e))


def global_graph_raw(embedding: Tensor, gen: GeneratorParams) -> Tensor:
    """Raw global adjacency with entries squashed into the open unit interval."""
    return eng.clip_open_unit(eng.sigmoid(global_graph_logits(embedding, gen)))


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    return -np.log(-np.log(u))


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard Gumbel(0, 1) draws via inverse transform of open-(0,1) uniforms."""
    u = rng.random(shape)
    u = np.where(u == 0.0, np.finfo(float).tiny, u)
    return gumbel_from_uniform(u)


def gumbel_regularize(ahat: Tensor, temperature: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Sparsity-preserving stochastic squash of an adjacency in (0, 1).

    Train mode perturbs the entry logits with a fresh Gumbel difference scaled
    by the temperature; eval mode is the exact identity (the paired noise
    cancels).
    """
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    data = ahat.data
    if np.any(data <= 0.0) or np.any(data >= 1.0):
        raise DomainError("adjacency entries must lie strictly in (0, 1) before regularization")
    if mode == "eval":
        return ahat
    if rng is None:
        raise ConfigurationError("train-mode regularization needs a seeded rng")
    noise = (sample_gumbel(data.shape, rng) - sample_gumbel(data.shape, rng)) / temperature
    logits = eng.sub(eng.log(ahat), eng.log(eng.sub(Tensor(np.ones_like(data)), ahat)))
    return eng.clip_open_unit(eng.sigmoid(eng.add(logits, Tensor(noise))))


# ---------------------------------------------------------------------------
# local graph


@dataclass
class LocalGraphParams:
    """Two-layer MLP over relative node features, softplus-nonnegative output."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def local_graph(
    geom: NodeGeometry,
    alpha: float,
    mlp: LocalGraphParams,
    *,
    metric: str = "euclidean",
    radius: float = 1.0,
    topk: int = 0,
) -> Tensor:
    """Distance-modulated learned adjacency: exp(-d^2/alpha) * MLP(features).

    `topk > 0` keeps only the k largest entries per row (plumbing for large N,
    off by default).
    """
    if alpha <= 0:
        raise ConfigurationError(f"alpha must be positive, got {alpha}")
    d = pairwise_distance(geom, metric, radius)
    kernel = np.exp(-(d**2) / alpha)
    feats = relative_features(geom, metric, radius)
    n = feats.shape[0]
    flat = Tensor(feats.reshape(n * n, feats.shape[-1]))
    hidden = eng.relu(eng.fully_connected(flat, mlp.w1, mlp.b1))
    gate = eng.softplus(eng.fully_connected(hidden, mlp.w2, mlp.b2))
    adj = eng.mul(Tensor(kernel), eng.reshape(gate, (n, n)))
    if topk > 0 and topk < n:
        keep = np.zeros((n, n))
        cols = np.argpartition(-adj.data, topk - 1, axis=1)[:, :topk]
        keep[np.arange(n)[:, None], cols] = 1.0
        adj = eng.mul(adj, Tensor(keep))
    return adj


# ---------------------------------------------------------------------------
# graph set


@dataclass
class GraphSet:
    """Adjacencies used by one forward pass; entries are None when ablated."""

    non_delayed: Tensor | None
    delayed: Tensor | None
    local: Tensor | None


@dataclass
class GraphLearnerParams:
    """All trainable pieces of the graph structure learner."""

    embed_nd: Tensor | None = None
    embed_d: Tensor | None = None
    generator: GeneratorParams | None = None
    local: LocalGraphParams | None = None


def build_graph_set(
    params: GraphLearnerParams,
    geom: NodeGeometry | None,
    mode: str,
    rng: np.random.Generator | None = None,
    *,
    temperature: float = 0.5,
    alpha: float | None = None,
    metric: str = "euclidean",
    radius: float = 1.0,
    topk: int = 0,
) -> GraphSet:
    """Build the (non-delayed, delayed, local) adjacency triple for one pass."""
    a_nd = a_d = a_l = None
    if params.embed_nd is not None:
        a_nd = gumbel_regularize(global_graph_raw(params.embed_nd, params.generator), temperature, mode, rng)
        a_d = gumbel_regularize(global_graph_raw(params.embed_d, params.generator), temperature, mode, rng)
    if params.local is not None:
        if geom is None:
            raise ConfigurationError(
                "local graph enabled but the dataset carries no geometry; "
                "disable it (ablation mg-l) or supply coordinates/distances"
            )
        if alpha is None:
            alpha = default_alpha(pairwise_distance(geom, metric, radius))
        a_l = local_graph(geom, alpha, params.local, metric=metric, radius=radius, topk=topk)
    return GraphSet(non_delayed=a_nd, delayed=a_d, local=a_l)
