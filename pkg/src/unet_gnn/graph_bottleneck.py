"""Graph bottleneck: sinusoidal offsets, coordinate warping, k-NN graph, graph conv.

Nodes are the bottleneck grid cells in row-major order; node ``i`` sits at
grid position ``(row, col) = divmod(i, W_L)`` and its raw coordinate is
``(x, y) = (col, row)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError
from .tensor_core import Tensor, matmul, record, relu, get_dtype


@dataclass
class BottleneckConfig:
    k: int = 8
    num_gnn_layers: int = 2
    d_pe: int = 32
    learnable_warp: bool = False
    aggregation: str = "sum"  # "sum" or "mean"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.num_gnn_layers < 1:
            raise ConfigError(f"num_gnn_layers must be >= 1, got {self.num_gnn_layers}")
        if self.d_pe < 4 or self.d_pe % 2:
            raise ConfigError(f"d_pe must be even and >= 4, got {self.d_pe}")
        if self.aggregation not in ("sum", "mean"):
            raise ConfigError(f"aggregation must be 'sum' or 'mean', got {self.aggregation!r}")


@dataclass
class PositionalEncoding:
    """Fixed sin/cos codes per node plus the 2 x d_pe offset projection."""

    height: int
    width: int
    encoding: np.ndarray  # [N, d_pe], float64
    projection: Tensor  # [2, d_pe]
    learnable: bool = False

    @property
    def d_pe(self):
        return self.encoding.shape[1]

    @property
    def num_nodes(self):
        return self.height * self.width


def grid_coordinates(height: int, width: int) -> np.ndarray:
    """Raw ``(x, y)`` coordinates of each node, row-major, float64 ``[N, 2]``."""
    rows, cols = np.divmod(np.arange(height * width), width)
    return np.stack([cols, rows], axis=1).astype(np.float64)


def sinusoidal_encoding(height: int, width: int, d_pe: int, projection=None,
                        learnable: bool = False) -> PositionalEncoding:
    """Sine/cosine codes of each node's grid coordinates.

    Half the width goes to x, half to y. Within an axis half, slot pair
    ``(2j, 2j+1)`` holds ``sin(x / w_j), cos(x / w_j)`` with
    ``w_j = 10000 ** (2j / (d_pe / 2))``.
    """
    if d_pe % 2 or d_pe < 4:
        raise ConfigError(f"d_pe must be even and >= 4, got {d_pe}")
    half = d_pe // 2
    pairs = (half + 1) // 2
    j = np.arange(pairs)
    omega = 10000.0 ** (2 * j / half)
    xy = grid_coordinates(height, width)

    def axis_code(v):
        ang = v[:, None] / omega[None, :]
        code = np.empty((v.shape[0], 2 * pairs))
        code[:, 0::2] = np.sin(ang)
        code[:, 1::2] = np.cos(ang)
        return code[:, :half]

    enc = np.concatenate([axis_code(xy[:, 0]), axis_code(xy[:, 1])], axis=1)
    if projection is None:
        projection = Tensor(np.zeros((2, d_pe)))
    if tuple(projection.shape) != (2, d_pe):
        raise ShapeError(f"projection must be [2, {d_pe}], got {list(projection.shape)}")
    return PositionalEncoding(height, width, enc, projection, learnable)


def warp_coordinates(pe: PositionalEncoding) -> np.ndarray:
    """``P' = P + R`` where ``R = encoding @ projection.T``; returns float64 ``[N, 2]``."""
    offset = pe.encoding @ pe.projection.data.astype(np.float64).T
    return grid_coordinates(pe.height, pe.width) + offset


@dataclass(frozen=True)
class GridGraph:
    """Directed k-NN adjacency in CSR form; each row holds self plus k others."""

    num_nodes: int
    k: int
    csr_offsets: np.ndarray
    csr_neighbors: np.ndarray
    includes_self: bool = True

    def neighbors(self, i: int) -> np.ndarray:
        return self.csr_neighbors[self.csr_offsets[i]:self.csr_offsets[i + 1]]

    def neighbor_table(self) -> np.ndarray:
        """``[N, k+1]`` view (valid because every row has the same degree)."""
        return self.csr_neighbors.reshape(self.num_nodes, self.k + 1)

    def dense(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        np.add.at(a, (np.repeat(np.arange(self.num_nodes), self.k + 1), self.csr_neighbors), 1.0)
        return a

    def __eq__(self, other):
        if not isinstance(other, GridGraph):
            return NotImplemented
        return (self.num_nodes == other.num_nodes and self.k == other.k
                and np.array_equal(self.csr_offsets, other.csr_offsets)
                and np.array_equal(self.csr_neighbors, other.csr_neighbors))

    __hash__ = None


def build_knn_graph(coords: np.ndarray, k: int) -> GridGraph:
    """Connect every node to itself and its k nearest others in warped space.

    Neighbor rows are ordered by ascending Euclidean distance with ties broken
    by ascending node index. The adjacency is left directed.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"coords must be [N, 2], got {list(coords.shape)}")
    if not 1 <= k < n:
        raise ConfigError(f"k must satisfy 1 <= k < num_nodes ({n}), got {k}")
    if not np.all(np.isfinite(coords)):
        raise ConfigError("warped coordinates contain non-finite values")
    table = kernels.knn_select(coords, k)
    offsets = np.arange(0, n * (k + 1) + 1, k + 1, dtype=np.int64)
    return GridGraph(n, k, offsets, np.ascontiguousarray(table.reshape(-1)))


@dataclass
class GraphConvParams:
    weight: Tensor  # [C_L, C_L]
    bias: Tensor  # [C_L]

    def __post_init__(self):
        c = self.weight.shape[0]
        if self.weight.ndim != 2 or self.weight.shape != (c, c):
            raise ShapeError(f"graph-conv weight must be square, got {list(self.weight.shape)}")
        if self.bias.shape != (c,):
            raise ShapeError(f"graph-conv bias must be [{c}], got {list(self.bias.shape)}")


def neighbor_aggregate(h: Tensor, graph: GridGraph) -> Tensor:
    """Differentiable ``out_i = sum_{j in N(i)} h_j`` over ``[N,C]`` or ``[B,N,C]``."""
    table = graph.neighbor_table()
    squeeze = h.ndim == 2
    v = h.data[None] if squeeze else h.data
    out = kernels.neighbor_sum(np.ascontiguousarray(v), table)

    def bw(g):
        g3 = g[None] if squeeze else g
        gh = kernels.neighbor_sum_transpose(np.ascontiguousarray(g3), table)
        return (gh[0] if squeeze else gh,)

    return record("neighbor_sum", out[0] if squeeze else out, (h,), bw)


def graph_conv(h: Tensor, graph: GridGraph, params: GraphConvParams, aggregation: str = "sum") -> Tensor:
    """One message-passing layer: ``relu(sum_{j in N(i)} W h_j + b)``.

    ``aggregation="mean"`` divides the neighbor sum by ``|N(i)| = k + 1``.
    """
    if h.ndim not in (2, 3):
        raise ShapeError(f"graph_conv: node features must be [N,C] or [B,N,C], got {list(h.shape)}")
    n, c = h.shape[-2:]
    if n != graph.num_nodes:
        raise ShapeError(f"graph_conv: {n} node rows but graph has {graph.num_nodes} nodes")
    if c != params.weight.shape[1]:
        raise ShapeError(f"graph_conv: feature width {c} does not match weight {list(params.weight.shape)}")
    msg = matmul(h, params.weight.transpose(1, 0))
    agg = neighbor_aggregate(msg, graph)
    if aggregation == "mean":
        agg = agg * (1.0 / (graph.k + 1))
    elif aggregation != "sum":
        raise ConfigError(f"aggregation must be 'sum' or 'mean', got {aggregation!r}")
    return relu(agg + params.bias)


@dataclass
class GraphBottleneck:
    """Holds the config, positional encoding, per-layer params and graph cache."""

    config: BottleneckConfig
    layers: list
    projection: Tensor
    _cache: dict = field(default_factory=dict, repr=False)

    def graph_for(self, height: int, width: int) -> GridGraph:
        key = (height, width)
        if not self.config.learnable_warp and key in self._cache:
            return self._cache[key]
        pe = sinusoidal_encoding(height, width, self.config.d_pe, self.projection,
                                 learnable=self.config.learnable_warp)
        graph = build_knn_graph(warp_coordinates(pe), self.config.k)
        if not self.config.learnable_warp:
            self._cache[key] = graph
        return graph


def bottleneck_forward(feature_map: Tensor, bottleneck: GraphBottleneck) -> Tensor:
    """Flatten ``[C,H,W]`` (or ``[B,C,H,W]``) to nodes, run the GNN layers, reshape back."""
    squeeze = feature_map.ndim == 3
    x = feature_map.reshape((1,) + feature_map.shape) if squeeze else feature_map
    b, c, hh, ww = x.shape
    # single-node maps: self-loop only
    graph = single_node_graph() if hh * ww == 1 else bottleneck.graph_for(hh, ww)
    h = x.reshape(b, c, hh * ww).transpose(0, 2, 1)
    for params in bottleneck.layers:
        h = graph_conv(h, graph, params, bottleneck.config.aggregation)
    out = h.transpose(0, 2, 1).reshape(b, c, hh, ww)
    return out.reshape(c, hh, ww) if squeeze else out


def single_node_graph() -> GridGraph:
    return GridGraph(1, 0, np.array([0, 1], dtype=np.int64), np.array([0], dtype=np.int64))


def make_bottleneck(config: BottleneckConfig, channels: int, rng: Optional[np.random.Generator] = None) -> GraphBottleneck:
    """Fan-in uniform init (bound ``sqrt(1/C)``) for W, zero bias, zero projection."""
    rng = np.random.default_rng(0) if rng is None else rng
    bound = np.sqrt(1.0 / channels)
    dtype = get_dtype()
    layers = [
        GraphConvParams(
            Tensor(rng.uniform(-bound, bound, size=(channels, channels)).astype(dtype), requires_grad=True),
            Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        )
        for _ in range(config.num_gnn_layers)
    ]
    proj = Tensor(np.zeros((2, config.d_pe), dtype=dtype), requires_grad=config.learnable_warp)
    return GraphBottleneck(config, layers, proj)
