"""Per-point feature extractors: PointNet-style shared MLPs with spatial
transformers, and EdgeConv over k-nearest-neighbour graphs."""

from dataclasses import dataclass

import numpy as np

from pointcaps.autodiff import Tensor, concat, gather_rows, matmul, reduce
from pointcaps.errors import ConfigError, DimensionError
from pointcaps.nn import Dense, Module, SharedMLP


@dataclass
class ExtractorConfig:
    kind: str = "pointnet"
    # pointnet: widths before and after the feature transform;
    # edgeconv: widths of the first and second EdgeConv block
    mlp_widths: tuple = ((64, 64), (64, 128))
    final_width: int = 1024
    knn_k: int = 20
    stn_widths: tuple = (64, 128, 1024)
    stn_dense_widths: tuple = (512, 256)
    stn_reg_weight: float = 0.0
    dynamic_graph: bool = True
    batch_norm: bool = True
    in_features: int = 3

    def __post_init__(self):
        self.mlp_widths = tuple(tuple(int(w) for w in stage) for stage in self.mlp_widths)
        self.stn_widths = tuple(int(w) for w in self.stn_widths)
        self.stn_dense_widths = tuple(int(w) for w in self.stn_dense_widths)

    def validate(self, n_points=None):
        if self.kind not in ("pointnet", "edgeconv"):
            raise ConfigError("extractor", f"unknown extractor {self.kind!r}")
        if len(self.mlp_widths) != 2 or any(len(s) == 0 for s in self.mlp_widths):
            raise ConfigError("mlp_widths", "need two non-empty stages")
        if any(w <= 0 for s in self.mlp_widths for w in s) or self.final_width <= 0:
            raise ConfigError("mlp_widths", "widths must be positive")
        if self.kind == "edgeconv":
            if self.knn_k < 1:
                raise ConfigError("knn_k", "must be positive")
            if n_points is not None and self.knn_k >= n_points:
                raise ConfigError("knn_k", f"must be < n_points ({n_points})")


class STN(Module):
    """Predicts a ``k x k`` matrix per sample and right-multiplies every row by it.

    The prediction path (shared MLP, max pool, dense layers) is symmetric in
    the points. The last layer starts at zero weight and identity bias, so a
    fresh STN is the identity map.
    """

    def __init__(self, k, rng, conv_widths=(64, 128, 1024), dense_widths=(512, 256), batch_norm=True):
        self.k = k
        self.conv = SharedMLP(k, conv_widths, rng, batch_norm=batch_norm)
        self.dense = SharedMLP(self.conv.out_features, dense_widths, rng, batch_norm=batch_norm)
        self.out = Dense(self.dense.out_features, k * k, rng, init="zeros")
        self.out.bias.data[...] = np.eye(k).reshape(-1)
        self.last_transform = None

    def predict(self, x):
        h = self.conv(x)
        pooled = reduce("max", h, axis=1)
        t = self.out(self.dense(pooled))
        return t.reshape(x.shape[0], self.k, self.k)

    def forward(self, x):
        if x.shape[-1] != self.k:
            raise DimensionError(f"STN of side {self.k} got {x.shape[-1]} channels")
        transform = self.predict(x)
        self.last_transform = transform
        return matmul(x, transform)

    def orthogonality_penalty(self):
        """``||I - T T^T||_F^2`` averaged over the batch, for the last forward."""
        t = self.last_transform
        gram = matmul(t, t.transpose(0, 2, 1))
        diff = gram - Tensor(np.eye(self.k), dtype=t.dtype)
        return (diff * diff).sum(axis=(1, 2)).mean()


class PointNetExtractor(Module):
    """STN(3) -> shared MLP -> STN(C) -> shared MLP ending at ``final_width``."""

    def __init__(self, config, rng):
        config.validate()
        self.config = config
        first, second = config.mlp_widths
        bn = config.batch_norm
        self.input_stn = STN(config.in_features, rng, config.stn_widths, config.stn_dense_widths, bn)
        self.mlp1 = SharedMLP(config.in_features, first, rng, batch_norm=bn)
        self.feature_stn = STN(first[-1], rng, config.stn_widths, config.stn_dense_widths, bn)
        self.mlp2 = SharedMLP(first[-1], tuple(second) + (config.final_width,), rng, batch_norm=bn)
        self.out_features = config.final_width

    def forward(self, points):
        if points.ndim != 3 or points.shape[-1] != self.config.in_features:
            raise DimensionError(f"PointNet expects B x N x {self.config.in_features}, got {points.shape}")
        x = self.input_stn(points)
        x = self.mlp1(x)
        x = self.feature_stn(x)
        return self.mlp2(x)

    def regularization(self):
        if self.config.stn_reg_weight <= 0 or self.feature_stn.last_transform is None:
            return None
        return self.feature_stn.orthogonality_penalty() * self.config.stn_reg_weight


def knn_graph(points, k):
    """Indices of the ``k`` nearest other points for every point.

    ``points`` is B x N x C (ndarray or Tensor). Distances are exact squared
    Euclidean differences; ties go to the lower index and a point is never its
    own neighbour (duplicates at distance 0 are legal neighbours).
    """
    x = np.asarray(getattr(points, "data", points), dtype=np.float64)
    b, n, _ = x.shape
    if not 1 <= k < n:
        raise ConfigError("knn_k", f"need 1 <= k < N, got k={k}, N={n}")
    diag = np.arange(n)
    # Prefilter with the Gram form |a|^2 + |b|^2 - 2ab (fast, slightly inexact),
    # then rank a few spare candidates by exact differences.
    sq = (x * x).sum(axis=-1)
    gram = sq[:, :, None] + sq[:, None, :] - 2.0 * (x @ x.transpose(0, 2, 1))
    gram[:, diag, diag] = np.inf
    gram = gram.reshape(b * n, n)
    m = min(k + 4, n - 1)
    cand = np.argpartition(gram, m - 1, axis=1)[:, :m]
    cutoff = np.take_along_axis(gram, cand, axis=1).max(axis=1)
    flat = x.reshape(b * n, -1)
    owner = np.repeat(np.arange(b) * n, n)[:, None]
    exact = ((flat[:, None, :] - flat[cand + owner]) ** 2).sum(axis=-1)
    order = np.lexsort((cand, exact), axis=-1)[:, :k]
    out = np.take_along_axis(cand, order, axis=1)
    kth = np.take_along_axis(exact, order[:, -1:], axis=1)[:, 0]
    # Every non-candidate has exact distance >= cutoff - slack; rows whose k-th
    # distance is not clearly below that (ties, round-off) are redone exactly.
    slack = 1e-9 * (1.0 + 4.0 * sq.max(initial=0.0))
    unsure = np.flatnonzero(~(kth < cutoff - slack)) if m < n - 1 else np.empty(0, dtype=np.int64)
    for row in unsure:
        dist = ((flat[row] - x[row // n]) ** 2).sum(axis=-1)
        dist[row % n] = np.inf
        out[row] = np.argsort(dist, kind="stable")[:k]
    return out.reshape(b, n, k)


class EdgeConvBlock(Module):
    """Shared MLP on ``concat(x_i, x_j - x_i)`` for each neighbour j, max over j."""

    def __init__(self, in_features, widths, rng, batch_norm=True):
        self.in_features = in_features
        self.mlp = SharedMLP(2 * in_features, widths, rng, batch_norm=batch_norm)
        self.out_features = self.mlp.out_features

    def forward(self, x, idx):
        b, n, c = x.shape
        k = idx.shape[-1]
        neighbours = gather_rows(x, idx)
        centre = x.reshape(b, n, 1, c)
        tiled = centre + Tensor(np.zeros((b, n, k, c)), dtype=x.dtype)
        edges = concat([tiled, neighbours - centre], axis=-1)
        return reduce("max", self.mlp(edges), axis=2)


class EdgeConvExtractor(Module):
    """Two EdgeConv blocks whose outputs are concatenated and lifted to ``final_width``.

    The first block's graph is built on coordinates. With ``dynamic_graph`` the
    second block rebuilds the graph in the first block's feature space.
    """

    def __init__(self, config, rng):
        config.validate()
        self.config = config
        first, second = config.mlp_widths
        bn = config.batch_norm
        self.block1 = EdgeConvBlock(config.in_features, first, rng, bn)
        self.block2 = EdgeConvBlock(self.block1.out_features, second, rng, bn)
        total = self.block1.out_features + self.block2.out_features
        self.fuse = SharedMLP(total, (config.final_width,), rng, batch_norm=bn)
        self.out_features = config.final_width

    def forward(self, points):
        if points.ndim != 3 or points.shape[-1] != self.config.in_features:
            raise DimensionError(f"EdgeConv expects B x N x {self.config.in_features}, got {points.shape}")
        k = self.config.knn_k
        idx = knn_graph(points, k)
        h1 = self.block1(points, idx)
        if self.config.dynamic_graph:
            idx = knn_graph(h1, k)
        h2 = self.block2(h1, idx)
        return self.fuse(concat([h1, h2], axis=-1))

    def regularization(self):
        return None


def build_extractor(config, rng):
    if config.kind == "pointnet":
        return PointNetExtractor(config, rng)
    if config.kind == "edgeconv":
        return EdgeConvExtractor(config, rng)
    raise ConfigError("extractor", f"unknown extractor {config.kind!r}")


def pointnet_extract(points, params):
    """Functional form: ``params`` is a :class:`PointNetExtractor`."""
    return params(points)


def edgeconv_extract(points, params):
    return params(points)


def stn_apply(x, stn):
    return stn(x)
