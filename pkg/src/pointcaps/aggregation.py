"""Symmetric functions that collapse per-point features into one vector."""

import numpy as np

from pointcaps.autodiff import einsum, l2_norm, reduce, softmax
from pointcaps.errors import ConfigError, DimensionError, DomainError
from pointcaps.nn import Module, parameter


def maxpool_aggregate(features):
    """Per-channel max over the point axis: B x N x C -> B x C."""
    if features.ndim != 3:
        raise DimensionError(f"expected B x N x C features, got {features.shape}")
    return reduce("max", features, axis=1)


class MaxPool(Module):
    def __init__(self, in_features):
        self.in_features = in_features
        self.out_features = in_features

    def forward(self, features):
        return maxpool_aggregate(features)


class NetVLAD(Module):
    """Soft-assignment VLAD with learned assignment weights and centres.

    For each cluster k: ``V[k] = sum_i a_k(x_i) (x_i - c_k)`` where ``a`` is a
    softmax over clusters of ``x_i @ W + b``. Rows are L2-normalized per cluster
    (optional) and the flattened vector is L2-normalized globally.
    """

    def __init__(self, n_clusters, in_features, rng, alpha=10.0, intra_norm=True):
        self.n_clusters = n_clusters
        self.in_features = in_features
        self.alpha = alpha
        self.intra_norm = intra_norm
        self.out_features = n_clusters * in_features
        centres = rng.standard_normal((n_clusters, in_features)) * 0.1
        self.centres = parameter(centres)
        self.assign_weight = parameter(np.zeros((in_features, n_clusters)))
        self.assign_bias = parameter(np.zeros(n_clusters))
        self.set_centres(centres)

    def set_centres(self, centres):
        """Reset centres and derive sharpness-``alpha`` assignment parameters from them."""
        centres = np.asarray(centres, dtype=np.float64)
        if centres.shape != (self.n_clusters, self.in_features):
            raise DimensionError(f"centres must be {self.n_clusters} x {self.in_features}, got {centres.shape}")
        self.centres.data[...] = centres
        self.assign_weight.data[...] = (2.0 * self.alpha * centres).T
        self.assign_bias.data[...] = -self.alpha * (centres * centres).sum(axis=1)

    def forward(self, features):
        if features.ndim != 3 or features.shape[-1] != self.in_features:
            raise DimensionError(f"NetVLAD expects B x N x {self.in_features}, got {features.shape}")
        b = features.shape[0]
        assign = softmax(features @ self.assign_weight + self.assign_bias, axis=2)
        weighted = einsum("bnk,bnd->bkd", assign, features)
        mass = assign.sum(axis=1)
        vlad = weighted - einsum("bk,kd->bkd", mass, self.centres)
        if self.intra_norm:
            vlad = vlad / l2_norm(vlad, axis=2, keepdims=True)
        flat = vlad.reshape(b, self.out_features)
        return flat / l2_norm(flat, axis=1, keepdims=True)


def vlad_aggregate(features, params):
    return params(features)


def kmeans(x, k, seed, iterations=25):
    """Lloyd's algorithm with k-means++ seeding; returns a k x d centre array.

    Assignment ties go to the lower centre index; a centre that loses all its
    points keeps its previous position.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    distinct = np.unique(x, axis=0).shape[0]
    if k > distinct:
        raise DomainError(f"cannot place {k} centres on {distinct} distinct samples")
    rng = np.random.default_rng(seed)
    centres = [x[rng.integers(n)]]
    closest = ((x - centres[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            break
        idx = rng.choice(n, p=closest / total)
        centres.append(x[idx])
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(axis=1))
    centres = np.array(centres)
    sq = (x * x).sum(axis=1, keepdims=True)
    for _ in range(iterations):
        dist = sq - 2.0 * x @ centres.T + (centres * centres).sum(axis=1)
        labels = np.argmin(dist, axis=1)
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centres[j] = members.mean(axis=0)
    return centres


def vlad_init(features_sample, n_clusters, seed, alpha=10.0, max_points=20000):
    """Centres and assignment parameters from k-means on a feature corpus.

    ``features_sample`` is any array whose last axis is the feature width;
    at most ``max_points`` rows (seeded subsample) enter k-means.
    """
    corpus = np.asarray(getattr(features_sample, "data", features_sample), dtype=np.float64)
    corpus = corpus.reshape(-1, corpus.shape[-1])
    if corpus.shape[0] > max_points:
        pick = np.random.default_rng(seed).choice(corpus.shape[0], max_points, replace=False)
        corpus = corpus[np.sort(pick)]
    centres = kmeans(corpus, n_clusters, seed)
    return {
        "centres": centres,
        "assign_weight": (2.0 * alpha * centres).T,
        "assign_bias": -alpha * (centres * centres).sum(axis=1),
    }


def build_aggregator(kind, in_features, rng, n_clusters=128, intra_norm=True, alpha=10.0):
    if kind == "maxpool":
        return MaxPool(in_features)
    if kind == "netvlad":
        return NetVLAD(n_clusters, in_features, rng, alpha=alpha, intra_norm=intra_norm)
    raise ConfigError("aggregator", f"unknown aggregator {kind!r}")
