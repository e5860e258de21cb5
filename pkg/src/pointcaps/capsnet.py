"""The capsule classifier head and the fully connected baseline.

Shapes used throughout: ``q`` primary capsules of width ``t``, ``c`` class
capsules of width ``z``, batch ``B``, ``m``-dimensional aggregated feature.
"""

import numpy as np

from pointcaps.autodiff import Tensor, einsum, l2_norm, log_softmax, min_, relu, sigmoid, softmax
from pointcaps.errors import ConfigError, DimensionError, UsageError
from pointcaps.nn import BatchNorm, Dense, Dropout, Module, parameter

M_PLUS = 0.9
M_MINUS = 0.1
LAMBDA = 0.5
RECON_ALPHA = 0.0005


def squash(s, axis=-1, variant="canonical", eps=1e-9):
    """Shrink vectors along ``axis`` to norm below one, keeping direction.

    canonical:      ``|s|^2 / (1 + |s|^2) * s / |s|``
    paper_literal:  ``|s|^2 / (1 + |s|^2) * s / |s|^2``, i.e. ``s / (1 + |s|^2)``
    """
    norm = l2_norm(s, axis=axis, eps=eps, keepdims=True)
    sq = norm * norm
    if variant == "canonical":
        return s * (sq / ((sq + 1.0) * norm))
    if variant == "paper_literal":
        return s / (sq + 1.0)
    raise ConfigError("squash_variant", f"unknown squash variant {variant!r}")


class ComposeCaps(Module):
    """Feature vector -> q squashed primary capsules of width t.

    With ``enabled`` a sigmoid dense layer of width ``q * t`` produces the
    capsule vector, which is cut row-major into capsules (capsule i holds
    entries ``i*t .. (i+1)*t - 1``). Without it the feature vector is cut
    directly, so ``q = m / t``.
    """

    def __init__(self, in_features, n_caps, caps_dim, rng, enabled=True, squash_variant="canonical"):
        self.in_features = in_features
        self.caps_dim = caps_dim
        self.enabled = enabled
        self.squash_variant = squash_variant
        if enabled:
            self.n_caps = n_caps
            self.dense = Dense(in_features, n_caps * caps_dim, rng, init="capsule")
        else:
            if in_features % caps_dim:
                raise ConfigError("t", f"feature width {in_features} is not divisible by capsule width {caps_dim}")
            self.n_caps = in_features // caps_dim

    def forward(self, f):
        if f.ndim != 2 or f.shape[1] != self.in_features:
            raise ConfigError(
                "aggregator", f"ComposeCaps expects features of width {self.in_features}, got {f.shape}"
            )
        p = sigmoid(self.dense(f)) if self.enabled else f
        caps = p.reshape(f.shape[0], self.n_caps, self.caps_dim)
        return squash(caps, variant=self.squash_variant)


def compose_caps(f, params):
    return params(f)


def predict_vectors(u, weights):
    """``u_hat[b, i, j] = W[i, j] @ u[b, i]`` with W stored as q x c x z x t."""
    if u.shape[1] != weights.shape[0] or u.shape[2] != weights.shape[3]:
        raise DimensionError(f"prediction weights {weights.shape} do not fit capsules {u.shape}")
    return einsum("bqt,qczt->bqcz", u, weights)


def route(u_hat, r, squash_variant="canonical", trace=None):
    """Routing-by-agreement over predictions ``u_hat`` of shape B x q x c x z.

    Logits start at zero; each iteration takes the softmax over class capsules,
    forms the coupled sum, squashes it and adds the agreement to the logits.
    Gradients flow through every iteration. If ``trace`` is a list, the
    coupling array of each iteration is appended to it.
    """
    if r < 1:
        raise UsageError(f"routing needs at least one iteration, got r={r}")
    b, q, c, _ = u_hat.shape
    logits = Tensor(np.zeros((b, q, c)), dtype=u_hat.dtype)
    v = None
    for _ in range(r):
        coupling = softmax(logits, axis=2)
        if trace is not None:
            trace.append(coupling.data.copy())
        s = einsum("bqc,bqcz->bcz", coupling, u_hat)
        v = squash(s, variant=squash_variant)
        logits = logits + einsum("bqcz,bcz->bqc", u_hat, v)
    return v


def capsule_norms(v):
    return l2_norm(v, axis=-1)


def margin_loss(v, labels, m_plus=M_PLUS, m_minus=M_MINUS, lam=LAMBDA):
    """Hinge-squared loss on class-capsule lengths, summed over classes, mean over batch."""
    labels = np.asarray(labels, dtype=np.int64)
    c = v.shape[1]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise UsageError(f"labels must lie in [0, {c}), got {labels}")
    target = Tensor(np.eye(c)[labels], dtype=v.dtype)
    norms = capsule_norms(v)
    present = relu(m_plus - norms)
    absent = relu(norms - m_minus)
    per_class = target * present * present + lam * (1.0 - target) * absent * absent
    return per_class.sum(axis=1).mean()


def capsule_mask(v, labels=None):
    """One-hot mask over class capsules: the label in training, the longest capsule otherwise."""
    if labels is None:
        labels = classify(v)
    return np.eye(v.shape[1])[np.asarray(labels, dtype=np.int64)]


class Decoder(Module):
    """Masked class capsules -> dense(512) -> dense(1024) -> dense(N*3), ReLU on hidden layers."""

    def __init__(self, n_classes, caps_dim, n_points, rng, hidden=(512, 1024), zero_output=False):
        self.n_points = n_points
        self.layers = []
        prev = n_classes * caps_dim
        for w in hidden:
            self.layers.append(Dense(prev, w, rng))
            prev = w
        self.layers.append(Dense(prev, n_points * 3, rng, init="zeros" if zero_output else "glorot"))

    def forward(self, v, labels=None):
        b, c, z = v.shape
        mask = Tensor(capsule_mask(v, labels)[:, :, None], dtype=v.dtype)
        h = (v * mask).reshape(b, c * z)
        for layer in self.layers[:-1]:
            h = relu(layer(h))
        return self.layers[-1](h).reshape(b, self.n_points, 3)


def decode(v, labels, decoder):
    return decoder(v, labels)


def reconstruction_error(x_rec, x, pairing="index"):
    """Unscaled reconstruction error per batch (mean over samples).

    index:   ``sum_i |x_rec_i - x_i|^2``, points paired by position.
    chamfer: sum over both clouds of the squared distance to the nearest point
             of the other cloud.
    """
    if x_rec.shape != x.shape:
        raise DimensionError(f"reconstruction shape {x_rec.shape} differs from input {x.shape}")
    if pairing == "index":
        diff = x_rec - x
        return (diff * diff).sum(axis=(1, 2)).mean()
    if pairing == "chamfer":
        b, n, _ = x.shape
        # expand the reconstruction explicitly; the engine only broadcasts one side
        grid = x_rec.reshape(b, n, 1, 3) + Tensor(np.zeros((b, n, n, 3)), dtype=x_rec.dtype)
        diff = grid - x.reshape(b, 1, n, 3)
        dist = (diff * diff).sum(axis=3)
        return (min_(dist, axis=2).sum(axis=1) + min_(dist, axis=1).sum(axis=1)).mean()
    raise ConfigError("recon_pairing", f"unknown pairing {pairing!r}")


def reconstruction_loss(x_rec, x, alpha=RECON_ALPHA, pairing="index"):
    return reconstruction_error(x_rec, x, pairing) * alpha


def classify(v):
    """Index of the longest class capsule per sample (first index on ties)."""
    norms = np.linalg.norm(np.asarray(getattr(v, "data", v), dtype=np.float64), axis=-1)
    return np.argmax(norms, axis=1)


class CapsuleHead(Module):
    """ComposeCaps -> primary capsules -> routing -> class capsules, plus decoder."""

    def __init__(
        self,
        in_features,
        n_classes,
        rng,
        q=500,
        t=8,
        z=4,
        r=3,
        compose=True,
        squash_variant="canonical",
        decoder_points=None,
        decoder_hidden=(512, 1024),
    ):
        self.n_classes = n_classes
        self.r = r
        self.squash_variant = squash_variant
        self.compose = ComposeCaps(in_features, q, t, rng, enabled=compose, squash_variant=squash_variant)
        n_caps = self.compose.n_caps
        self.pred_weight = parameter(rng.normal(0.0, 0.1 / np.sqrt(t), size=(n_caps, n_classes, z, t)))
        self.decoder = (
            Decoder(n_classes, z, decoder_points, rng, hidden=decoder_hidden) if decoder_points else None
        )

    def forward(self, f):
        u = self.compose(f)
        u_hat = predict_vectors(u, self.pred_weight)
        return route(u_hat, self.r, squash_variant=self.squash_variant)


class FCClassifier(Module):
    """dense+BN+ReLU+dropout twice, then a linear layer to class logits."""

    def __init__(self, in_features, n_classes, rng, hidden=(512, 256), keep_prob=0.7):
        self.layers = []
        self.norms = []
        self.drops = []
        prev = in_features
        for w in hidden:
            self.layers.append(Dense(prev, w, rng))
            self.norms.append(BatchNorm(w))
            self.drops.append(Dropout(keep_prob, rng))
            prev = w
        self.out = Dense(prev, n_classes, rng)

    def forward(self, f):
        h = f
        for dense, bn, drop in zip(self.layers, self.norms, self.drops):
            h = drop(relu(bn(dense(h))))
        return self.out(h)


def fc_baseline(f, params, train_mode):
    params.train(train_mode)
    return params(f)


def cross_entropy(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    c = logits.shape[1]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise UsageError(f"labels must lie in [0, {c}), got {labels}")
    target = Tensor(np.eye(c)[labels], dtype=logits.dtype)
    return -(log_softmax(logits, axis=1) * target).sum(axis=1).mean()
