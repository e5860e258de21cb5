"""Full classifier: extractor -> aggregator -> capsule head or FC baseline."""

from dataclasses import dataclass

import numpy as np

from pointcaps.aggregation import NetVLAD, build_aggregator, vlad_init
from pointcaps.autodiff import Tensor, no_grad
from pointcaps.capsnet import (
    CapsuleHead,
    FCClassifier,
    capsule_norms,
    classify,
    cross_entropy,
    margin_loss,
    reconstruction_error,
)
from pointcaps.features import build_extractor
from pointcaps.nn import Module


@dataclass
class LossParts:
    total: Tensor
    margin: Tensor
    recon: Tensor | None
    predictions: np.ndarray


class PointCloudClassifier(Module):
    def __init__(self, config, n_classes, seed=None):
        config.validate()
        self.config = config
        self.n_classes = n_classes
        rng = np.random.default_rng(config.seed if seed is None else seed)
        self.extractor = build_extractor(config.extractor_config(), rng)
        self.aggregator = build_aggregator(
            config.aggregator,
            self.extractor.out_features,
            rng,
            n_clusters=config.K,
            intra_norm=config.vlad_intra_norm,
            alpha=config.vlad_alpha,
        )
        m = self.aggregator.out_features
        if config.classifier == "capsule":
            self.head = CapsuleHead(
                m,
                n_classes,
                rng,
                q=config.q,
                t=config.t,
                z=config.z,
                r=config.r,
                compose=config.compose_caps,
                squash_variant=config.squash_variant,
                decoder_points=config.n_points if config.reconstruction_loss else None,
                decoder_hidden=config.decoder_hidden,
            )
        else:
            self.head = FCClassifier(m, n_classes, rng, hidden=config.fc_hidden, keep_prob=config.keep_prob)

    @property
    def is_capsule(self):
        return self.config.classifier == "capsule"

    def features(self, points):
        points = _as_points(points)
        return self.aggregator(self.extractor(points))

    def forward(self, points):
        """Class capsules (B x c x z) for the capsule head, logits (B x c) for FC."""
        return self.head(self.features(points))

    def scores(self, points):
        """Per-class scores as an ndarray: capsule lengths or FC logits."""
        with no_grad():
            out = self(points)
            return (capsule_norms(out) if self.is_capsule else out).data

    def predict(self, points):
        with no_grad():
            out = self(points)
        if self.is_capsule:
            return classify(out)
        return np.argmax(out.data, axis=1)

    def loss(self, points, labels):
        """Training objective. ``recon`` is the unscaled reconstruction error.

        For the capsule head: ``total = margin + recon_alpha * recon``.
        For FC, ``margin`` holds the cross-entropy.
        """
        points = _as_points(points)
        labels = np.asarray(labels, dtype=np.int64)
        out = self(points)
        recon = None
        if self.is_capsule:
            primary = margin_loss(out, labels)
            total = primary
            predictions = classify(out)
            if self.head.decoder is not None:
                decoded = self.head.decoder(out, labels if self.training else None)
                recon = reconstruction_error(decoded, points, self.config.recon_pairing)
                total = total + recon * self.config.recon_alpha
        else:
            primary = cross_entropy(out, labels)
            total = primary
            predictions = np.argmax(out.data, axis=1)
        reg = self.extractor.regularization()
        if reg is not None:
            total = total + reg
        return LossParts(total=total, margin=primary, recon=recon, predictions=predictions)

    def init_vlad(self, batches, seed):
        """k-means initialisation of NetVLAD centres from untrained extractor features."""
        if not isinstance(self.aggregator, NetVLAD):
            return False
        feats = []
        was_training = self.training
        self.eval()
        with no_grad():
            for points in batches:
                feats.append(self.extractor(_as_points(points)).data)
        self.train(was_training)
        params = vlad_init(np.concatenate(feats, axis=0), self.config.K, seed, alpha=self.config.vlad_alpha)
        self.aggregator.set_centres(params["centres"])
        return True


def _as_points(points):
    return points if isinstance(points, Tensor) else Tensor(points)
