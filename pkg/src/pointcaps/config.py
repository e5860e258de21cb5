"""Declarative run configuration: ``key = value`` lines grouped in sections.

Example::

    [model]
    extractor = pointnet
    aggregator = maxpool
    classifier = capsule

    [train]
    epochs = 60

Only ``extractor``, ``aggregator`` and ``classifier`` are required. Widths that
are left out take the published architecture; ``final_width`` defaults to 1024
for max pooling and 128 for NetVLAD.
"""

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field, fields

from pointcaps.errors import ConfigError
from pointcaps.features import ExtractorConfig

EXTRACTORS = ("pointnet", "edgeconv")
AGGREGATORS = ("maxpool", "netvlad")
CLASSIFIERS = ("fc", "capsule")
SQUASH_VARIANTS = ("canonical", "paper_literal")
PAIRINGS = ("index", "chamfer")

REQUIRED = ("extractor", "aggregator", "classifier")

PAPER_MLP_WIDTHS = {"pointnet": ((64, 64), (64, 128)), "edgeconv": ((64, 64, 64), (128,))}
PAPER_FINAL_WIDTH = {"maxpool": 1024, "netvlad": 128}


def _section(name, **kwargs):
    meta = kwargs.pop("metadata", {})
    return field(metadata={"section": name, **meta}, **kwargs)


@dataclass
class ModelConfig:
    extractor: str = _section("model", default="")
    aggregator: str = _section("model", default="")
    classifier: str = _section("model", default="")
    compose_caps: bool = _section("model", default=True)
    reconstruction_loss: bool = _section("model", default=True)
    squash_variant: str = _section("model", default="canonical")
    recon_pairing: str = _section("model", default="index")
    q: int = _section("model", default=500)
    t: int = _section("model", default=8)
    z: int = _section("model", default=4)
    r: int = _section("model", default=3)
    K: int = _section("model", default=128)
    knn_k: int = _section("model", default=20)
    final_width: int = _section("model", default=0)
    mlp_widths: tuple = _section("model", default=())
    stn_widths: tuple = _section("model", default=(64, 128, 1024))
    stn_dense_widths: tuple = _section("model", default=(512, 256))
    stn_reg_weight: float = _section("model", default=0.0)
    dynamic_graph: bool = _section("model", default=True)
    fc_hidden: tuple = _section("model", default=(512, 256))
    keep_prob: float = _section("model", default=0.7)
    decoder_hidden: tuple = _section("model", default=(512, 1024))
    vlad_alpha: float = _section("model", default=10.0)
    vlad_intra_norm: bool = _section("model", default=True)
    vlad_init_batches: int = _section("model", default=4)

    dataset: str = _section("data", default="")
    n_points: int = _section("data", default=256)
    shapes: tuple = _section("data", default=("sphere", "cube", "cylinder", "cone"))
    samples_per_class: int = _section("data", default=100)

    batch_size: int = _section("train", default=16)
    epochs: int = _section("train", default=60)
    lr: float = _section("train", default=0.001)
    lr_step: int = _section("train", default=20)
    lr_factor: float = _section("train", default=0.5)
    recon_alpha: float = _section("train", default=0.0005)
    seed: int = _section("train", default=0)

    train_outliers: int = _section("corruption", default=0)
    train_perturb: float = _section("corruption", default=0.0)
    test_outliers: int = _section("corruption", default=0)
    test_perturb: float = _section("corruption", default=0.0)

    # ------------------------------------------------------------------
    @property
    def resolved_final_width(self):
        return self.final_width or PAPER_FINAL_WIDTH.get(self.aggregator, 1024)

    @property
    def resolved_mlp_widths(self):
        return self.mlp_widths or PAPER_MLP_WIDTHS.get(self.extractor, ((64, 64), (64, 128)))

    @property
    def feature_width(self):
        """Length ``m`` of the aggregated feature vector."""
        d = self.resolved_final_width
        return d * self.K if self.aggregator == "netvlad" else d

    def extractor_config(self):
        return ExtractorConfig(
            kind=self.extractor,
            mlp_widths=self.resolved_mlp_widths,
            final_width=self.resolved_final_width,
            knn_k=self.knn_k,
            stn_widths=self.stn_widths,
            stn_dense_widths=self.stn_dense_widths,
            stn_reg_weight=self.stn_reg_weight,
            dynamic_graph=self.dynamic_graph,
        )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def validate(self):
        for key, allowed in (
            ("extractor", EXTRACTORS),
            ("aggregator", AGGREGATORS),
            ("classifier", CLASSIFIERS),
            ("squash_variant", SQUASH_VARIANTS),
            ("recon_pairing", PAIRINGS),
        ):
            value = getattr(self, key)
            if value == "" and key in REQUIRED:
                raise ConfigError(key, "is required")
            if value not in allowed:
                raise ConfigError(key, f"must be one of {', '.join(allowed)}; got {value!r}")
        for key in ("q", "t", "z", "r", "K", "knn_k", "n_points", "batch_size", "samples_per_class", "lr_step"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be a positive integer")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.final_width < 0:
            raise ConfigError("final_width", "must be >= 0 (0 selects the default)")
        if self.lr <= 0:
            raise ConfigError("lr", "must be positive")
        if not 0 < self.keep_prob <= 1:
            raise ConfigError("keep_prob", "must lie in (0, 1]")
        if self.extractor == "edgeconv" and self.knn_k >= self.n_points:
            raise ConfigError("knn_k", f"must be smaller than n_points ({self.n_points})")
        if self.classifier == "capsule" and not self.compose_caps and self.feature_width % self.t:
            raise ConfigError("t", f"feature width {self.feature_width} is not divisible by t={self.t}")
        if self.train_outliers > self.n_points or self.test_outliers > self.n_points:
            raise ConfigError("train_outliers", "outlier count exceeds n_points")
        if min(self.train_outliers, self.test_outliers) < 0 or min(self.train_perturb, self.test_perturb) < 0:
            raise ConfigError("train_perturb", "corruption levels must be non-negative")
        self.extractor_config().validate(self.n_points)
        return self

    # ------------------------------------------------------------------
    def to_text(self):
        sections = {}
        for f in fields(self):
            sections.setdefault(f.metadata["section"], []).append((f.name, _format(getattr(self, f.name))))
        out = io.StringIO()
        for name, items in sections.items():
            out.write(f"[{name}]\n")
            for key, value in items:
                out.write(f"{key} = {value}\n")
            out.write("\n")
        return out.getvalue()

    def architecture_hash(self):
        """Digest of every field that changes parameter shapes or the forward pass."""
        keys = [f.name for f in fields(self) if f.metadata["section"] == "model"] + ["n_points"]
        text = "\n".join(f"{k}={_format(getattr(self, k))}" for k in keys)
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def from_text(cls, text, source="<config>"):
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError("<syntax>", str(exc).splitlines()[0]) from None
        by_name = {f.name: f for f in fields(cls)}
        values = {}
        for section in parser.sections():
            for key, raw in parser.items(section):
                f = by_name.get(key)
                if f is None:
                    raise ConfigError(key, "unknown key")
                if f.metadata["section"] != section:
                    raise ConfigError(key, f"belongs in section [{f.metadata['section']}], found in [{section}]")
                values[key] = _parse(key, raw, f.default)
        for key in REQUIRED:
            if key not in values:
                raise ConfigError(key, "is required")
        return cls(**values).validate()

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read(), source=str(path))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(",".join(str(v) for v in stage) for stage in value)
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(key, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if key == "mlp_widths":
                if not raw:
                    return ()
                return tuple(tuple(int(v) for v in stage.split(",") if v.strip()) for stage in raw.split(";"))
            if key == "shapes":
                return tuple(v.strip() for v in raw.split(",") if v.strip())
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse value {raw!r}") from None
