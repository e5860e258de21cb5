"""Registered gradient checks, grouped by scope.

``ops`` covers every differentiable primitive over randomized small shapes and
many seeds; ``modules`` covers each layer on its own; ``full`` runs both plus
end-to-end training losses on tiny models. Every check runs at 64-bit.

Inputs are drawn away from non-differentiable points (ReLU at zero, ties in
max) because central differences straddling a kink measure the average of
the two one-sided slopes, not the gradient.

Primitives use the two-point quotient with step 1e-5. Layers and whole models
contain gradients that are exactly zero (a bias feeding BatchNorm is
cancelled by the mean); for those the round-off of the two-point quotient,
about ``eps * |f| / step``, approaches the tolerance at the absolute floor,
while a larger step lets truncation error through. They use the four-point
stencil at step 1e-4 instead, which keeps both terms an order of magnitude
below tolerance.
"""

import time
from dataclasses import dataclass

import numpy as np

from pointcaps.aggregation import NetVLAD, maxpool_aggregate
from pointcaps.autodiff import (
    GradcheckReport,
    Tensor,
    concat,
    einsum,
    exp,
    gather_rows,
    gradcheck,
    l2_norm,
    log,
    log_softmax,
    matmul,
    min_,
    precision,
    reduce,
    relu,
    sigmoid,
    softmax,
    sqrt,
    square,
)
from pointcaps.capsnet import (
    ComposeCaps,
    Decoder,
    FCClassifier,
    cross_entropy,
    margin_loss,
    predict_vectors,
    reconstruction_error,
    route,
    squash,
)
from pointcaps.config import ModelConfig
from pointcaps.errors import UsageError
from pointcaps.features import STN, EdgeConvBlock, EdgeConvExtractor, ExtractorConfig, PointNetExtractor, knn_graph
from pointcaps.nn import BatchNorm, Dense, SharedMLP

SCOPES = ("ops", "modules", "full")
TOLERANCE = 1e-4
OP_STEP = 1e-5
COMPOSITE_STEP = 1e-4


@dataclass
class GradItem:
    name: str
    scope: str
    build: object  # rng -> (f, inputs)
    seeds: int = 1

    @property
    def difference(self):
        """(step, stencil order) used for this item."""
        return (OP_STEP, 2) if self.scope == "ops" else (COMPOSITE_STEP, 4)


_REGISTRY = []


def register(name, scope, seeds=1):
    def wrap(build):
        _REGISTRY.append(GradItem(name, scope, build, seeds))
        return build

    return wrap


def items(scope):
    """Items run for ``scope``; wider scopes include the narrower ones."""
    if scope not in SCOPES:
        raise UsageError(f"unknown gradcheck scope {scope!r}; choose from {', '.join(SCOPES)}")
    wanted = SCOPES[: SCOPES.index(scope) + 1]
    return [item for item in _REGISTRY if item.scope in wanted]


def run_suite(scope="ops", seeds=None, tolerance=TOLERANCE, step=None, log=None):
    """Run every item of ``scope``; returns one report per item (worst over seeds)."""
    reports = []
    with precision("f64"):
        for item in items(scope):
            started = time.perf_counter()
            report = GradcheckReport(name=item.name, tolerance=tolerance)
            item_step, order = item.difference
            for seed in range(seeds or item.seeds):
                f, inputs = item.build(np.random.default_rng([seed, len(item.name)]))
                check = gradcheck(f, inputs, step=step or item_step, tolerance=tolerance, name=item.name, order=order)
                report.errors.extend(check.errors)
            reports.append(report)
            if log:
                log(report, time.perf_counter() - started)
    return reports


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------
def _leaf(array):
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=True, dtype=np.float64)


def _const(array):
    return Tensor(np.asarray(array, dtype=np.float64), dtype=np.float64)


def _shape(rng, rank, low=1, high=4):
    return tuple(int(v) for v in rng.integers(low, high + 1, size=rank))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + margin)


def _weighted(out, rng):
    """Scalarize with random weights so every output element matters."""
    return (out * _const(rng.standard_normal(out.shape))).sum()


def _jitter(module, rng, scale=0.1):
    for name, p in module.named_parameters().items():
        if name.endswith(("bias", "beta")):
            p.data[...] += rng.standard_normal(p.shape) * scale
    return module


def _params(module):
    return list(module.named_parameters().values())


# ----------------------------------------------------------------------
# ops
# ----------------------------------------------------------------------
OP_SEEDS = 20


def _binary(name, fn, positive_rhs=False):
    @register(name, "ops", OP_SEEDS)
    def build(rng):
        shape = _shape(rng, int(rng.integers(1, 4)))
        # right operand may be broadcast along a leading or unit axis
        rhs_shape = shape[1:] if rng.random() < 0.5 and len(shape) > 1 else shape
        a = _leaf(rng.standard_normal(shape))
        b_data = rng.uniform(0.5, 2.0, rhs_shape) * rng.choice([-1, 1], rhs_shape) if positive_rhs else rng.standard_normal(rhs_shape)
        b = _leaf(b_data)
        w = _const(rng.standard_normal(shape))
        return (lambda a, b: (fn(a, b) * w).sum()), [a, b]


_binary("add", lambda a, b: a + b)
_binary("sub", lambda a, b: a - b)
_binary("mul", lambda a, b: a * b)
_binary("div", lambda a, b: a / b, positive_rhs=True)


def _unary(name, fn, sample):
    @register(name, "ops", OP_SEEDS)
    def build(rng):
        x = _leaf(sample(rng, _shape(rng, 2)))
        w = _const(rng.standard_normal(x.shape))
        return (lambda x: (fn(x) * w).sum()), [x]


_unary("square", square, lambda rng, s: rng.standard_normal(s))
_unary("relu", relu, _away_from_zero)
_unary("sigmoid", sigmoid, lambda rng, s: rng.standard_normal(s) * 3)
_unary("exp", exp, lambda rng, s: rng.standard_normal(s))
_unary("log", log, lambda rng, s: rng.uniform(0.2, 3.0, s))
_unary("sqrt", sqrt, lambda rng, s: rng.uniform(0.2, 3.0, s))


@register("matmul", "ops", OP_SEEDS)
def _matmul(rng):
    m, k, n = _shape(rng, 3)
    batched = rng.random() < 0.5
    a = _leaf(rng.standard_normal((2, m, k) if batched else (m, k)))
    b = _leaf(rng.standard_normal((k, n)))
    return (lambda a, b: _weighted(matmul(a, b), np.random.default_rng(0))), [a, b]


@register("einsum", "ops", OP_SEEDS)
def _einsum(rng):
    spec = ["bqt,qczt->bqcz", "bqc,bqcz->bcz", "bnk,bnd->bkd", "ij,jk->ik", "bk,kd->bkd"][int(rng.integers(5))]
    ins, _ = spec.split("->")
    sizes = {ch: int(rng.integers(1, 4)) for ch in set(spec) - set(",->")}
    operands = [_leaf(rng.standard_normal(tuple(sizes[c] for c in term))) for term in ins.split(",")]
    return (lambda *ops: _weighted(einsum(spec, *ops), np.random.default_rng(1))), operands


def _reduction(name, op):
    @register(name, "ops", OP_SEEDS)
    def build(rng):
        shape = _shape(rng, 3, low=2)
        axis = int(rng.integers(0, 3))
        keep = bool(rng.random() < 0.5)
        x = _leaf(rng.permutation(np.prod(shape)).reshape(shape) * 0.1 + rng.uniform(0, 0.01, shape))
        return (lambda x: _weighted(op(x, axis, keep), np.random.default_rng(2))), [x]


_reduction("sum", lambda x, a, k: reduce("sum", x, a, k))
_reduction("mean", lambda x, a, k: reduce("mean", x, a, k))
_reduction("max", lambda x, a, k: reduce("max", x, a, k))
_reduction("min", lambda x, a, k: min_(x, a, k))


def _along_axis(name, fn):
    @register(name, "ops", OP_SEEDS)
    def build(rng):
        x = _leaf(rng.standard_normal(_shape(rng, 3)) * 2)
        axis = int(rng.integers(0, 3))
        return (lambda x: _weighted(fn(x, axis), np.random.default_rng(3))), [x]


_along_axis("softmax", lambda x, a: softmax(x, axis=a))
_along_axis("log_softmax", lambda x, a: log_softmax(x, axis=a))
_along_axis("l2_norm", lambda x, a: l2_norm(x, axis=a))


@register("reshape", "ops", OP_SEEDS)
def _reshape(rng):
    x = _leaf(rng.standard_normal((2, 3, 4)))
    return (lambda x: _weighted(x.reshape(6, 4), np.random.default_rng(4))), [x]


@register("transpose", "ops", OP_SEEDS)
def _transpose(rng):
    x = _leaf(rng.standard_normal(_shape(rng, 3)))
    axes = tuple(int(v) for v in rng.permutation(3))
    return (lambda x: _weighted(x.transpose(*axes), np.random.default_rng(5))), [x]


@register("index", "ops", OP_SEEDS)
def _index(rng):
    x = _leaf(rng.standard_normal((5, 3)))
    rows = rng.integers(0, 5, size=4)  # repeats exercise accumulation
    return (lambda x: _weighted(x[rows], np.random.default_rng(6))), [x]


@register("concat", "ops", OP_SEEDS)
def _concat(rng):
    a, b = _leaf(rng.standard_normal((2, 3))), _leaf(rng.standard_normal((2, 4)))
    return (lambda a, b: _weighted(concat([a, b], axis=1), np.random.default_rng(7))), [a, b]


@register("gather_rows", "ops", OP_SEEDS)
def _gather(rng):
    x = _leaf(rng.standard_normal((2, 5, 3)))
    idx = rng.integers(0, 5, size=(2, 5, 2))
    return (lambda x: _weighted(gather_rows(x, idx), np.random.default_rng(8))), [x]


# ----------------------------------------------------------------------
# modules
# ----------------------------------------------------------------------
MODULE_SEEDS = 3


@register("dense", "modules", MODULE_SEEDS)
def _dense(rng):
    layer = _jitter(Dense(4, 3, rng), rng)
    x = _leaf(rng.standard_normal((2, 5, 4)))
    return (lambda x, *_: _weighted(layer(x), np.random.default_rng(0))), [x, *_params(layer)]


@register("batch_norm", "modules", MODULE_SEEDS)
def _batch_norm(rng):
    layer = BatchNorm(3)
    layer.gamma.data[...] = rng.uniform(0.5, 1.5, 3)
    x = _leaf(rng.standard_normal((6, 3)))
    return (lambda x, *_: _weighted(layer(x), np.random.default_rng(0))), [x, *_params(layer)]


@register("shared_mlp", "modules", MODULE_SEEDS)
def _shared_mlp(rng):
    mlp = _jitter(SharedMLP(3, (4, 5), rng), rng)
    x = _leaf(rng.standard_normal((1, 6, 3)))
    return (lambda x, *_: _weighted(mlp(x), np.random.default_rng(0))), [x, *_params(mlp)]


@register("stn", "modules", MODULE_SEEDS)
def _stn(rng):
    stn = _jitter(STN(3, rng, conv_widths=(4, 5), dense_widths=(4,)), rng)
    stn.out.weight.data[...] = rng.standard_normal(stn.out.weight.shape) * 0.2
    # batch of two: BatchNorm after pooling needs more than one row to be non-degenerate
    x = _leaf(rng.standard_normal((2, 4, 3)))
    return (lambda x, *_: _weighted(stn(x), np.random.default_rng(0))), [x, *_params(stn)]


@register("pointnet", "modules", MODULE_SEEDS)
def _pointnet(rng):
    cfg = ExtractorConfig(mlp_widths=((4,), (4,)), final_width=5, stn_widths=(4,), stn_dense_widths=(4,))
    net = _jitter(PointNetExtractor(cfg, rng), rng)
    for stn in (net.input_stn, net.feature_stn):
        stn.out.weight.data[...] = rng.standard_normal(stn.out.weight.shape) * 0.2
    # batch of two: BatchNorm after pooling needs more than one row to be non-degenerate
    x = _leaf(rng.standard_normal((2, 4, 3)))
    return (lambda x, *_: _weighted(net(x), np.random.default_rng(0))), [x, *_params(net)]


@register("edgeconv_block", "modules", MODULE_SEEDS)
def _edgeconv_block(rng):
    block = _jitter(EdgeConvBlock(3, (4, 4), rng), rng)
    x = _leaf(rng.standard_normal((1, 6, 3)))
    idx = knn_graph(x, 2)
    return (lambda x, *_: _weighted(block(x, idx), np.random.default_rng(0))), [x, *_params(block)]


@register("edgeconv", "modules", MODULE_SEEDS)
def _edgeconv(rng):
    cfg = ExtractorConfig(kind="edgeconv", mlp_widths=((4,), (4,)), final_width=5, knn_k=2)
    net = _jitter(EdgeConvExtractor(cfg, rng), rng)
    x = _leaf(rng.standard_normal((1, 6, 3)))
    return (lambda x, *_: _weighted(net(x), np.random.default_rng(0))), [x, *_params(net)]


@register("maxpool", "modules", MODULE_SEEDS)
def _maxpool(rng):
    x = _leaf(rng.standard_normal((2, 5, 3)))
    return (lambda x: _weighted(maxpool_aggregate(x), np.random.default_rng(0))), [x]


@register("netvlad", "modules", MODULE_SEEDS)
def _netvlad(rng):
    layer = NetVLAD(2, 3, rng, alpha=1.0)
    layer.set_centres(rng.standard_normal((2, 3)))
    x = _leaf(rng.standard_normal((1, 4, 3)))
    return (lambda x, *_: _weighted(layer(x), np.random.default_rng(0))), [x, *_params(layer)]


@register("squash", "modules", MODULE_SEEDS)
def _squash(rng):
    s = _leaf(rng.standard_normal((3, 4)))
    return (lambda s: _weighted(squash(s), np.random.default_rng(0))), [s]


@register("compose_caps", "modules", MODULE_SEEDS)
def _compose(rng):
    layer = ComposeCaps(6, 2, 3, rng)
    x = _leaf(rng.standard_normal((2, 6)))
    return (lambda x, *_: _weighted(layer(x), np.random.default_rng(0))), [x, *_params(layer)]


@register("predict_vectors", "modules", MODULE_SEEDS)
def _predict(rng):
    u = _leaf(rng.standard_normal((1, 2, 3)))
    w = _leaf(rng.standard_normal((2, 2, 2, 3)))
    return (lambda u, w: _weighted(predict_vectors(u, w), np.random.default_rng(0))), [u, w]


@register("routing", "modules", MODULE_SEEDS)
def _routing(rng):
    u_hat = _leaf(rng.standard_normal((2, 3, 2, 2)))
    return (lambda u: _weighted(route(u, 3), np.random.default_rng(0))), [u_hat]


@register("margin_loss", "modules", MODULE_SEEDS)
def _margin(rng):
    v = _leaf(rng.standard_normal((3, 4, 2)) * 0.4)
    labels = rng.integers(0, 4, size=3)
    return (lambda v: margin_loss(v, labels)), [v]


@register("decoder", "modules", MODULE_SEEDS)
def _decoder(rng):
    dec = _jitter(Decoder(2, 2, 4, rng, hidden=(5, 6)), rng)
    v = _leaf(rng.standard_normal((2, 2, 2)))
    target = _const(rng.standard_normal((2, 4, 3)))
    labels = [0, 1]
    return (lambda v, *_: reconstruction_error(dec(v, labels), target)), [v, *_params(dec)]


@register("reconstruction_chamfer", "modules", MODULE_SEEDS)
def _chamfer(rng):
    a, b = _leaf(rng.standard_normal((1, 4, 3))), _leaf(rng.standard_normal((1, 5 - 1, 3)))
    return (lambda a, b: reconstruction_error(a, b, "chamfer")), [a, b]


@register("fc_classifier", "modules", MODULE_SEEDS)
def _fc(rng):
    fc = _jitter(FCClassifier(6, 3, rng, hidden=(5, 4)), rng)
    for drop in fc.drops:
        drop.enabled = False
    x = _leaf(rng.standard_normal((4, 6)))
    labels = rng.integers(0, 3, size=4)
    return (lambda x, *_: cross_entropy(fc(x), labels)), [x, *_params(fc)]


# ----------------------------------------------------------------------
# full training objectives
# ----------------------------------------------------------------------
_TINY_MODEL = dict(
    mlp_widths=((4,), (4,)),
    final_width=6,
    stn_widths=(4,),
    stn_dense_widths=(4,),
    knn_k=2,
    K=2,
    q=3,
    t=2,
    z=2,
    fc_hidden=(5,),
    decoder_hidden=(5, 6),
    n_points=4,
    recon_alpha=0.05,
)


def _full_model(rng, **changes):
    from pointcaps.model import PointCloudClassifier

    cfg = ModelConfig(**{**_TINY_MODEL, **changes}).validate()
    model = PointCloudClassifier(cfg, 2, seed=int(rng.integers(2**31)))
    _jitter(model, rng)
    extractor = model.extractor
    for stn in (getattr(extractor, "input_stn", None), getattr(extractor, "feature_stn", None)):
        if stn is not None:
            stn.out.weight.data[...] = rng.standard_normal(stn.out.weight.shape) * 0.2
    if cfg.aggregator == "netvlad":
        model.aggregator.set_centres(rng.standard_normal(model.aggregator.centres.shape))
    if cfg.classifier == "fc":
        for drop in model.head.drops:
            drop.enabled = False
    points = _leaf(rng.standard_normal((2, cfg.n_points, 3)))
    labels = np.array([0, 1])
    return (lambda x, *_: model.loss(x, labels).total), [points, *_params(model)]


for _r in (2, 3):
    register(f"capsule_loss_r{_r}", "full")(
        lambda rng, _r=_r: _full_model(rng, extractor="pointnet", aggregator="maxpool", classifier="capsule", r=_r)
    )
register("capsule_loss_netvlad_no_compose", "full")(
    lambda rng: _full_model(
        rng, extractor="pointnet", aggregator="netvlad", classifier="capsule", compose_caps=False, r=2
    )
)
register("capsule_loss_edgeconv_chamfer", "full")(
    lambda rng: _full_model(rng, extractor="edgeconv", aggregator="maxpool", classifier="capsule", recon_pairing="chamfer", n_points=5)
)
register("fc_loss", "full")(lambda rng: _full_model(rng, extractor="pointnet", aggregator="maxpool", classifier="fc"))
