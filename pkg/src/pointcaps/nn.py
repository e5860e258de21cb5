"""Parameter containers and the small set of layers the models are built from."""

import numpy as np

from pointcaps.autodiff import Tensor, default_dtype, relu, sqrt
from pointcaps.errors import ConfigError, DimensionError


class Module:
    """Base class: discovers parameters, buffers and children from attributes.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers live in
    ``self.buffers`` (a dict of ndarrays, e.g. BatchNorm running statistics).
    Paths are dotted attribute names, list children are indexed by position.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + name] = value
        for name, child in self._children():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def named_buffers(self, prefix=""):
        out = {prefix + k: v for k, v in getattr(self, "buffers", {}).items()}
        for name, child in self._children():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    def state_dict(self):
        state = {k: v.data for k, v in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state):
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise DimensionError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for key, value in state.items():
            target = params[key].data if key in params else buffers[key]
            if target.shape != tuple(value.shape):
                raise DimensionError(f"{key}: expected shape {target.shape}, got {value.shape}")
            target[...] = value

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)


def parameter(array):
    return Tensor(np.asarray(array, dtype=default_dtype()), requires_grad=True)


def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Dense(Module):
    """Affine map over the last axis: ``x @ W + b`` with ``W`` of shape (in, out)."""

    def __init__(self, in_features, out_features, rng, init="glorot", bias=True):
        self.in_features = in_features
        self.out_features = out_features
        if init == "glorot":
            w = glorot_uniform(rng, in_features, out_features)
        elif init == "zeros":
            w = np.zeros((in_features, out_features))
        elif init == "capsule":
            w = rng.normal(0.0, 0.1 / np.sqrt(in_features), size=(in_features, out_features))
        else:
            raise ConfigError("init", f"unknown initializer {init!r}")
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"Dense expects last extent {self.in_features}, got {x.shape}")
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class BatchNorm(Module):
    """Normalizes the last axis over all leading axes.

    Training uses batch statistics and updates running averages as
    ``running = momentum * running + (1 - momentum) * batch``; eval uses the
    running averages.
    """

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        dtype = default_dtype()
        self.buffers = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
        }

    def forward(self, x):
        shape = x.shape
        flat = x.reshape(-1, self.channels)
        if self.training:
            mean = flat.mean(axis=0)
            centered = flat - mean
            var = (centered * centered).mean(axis=0)
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm[...] = m * rm + (1 - m) * mean.data
            rv[...] = m * rv + (1 - m) * var.data
            normed = centered / sqrt(var + self.eps)
        else:
            rm = Tensor(self.buffers["running_mean"], dtype=x.dtype)
            rv = self.buffers["running_var"]
            inv = Tensor(1.0 / np.sqrt(rv + self.eps), dtype=x.dtype)
            normed = (flat - rm) * inv
        return (normed * self.gamma + self.beta).reshape(shape)


class SharedMLP(Module):
    """Dense (+BatchNorm) + ReLU stack applied to every row independently."""

    def __init__(self, in_features, widths, rng, batch_norm=True, final_activation=True):
        self.layers = []
        self.norms = []
        self.final_activation = final_activation
        prev = in_features
        for w in widths:
            self.layers.append(Dense(prev, w, rng))
            self.norms.append(BatchNorm(w) if batch_norm else None)
            prev = w
        self.out_features = prev

    def forward(self, x):
        last = len(self.layers) - 1
        for i, (dense, bn) in enumerate(zip(self.layers, self.norms)):
            x = dense(x)
            if bn is not None:
                x = bn(x)
            if i < last or self.final_activation:
                x = relu(x)
        return x


class Dropout(Module):
    """Inverted dropout. ``keep_prob`` is the probability a unit survives."""

    def __init__(self, keep_prob, rng):
        if not 0.0 < keep_prob <= 1.0:
            raise ConfigError("keep_prob", f"must lie in (0, 1], got {keep_prob}")
        self.keep_prob = keep_prob
        self.rng = rng
        self.enabled = True

    def forward(self, x):
        if not (self.training and self.enabled) or self.keep_prob == 1.0:
            return x
        mask = (self.rng.random(x.shape) < self.keep_prob) / self.keep_prob
        return x * Tensor(mask, dtype=x.dtype)
