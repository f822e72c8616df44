"""Conditioner networks built on the autodiff tape.

``ResidualMLP`` is a pre-activation residual network used by coupling layers.
``MaskedResidualMLP`` is its autoregressive counterpart (ResMADE): every
weight matrix is masked so that the outputs for dimension ``i`` only see
inputs ``1 .. i-1``.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ShapeError


class Module:
    """Minimal parameter container with recursive discovery and train/eval modes."""

    training = False
    _rng = None

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            items = value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def train(self, mode=True, rng=None):
        """Switch dropout on (``mode=True``) with ``rng`` as its noise source."""
        for m in self.modules():
            m.training = mode
            m._rng = rng
        return self

    def eval(self):
        return self.train(False)


def he_normal(rng, fan_in, fan_out):
    return rng.normal(size=(fan_in, fan_out)) * np.sqrt(2.0 / max(fan_in, 1))


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as ``(in, out)``; optional fixed mask."""

    def __init__(self, in_features, out_features, rng=None, zero=False, mask=None):
        self.in_features = in_features
        self.out_features = out_features
        if zero or rng is None:
            w = np.zeros((in_features, out_features))
        else:
            w = he_normal(rng, in_features, out_features)
        if mask is not None:
            mask = np.asarray(mask, dtype=np.float64)
            if mask.shape != w.shape:
                raise ShapeError(f"mask shape {mask.shape} != weight shape {w.shape}")
            w = w * mask
        self.mask = mask
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features))

    def __call__(self, x):
        x = ad.as_tensor(x)
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"expected {self.in_features} input features, got {x.shape[-1]}")
        w = self.weight if self.mask is None else ad.mul(self.weight, self.mask)
        return ad.add(ad.matmul(x, w), self.bias)


class ResidualBlock(Module):
    """Pre-activation block: ``h + W2 drop(relu(W1 relu(h)))``."""

    def __init__(self, features, rng, dropout=0.0, mask=None):
        self.dropout = dropout
        self.first = Linear(features, features, rng, mask=mask)
        self.second = Linear(features, features, rng, mask=mask)

    def __call__(self, h):
        t = self.first(ad.relu(h))
        t = ad.relu(t)
        if self.training and self.dropout > 0:
            t = ad.dropout(t, self.dropout, self._rng)
        return ad.add(h, self.second(t))


class ResidualMLP(Module):
    """Residual conditioner: linear embed, ``blocks`` residual blocks, zero-init output."""

    def __init__(self, in_features, out_features, hidden=64, blocks=2, dropout=0.0, rng=None):
        rng = np.random.default_rng(rng)
        self.in_features = in_features
        self.out_features = out_features
        self.initial = Linear(in_features, hidden, rng)
        self.blocks = [ResidualBlock(hidden, rng, dropout) for _ in range(blocks)]
        self.final = Linear(hidden, out_features, zero=True)

    def embed(self, x):
        return self.initial(x)

    def residual_stack(self, h):
        for block in self.blocks:
            h = block(h)
        return h

    def __call__(self, x):
        return self.final(self.residual_stack(self.embed(x)))


def hidden_degrees(hidden, features):
    """Cyclic degree labels in ``1 .. features-1`` (all 0 when ``features == 1``)."""
    top = max(1, features - 1)
    low = min(1, features - 1)
    return np.arange(hidden) % top + low


class MaskedResidualMLP(Module):
    """ResMADE conditioner producing ``params_per_dim`` outputs for each input dimension.

    Outputs are laid out dimension-major: columns ``i*P .. (i+1)*P - 1`` belong to
    input dimension ``i`` (0-based) and depend only on inputs ``0 .. i-1``.
    """

    def __init__(self, features, params_per_dim, hidden=64, blocks=2, dropout=0.0, rng=None):
        rng = np.random.default_rng(rng)
        self.in_features = features
        self.params_per_dim = params_per_dim
        self.out_features = features * params_per_dim
        self.input_degrees = np.arange(1, features + 1)
        self.hidden_degrees = hidden_degrees(hidden, features)
        self.output_degrees = np.repeat(self.input_degrees, params_per_dim)

        in_mask = self.hidden_degrees[None, :] >= self.input_degrees[:, None]
        hid_mask = self.hidden_degrees[None, :] >= self.hidden_degrees[:, None]
        out_mask = self.output_degrees[None, :] > self.hidden_degrees[:, None]
        self.initial = Linear(features, hidden, rng, mask=in_mask)
        self.blocks = [ResidualBlock(hidden, rng, dropout, mask=hid_mask) for _ in range(blocks)]
        self.final = Linear(hidden, self.out_features, zero=True, mask=out_mask)

    def __call__(self, x):
        h = self.initial(x)
        for block in self.blocks:
            h = block(h)
        return self.final(h)


def mlp_forward(net, x, train_mode=False, rng=None):
    """Evaluate a conditioner on an array batch; dropout only in train mode."""
    net.train(train_mode, rng)
    try:
        out = net(ad.as_tensor(np.atleast_2d(np.asarray(x, dtype=np.float64))))
    finally:
        net.eval()
    return out.value


def masked_forward(net: MaskedResidualMLP, x):
    return mlp_forward(net, x)


def backward(tape: ad.Tape, loss: Tensor, params=None):
    return tape.backward(loss, params)
