"""Differentiable neural layers: convolution, linear, batch norm, activations,
pooling.

Layer classes own their parameter tensors and delegate the math to the
primitives in :mod:`rawcm.tensor`; batch normalization lives here because it
also owns non-trainable running statistics.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import (ContractError, ShapeError, Tensor, _maybe_record)

__all__ = ["Conv1d", "Linear", "BatchNorm1d", "batchnorm1d"]


def _uniform_fan_in(rng, shape, fan_in, dtype):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv1d:
    """Grouped 1-D convolution layer.

    Weights drawn uniform(-sqrt(1/fan_in), sqrt(1/fan_in)); biases zero.
    """

    def __init__(self, c_in, c_out, kernel, *, stride=1, padding=0, groups=1,
                 bias=True, rng=None, dtype=np.float32):
        if c_in % groups or c_out % groups:
            raise ShapeError(f"channels ({c_in},{c_out}) not divisible by groups={groups}")
        rng = rng or np.random.default_rng(0)
        fan_in = (c_in // groups) * kernel
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.weight = Tensor(
            _uniform_fan_in(rng, (c_out, c_in // groups, kernel), fan_in, dtype),
            requires_grad=True)
        self.bias = Tensor(np.zeros((1, c_out, 1), dtype=dtype),
                           requires_grad=True) if bias else None

    def __call__(self, x):
        return T.conv1d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups)

    def params(self):
        return [("weight", self.weight)] + ([("bias", self.bias)] if self.bias else [])


class Linear:
    """Channel-mixing layer applied pointwise over time."""

    def __init__(self, c_in, c_out, *, bias=True, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(_uniform_fan_in(rng, (c_out, c_in, 1), c_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros((1, c_out, 1), dtype=dtype),
                           requires_grad=True) if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)

    def params(self):
        return [("weight", self.weight)] + ([("bias", self.bias)] if self.bias else [])


def batchnorm1d(x, scale, shift, running_mean, running_var, *, train,
                momentum=0.1, eps=1e-5):
    """Per-channel normalization over batch and time.

    Train mode uses biased batch statistics and updates the running arrays in
    place; eval mode depends only on the running statistics.  ``scale`` and
    ``shift`` are (1, C, 1) tensors; the running arrays are plain (C,) numpy.
    """
    B, C, L = x.shape
    if train:
        n = B * L
        if n < 2:
            raise ContractError(f"batch norm train mode needs B*L >= 2, got {n}")
        mu = x.data.mean(axis=(0, 2))                      # (C,)
        var = x.data.var(axis=(0, 2))                      # biased
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None]) * inv_std[None, :, None]
    xhat = xhat.astype(x.dtype)
    out = scale.data * xhat + shift.data

    if train:
        def back(g):
            n = B * L
            dgamma = (g * xhat).sum(axis=(0, 2), keepdims=True).astype(scale.dtype)
            dbeta = g.sum(axis=(0, 2), keepdims=True).astype(shift.dtype)
            gs = g * scale.data                           # grad wrt xhat
            mean_gs = gs.mean(axis=(0, 2), keepdims=True)
            mean_gs_xhat = (gs * xhat).mean(axis=(0, 2), keepdims=True)
            dx = inv_std[None, :, None] * (gs - mean_gs - xhat * mean_gs_xhat)
            return dx.astype(x.dtype), dgamma, dbeta
    else:
        def back(g):
            dgamma = (g * xhat).sum(axis=(0, 2), keepdims=True).astype(scale.dtype)
            dbeta = g.sum(axis=(0, 2), keepdims=True).astype(shift.dtype)
            dx = (g * scale.data) * inv_std[None, :, None]
            return dx.astype(x.dtype), dgamma, dbeta

    return _maybe_record("batchnorm1d", [x, scale, shift], out.astype(x.dtype), back)


class BatchNorm1d:
    """Batch normalization layer owning scale/shift and running statistics."""

    def __init__(self, channels, *, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.scale = Tensor(np.ones((1, channels, 1), dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros((1, channels, 1), dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x, *, train):
        return batchnorm1d(x, self.scale, self.shift,
                           self.running_mean, self.running_var,
                           train=train, momentum=self.momentum, eps=self.eps)

    def params(self):
        return [("scale", self.scale), ("shift", self.shift)]

    def stats(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]
