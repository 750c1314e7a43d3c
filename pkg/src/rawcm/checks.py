"""Finite-difference verification suite covering every differentiable layer.

Each entry builds a small float64 instance of one operation and compares its
analytic gradients (for the input and every trainable parameter) against
central differences via :func:`rawcm.tensor.grad_check`.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .layers import batchnorm1d
from .metrics import FocalLossConfig, focal_loss_logits
from .model import MecaLayer, ModelConfig, Res2NetStyleBlock, meca_kernel_size

__all__ = ["run_suite", "SUITE_TOLERANCE"]

SUITE_TOLERANCE = 1e-4


def _check_conv(seed, groups):
    c_in, c_out, k = (2, 4, 3) if groups == 1 else (2, 2, 3)
    shapes = [(1, c_in, 8), (c_out, c_in // groups, k), (1, c_out, 1)]
    op = lambda ins: T.conv1d(ins[0], ins[1], ins[2], stride=1, padding=1,
                              groups=groups)
    name = "conv1d" if groups == 1 else "conv1d_grouped"
    return T.grad_check(op, shapes, seed, name=name)


def _check_linear(seed):
    op = lambda ins: T.linear(ins[0], ins[1], ins[2])
    return T.grad_check(op, [(2, 4, 1), (3, 4, 1), (1, 3, 1)], seed, name="linear")


def _check_batchnorm(seed, train):
    C = 3
    rm = np.zeros(C)
    rv = np.ones(C) * 0.7

    def op(ins):
        return batchnorm1d(ins[0], ins[1], ins[2], rm.copy(), rv.copy(),
                           train=train)

    name = f"batchnorm1d_{'train' if train else 'eval'}"
    return T.grad_check(op, [(2, C, 5), (1, C, 1), (1, C, 1)], seed, name=name)


def _check_selu(seed):
    degenerate = lambda ins: bool(np.any(np.abs(ins[0].data) < 1e-3))
    return T.grad_check(lambda ins: T.selu(ins[0]), [(1, 2, 6)], seed,
                        degenerate=degenerate, name="selu")


def _check_sigmoid(seed):
    return T.grad_check(lambda ins: T.sigmoid(ins[0]), [(1, 2, 6)], seed,
                        name="sigmoid")


def _check_maxpool(seed):
    kernel, stride = 3, 2

    def degenerate(ins):
        win = sliding_window_view(ins[0].data, kernel, axis=2)[:, :, ::stride, :]
        top2 = np.sort(win, axis=3)[..., -2:]
        return bool(np.any(top2[..., 1] - top2[..., 0] < 1e-3))

    return T.grad_check(lambda ins: T.maxpool1d(ins[0], kernel, stride),
                        [(1, 2, 9)], seed, degenerate=degenerate, name="maxpool1d")


def _check_gap(seed):
    return T.grad_check(lambda ins: T.global_avg_pool(ins[0]), [(2, 3, 7)], seed,
                        name="global_avg_pool")


def _check_meca(seed):
    C = 8
    k = meca_kernel_size(C)

    def op(ins):
        x, w = ins
        g = T.global_avg_pool(x)
        y = T.sigmoid(T.conv1d(T.transpose_ct(g), w, None, padding=(k - 1) // 2))
        return T.mul(x, T.transpose_ct(y))

    return T.grad_check(op, [(2, C, 5), (1, 1, k)], seed, name="meca")


def _rebind_block_params(block, tensors):
    it = iter(tensors)
    for conv in block.split_convs:
        conv.weight = next(it)
    block.norm.scale = next(it)
    block.norm.shift = next(it)
    block.mlp_in.weight = next(it)
    block.mlp_in.bias = next(it)
    block.mlp_out.weight = next(it)
    block.mlp_out.bias = next(it)
    if block.meca is not None:
        block.meca.conv.weight = next(it)


def _check_block(seed):
    cfg = ModelConfig(use_meca=True)
    rng = np.random.default_rng(seed)
    block = Res2NetStyleBlock(8, cfg, rng=rng, dtype=np.float64)
    shapes = [(2, 8, 6)] + [p.data.shape for _, p in block.params()]

    def op(ins):
        _rebind_block_params(block, ins[1:])
        return block(ins[0], train=True)

    def degenerate(ins):
        # keep clear of the SELU kink inside the MLP: reject draws whose
        # hidden pre-activations come within the finite-difference window
        _rebind_block_params(block, ins[1:])
        h = block.split_forward(ins[0])
        h = block.norm(h, train=True)
        pre = block.mlp_in(h)
        return bool(np.any(np.abs(pre.data) < 1e-4))

    return T.grad_check(op, shapes, seed, degenerate=degenerate,
                        name="res2net_block")


def _check_focal(seed):
    labels = np.array([0, 1, 0, 1])
    cfg = FocalLossConfig(gamma=2.0, alpha_genuine=0.7)
    op = lambda ins: focal_loss_logits(ins[0], labels, cfg)
    return T.grad_check(op, [(4, 1, 1)], seed, lo=-2.0, hi=2.0, name="focal_loss")


CHECKS = [
    ("conv1d", lambda s: _check_conv(s, groups=1)),
    ("conv1d_grouped", lambda s: _check_conv(s, groups=2)),
    ("linear", _check_linear),
    ("batchnorm1d_train", lambda s: _check_batchnorm(s, train=True)),
    ("batchnorm1d_eval", lambda s: _check_batchnorm(s, train=False)),
    ("selu", _check_selu),
    ("sigmoid", _check_sigmoid),
    ("maxpool1d", _check_maxpool),
    ("global_avg_pool", _check_gap),
    ("meca", _check_meca),
    ("res2net_block", _check_block),
    ("focal_loss", _check_focal),
]


def run_suite(seeds=range(5)):
    """Run every check over every seed; returns a list of GradCheckReport."""
    reports = []
    for name, fn in CHECKS:
        for seed in seeds:
            reports.append(fn(seed))
    return reports
