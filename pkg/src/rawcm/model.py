"""Revised ConvNeXt-style network for raw-waveform spoofing detection.

Stem conv, four compute stages of multi-scale residual blocks with optional
channel attention, max-pool downsampling between stages, and a pooled
classification head producing one countermeasure logit per utterance
(higher = more genuine).
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import BatchNorm1d, Conv1d, Linear
from .tensor import ShapeError, Tensor

__all__ = ["ModelConfig", "MecaLayer", "Res2NetStyleBlock", "Model",
           "meca_kernel_size", "meca_param_count"]


@dataclass
class ModelConfig:
    stage_depths: tuple = (1, 2, 3, 1)
    stage_channels: tuple = (16, 32, 64, 128)
    mlp_expansion: int = 4
    res2net_splits: int = 4
    use_meca: bool = True
    meca_gamma: float = 2.0
    meca_b: float = 1.0
    stem_kernel: int = 9
    stem_stride: int = 3
    stem_padding: int = 4
    pool_kernel: int = 9
    pool_stride: int = 9
    head_hidden: int = 128

    def __post_init__(self):
        self.stage_depths = tuple(self.stage_depths)
        self.stage_channels = tuple(self.stage_channels)
        if len(self.stage_depths) != len(self.stage_channels):
            raise ShapeError("stage_depths and stage_channels length mismatch")
        for c in self.stage_channels:
            if c % self.res2net_splits:
                raise ShapeError(
                    f"stage channels {c} not divisible by {self.res2net_splits} splits")


def meca_kernel_size(channels, gamma=2.0, b=1.0):
    """Adaptive attention kernel size: nearest odd integer to
    |log2(C)/gamma + b/gamma|, rounding up on ties, floored at 1."""
    if channels < 1:
        raise ValueError("channels must be >= 1")
    t = abs(math.log2(channels) / gamma + b / gamma)
    lo = 2 * math.floor((t - 1.0) / 2.0) + 1
    hi = lo + 2
    k = lo if (t - lo) < (hi - t) else hi
    return max(k, 1)


def meca_param_count(config):
    """Analytic weight count of all attention convs in a model config."""
    return sum(depth * meca_kernel_size(c, config.meca_gamma, config.meca_b)
               for depth, c in zip(config.stage_depths, config.stage_channels))


class MecaLayer:
    """Channel attention: per-channel mean -> small conv across channels ->
    sigmoid -> reweight the feature map."""

    def __init__(self, channels, gamma, b, *, rng, dtype):
        self.channels = channels
        self.kernel = meca_kernel_size(channels, gamma, b)
        self.conv = Conv1d(1, 1, self.kernel, padding=(self.kernel - 1) // 2,
                           bias=False, rng=rng, dtype=dtype)

    def __call__(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(
                f"attention built for {self.channels} channels, input has {x.shape[1]}")
        g = T.global_avg_pool(x)          # (B, C, 1)
        seq = T.transpose_ct(g)           # (B, 1, C): channels become the time axis
        y = T.sigmoid(self.conv(seq))
        weights = T.transpose_ct(y)       # (B, C, 1)
        return T.mul(x, weights)

    def params(self):
        return [("weight", self.conv.weight)]


class Res2NetStyleBlock:
    """Residual block: channel-split cascade of small convs, batch norm, an
    inverted-bottleneck MLP, optional channel attention, then the skip add."""

    def __init__(self, channels, config, *, rng, dtype):
        s = config.res2net_splits
        w = channels // s
        self.channels = channels
        self.splits = s
        # bias-free: any per-channel shift would be absorbed by the norm
        self.split_convs = [Conv1d(w, w, 3, padding=1, bias=False, rng=rng,
                                   dtype=dtype)
                            for _ in range(s - 1)]
        self.norm = BatchNorm1d(channels, dtype=dtype)
        hidden = channels * config.mlp_expansion
        self.mlp_in = Linear(channels, hidden, rng=rng, dtype=dtype)
        self.mlp_out = Linear(hidden, channels, rng=rng, dtype=dtype)
        self.meca = (MecaLayer(channels, config.meca_gamma, config.meca_b,
                               rng=rng, dtype=dtype)
                     if config.use_meca else None)

    def split_forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(
                f"block built for {self.channels} channels, input has {x.shape[1]}")
        w = self.channels // self.splits
        parts = [T.channel_slice(x, i * w, (i + 1) * w) for i in range(self.splits)]
        outs = [parts[0]]
        prev = parts[0]
        for conv, part in zip(self.split_convs, parts[1:]):
            prev = conv(T.add(part, prev))
            outs.append(prev)
        return T.concat_channels(outs)

    def __call__(self, x, *, train):
        h = self.split_forward(x)
        h = self.norm(h, train=train)
        h = self.mlp_out(T.selu(self.mlp_in(h)))
        if self.meca is not None:
            h = self.meca(h)
        return T.add(x, h)

    def params(self):
        out = []
        for i, conv in enumerate(self.split_convs):
            for name, p in conv.params():
                out.append((f"split{i + 2}.{name}", p))
        for name, p in self.norm.params():
            out.append((f"bn.{name}", p))
        for name, p in self.mlp_in.params():
            out.append((f"mlp_in.{name}", p))
        for name, p in self.mlp_out.params():
            out.append((f"mlp_out.{name}", p))
        if self.meca is not None:
            for name, p in self.meca.params():
                out.append((f"meca.{name}", p))
        return out


class Model:
    """The assembled network with a stable named-parameter registry."""

    def __init__(self, config=None, *, seed=0, dtype=np.float32):
        self.config = config or ModelConfig()
        self.dtype = dtype
        self.mode = "train"
        cfg = self.config
        rng = np.random.default_rng(seed)

        self.stem_conv = Conv1d(1, cfg.stage_channels[0], cfg.stem_kernel,
                                stride=cfg.stem_stride, padding=cfg.stem_padding,
                                rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm1d(cfg.stage_channels[0], dtype=dtype)

        self.stages = []
        self.downsamples = []   # (pointwise conv, bn) between stages
        for i, (depth, ch) in enumerate(zip(cfg.stage_depths, cfg.stage_channels)):
            if i > 0:
                pw = Conv1d(cfg.stage_channels[i - 1], ch, 1, rng=rng, dtype=dtype)
                self.downsamples.append((pw, BatchNorm1d(ch, dtype=dtype)))
            self.stages.append([Res2NetStyleBlock(ch, cfg, rng=rng, dtype=dtype)
                                for _ in range(depth)])

        c_last = cfg.stage_channels[-1]
        self.head_hidden = Linear(c_last, cfg.head_hidden, rng=rng, dtype=dtype)
        self.head_out = Linear(cfg.head_hidden, 1, rng=rng, dtype=dtype)

        self._registry = self._build_registry()

    # -- registry -----------------------------------------------------------

    def _build_registry(self):
        reg = OrderedDict()
        for name, p in self.stem_conv.params():
            reg[f"stem.conv.{name}"] = p
        for name, p in self.stem_bn.params():
            reg[f"stem.bn.{name}"] = p
        for i, blocks in enumerate(self.stages):
            if i > 0:
                pw, bn = self.downsamples[i - 1]
                for name, p in pw.params():
                    reg[f"down{i}.pw.{name}"] = p
                for name, p in bn.params():
                    reg[f"down{i}.bn.{name}"] = p
            for j, block in enumerate(blocks):
                for name, p in block.params():
                    reg[f"stage{i + 1}.block{j + 1}.{name}"] = p
        for name, p in self.head_hidden.params():
            reg[f"head.hidden.{name}"] = p
        for name, p in self.head_out.params():
            reg[f"head.out.{name}"] = p
        if len(reg) != len(set(reg)):
            raise RuntimeError("duplicate parameter names in registry")
        return reg

    def parameters(self):
        """OrderedDict of name -> parameter Tensor (stable across versions)."""
        return self._registry

    def bn_stats(self):
        """OrderedDict of name -> running-statistic numpy array."""
        stats = OrderedDict()
        for name, arr in self.stem_bn.stats():
            stats[f"stem.bn.{name}"] = arr
        for i, blocks in enumerate(self.stages):
            if i > 0:
                _, bn = self.downsamples[i - 1]
                for name, arr in bn.stats():
                    stats[f"down{i}.bn.{name}"] = arr
            for j, block in enumerate(blocks):
                for name, arr in block.norm.stats():
                    stats[f"stage{i + 1}.block{j + 1}.bn.{name}"] = arr
        return stats

    # -- modes --------------------------------------------------------------

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    # -- forward ------------------------------------------------------------

    def __call__(self, wave):
        """Map (B, 1, L) waveforms to (B, 1, 1) countermeasure logits."""
        train = self.mode == "train"
        cfg = self.config
        h = T.selu(self.stem_bn(self.stem_conv(wave), train=train))
        for i, blocks in enumerate(self.stages):
            if i > 0:
                pw, bn = self.downsamples[i - 1]
                h = T.maxpool1d(h, cfg.pool_kernel, cfg.pool_stride)
                h = bn(pw(h), train=train)
            for block in blocks:
                h = block(h, train=train)
        h = T.global_avg_pool(h)
        h = T.selu(self.head_hidden(h))
        return self.head_out(h)

    # -- accounting ---------------------------------------------------------

    def param_count(self):
        return sum(p.data.size for p in self._registry.values())

    def param_breakdown(self):
        """Trainable parameter totals keyed by top-level module name."""
        groups = OrderedDict()
        for name, p in self._registry.items():
            top = name.split(".", 1)[0]
            groups[top] = groups.get(top, 0) + p.data.size
        return groups
