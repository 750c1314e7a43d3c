"""Training engine: AdamW with decoupled weight decay, exponential per-epoch
learning-rate decay, dev-set model selection, and checkpoint persistence.

Checkpoint wire format: magic b"CNBN", u32 version, length-prefixed config
text, u32 tensor count, then per tensor a length-prefixed name, u32 rank,
u32 dims, raw little-endian float32 data, and a CRC-32 of those bytes.
All integers little-endian.
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .data import DEFAULT_FIXED_LENGTH, make_batches
from .metrics import (FocalLossConfig, LabeledScore, alpha_from_counts,
                      compute_eer, focal_loss_logits)
from .model import Model, ModelConfig
from .tensor import ContractError, Tape, backward

__all__ = [
    "TrainConfig",
    "AdamW",
    "Checkpoint",
    "NumericalError",
    "CheckpointError",
    "lr_schedule",
    "train",
    "score_records",
    "checkpoint_from_model",
    "model_from_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"CNBN"
CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    """Non-finite loss or other numerical failure during training."""


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    weight_decay: float = 0.01
    lr_decay: float = 0.97
    focal_gamma: float = 2.0
    seed: int = 0
    fixed_length: int = DEFAULT_FIXED_LENGTH
    use_meca: bool = True

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ContractError("betas must lie in (0, 1)")
        if self.lr0 <= 0:
            raise ContractError("lr0 must be positive")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ContractError("lr decay factor must lie in (0, 1]")


def lr_schedule(epoch, cfg):
    """Learning rate for a 0-based epoch index: lr0 * decay^epoch."""
    return cfg.lr0 * cfg.lr_decay ** epoch


def _decays(name):
    # BN scale/shift and all biases are excluded from weight decay
    return not name.endswith((".bias", ".scale", ".shift"))


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params, cfg):
        self.params = params            # OrderedDict name -> Tensor
        self.cfg = cfg
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, grads, lr):
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.data.shape:
                raise ContractError(f"gradient shape {g.shape} != parameter "
                                    f"shape {p.data.shape} for {name}")
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * np.square(g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_adam)
            if cfg.weight_decay and _decays(name):
                p.data -= lr * cfg.weight_decay * p.data


# ---------------------------------------------------------------------------
# Scoring

def score_records(model, records, *, batch_size=32, target_len=DEFAULT_FIXED_LENGTH):
    """Eval-mode countermeasure scores, in input record order."""
    model.eval()
    out = []
    for batch in make_batches(records, batch_size, shuffle=False,
                              target_len=target_len, dtype=model.dtype):
        logits = model(batch.waves).data.reshape(-1)
        out.extend(zip(batch.utt_ids, (float(v) for v in logits)))
    return out


def _dev_eer(model, records, cfg):
    scored = score_records(model, records, batch_size=cfg.batch_size,
                           target_len=cfg.fixed_length)
    by_id = dict(scored)
    labeled = [LabeledScore(r.utt_id, by_id[r.utt_id], r.label, r.attack_id)
               for r in records]
    return compute_eer(labeled)[0]


# ---------------------------------------------------------------------------
# Checkpoints

@dataclass
class Checkpoint:
    config: ModelConfig
    params: OrderedDict
    stats: OrderedDict
    epoch: int = 0
    dev_eer: float = float("nan")
    version: int = CHECKPOINT_VERSION
    opt_state: dict | None = None


def checkpoint_from_model(model, epoch=0, dev_eer=float("nan")):
    return Checkpoint(
        config=model.config,
        params=OrderedDict((n, p.data.copy()) for n, p in model.parameters().items()),
        stats=OrderedDict((n, a.copy()) for n, a in model.bn_stats().items()),
        epoch=epoch,
        dev_eer=dev_eer,
    )


def model_from_checkpoint(cp, config=None):
    """Rebuild a model and load every tensor by registry name.

    ``config`` overrides the stored model config; a mismatch (e.g. loading an
    attention-equipped checkpoint into an attention-free model) raises
    CheckpointError naming the offending parameter.
    """
    model = Model(config or cp.config, seed=0)
    registry = model.parameters()
    stats = model.bn_stats()
    for name, arr in cp.params.items():
        if name not in registry:
            raise CheckpointError(f"unknown parameter {name!r} for this config")
        if registry[name].data.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint "
                                  f"{arr.shape}, model {registry[name].data.shape}")
        registry[name].data[...] = arr
    missing = set(registry) - set(cp.params)
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)}")
    for name, arr in cp.stats.items():
        if name not in stats:
            raise CheckpointError(f"unknown running statistic {name!r}")
        stats[name][...] = arr
    return model.eval()


def _config_text(cp):
    cfg = cp.config
    lines = [
        f"format_version = {cp.version}",
        f"epoch = {cp.epoch}",
        f"dev_eer = {float(cp.dev_eer)!r}",
        "stage_depths = " + ",".join(map(str, cfg.stage_depths)),
        "stage_channels = " + ",".join(map(str, cfg.stage_channels)),
        f"mlp_expansion = {cfg.mlp_expansion}",
        f"res2net_splits = {cfg.res2net_splits}",
        f"use_meca = {cfg.use_meca}",
        f"meca_gamma = {cfg.meca_gamma!r}",
        f"meca_b = {cfg.meca_b!r}",
        f"stem_kernel = {cfg.stem_kernel}",
        f"stem_stride = {cfg.stem_stride}",
        f"stem_padding = {cfg.stem_padding}",
        f"pool_kernel = {cfg.pool_kernel}",
        f"pool_stride = {cfg.pool_stride}",
        f"head_hidden = {cfg.head_hidden}",
    ]
    return "\n".join(lines)


def _parse_config_text(text):
    kv = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    try:
        version = int(kv.pop("format_version"))
        epoch = int(kv.pop("epoch"))
        dev_eer = float(kv.pop("dev_eer"))
        cfg = ModelConfig(
            stage_depths=tuple(int(v) for v in kv.pop("stage_depths").split(",")),
            stage_channels=tuple(int(v) for v in kv.pop("stage_channels").split(",")),
            mlp_expansion=int(kv.pop("mlp_expansion")),
            res2net_splits=int(kv.pop("res2net_splits")),
            use_meca=kv.pop("use_meca") == "True",
            meca_gamma=float(kv.pop("meca_gamma")),
            meca_b=float(kv.pop("meca_b")),
            stem_kernel=int(kv.pop("stem_kernel")),
            stem_stride=int(kv.pop("stem_stride")),
            stem_padding=int(kv.pop("stem_padding")),
            pool_kernel=int(kv.pop("pool_kernel")),
            pool_stride=int(kv.pop("pool_stride")),
            head_hidden=int(kv.pop("head_hidden")),
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint config missing field {exc}") from exc
    if kv:
        raise CheckpointError(f"unknown checkpoint config keys: {sorted(kv)}")
    return version, epoch, dev_eer, cfg


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(path, cp):
    tensors = list(cp.params.items()) + [(f"stats.{n}", a) for n, a in cp.stats.items()]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", cp.version))
        fh.write(_pack_str(_config_text(cp)))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            fh.write(_pack_str(name))
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(data)
            fh.write(struct.pack("<I", zlib.crc32(data)))


class _Reader:
    def __init__(self, raw, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what):
        return self.take(self.u32(what), what).decode("utf-8")


def load_checkpoint(path):
    rd = _Reader(open(path, "rb").read(), path)
    if rd.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version = rd.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    cfg_version, epoch, dev_eer, cfg = _parse_config_text(rd.string("config"))
    if cfg_version != version:
        raise CheckpointError(f"{path}: header/config version mismatch")
    params = OrderedDict()
    stats = OrderedDict()
    for _ in range(rd.u32("tensor count")):
        name = rd.string("tensor name")
        rank = rd.u32(f"{name} rank")
        shape = struct.unpack(f"<{rank}I", rd.take(4 * rank, f"{name} dims"))
        data = rd.take(4 * int(np.prod(shape, dtype=np.int64)), f"{name} data")
        if rd.u32(f"{name} checksum") != zlib.crc32(data):
            raise CheckpointError(f"{path}: checksum mismatch for {name}")
        arr = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
        if name.startswith("stats."):
            stats[name[len("stats."):]] = arr
        else:
            params[name] = arr
    return Checkpoint(config=cfg, params=params, stats=stats,
                      epoch=epoch, dev_eer=dev_eer, version=version)


# ---------------------------------------------------------------------------
# Training loop

def train(model, train_records, dev_records, cfg, *, log_fn=None, stop_loss=None,
          stop_fn=None):
    """Run the full training loop; returns (best Checkpoint, per-epoch log).

    The log holds one (epoch, mean_train_loss, dev_eer, lr) row per epoch,
    1-based.  The best checkpoint is the earliest epoch with the strictly
    lowest dev EER.  ``stop_loss`` optionally ends the run early once the
    mean train loss falls below it; ``stop_fn(epoch, mean_loss, model)`` may
    end it on any other condition (both used by desk-scale overfit runs).
    """
    if cfg.epochs < 1:
        raise ContractError("no training performed: epochs must be >= 1")
    if not train_records or not dev_records:
        raise ContractError("train and dev sets must be nonempty")

    n_genuine = sum(1 for r in train_records if r.label == 0)
    n_spoof = sum(1 for r in train_records if r.label == 1)
    loss_cfg = FocalLossConfig(gamma=cfg.focal_gamma,
                               alpha_genuine=alpha_from_counts(n_genuine, n_spoof))
    optimizer = AdamW(model.parameters(), cfg)
    best = None
    history = []

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        model.train()
        batches = make_batches(train_records, cfg.batch_size,
                               seed=cfg.seed * 100003 + epoch, shuffle=True,
                               target_len=cfg.fixed_length, dtype=model.dtype)
        total_loss = 0.0
        total_n = 0
        for b_idx, batch in enumerate(batches):
            with Tape() as tape:
                logits = model(batch.waves)
                loss = focal_loss_logits(logits, batch.labels, loss_cfg)
                loss_val = float(loss.data.reshape(()))
                if not np.isfinite(loss_val):
                    raise NumericalError(
                        f"non-finite loss {loss_val} at epoch {epoch + 1}, "
                        f"batch {b_idx + 1}")
                backward(tape, loss)
                grads = {n: tape.grad(p) for n, p in model.parameters().items()}
            optimizer.step(grads, lr)
            total_loss += loss_val * len(batch.utt_ids)
            total_n += len(batch.utt_ids)

        mean_loss = total_loss / total_n
        dev_eer = _dev_eer(model, dev_records, cfg)
        history.append((epoch + 1, mean_loss, dev_eer, lr))
        if log_fn:
            log_fn(epoch + 1, mean_loss, dev_eer, lr)
        if best is None or dev_eer < best.dev_eer:
            best = checkpoint_from_model(model, epoch=epoch + 1, dev_eer=dev_eer)
        if stop_loss is not None and mean_loss < stop_loss:
            break
        if stop_fn is not None and stop_fn(epoch + 1, mean_loss, model):
            break

    return best, history
