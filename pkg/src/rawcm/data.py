"""Waveform and protocol I/O, fixed-length alignment, batching, and a
synthetic desk-scale corpus generator.

WAV support is deliberately strict: RIFF/WAVE, PCM, 16-bit, mono.  Protocol
files use the public countermeasure layout of five space-separated columns
(speaker, utterance, "-", attack, key).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import GENUINE, SPOOF
from .tensor import ContractError, Tensor

__all__ = [
    "ParseError",
    "WaveRecord",
    "ProtocolEntry",
    "Batch",
    "read_wav",
    "write_wav",
    "fix_length",
    "parse_protocol",
    "write_protocol",
    "load_records",
    "make_batches",
    "synth_corpus",
    "clipping_ratio",
    "DEFAULT_SAMPLE_RATE",
    "DEFAULT_FIXED_LENGTH",
]

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_FIXED_LENGTH = 6 * DEFAULT_SAMPLE_RATE   # 6 s at 16 kHz


class ParseError(ValueError):
    """Malformed WAV or protocol input, naming the offending field."""


@dataclass
class WaveRecord:
    utt_id: str
    samples: np.ndarray            # float in [-1, 1]
    sample_rate: int
    label: int | None = None       # 0 = genuine, 1 = spoof
    attack_id: str | None = None


@dataclass
class ProtocolEntry:
    speaker: str
    utt_id: str
    attack_id: str                 # "-" for bona fide
    key: str                       # "bonafide" | "spoof"

    @property
    def label(self):
        return GENUINE if self.key == "bonafide" else SPOOF


@dataclass
class Batch:
    waves: Tensor                  # (B, 1, L_fixed)
    labels: np.ndarray             # (B,)
    utt_ids: list


# ---------------------------------------------------------------------------
# WAV

def read_wav(path):
    """Parse a RIFF/WAVE file: PCM, 16-bit, mono only."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF":
        raise ParseError(f"{path}: bad RIFF magic")
    if raw[8:12] != b"WAVE":
        raise ParseError(f"{path}: bad WAVE tag")

    sample_rate = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise ParseError(f"{path}: fmt chunk too short ({size} bytes)")
            fmt, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", body)
            if fmt != 1:
                raise ParseError(f"{path}: unsupported audio format {fmt} (PCM only)")
            if channels != 1:
                raise ParseError(f"{path}: unsupported channel count {channels} (mono only)")
            if bits != 16:
                raise ParseError(f"{path}: unsupported bit depth {bits} (16-bit only)")
            sample_rate = rate
        elif cid == b"data":
            if size == 0:
                raise ParseError(f"{path}: empty data chunk")
            if len(body) < size:
                raise ParseError(f"{path}: truncated data chunk "
                                 f"({len(body)} of {size} bytes)")
            if size % 2:
                raise ParseError(f"{path}: odd data chunk length {size}")
            data = body
        pos += 8 + size + (size % 2)

    if sample_rate is None:
        raise ParseError(f"{path}: missing fmt chunk")
    if data is None:
        raise ParseError(f"{path}: missing data chunk")
    ints = np.frombuffer(data, dtype="<i2")
    samples = ints.astype(np.float64) / 32768.0
    return WaveRecord(utt_id=Path(path).stem, samples=samples,
                      sample_rate=sample_rate)


def write_wav(path, samples, sample_rate):
    """Write mono 16-bit PCM; inverse of :func:`read_wav`'s scaling."""
    ints = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767)
    payload = ints.astype("<i2").tobytes()
    hdr = b"".join([
        b"RIFF", struct.pack("<I", 36 + len(payload)), b"WAVE",
        b"fmt ", struct.pack("<IHHIIHH", 16, 1, 1, sample_rate,
                             sample_rate * 2, 2, 16),
        b"data", struct.pack("<I", len(payload)),
    ])
    Path(path).write_bytes(hdr + payload)


# ---------------------------------------------------------------------------
# Alignment / protocol

def fix_length(samples, target=DEFAULT_FIXED_LENGTH):
    """Head-truncate or tile ``samples`` to exactly ``target`` values."""
    samples = np.asarray(samples)
    if samples.size == 0:
        raise ContractError("fix_length on empty input")
    if target < 1:
        raise ContractError(f"fix_length target must be >= 1, got {target}")
    if samples.size >= target:
        return samples[:target].copy()
    reps = -(-target // samples.size)
    return np.tile(samples, reps)[:target]


def parse_protocol(path):
    """Read protocol lines of "SPEAKER UTT - ATTACK KEY"."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split()
            if len(cols) != 5:
                raise ParseError(f"{path}:{lineno}: expected 5 columns, got {len(cols)}")
            speaker, utt, _, attack, key = cols
            if key not in ("bonafide", "spoof"):
                raise ParseError(f"{path}:{lineno}: unknown key token {key!r}")
            if key == "bonafide" and attack != "-":
                raise ParseError(f"{path}:{lineno}: bonafide with attack id {attack!r}")
            if key == "spoof" and attack == "-":
                raise ParseError(f"{path}:{lineno}: spoof without attack id")
            entries.append(ProtocolEntry(speaker, utt, attack, key))
    return entries


def write_protocol(path, entries):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            fh.write(f"{e.speaker} {e.utt_id} - {e.attack_id} {e.key}\n")


def load_records(data_dir, entries, expected_rate=DEFAULT_SAMPLE_RATE):
    """Read the WAV for every protocol entry and attach its label."""
    data_dir = Path(data_dir)
    records = []
    missing = []
    for e in entries:
        path = data_dir / f"{e.utt_id}.wav"
        if not path.exists():
            missing.append(e.utt_id)
            continue
        rec = read_wav(path)
        if rec.sample_rate != expected_rate:
            raise ParseError(f"{path}: sample rate {rec.sample_rate}, "
                             f"expected {expected_rate}")
        rec.label = e.label
        rec.attack_id = e.attack_id
        records.append(rec)
    if missing:
        raise FileNotFoundError("missing WAV files for: " + ", ".join(missing))
    return records


def make_batches(records, batch_size, *, seed=0, shuffle=False,
                 target_len=DEFAULT_FIXED_LENGTH, dtype=np.float32):
    """Partition records into fixed-length batches (final partial kept)."""
    if batch_size < 1:
        raise ContractError("batch size must be >= 1")
    if not records:
        raise ContractError("no records to batch")
    order = np.arange(len(records))
    if shuffle:
        np.random.default_rng(seed).shuffle(order)
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        waves = np.stack([fix_length(r.samples, target_len) for r in chunk])
        batches.append(Batch(
            waves=Tensor(waves[:, None, :].astype(dtype)),
            labels=np.array([-1 if r.label is None else r.label for r in chunk],
                            dtype=np.int64),
            utt_ids=[r.utt_id for r in chunk],
        ))
    return batches


# ---------------------------------------------------------------------------
# Synthetic corpus

ATTACK_IDS = ("S01", "S02", "S03")


def clipping_ratio(samples):
    """Fraction of samples sitting at (within 0.1% of) the waveform peak."""
    samples = np.asarray(samples)
    peak = np.abs(samples).max()
    if peak == 0:
        return 0.0
    return float(np.mean(np.abs(samples) >= 0.999 * peak))


def _base_tone(rng, n, sample_rate):
    """Three harmonically related sinusoids under a slow amplitude envelope."""
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(80.0, 300.0)
    amps = rng.uniform(0.4, 1.0, size=3)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=4)
    x = sum(a * np.sin(2.0 * np.pi * h * f0 * t + ph)
            for h, a, ph in zip((1, 2, 3), amps, phases))
    f_env = rng.uniform(0.3, 1.5)
    env = 0.55 + 0.45 * np.sin(2.0 * np.pi * f_env * t + phases[3])
    x = env * x
    return 0.8 * x / np.abs(x).max()


def _spoof_tone(rng, n, sample_rate, attack):
    x = _base_tone(rng, n, sample_rate)
    t = np.arange(n) / sample_rate
    if attack == "S01":            # hard clipping at 0.6
        x = np.clip(x * (0.95 / 0.8), -0.6, 0.6)
    elif attack == "S02":          # 50 Hz amplitude modulation
        x = x * 0.5 * (1.0 + np.sin(2.0 * np.pi * 50.0 * t))
        x = 0.8 * x / np.abs(x).max()
    else:                          # band-limited noise burst
        burst_len = max(n // 5, 1)
        start = rng.integers(0, n - burst_len + 1)
        noise = np.convolve(rng.normal(size=burst_len + 8), np.ones(8) / 8.0,
                            mode="valid")[:burst_len]
        noise = 0.3 * noise / (np.abs(noise).max() + 1e-12)
        x = x.copy()
        x[start:start + burst_len] += noise
        x = x / max(np.abs(x).max() / 0.97, 1.0)
    return np.clip(x, -1.0, 1.0)


def synth_corpus(n_genuine, n_spoof, duration, seed, out_dir,
                 sample_rate=DEFAULT_SAMPLE_RATE):
    """Generate a labeled synthetic corpus plus its protocol file.

    Returns the protocol path.  Reproducible bitwise from ``seed``.
    """
    if n_genuine < 1 or n_spoof < 1:
        raise ContractError("both class counts must be >= 1")
    if duration <= 0:
        raise ContractError("duration must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = int(round(duration * sample_rate))
    entries = []
    for i in range(n_genuine):
        rng = np.random.default_rng([seed, 0, i])
        utt = f"SYN_G_{i:04d}"
        write_wav(out_dir / f"{utt}.wav", _base_tone(rng, n, sample_rate), sample_rate)
        entries.append(ProtocolEntry("SP01", utt, "-", "bonafide"))
    for i in range(n_spoof):
        rng = np.random.default_rng([seed, 1, i])
        attack = ATTACK_IDS[i % len(ATTACK_IDS)]
        utt = f"SYN_S_{i:04d}"
        write_wav(out_dir / f"{utt}.wav",
                  _spoof_tone(rng, n, sample_rate, attack), sample_rate)
        entries.append(ProtocolEntry("SP01", utt, attack, "spoof"))
    protocol = out_dir / "protocol.txt"
    write_protocol(protocol, entries)
    return protocol
