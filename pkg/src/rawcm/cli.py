"""Command-line entry point.

Subcommands: synth-data, train, score, evaluate, gradcheck, params.
Exit codes: 0 success, 1 usage/validation, 2 I/O or format error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import fields
from pathlib import Path

from . import checks, data
from .metrics import LabeledScore, TdcfParams, evaluate_scores
from .model import Model, ModelConfig, meca_param_count
from .tensor import ContractError
from .training import (CheckpointError, NumericalError, TrainConfig,
                       load_checkpoint, model_from_checkpoint, save_checkpoint,
                       score_records, train)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse defaults to exit code 2; the contract reserves 2 for I/O
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Config file handling

_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
_MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig)}


def _coerce(key, value):
    if key in ("stage_depths", "stage_channels"):
        return tuple(int(v) for v in value.split(","))
    if key == "use_meca":
        if value not in ("true", "false", "True", "False"):
            raise UsageError(f"config key {key}: expected true/false, got {value!r}")
        return value in ("true", "True")
    for keys, kind in ((("epochs", "batch_size", "seed", "fixed_length",
                         "mlp_expansion", "res2net_splits", "stem_kernel",
                         "stem_stride", "stem_padding", "pool_kernel",
                         "pool_stride", "head_hidden"), int),):
        if key in keys:
            return kind(value)
    return float(value)


def load_run_config(path=None, overrides=None):
    """Flat "key = value" config plus CLI overrides (flag wins).

    Returns (TrainConfig, ModelConfig).  Unknown keys are hard errors.
    """
    kv = {}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    for key, value in kv.items():
        if key not in _TRAIN_KEYS and key not in _MODEL_KEYS:
            raise UsageError(f"unknown config key {key!r}")
        kv[key] = _coerce(key, value)
    for key, value in (overrides or {}).items():
        if value is not None:
            kv[key] = value
    train_cfg = TrainConfig(**{k: v for k, v in kv.items() if k in _TRAIN_KEYS})
    model_kv = {k: v for k, v in kv.items() if k in _MODEL_KEYS}
    model_kv["use_meca"] = train_cfg.use_meca
    model_cfg = ModelConfig(**model_kv)
    return train_cfg, model_cfg


# ---------------------------------------------------------------------------
# Commands

def cmd_synth_data(args):
    if args.duration <= 0:
        raise UsageError("--duration must be positive")
    if args.n_genuine < 1 or args.n_spoof < 1:
        raise UsageError("--n-genuine and --n-spoof must be >= 1")
    protocol = data.synth_corpus(args.n_genuine, args.n_spoof, args.duration,
                                 args.seed, args.out)
    print(f"wrote {args.n_genuine + args.n_spoof} files and {protocol}")
    return EXIT_OK


def _load_set(data_dir, protocol):
    entries = data.parse_protocol(protocol)
    return entries, data.load_records(data_dir, entries)


def cmd_train(args):
    overrides = {"use_meca": False if args.no_meca else None}
    train_cfg, model_cfg = load_run_config(args.config, overrides)
    _, train_records = _load_set(args.data_dir, args.protocol)
    _, dev_records = _load_set(args.dev_data_dir or args.data_dir, args.dev_protocol)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = args.seed or [train_cfg.seed]
    for seed in seeds:
        cfg = TrainConfig(**{**train_cfg.__dict__, "seed": seed})
        model = Model(model_cfg, seed=seed)
        log_path = out / f"epochs_seed{seed}.csv"
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "dev_eer", "lr"])
            best, _ = train(model, train_records, dev_records, cfg,
                            log_fn=lambda e, l, d, r: writer.writerow(
                                [e, f"{l:.6f}", f"{d:.4f}", f"{r:.8f}"]))
        ckpt_path = out / f"best_seed{seed}.ckpt"
        save_checkpoint(ckpt_path, best)
        print(f"seed {seed}: best epoch {best.epoch}, dev EER {best.dev_eer:.2f}%, "
              f"params {model.param_count()}, checkpoint {ckpt_path}")
    return EXIT_OK


def cmd_score(args):
    cp = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(cp)
    entries, records = _load_set(args.data_dir, args.protocol)
    scored = dict(score_records(model, records, target_len=args.fixed_length))
    with open(args.out, "w", newline="\n") as fh:
        for e in entries:
            fh.write(f"{e.utt_id} {scored[e.utt_id]:.6f}\n")
    print(f"wrote {len(entries)} scores to {args.out}")
    return EXIT_OK


def _read_scores(path):
    scores = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split()
        if len(cols) != 2:
            raise data.ParseError(f"{path}:{lineno}: expected 'UTT SCORE'")
        scores[cols[0]] = float(cols[1])
    return scores


def _read_asv_errors(path):
    vals = Path(path).read_text().split()
    if len(vals) != 3:
        raise data.ParseError(f"{path}: expected three reals "
                              "(P_miss_asv P_fa_asv P_miss_spoof_asv)")
    return tuple(float(v) for v in vals)


def cmd_evaluate(args):
    entries = data.parse_protocol(args.protocol)
    scores = _read_scores(args.scores)
    proto_ids = {e.utt_id for e in entries}
    if proto_ids != set(scores):
        diff = sorted(proto_ids ^ set(scores))
        raise UsageError(f"utterance ids differ between scores and protocol: {diff}")
    params = TdcfParams()
    if args.asv_errors:
        params.p_miss_asv, params.p_fa_asv, params.p_miss_spoof_asv = \
            _read_asv_errors(args.asv_errors)
    labeled = [LabeledScore(e.utt_id, scores[e.utt_id], e.label, e.attack_id)
               for e in entries]
    report = evaluate_scores(labeled, params, per_attack=args.per_attack)
    if args.csv:
        writer = csv.writer(sys.stdout)
        writer.writerow(["subset", "eer_percent", "min_tdcf"])
        writer.writerow(["pooled", f"{report.eer:.4f}", f"{report.min_tdcf:.6f}"])
        for attack, eer in report.per_attack_eer.items():
            writer.writerow([attack, f"{eer:.4f}", ""])
    else:
        print(f"EER {report.eer:.2f}, min-tDCF {report.min_tdcf:.4f}")
        for attack, eer in report.per_attack_eer.items():
            print(f"  {attack}: EER {eer:.2f}")
    return EXIT_OK


def cmd_gradcheck(args):
    reports = checks.run_suite()
    worst = {}
    for r in reports:
        worst[r.op_name] = max(worst.get(r.op_name, 0.0), r.max_rel_err)
    failed = False
    for name, err in worst.items():
        ok = err < checks.SUITE_TOLERANCE
        failed |= not ok
        print(f"{name:20s} max rel err {err:.3e}  {'ok' if ok else 'FAIL'}")
    return EXIT_USAGE if failed else EXIT_OK


def cmd_params(args):
    overrides = {"use_meca": False if args.no_meca else None}
    _, model_cfg = load_run_config(args.config, overrides)
    model = Model(model_cfg, seed=0)
    for module, count in model.param_breakdown().items():
        print(f"{module:10s} {count}")
    print(f"{'total':10s} {model.param_count()}")
    if model_cfg.use_meca:
        print(f"attention weights: {meca_param_count(model_cfg)}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="rawcm",
                     description="Raw-waveform anti-spoofing toolchain")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic labeled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-genuine", type=int, default=4)
    p.add_argument("--n-spoof", type=int, default=4)
    p.add_argument("--duration", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("train", help="train one model per seed")
    p.add_argument("--config")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--dev-protocol", required=True)
    p.add_argument("--dev-data-dir")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, action="append")
    p.add_argument("--no-meca", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("score", help="score utterances with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fixed-length", type=int, default=data.DEFAULT_FIXED_LENGTH)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("evaluate", help="EER / min t-DCF from a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--asv-errors")
    p.add_argument("--per-attack", action="store_true")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="run the finite-difference layer suite")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter count and breakdown")
    p.add_argument("--config")
    p.add_argument("--no-meca", action="store_true")
    p.set_defaults(fn=cmd_params)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (UsageError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, data.ParseError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
