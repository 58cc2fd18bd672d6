"""``comet`` command line: synth, train, track, eval, verify.

Exit codes: 0 success, 1 verification failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from comet.cometnet import NetConfig, load_net
from comet.evalbench import (PRESETS, SequenceFormatError, SequenceRecord, SynthConfig, emit_report, load_sequence,
                             ope_metrics, parse_boxes, synth_sequence, write_boxes, write_sequence)
from comet.onlinetracker import GtJitterEstimator, NCCEstimator, RefineConfig, track_sequence
from comet.training import LossConfig, SamplePairConfig, TrainConfig, train
from comet.verify import SUITES, run_suites

SCHEMA_VERSION = 1
DEFAULT_SEED = 0

log = logging.getLogger("comet")


class UsageError(Exception):
    """Bad flags, configs or unreadable inputs; maps to exit code 2."""


def load_config(path, allowed: set[str]) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise UsageError(f"{path}: schema_version must be {SCHEMA_VERSION}, got {cfg.get('schema_version')!r}")
    unknown = set(cfg) - allowed - {"schema_version"}
    if unknown:
        raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
    return cfg


def build(cls, base, overrides: dict, where: str):
    """``dataclasses.replace`` that reports unknown or invalid keys as usage errors."""
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - fields
    if unknown:
        raise UsageError(f"unknown {where} keys {sorted(unknown)}")
    try:
        return dataclasses.replace(base, **overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {where} config: {exc}") from exc


def echo(effective: dict):
    print("effective config: " + json.dumps(effective, sort_keys=True, default=str), flush=True)


def _load_seq(path) -> SequenceRecord:
    try:
        return load_sequence(path)
    except (OSError, SequenceFormatError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_synth(args) -> int:
    cfg = load_config(args.config, {"count", "length", "presets", "synth"})
    count = cfg.get("count", 10)
    length = cfg.get("length", 100)
    presets = cfg.get("presets", ["easy"])
    if not isinstance(count, int) or count < 1:
        raise UsageError(f"count must be a positive integer, got {count!r}")
    bad = [p for p in presets if p not in PRESETS]
    if bad or not presets:
        raise UsageError(f"unknown presets {bad}; expected a non-empty subset of {list(PRESETS)}")
    overrides = cfg.get("synth", {})
    build(SynthConfig, SynthConfig(), overrides, "synth")
    echo({"command": "synth", "seed": args.seed, "count": count, "length": length, "presets": presets,
          "synth": overrides})
    out = Path(args.out)
    rng = np.random.default_rng(args.seed)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            preset = presets[i % len(presets)]
            try:
                scfg = SynthConfig.preset(preset, rng, **{"length": length, **overrides})
            except (TypeError, ValueError) as exc:
                raise UsageError(f"invalid synth config: {exc}") from exc
            record = synth_sequence(scfg, int(rng.integers(2**31)), name=f"seq_{i:03d}")
            write_sequence(record, out / record.name)
            log.info("wrote %s (%s, %d frames)", record.name, preset, len(record))
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from exc
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, {"net_preset", "net", "train", "sample", "loss"})
    presets = {"desk": NetConfig.desk, "tiny": NetConfig.tiny, "full": NetConfig}
    net_preset = cfg.get("net_preset", "desk")
    if net_preset not in presets:
        raise UsageError(f"unknown net_preset {net_preset!r}; expected one of {sorted(presets)}")
    net_cfg = build(NetConfig, presets[net_preset](), cfg.get("net", {}), "net")
    train_base = TrainConfig.desk(seed=args.seed)
    if args.overfit:
        train_base = dataclasses.replace(train_base, overfit=True, epochs=3)
    train_cfg = build(TrainConfig, train_base, cfg.get("train", {}), "train")
    sample_cfg = build(SamplePairConfig, SamplePairConfig(out_size=net_cfg.input_size), cfg.get("sample", {}),
                       "sample")
    loss_cfg = build(LossConfig, LossConfig(), cfg.get("loss", {}), "loss")
    echo({"command": "train", "net": net_cfg.to_dict(), "train": dataclasses.asdict(train_cfg),
          "sample": dataclasses.asdict(sample_cfg), "loss": dataclasses.asdict(loss_cfg)})

    data = Path(args.data)
    if not data.is_dir():
        raise UsageError(f"data directory {data} does not exist")
    dirs = sorted(p for p in data.iterdir() if p.is_dir())
    if not dirs:
        raise UsageError(f"no sequence directories under {data}")
    dataset = [_load_seq(d) for d in dirs]
    torch.manual_seed(train_cfg.seed)
    out = Path(args.out)
    log_path = out.with_name(out.name + ".log.csv")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {out.parent}: {exc}") from exc
    result = train(dataset, net_cfg, train_cfg, sample_cfg, loss_cfg, ckpt_path=out, log_path=log_path)
    losses = result.losses
    print(f"trained {len(losses)} steps: loss {losses[0]:.6g} -> {losses[-1]:.6g} "
          f"(ratio {losses[-1] / losses[0]:.4g}); checkpoint {out}, log {log_path}")
    return 0


def cmd_track(args) -> int:
    try:
        net, _ = load_net(args.ckpt)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {args.ckpt}: {exc}") from exc
    record = _load_seq(args.seq)
    refine = RefineConfig()
    if args.estimator == "gt_jitter":
        estimator = GtJitterEstimator(record.gt_boxes, sigma_factor=0.1, seed=args.seed)
    else:
        estimator = NCCEstimator()
    echo({"command": "track", "seed": args.seed, "estimator": args.estimator, "sequence": record.name,
          "refine": dataclasses.asdict(refine)})
    torch.manual_seed(args.seed)
    boxes, flagged = track_sequence(record, net, estimator, refine, seed=args.seed)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_boxes(out, boxes)
        out.with_name(out.name + ".flags.log").write_text("".join(f"{i}\t{msg}\n" for i, msg in flagged))
    except OSError as exc:
        raise UsageError(f"cannot write {out}: {exc}") from exc
    print(f"tracked {len(boxes)} frames of {record.name}; {len(flagged)} flagged; wrote {out}")
    return 0


def cmd_eval(args) -> int:
    if len(args.pred) != len(args.seq):
        raise UsageError(f"got {len(args.pred)} --pred files but {len(args.seq)} --seq directories")
    records, results = [], {}
    for pred_path, seq_dir in zip(args.pred, args.seq):
        record = _load_seq(seq_dir)
        try:
            pred = parse_boxes(Path(pred_path).read_text(), str(pred_path))
        except (OSError, SequenceFormatError) as exc:
            raise UsageError(str(exc)) from exc
        if len(pred) != len(record):
            raise UsageError(f"{pred_path}: {len(pred)} boxes for {len(record)} frames of {record.name}")
        if record.name in results:
            raise UsageError(f"sequence {record.name} given twice")
        records.append(record)
        results[record.name] = ope_metrics(pred, record.gt_boxes)
    effective = {"command": "eval", "seed": args.seed, "sequences": sorted(results)}
    echo(effective)
    try:
        emit_report(results, args.report, records, effective)
    except OSError as exc:
        raise UsageError(f"cannot write report to {args.report}: {exc}") from exc
    overall = json.loads((Path(args.report) / "report.json").read_text())["overall"]
    print(f"precision@20 {overall['precision_at_20']:.4f}  success@0.5 {overall['success_at_0_5']:.4f}  "
          f"AUC {overall['auc']:.4f}")
    return 0


def cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    echo({"command": "verify", "seed": args.seed, "suites": names})
    results = run_suites(names, seed=args.seed)
    for r in results:
        print(r.line(), flush=True)
        log.info("%s took %.1f s", r.name, r.seconds)
    return 0 if all(r.passed for r in results) else 1


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help=f"RNG seed (default {DEFAULT_SEED})")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="comet", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write synthetic sequences")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train a network")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--overfit", action="store_true", help="fixed-batch sanity mode")
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("track", parents=[common], help="track one sequence")
    k.add_argument("--ckpt", required=True)
    k.add_argument("--seq", required=True)
    k.add_argument("--estimator", choices=["gt_jitter", "ncc"], default="gt_jitter")
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", parents=[common], help="score tracker outputs")
    e.add_argument("--pred", nargs="+", required=True)
    e.add_argument("--seq", nargs="+", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", parents=[common], help="run self-check suites")
    v.add_argument("--suite", choices=[*SUITES, "all"], default="all")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    args.seed = getattr(args, "seed", DEFAULT_SEED)
    args.verbose = getattr(args, "verbose", 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"comet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
