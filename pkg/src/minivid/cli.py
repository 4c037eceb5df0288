"""Command-line entry point: dataset synthesis, training, inference,
ensembling, evaluation, and the gradient-check suite.

Every command is deterministic given its seed, config, and inputs.
Exit codes: 0 success, 2 validation error, 3 runtime numeric failure.

Heavy imports happen inside the commands so the thread-count override
(MINIVID_NUM_THREADS) can land before the numeric libraries load.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3

THREAD_ENV = "MINIVID_NUM_THREADS"


def _apply_thread_override():
    value = os.environ.get(THREAD_ENV)
    if value:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, value)


def cmd_synth(args) -> int:
    from .videodata import SyntheticConfig, generate_synthetic, write_dataset

    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: {out} exists and is not empty (use --force)", file=sys.stderr)
        return EXIT_VALIDATION
    cfg = SyntheticConfig()
    clips = generate_synthetic(args.seed, args.n, cfg)
    counts = write_dataset(clips, out, force=args.force)
    for split in ("train", "test_s1", "test_s2"):
        print(f"{split}: {counts.get(split, 0)} clips")

    train = [c for c in clips if c.split == "train"]
    pair_counts: dict = {}
    for c in train:
        key = (c.verb_label, c.noun_label)
        pair_counts[key] = pair_counts.get(key, 0) + 1
    if train and pair_counts:
        uniform = len(train) / (len(cfg.verbs) * len(cfg.nouns))
        worst = max(abs(v - uniform) / uniform for v in pair_counts.values())
        print(f"label balance: worst (verb, noun) deviation {100 * worst:.1f}% of uniform")
    return EXIT_OK


def _build_model(cfg, sizes):
    import numpy as np

    from .egoaco import EgoAcoConfig, build_egoaco
    from .gsm import GsnConfig, build_gsn

    verbs, nouns, actions = sizes
    backbone = GsnConfig(
        stem_channels=cfg.backbone.stem_channels,
        block_channels=tuple(cfg.backbone.block_channels),
        verbs=verbs, nouns=nouns, actions=actions,
        use_gsm=cfg.backbone.use_gsm if cfg.family == "gsn" else cfg.family == "gsn+egoaco",
        dropout=cfg.train.dropout,
        dtype=cfg.numpy_dtype(),
    )
    if cfg.family == "gsn":
        return build_gsn(backbone, cfg.seed)
    ego = EgoAcoConfig(backbone=backbone, memory_size=cfg.egoaco.memory_size,
                       pooling_classes=cfg.egoaco.pooling_classes,
                       dropout=cfg.train.dropout, dtype=cfg.numpy_dtype())
    return build_egoaco(ego, cfg.seed)


def _vocab_sizes(entries) -> tuple:
    return (max(e.verb for e in entries) + 1,
            max(e.noun for e in entries) + 1,
            max(e.action for e in entries) + 1)


def cmd_train(args) -> int:
    import numpy as np

    from .config import ConfigError, load_config, save_config
    from .serialization import save_checkpoint
    from .training import (NonFiniteLossError, SamplerConfig, TrainSettings,
                           run_stage, single_stage_plan, three_stage_protocol,
                           default_warmup)
    from .training import LrSchedule, StagePlan
    from .videodata import load_clip, read_manifest

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    out = Path(args.out or cfg.out_dir or "run")
    manifest_path = Path(args.data or cfg.manifest)
    try:
        entries = read_manifest(manifest_path)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    train_entries = [e for e in entries if e.split == "train"]
    if not train_entries:
        print("error: manifest has no train clips", file=sys.stderr)
        return EXIT_VALIDATION
    root = manifest_path.parent
    clips = [load_clip(e, root) for e in train_entries]
    sizes = _vocab_sizes(entries)
    model = _build_model(cfg, sizes)

    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    settings = TrainSettings(
        batch_size=cfg.train.batch_size,
        sampler=SamplerConfig(cfg.sampler.num_frames, cfg.sampler.mode),
        log_path=out / "train_log.jsonl",
    )
    try:
        if cfg.family == "gsn":
            warmup = cfg.train.warmup_epochs
            plan = single_stage_plan(cfg.train.epochs, cfg.train.base_lr,
                                     default_warmup(cfg.train.epochs) if warmup is None else warmup)
            run_stage(model, clips, plan, rng, settings)
            final = out / f"{cfg.family}_epoch{cfg.train.epochs}.ckpt"
            save_checkpoint(final, model.parameters())
        else:
            stage_epochs = tuple(cfg.train.stage_epochs)

            def on_stage_end(stage_name, m):
                n = int(stage_name.replace("stage", ""))
                epochs = stage_epochs[n - 1]
                save_checkpoint(out / f"egoaco_{stage_name}_epoch{epochs}.ckpt",
                                m.parameters())

            three_stage_protocol(
                model, clips, rng, settings, stage_epochs=stage_epochs,
                stage_lrs=(cfg.train.base_lr, cfg.train.base_lr, cfg.train.stage3_lr),
                on_stage_end=on_stage_end)
            final = out / f"egoaco_stage3_epoch{stage_epochs[2]}.ckpt"
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"final checkpoint: {final}")
    return EXIT_OK


def cmd_infer(args) -> int:
    import numpy as np

    from .config import ConfigError, load_config
    from .evaluation import one_clip_infer, two_clip_infer, write_scores
    from .serialization import load_checkpoint
    from .videodata import SamplerConfig, load_clip, read_manifest

    config_path = Path(args.config) if args.config else Path(args.checkpoint).parent / "config.yaml"
    try:
        cfg = load_config(config_path)
        entries = read_manifest(args.manifest or cfg.manifest)
        state = load_checkpoint(args.checkpoint)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    sizes = _vocab_sizes(entries)
    model = _build_model(cfg, sizes)
    params = model.parameters()
    if set(params) != set(state):
        diff = sorted(set(params) ^ set(state))[:4]
        print(f"error: checkpoint does not match the model/vocabulary "
              f"(first differing names: {diff})", file=sys.stderr)
        return EXIT_VALIDATION
    for name, p in params.items():
        if p.shape != state[name].shape:
            print(f"error: vocabulary mismatch between checkpoint and manifest: "
                  f"{name} has shape {state[name].shape}, expected {p.shape}",
                  file=sys.stderr)
            return EXIT_VALIDATION
        p.data = state[name].astype(p.data.dtype)

    two_clip = cfg.eval.two_clip if args.two_clip is None else args.two_clip
    fully_conv = cfg.eval.fully_conv if args.fully_conv is None else args.fully_conv
    sampler = SamplerConfig(cfg.sampler.num_frames, "center_per_segment")
    wanted = [e for e in entries if e.split == args.split]
    if not wanted:
        print(f"error: no clips in split {args.split!r}", file=sys.stderr)
        return EXIT_VALIDATION
    root = Path(args.manifest or cfg.manifest).parent
    records = []
    for entry in wanted:
        clip = load_clip(entry, root)
        kwargs = dict(fully_conv=fully_conv, short_side=cfg.eval.short_side)
        if two_clip:
            records.append(two_clip_infer(model, clip, sampler, **kwargs))
        else:
            records.append(one_clip_infer(model, clip, sampler, **kwargs))
    write_scores(args.out, records)
    print(f"wrote {len(records)} score records to {args.out}")
    return EXIT_OK


def cmd_ensemble(args) -> int:
    from .evaluation import ensemble, read_scores, write_scores

    try:
        sets = [read_scores(p) for p in args.scores]
        merged = ensemble(sets)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    write_scores(args.out, merged)
    print(f"ensembled {len(args.scores)} models over {len(merged)} clips -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import compute_metrics, format_metrics_table, read_scores
    from .videodata import read_manifest

    try:
        records = read_scores(args.scores)
        entries = read_manifest(args.manifest)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    labels = {e.clip_id: (e.verb, e.noun, e.action) for e in entries
              if args.split in ("all", e.split)}
    try:
        report = compute_metrics(records, labels, split=args.split)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(format_metrics_table([report]))
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        print(f"wrote JSON report to {args.json}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_check_suite

    tamper = None
    if args.tamper:
        def tamper(name, grad):
            corrupted = grad.copy()
            corrupted.reshape(-1)[0] += 1e-3
            return corrupted

    start = time.monotonic()
    report = run_check_suite(seed=args.seed, families=args.family, tamper=tamper)
    for line in report.lines():
        print(line)
    elapsed = time.monotonic() - start
    print(f"{len(report.results)} checks in {elapsed:.1f}s; "
          f"max rel err {report.max_error:.3e}")
    if not report.passed:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="minivid",
                                     description="Desk-scale video action recognition")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=700, help="total clip count")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model per the run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--data", default=None, help="manifest path override")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="score a split with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None,
                   help="run config (default: config.yaml next to the checkpoint)")
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default="test_s1")
    p.add_argument("--two-clip", dest="two_clip", action="store_true", default=None)
    p.add_argument("--no-two-clip", dest="two_clip", action="store_false")
    p.add_argument("--fully-conv", dest="fully_conv", action="store_true", default=None)
    p.add_argument("--no-fully-conv", dest="fully_conv", action="store_false")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ensemble", help="average score files")
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("eval", help="metrics table for a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test_s1")
    p.add_argument("--json", default=None, help="also write a JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--family", choices=("gsn", "egoaco", "gsn+egoaco", "all"),
                   default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tamper", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    _apply_thread_override()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
