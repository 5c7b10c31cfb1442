"""``movekit`` command line: gen-data, train, eval, route.

Exit codes: 0 success, 1 usage or configuration error, 2 data or checkpoint
error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from . import router as rt
from . import synthdata as sd
from . import vision as vi
from .config import STAGES, RunConfig
from .errors import CheckpointError, ConfigurationError, DataError, TrainingDivergence

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

PREREQ = {"router": "init", "pretrain": "router", "finetune": "pretrain"}
PREREQ_LABEL = {"pretrain": "stage-1", "finetune": "stage-2"}


class UsageError(Exception):
    pass


def checkpoint_path(run: RunConfig, name: str) -> Path:
    return Path(run.checkpoint_dir) / f"{name}.ckpt"


def cmd_gen_data(args) -> int:
    if args.manifest:
        try:
            manifest = sd.DatasetManifest.load(args.manifest)
        except ConfigurationError as exc:
            raise DataError(str(exc)) from exc
    else:
        manifest = sd.DatasetManifest()
    data = sd.gen_dataset(manifest, args.out)
    for split in ("train", "heldout"):
        labels = getattr(data, split).labels
        counts = np.bincount(labels, minlength=sd.N_CLASSES)
        print(f"{split}: {len(labels)} samples, per class " + " ".join(str(int(c)) for c in counts))
    print(f"total: {len(data.train) + len(data.heldout)} samples")
    print(f"hash: {sd.dataset_hash(args.out)}")
    return EXIT_OK


def _load_run(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    if args.stage:
        run = run.with_stage(args.stage, lr=args.lr, batch=args.batch, steps=args.steps)
    run.validate()
    return run


def cmd_train(args) -> int:
    run = _load_run(args)
    stage = args.stage
    data = sd.load_dataset(run.data_dir)
    src = checkpoint_path(run, PREREQ[stage])
    if src.exists():
        ckpt = pl.Checkpoint.load(src)
    elif stage == "router":
        print(f"init: pre-fitting encoders and decoder -> {src}")
        ckpt = pl.init_checkpoint(run)
        ckpt.save(src)
    else:
        raise CheckpointError(f"{PREREQ_LABEL[stage]} checkpoint required: {src}", section="file")
    cfg = run.stage(stage)
    if stage == "router":
        res = pl.run_stage1(ckpt, data, cfg, run.metrics_timing)
    elif stage == "pretrain":
        res = pl.run_stage2(ckpt, data, cfg, run.stage2_train_embedding, run.router_trainable_in_stage2,
                            run.metrics_timing, route_override=run.route_override)
    else:
        res = pl.run_stage3(ckpt, data, cfg, run.metrics_timing, route_override=run.route_override)
    dst = checkpoint_path(run, stage)
    if cfg.steps == 0:
        dst.parent.mkdir(parents=True, exist_ok=True)
        dst.write_bytes(src.read_bytes())
    else:
        res.checkpoint.save(dst)
    pl.write_metrics(run.metrics_path, stage, res.records)
    if cfg.steps == 0:
        print(f"{stage}: 0 steps, checkpoint copied to {dst}")
    elif stage == "router":
        print(f"{stage}: {cfg.steps} steps, held-out accuracy {res.summary['heldout_accuracy']:.6f} -> {dst}")
    else:
        per = " ".join(f"{x:.6f}" for x in res.summary["domain_loss"])
        print(f"{stage}: {cfg.steps} steps, held-out loss {res.summary['eval_loss']:.6f} "
              f"(per domain {per}) -> {dst}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pl.parse_policy(args.policy)
    ckpt = pl.Checkpoint.load(args.checkpoint)
    data = sd.load_dataset(args.data)
    split = getattr(data, args.split)
    report = pl.ablate(ckpt, split, args.policy, seed=args.seed, exact=not args.no_exact)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tag = args.policy.replace(":", "")
    (out / f"eval_{tag}.txt").write_text(report.to_text())
    (out / f"confusion_{tag}.csv").write_text(report.confusion_csv())
    print(f"policy {args.policy} on {args.split} ({len(split)} samples)")
    print(report.table())
    print(f"off-diagonal routing mass: {report.off_diagonal_fraction():.6f}")
    return EXIT_OK


def cmd_route(args) -> int:
    ckpt = pl.Checkpoint.load(args.checkpoint)
    samples = sd.read_samples(args.image)
    if not 0 <= args.index < len(samples):
        raise DataError(f"{args.image} holds {len(samples)} samples; index {args.index} is out of range")
    sample = samples[args.index]
    expected = (sd.IMAGE_SIZE, sd.IMAGE_SIZE, 3)
    if sample.image.shape != expected:
        raise DataError(f"{args.image}: image shape {sample.image.shape} does not match {expected}")
    raw = pl.encoder_features(ckpt, vi.GENERAL, sample.image[None])
    pooled = rt.mean_pool(raw)[0]
    if args.override is not None:
        if args.override not in range(ckpt.n_experts):
            raise UsageError(f"--override must be in 0..{ckpt.n_experts - 1}")
        expert = args.override
        weights = np.eye(ckpt.n_experts)[expert]
        print(f"expert {expert} (forced)")
    else:
        weights = rt.gate(pooled, ckpt.router, 1)
        expert = rt.select_expert(rt.route_logits(pooled[None], ckpt.router)[0])
        print(f"expert {expert}")
    print("gate " + " ".join(f"{w:.6f}" for w in weights))
    print(f"pooled_norm {float(np.linalg.norm(pooled)):.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="movekit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    g.add_argument("--manifest", help="manifest file (defaults to the built-in 3x2000/3x500 manifest)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", required=True, choices=STAGES)
    t.add_argument("--config", help="run config file (key = value)")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint under a routing policy")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--policy", default="learned", help="learned | oracle | random | fixed:i")
    e.add_argument("--split", default="heldout", choices=("heldout", "train"))
    e.add_argument("--seed", type=int, default=0, help="seed of the random policy")
    e.add_argument("--out", default=".", help="directory for the report and confusion CSV")
    e.add_argument("--no-exact", action="store_true", help="skip greedy caption generation")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("route", help="show the router's choice for one sample")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True, help="sample file in the dataset record format")
    r.add_argument("--index", type=int, default=0, help="record index within the file")
    r.add_argument("--override", type=int, help="force this expert")
    r.set_defaults(func=cmd_route)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
