"""Full desk run through the CLI: gen-data, three stages, ablation table.

usage: python scripts/run_desk.py WORKDIR [--seed S] [--no-exact]
"""

import argparse
import sys
import time
from pathlib import Path

from movekit import cli
from movekit import pipeline as pl
from movekit import synthdata as sd
from movekit.config import STAGES, RunConfig

POLICIES = ("learned", "oracle", "random", "fixed:0", "fixed:1", "fixed:2")


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("workdir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-exact", action="store_true")
    args = p.parse_args(argv)
    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    run = RunConfig(seed=args.seed, data_dir="data", checkpoint_dir="ckpt", metrics_path="metrics.jsonl")
    (work / "run.cfg").write_text(run.to_text())
    manifest = sd.DatasetManifest(seed=args.seed)
    (work / "manifest.txt").write_text(manifest.to_text())

    def call(*a):
        t0 = time.perf_counter()
        code = cli.main(list(a))
        if code:
            sys.exit(code)
        return time.perf_counter() - t0

    call("gen-data", "--manifest", str(work / "manifest.txt"), "--out", str(work / "data"))
    times = {s: call("train", "--stage", s, "--config", str(work / "run.cfg")) for s in STAGES}
    print("seconds: " + " ".join(f"{s}={t:.1f}" for s, t in times.items()) + f" total={sum(times.values()):.1f}")

    ckpt = pl.Checkpoint.load(work / "ckpt" / "finetune.ckpt")
    data = sd.load_dataset(work / "data")
    bank = pl.FeatureBank(ckpt, data.heldout)
    print(f"{'policy':<10}" + "".join(f"{n:>10}" for n in ("general", "formula", "chart")) + "   exact")
    for policy in POLICIES:
        rep = pl.ablate(ckpt, data.heldout, policy, bank=bank, exact=not args.no_exact and policy == "learned")
        exact = " ".join(f"{d.exact_match:.3f}" for d in rep.domains) if policy == "learned" else ""
        print(f"{policy:<10}" + "".join(f"{d.loss:>10.4f}" for d in rep.domains) + f"   {exact}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
