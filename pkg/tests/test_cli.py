import hashlib

import pytest

from movekit import cli
from movekit import pipeline as pl
from movekit import synthdata as sd
from movekit.config import RunConfig

TINY = RunConfig(data_dir="data", checkpoint_dir="ckpt", metrics_path="metrics.jsonl",
                 prefit_encoder_steps=2, prefit_decoder_steps=2, prefit_images=6,
                 router_steps=30, router_batch=6, pretrain_steps=4, pretrain_batch=6,
                 finetune_steps=4, finetune_batch=6, eval_every=2)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """A workdir with tiny data and all three stages trained through the CLI."""
    d = tmp_path_factory.mktemp("work")
    (d / "manifest.txt").write_text(sd.DatasetManifest((10,) * 3, (2,) * 3).to_text())
    (d / "run.cfg").write_text(TINY.to_text())
    assert cli.main(["gen-data", "--manifest", str(d / "manifest.txt"), "--out", str(d / "data")]) == 0
    for stage in ("router", "pretrain", "finetune"):
        assert cli.main(["train", "--stage", stage, "--config", str(d / "run.cfg")]) == 0
    return d


def test_gen_data_reports_balance_and_hash(tmp_path, capsys):
    (tmp_path / "m.txt").write_text(sd.DatasetManifest((10,) * 3, (3,) * 3).to_text())
    assert cli.main(["gen-data", "--manifest", str(tmp_path / "m.txt"), "--out", str(tmp_path / "a")]) == 0
    out_a = capsys.readouterr().out
    assert "train: 30 samples, per class 10 10 10" in out_a and "total: 39 samples" in out_a
    assert cli.main(["gen-data", "--manifest", str(tmp_path / "m.txt"), "--out", str(tmp_path / "b")]) == 0
    hashes = [line for line in (out_a + capsys.readouterr().out).splitlines() if line.startswith("hash:")]
    assert len(hashes) == 2 and hashes[0] == hashes[1]


def test_gen_data_malformed_manifest(tmp_path, capsys):
    (tmp_path / "m.txt").write_text("seed = 1\ntrain.counts = 1,2\n")
    assert cli.main(["gen-data", "--manifest", str(tmp_path / "m.txt"), "--out", str(tmp_path / "o")]) == 2
    assert "m.txt" in capsys.readouterr().err
    (tmp_path / "m2.txt").write_text("seed = 1\nwhat is this\n")
    assert cli.main(["gen-data", "--manifest", str(tmp_path / "m2.txt"), "--out", str(tmp_path / "o")]) == 2
    assert "m2.txt:2" in capsys.readouterr().err


def test_gen_data_io_failure(tmp_path, capsys):
    (tmp_path / "f").write_text("")
    assert cli.main(["gen-data", "--out", str(tmp_path / "f" / "sub")]) == 2
    assert "sub" in capsys.readouterr().err


def test_usage_errors(capsys):
    assert cli.main([]) == 1
    assert cli.main(["train", "--stage", "warmup"]) == 1
    assert cli.main(["--help"]) == 0
    capsys.readouterr()


def test_missing_prerequisite_names_checkpoint(tmp_path, capsys):
    d = tmp_path
    sd.gen_dataset(sd.DatasetManifest((2,) * 3, (1,) * 3), d / "data")
    (d / "run.cfg").write_text(TINY.to_text())
    assert cli.main(["train", "--stage", "finetune", "--config", str(d / "run.cfg")]) == 2
    err = capsys.readouterr().err
    assert "stage-2 checkpoint required" in err and "pretrain.ckpt" in err
    assert cli.main(["train", "--stage", "pretrain", "--config", str(d / "run.cfg")]) == 2
    assert "stage-1 checkpoint required" in capsys.readouterr().err


def test_train_writes_checkpoints_and_metrics(work):
    for name in ("init", "router", "pretrain", "finetune"):
        assert (work / "ckpt" / f"{name}.ckpt").exists()
    recs = pl.read_metrics(work / "metrics.jsonl")
    assert [r["stage"] for r in recs][0] == "router" and recs[-1]["stage"] == "finetune"
    assert set(recs[0]) >= {"stage", "step", "loss", "lr", "accuracy", "wall_ms"}
    assert pl.Checkpoint.load(work / "ckpt" / "finetune.ckpt").provenance == (
        "init", "router:30", "pretrain:4", "finetune:4")


def test_train_rerun_is_idempotent(work, capsys):
    before = {p.name: sha(p) for p in [*(work / "ckpt").iterdir(), work / "metrics.jsonl"]}
    assert cli.main(["train", "--stage", "pretrain", "--config", str(work / "run.cfg")]) == 0
    assert "pretrain: 4 steps, held-out loss" in capsys.readouterr().out
    after = {p.name: sha(p) for p in [*(work / "ckpt").iterdir(), work / "metrics.jsonl"]}
    assert after == before


def test_train_zero_steps_copies_input(work, tmp_path, capsys):
    cfg = TINY.to_text().replace("paths.checkpoints = ckpt", f"paths.checkpoints = {tmp_path}")
    cfg = cfg.replace("paths.data = data", f"paths.data = {work / 'data'}")
    (tmp_path / "run.cfg").write_text(cfg.replace("paths.metrics = metrics.jsonl", "paths.metrics = m.jsonl"))
    (tmp_path / "router.ckpt").write_bytes((work / "ckpt" / "router.ckpt").read_bytes())
    assert cli.main(["train", "--stage", "pretrain", "--steps", "0", "--config", str(tmp_path / "run.cfg")]) == 0
    assert sha(tmp_path / "pretrain.ckpt") == sha(work / "ckpt" / "router.ckpt")
    assert "0 steps" in capsys.readouterr().out


def test_eval_policies(work, capsys):
    ckpt, data, out = work / "ckpt" / "finetune.ckpt", work / "data", work / "eval"
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--policy", "oracle",
                     "--out", str(out), "--no-exact"]) == 0
    assert (out / "confusion_oracle.csv").read_text() == \
        "domain,expert_0,expert_1,expert_2\n0,2,0,0\n1,0,2,0\n2,0,0,2\n"
    assert "tokens.2 = 64" in (out / "eval_oracle.txt").read_text()
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--policy", "fixed:0",
                     "--out", str(out)]) == 0
    assert (out / "confusion_fixed0.csv").read_text().splitlines()[1:] == ["0,2,0,0", "1,2,0,0", "2,2,0,0"]
    printed = capsys.readouterr().out
    assert "policy fixed:0 on heldout (6 samples)" in printed and "chart" in printed
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--policy", "soft"]) == 1


def test_eval_corrupt_checkpoint_names_section(work, tmp_path, capsys):
    ckpt = pl.Checkpoint.load(work / "ckpt" / "finetune.ckpt")
    buf = bytearray(ckpt.to_bytes())
    payload = ckpt.section_bytes()["adapters"]
    buf[bytes(buf).index(payload) + 7] ^= 0x55
    (tmp_path / "bad.ckpt").write_bytes(bytes(buf))
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "bad.ckpt"), "--data", str(work / "data")]) == 2
    assert "'adapters'" in capsys.readouterr().err


def test_route_command(work, capsys):
    held = str(work / "data" / "heldout.bin")
    init = str(work / "ckpt" / "init.ckpt")
    assert cli.main(["route", "--checkpoint", init, "--image", held, "--index", "2"]) == 0
    out = capsys.readouterr().out.splitlines()
    # zero-initialised router: all logits tie, lowest index wins
    assert out[0] == "expert 0" and out[1] == "gate 1.000000 0.000000 0.000000"
    assert out[2].startswith("pooled_norm ")
    assert cli.main(["route", "--checkpoint", init, "--image", held, "--override", "1"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "expert 1 (forced)"
    assert cli.main(["route", "--checkpoint", init, "--image", held, "--override", "5"]) == 1
    assert cli.main(["route", "--checkpoint", init, "--image", held, "--index", "99"]) == 2
    assert cli.main(["route", "--checkpoint", init, "--image", str(work / "manifest.txt")]) == 2
    capsys.readouterr()
