import hashlib
import json

import numpy as np
import pytest
import yaml

from swinkoa import cli, datagen, interpret, train
from swinkoa.checkpoint import save_checkpoint

TINY_SITES = {"source": {"train_counts": [3, 2, 2, 2, 1]}, "target": {"train_counts": [3, 2, 2, 2, 1]}}


def _yaml(path, d):
    path.write_text(yaml.safe_dump(d), encoding="utf-8")
    return str(path)


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def test_synth_counts_and_determinism(tmp_path):
    cfg = _yaml(tmp_path / "s.yaml", {"synth": {"sites": TINY_SITES}})
    assert cli.main(["synth", "--config", cfg, "--seed", "4", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["synth", "--config", cfg, "--seed", "4", "--out", str(tmp_path / "b")]) == 0
    rows = datagen.load_manifest(tmp_path / "a" / "manifest.csv")
    spec = datagen.SynthSpec.from_dict({"sites": TINY_SITES})
    assert len(rows) == sum(sum(spec.counts(s)) for s in datagen.SITES)
    assert _sha(tmp_path / "a" / "manifest.csv") == _sha(tmp_path / "b" / "manifest.csv")
    for r in rows[:5]:
        assert _sha(tmp_path / "a" / r.path) == _sha(tmp_path / "b" / r.path)
    snap = yaml.safe_load((tmp_path / "a" / "run_config.yaml").read_text())
    assert snap["synth"]["seed"] == 4


def test_synth_zero_grade_count(tmp_path):
    sites = {s: {"train_counts": [2, 2, 2, 2, 0]} for s in datagen.SITES}
    cfg = _yaml(tmp_path / "s.yaml", {"sites": sites})
    assert cli.main(["synth", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    grades = {r.grade for r in datagen.load_manifest(tmp_path / "d" / "manifest.csv")}
    assert 4 not in grades and grades == {0, 1, 2, 3}


# ---------------------------------------------------------------------------
# train and friends on a tiny run
# ---------------------------------------------------------------------------


def _run_cfg(tmp_path, **extra):
    d = {"seed": 3, "experiment": 5, "train": {"batch_size": 8, "epochs": 1, "finetune_epochs": 1},
         "data": {"synth": {"sites": TINY_SITES}}}
    d.update(extra)
    return _yaml(tmp_path / "run.yaml", d)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _run_cfg(root)
    runs = []
    for name in ("r1", "r2"):
        out = root / name
        assert cli.main(["train", "--config", cfg, "--lr", "5e-4", "--out", str(out)]) == 0
        runs.append(out)
    assert cli.main(["synth", "--config", str(runs[0] / "run_config.yaml"), "--out", str(root / "data")]) == 0
    return root, runs, root / "data" / "manifest.csv"


def test_train_snapshot_matches_resolved_config(tiny_run):
    root, (out, _), _ = tiny_run
    args = cli.build_parser().parse_args(["train", "--config", str(root / "run.yaml"), "--lr", "5e-4", "--out", str(out)])
    snap = yaml.safe_load((out / "run_config.yaml").read_text())
    assert snap == cli.resolve(args).to_dict()
    assert snap["train"]["optimizer"]["lr"] == 5e-4  # flag beats file
    assert snap["data"]["synth"]["seed"] == 3


def test_train_outputs(tiny_run):
    _, (out, _), _ = tiny_run
    phases = [line.split(",")[1] for line in (out / "history.csv").read_text().splitlines()[1:]]
    assert phases == ["phase1", "phase2"]
    audit = json.loads((out / "freeze_audit.json").read_text())
    assert audit["phase2"]["unchanged"]
    for site in ("source", "target", "combined"):
        rep = json.loads((out / f"metrics_{site}.json").read_text())
        assert 0.0 <= rep["accuracy"] <= 1.0


def test_train_same_seed_same_metrics(tiny_run):
    _, (a, b), _ = tiny_run
    for site in ("source", "target", "combined"):
        assert (a / f"metrics_{site}.json").read_bytes() == (b / f"metrics_{site}.json").read_bytes()
    assert _sha(a / "checkpoint.swkt") == _sha(b / "checkpoint.swkt")


def test_synth_from_run_config_reproduces_training_data(tiny_run):
    root, (out, _), manifest = tiny_run
    rc = cli.resolve(cli.build_parser().parse_args(["train", "--config", str(out / "run_config.yaml")]))
    rows = datagen.load_manifest(manifest)
    assert len(rows) == len(datagen.generate_dataset(rc.synth))


def test_embed_and_tsne(tiny_run, tmp_path):
    _, (out, _), manifest = tiny_run
    argv = ["embed", "--checkpoint", str(out / "checkpoint.swkt"), "--manifest", str(manifest), "--split", "all",
            "--tsne", "--perplexity", "5", "--iters", "250", "--out", str(tmp_path)]
    assert cli.main(argv) == 0
    n = len(datagen.load_manifest(manifest))
    assert len((tmp_path / "embeddings.tsv").read_text().splitlines()) == n
    assert len((tmp_path / "tsne.tsv").read_text().splitlines()) == n
    drift = json.loads((tmp_path / "drift.json").read_text())
    assert drift["mmd2_biased"] >= 0.0


def test_gradcam_writes_heatmap(tiny_run, tmp_path):
    _, (out, _), manifest = tiny_run
    image = manifest.parent / datagen.load_manifest(manifest)[0].path
    argv = ["gradcam", "--checkpoint", str(out / "checkpoint.swkt"), "--image", str(image), "--class", "2",
            "--out", str(tmp_path)]
    assert cli.main(argv) == 0
    heat = interpret.read_pgm(tmp_path / "heatmap.pgm")
    assert heat.shape == (64, 64)
    raw = np.fromfile(tmp_path / "heatmap.f32", dtype="<f4")
    assert raw.size == 64 * 64 and 0.0 <= raw.min() and raw.max() <= 1.0


def test_gradcam_rejects_bad_class(tiny_run, tmp_path, capsys):
    _, (out, _), manifest = tiny_run
    image = manifest.parent / datagen.load_manifest(manifest)[0].path
    argv = ["gradcam", "--checkpoint", str(out / "checkpoint.swkt"), "--image", str(image), "--class", "7",
            "--out", str(tmp_path)]
    assert cli.main(argv) == 1
    assert "class index" in capsys.readouterr().err


def test_gradcheck_command(tmp_path):
    assert cli.main(["gradcheck", "--samples", "6", "--seed", "2", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "gradcheck.json").read_text())
    assert rep["passed"]


def test_eval_on_memorised_set(overfit_run, tmp_path):
    ckpt = save_checkpoint(overfit_run["model"], tmp_path / "m.swkt")
    argv = ["eval", "--checkpoint", str(ckpt), "--manifest", str(overfit_run["manifest"]), "--out", str(tmp_path)]
    assert cli.main(argv) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["source"]["accuracy"] == 1.0


# ---------------------------------------------------------------------------
# errors
# ---------------------------------------------------------------------------


def test_invalid_config_lists_every_error(tmp_path, capsys):
    cfg = _yaml(tmp_path / "bad.yaml", {"experiment": 9, "bogus": 1, "train": {"batch_size": 0},
                                       "model": {"image_size": 64}})
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "bogus" in err and err.count("error:") >= 1
    cfg = _yaml(tmp_path / "bad2.yaml", {"experiment": 9, "train": {"batch_size": 0, "epochs": 0}})
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "experiment must be 1..5" in err and "batch_size" in err and "epochs" in err
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("argv", [
    ["train", "--experiment", "0"],
    ["train", "--config", "/nonexistent/run.yaml"],
    ["eval", "--checkpoint", "/nonexistent.swkt", "--manifest", "/nonexistent.csv"],
])
def test_invalid_inputs_exit_1(argv, tmp_path):
    assert cli.main([*argv, "--out", str(tmp_path)]) == 1


def test_malformed_yaml_and_corrupt_checkpoint(tmp_path, overfit_run):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [1, 2\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 1
    ckpt = save_checkpoint(overfit_run["model"], tmp_path / "m.swkt")
    buf = bytearray(ckpt.read_bytes())
    buf[0] ^= 0xFF
    ckpt.write_bytes(bytes(buf))
    argv = ["eval", "--checkpoint", str(ckpt), "--manifest", str(overfit_run["manifest"]), "--out", str(tmp_path)]
    assert cli.main(argv) == 1


@pytest.mark.parametrize("argv", [["synth", "--seed", "-1"], ["synth", "--seed", str(2**64)], ["frobnicate"]])
def test_usage_errors_exit_1(argv):
    assert cli.main(argv) == 1


def test_runtime_failure_exit_2(tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(train, "run_experiment", boom)
    assert cli.main(["train", "--config", _run_cfg(tmp_path), "--out", str(tmp_path / "o")]) == 2
    assert "disk on fire" in capsys.readouterr().err


def test_shipped_benchmark_config_matches_acceptance_settings():
    from pathlib import Path

    cfg = Path(__file__).resolve().parents[1] / "configs" / "benchmark.yaml"
    rc = cli.resolve(cli.build_parser().parse_args(["train", "--config", str(cfg)]))
    assert rc.synth.to_dict() == datagen.benchmark_spec(rc.seed).to_dict()
    assert rc.train.to_dict() == train.benchmark_train_config().to_dict()
