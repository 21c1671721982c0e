import csv
import hashlib
import json

import numpy as np
import pytest

from ltreweight.cli import main

TINY = """
[data]
num_classes = 4
dims = 5
imbalance_factor = 10
base_count = 60
class_separation = 3.0
dev_per_class = 5
test_per_class = 20

[model]
hidden = 6

[train]
lr = 0.05
meta_lr = 10
stage1_epochs = 1
stage2_epochs = 1
batch_size = 20
"""


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


# ---------------------------------------------------------------- make-data


def test_make_data_ratio_and_reproducible_manifest(tmp_path):
    args = ["make-data", "--synth", "--num-classes", "10", "--base-count", "200", "--imbalance-factor", "100"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    counts = manifest["counts"]["train"]
    assert counts[0] / counts[-1] == 100 and manifest["imbalance_factor_achieved"] == 100
    digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()  # noqa: E731
    assert digest(tmp_path / "a" / "manifest.json") == digest(tmp_path / "b" / "manifest.json")
    assert manifest["files"]["train.csv"] == digest(tmp_path / "a" / "train.csv")


def test_make_data_balanced_at_if_one(tmp_path):
    assert main(["make-data", "--synth", "--imbalance-factor", "1", "--base-count", "30", "--out", str(tmp_path / "d")]) == 0
    counts = json.loads((tmp_path / "d" / "manifest.json").read_text())["counts"]["train"]
    assert len(set(counts)) == 1


def test_make_data_from_files(tmp_path):
    rng = np.random.default_rng(0)
    for name, per in (("full.csv", 30), ("test.csv", 5)):
        with open(tmp_path / name, "w") as f:
            for y in range(3):
                for _ in range(per):
                    f.write(",".join([str(y), *(repr(float(v)) for v in rng.normal(size=2))]) + "\n")
    out = tmp_path / "lt"
    assert main(["make-data", "--source", str(tmp_path / "full.csv"), "--test-source", str(tmp_path / "test.csv"),
                 "--imbalance-factor", "5", "--dev-per-class", "3", "--out", str(out)]) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert m["counts"]["dev"] == [3, 3, 3] and m["counts"]["test"] == [5, 5, 5]
    assert m["counts"]["train"] == [27, 10, 3]
    # the literal drop rule keeps 30 - round(30 * 0.5**y) for y = 1..3, then dev takes 3 each
    assert main(["make-data", "--source", str(tmp_path / "full.csv"), "--test-source", str(tmp_path / "test.csv"),
                 "--literal-mu", "0.5", "--dev-per-class", "3", "--out", str(tmp_path / "lit")]) == 0
    lit = json.loads((tmp_path / "lit" / "manifest.json").read_text())
    assert lit["counts"]["train"] == [12, 19, 23]


def test_make_data_errors_exit_nonzero_without_partial_output(tmp_path, capsys):
    out = tmp_path / "x"
    assert main(["make-data", "--synth", "--imbalance-factor", "1000", "--base-count", "50", "--out", str(out)]) == 2
    assert "no examples" in capsys.readouterr().err
    assert main(["make-data", "--source", str(tmp_path / "nope.csv"), "--test-source", str(tmp_path / "nope.csv"),
                 "--out", str(out)]) == 2
    # export fails mid-write: 20 features cannot be written as cifar records
    assert main(["make-data", "--synth", "--format", "cifar_binary", "--out", str(out)]) == 2
    assert list(tmp_path.iterdir()) == []


# ---------------------------------------------------------------- train / eval


def test_train_then_eval(tmp_path, tiny_config, capsys):
    run = tmp_path / "run"
    assert main(["train", str(tiny_config), "--seed", "3", "--out", str(run)]) == 0
    meta = json.loads((run / "metadata.json").read_text())
    assert meta["seed"] == 3 and len(meta["config_hash"]) == 16
    for name in ("metrics.csv", "confusion.csv", "epsilon_summary.csv", "per_class_accuracy.csv"):
        rows = read_csv(run / name)
        assert rows and all(r["config_hash"] == meta["config_hash"] for r in rows)
    eps = read_csv(run / "epsilon_summary.csv")
    assert {"epoch", "class", "mean_eps", "min_total_weight"} <= set(eps[0])
    cm = read_csv(run / "confusion.csv")
    assert sum(int(v) for r in cm for k, v in r.items() if k.startswith("pred_")) == 80

    # the synthetic test split for seed 3 is rebuilt by make-data with the same seed
    data = tmp_path / "data"
    assert main(["make-data", "--synth", "--num-classes", "4", "--dims", "5", "--imbalance-factor", "10",
                 "--base-count", "60", "--class-separation", "3.0", "--dev-per-class", "5",
                 "--test-per-class", "20", "--seed", "3", "--out", str(data)]) == 0
    capsys.readouterr()
    assert main(["eval", str(run / "model.ckpt"), str(data / "test.csv")]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["top1_error"] == meta["top1_error"]
    assert result["config_hash"] == meta["config_hash"]


def test_train_from_data_dir_is_reproducible(tmp_path):
    data = tmp_path / "data"
    assert main(["make-data", "--synth", "--num-classes", "4", "--dims", "5", "--imbalance-factor", "10",
                 "--base-count", "60", "--out", str(data)]) == 0
    cfg = tmp_path / "dir.ini"
    cfg.write_text(TINY.replace("[data]\n", f"[data]\ndir = {data}\n"))
    for name in ("r1", "r2"):
        assert main(["train", str(cfg), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "r1" / "model.ckpt").read_bytes() == (tmp_path / "r2" / "model.ckpt").read_bytes()


def test_train_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text(TINY + "mode = fancy\n")
    assert main(["train", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "mode" in capsys.readouterr().err
    missing = tmp_path / "missing.ini"
    missing.write_text("[data]\nnum_classes = 3\n[train]\nstage1_steps = 1\nstage2_steps = 1\n")
    assert main(["train", str(missing), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "[data] dims" in err and "[train] lr" in err
    assert not (tmp_path / "o").exists()


def test_eval_missing_checkpoint(tmp_path, capsys):
    assert main(["eval", str(tmp_path / "no.ckpt"), str(tmp_path / "no.csv")]) == 2


# ---------------------------------------------------------------- ablate


def test_ablate_single_arm_single_seed(tmp_path, tiny_config):
    out = tmp_path / "abl"
    assert main(["ablate", str(tiny_config), "--arms", "vanilla", "--seeds", "1", "--out", str(out), "-q"]) == 0
    rows = read_csv(out / "summary.csv")
    assert len(rows) == 1 and rows[0]["arm"] == "vanilla"


def test_ablate_summary_medians_match_per_seed_files(tmp_path, tiny_config):
    out = tmp_path / "abl"
    arms = ["vanilla", "l2rw", "ours"]
    assert main(["ablate", str(tiny_config), "--arms", ",".join(arms), "--seeds", "0,1,2",
                 "--imbalance-factors", "5,10", "--out", str(out), "-q"]) == 0
    summary = read_csv(out / "summary.csv")
    assert [r["arm"] for r in summary] == arms
    assert set(summary[0]) >= {"top1_if_5", "top1_if_10", "min_total_weight"}
    for row in summary:
        for factor in ("5", "10"):
            per_seed = []
            for seed in (0, 1, 2):
                metrics = read_csv(out / "runs" / row["arm"] / f"if_{factor}" / f"seed_{seed}" / "metrics.csv")
                per_seed.append(float(metrics[-1]["top1_error"]))
            assert float(row[f"top1_if_{factor}"]) == float(np.median(per_seed))
    for arm in arms:
        assert (out / f"confusion_{arm}_if_10.csv").exists()
    assert (out / "epsilon_ours_if_10.csv").exists()
    details = read_csv(out / "runs.csv")
    assert len(details) == 18
    l2rw = [r for r in details if r["arm"] == "l2rw"]
    assert all(float(r["max_weight_sum_deviation"]) <= 1e-9 for r in l2rw)


def test_ablate_unknown_arm(tmp_path, tiny_config, capsys):
    assert main(["ablate", str(tiny_config), "--arms", "magic", "--out", str(tmp_path / "o")]) == 2
    assert "unknown arm" in capsys.readouterr().err
