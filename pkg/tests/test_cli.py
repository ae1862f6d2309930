"""Command-line surface: exit codes, echoed configs, reproducible output."""

import contextlib
import io
import re
from types import SimpleNamespace

import numpy as np
import pytest

from changedet.checkpoint import load_checkpoint
from changedet.cli import main
from changedet.config import parse_run_config
from changedet.data import SynthConfig, generate_synthetic_dataset, load_index, sample_paths
from changedet.gradcheck import OpReport
from changedet.metrics import ConfusionCounts, confusion_from_masks
from changedet.model import preset
from changedet.netpbm import load_pgm, save_ppm


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def echoed_config(text):
    """Parse the non-comment lines of the echoed header back into a config."""
    lines = text.splitlines()
    body = lines[: lines.index("# end config")]
    return parse_run_config("\n".join(ln for ln in body if not ln.startswith("#")) + "\n")


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    generate_synthetic_dataset(
        SynthConfig(image_size=32, train_count=4, val_count=2, test_count=2, seed=11), root
    )
    return root


@pytest.fixture(scope="module")
def no_test_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_no_test")
    generate_synthetic_dataset(
        SynthConfig(image_size=32, train_count=1, val_count=1, test_count=0, seed=2), root
    )
    return root


TRAIN_CFG_TEXT = "[model]\npreset = nano\n\n[train]\nepochs = 2\nbatch_size = 2\nseed = 0\naugment = off\n"


@pytest.fixture(scope="module")
def nano_run(tmp_path_factory, data_root):
    """One CLI training run shared by the train/eval/predict/bench tests."""
    work = tmp_path_factory.mktemp("cli_train")
    cfg = work / "run.cfg"
    cfg.write_text(TRAIN_CFG_TEXT, encoding="utf-8")
    ckpt = work / "nano.npz"
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(["train", "--config", str(cfg), "--data", str(data_root), "--out", str(ckpt)])
    assert code == 0
    return SimpleNamespace(data=data_root, config=cfg, ckpt=ckpt, text=buf.getvalue())


# ---------------------------------------------------------------------------
# parser-level behaviour


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "changedet" in capsys.readouterr().out


def test_missing_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_bench_source_flags_are_exclusive():
    with pytest.raises(SystemExit) as exc:
        main(["bench", "--ckpt", "a.npz", "--config", "b.cfg"])
    assert exc.value.code == 2


def test_ablate_rejects_unknown_preset():
    with pytest.raises(SystemExit) as exc:
        main(["ablate", "--data", "d", "--preset", "widths"])
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# synth


def test_synth_writes_dataset(capsys, tmp_path):
    out_dir = tmp_path / "ds"
    code, out, _ = run_cli(
        capsys, "synth", "--out", out_dir, "--size", 32,
        "--n-train", 2, "--n-val", 1, "--n-test", 1, "--seed", 3,
    )
    assert code == 0
    assert "train: 2 samples, mean change fraction" in out
    assert "# end config" in out
    for split, count in (("train", 2), ("val", 1), ("test", 1)):
        index = load_index(out_dir, split)
        assert len(index) == count
        for sid in index.ids:
            for path in sample_paths(out_dir, split, sid):
                assert path.is_file()
    rc = echoed_config(out)
    assert rc.data == SynthConfig(image_size=32, train_count=2, val_count=1, test_count=1, seed=3)


def test_synth_same_seed_same_bytes(capsys, tmp_path):
    trees = []
    for name in ("a", "b"):
        out_dir = tmp_path / name
        code, _, _ = run_cli(
            capsys, "synth", "--out", out_dir, "--size", 32,
            "--n-train", 1, "--n-val", 1, "--n-test", 1, "--seed", 9,
        )
        assert code == 0
        files = sorted(p.relative_to(out_dir) for p in out_dir.rglob("*") if p.is_file())
        trees.append({str(rel): (out_dir / rel).read_bytes() for rel in files})
    assert trees[0] == trees[1]


def test_synth_rejects_bad_size(capsys, tmp_path):
    code, _, err = run_cli(capsys, "synth", "--out", tmp_path / "ds", "--size", 33)
    assert code == 2
    assert err.startswith("error:")


def test_synth_refuses_nonempty_without_force(capsys, tmp_path):
    out_dir = tmp_path / "ds"
    args = ("synth", "--out", out_dir, "--size", 32, "--n-train", 1, "--n-val", 0, "--n-test", 0)
    assert run_cli(capsys, *args)[0] == 0
    code, _, err = run_cli(capsys, *args)
    assert code == 2
    assert "--force" in err
    assert run_cli(capsys, *args, "--force")[0] == 0


# ---------------------------------------------------------------------------
# train


def test_train_writes_checkpoint_and_logs(nano_run):
    epoch_lines = [ln for ln in nano_run.text.splitlines() if ln.startswith("epoch=")]
    assert len(epoch_lines) == 2
    assert all(" distill=0.0 " in ln for ln in epoch_lines)  # no teacher configured
    assert "checkpoint = " in nano_run.text
    assert re.search(r"best epoch \d+: val_iou=\d", nano_run.text)
    assert nano_run.ckpt.is_file()
    model = load_checkpoint(nano_run.ckpt)
    assert model.config == preset("nano")


def test_train_echo_parses_back(nano_run):
    rc = echoed_config(nano_run.text)
    assert rc.model == preset("nano")
    assert rc.train.epochs == 2
    assert rc.train.batch_size == 2
    assert not rc.train.augment.enabled


def test_train_rerun_reproduces(capsys, nano_run, tmp_path):
    ckpt2 = tmp_path / "again.npz"
    code, out, _ = run_cli(
        capsys, "train", "--config", nano_run.config, "--data", nano_run.data, "--out", ckpt2,
    )
    assert code == 0
    pick = lambda text: [ln for ln in text.splitlines() if ln.startswith(("epoch=", "best epoch"))]
    assert pick(out) == pick(nano_run.text)
    assert ckpt2.read_bytes() == nano_run.ckpt.read_bytes()


def test_train_missing_teacher_checkpoint(capsys, data_root, tmp_path):
    code, _, err = run_cli(
        capsys, "train", "--data", data_root, "--out", tmp_path / "s.npz",
        "--teacher", tmp_path / "ghost.npz",
    )
    assert code == 2
    assert "error:" in err


def test_train_missing_data(capsys, tmp_path):
    code, _, err = run_cli(capsys, "train", "--data", tmp_path / "void", "--out", tmp_path / "s.npz")
    assert code == 2
    assert "error:" in err


# ---------------------------------------------------------------------------
# eval


def test_eval_reports_metrics(capsys, nano_run):
    code, out, _ = run_cli(capsys, "eval", "--ckpt", nano_run.ckpt, "--data", nano_run.data)
    assert code == 0
    assert "split = test (2 samples)" in out
    for key in ("iou = ", "f1 = ", "oa = ", "counts: tp=", "degenerate = "):
        assert key in out


def test_eval_twice_identical(capsys, nano_run):
    args = ("eval", "--ckpt", nano_run.ckpt, "--data", nano_run.data, "--split", "val")
    assert run_cli(capsys, *args) == run_cli(capsys, *args)


def test_eval_empty_split_rejected(capsys, nano_run, no_test_root):
    code, _, err = run_cli(capsys, "eval", "--ckpt", nano_run.ckpt, "--data", no_test_root)
    assert code == 2
    assert "error:" in err


def test_eval_matches_per_sample_predict(capsys, nano_run, tmp_path):
    """Batched evaluation equals predicting each pair alone and re-scoring."""
    code, out, _ = run_cli(capsys, "eval", "--ckpt", nano_run.ckpt, "--data", nano_run.data)
    assert code == 0
    tp, fp, fn, tn = map(int, re.search(r"counts: tp=(\d+) fp=(\d+) fn=(\d+) tn=(\d+)", out).groups())

    index = load_index(nano_run.data, "test")
    total = ConfusionCounts(0, 0, 0, 0)
    for sid in index.ids:
        a, b, label = sample_paths(nano_run.data, "test", sid)
        mask_path = tmp_path / f"{sid}.pgm"
        code, _, _ = run_cli(
            capsys, "predict", "--ckpt", nano_run.ckpt, "--pre", a, "--post", b, "--out", mask_path,
        )
        assert code == 0
        total = total + confusion_from_masks(load_pgm(mask_path), load_pgm(label))
    assert (total.tp, total.fp, total.fn, total.tn) == (tp, fp, fn, tn)


# ---------------------------------------------------------------------------
# predict


def test_predict_identical_pair_mostly_empty(capsys, e2e_run, tmp_path):
    # A pair with no change should produce an (almost) all-zero mask once
    # the model has actually learned; reuses the full training run.
    a, _, _ = sample_paths(e2e_run.root, "test", load_index(e2e_run.root, "test").ids[0])
    mask_path = tmp_path / "mask.pgm"
    code, out, _ = run_cli(
        capsys, "predict", "--ckpt", e2e_run.ckpt, "--pre", a, "--post", a, "--out", mask_path,
    )
    assert code == 0
    assert "changed pixels:" in out
    raw = mask_path.read_bytes()
    assert raw.startswith(b"P5")
    assert set(raw.split(b"\n", 3)[3]) <= {0, 255}
    assert load_pgm(mask_path).mean() < 0.05


def test_predict_size_mismatch(capsys, nano_run, tmp_path):
    big = tmp_path / "big.ppm"
    save_ppm(np.zeros((3, 64, 64), dtype=np.float32), big)
    a, _, _ = sample_paths(nano_run.data, "test", load_index(nano_run.data, "test").ids[0])
    code, _, err = run_cli(
        capsys, "predict", "--ckpt", nano_run.ckpt, "--pre", a, "--post", big,
        "--out", tmp_path / "m.pgm",
    )
    assert code == 2
    assert "differ" in err


def test_predict_missing_image(capsys, nano_run, tmp_path):
    code, _, err = run_cli(
        capsys, "predict", "--ckpt", nano_run.ckpt, "--pre", tmp_path / "no.ppm",
        "--post", tmp_path / "no.ppm", "--out", tmp_path / "m.pgm",
    )
    assert code == 2
    assert "not found" in err


# ---------------------------------------------------------------------------
# bench


def test_bench_single_run_marks_low_confidence(capsys):
    code, out, _ = run_cli(capsys, "bench", "--preset", "nano", "--size", 32, "--runs", 1, "--warmup", 0)
    assert code == 0
    assert "[low confidence: single run]" in out
    assert "params fusion = 0" in out
    assert "latency median = " in out


def test_bench_multiple_runs_no_marker(capsys):
    code, out, _ = run_cli(capsys, "bench", "--preset", "nano", "--size", 32, "--runs", 2, "--warmup", 0)
    assert code == 0
    assert "low confidence" not in out


def test_bench_flops_scale_with_area(capsys):
    totals = []
    for size in (32, 64):
        _, out, _ = run_cli(capsys, "bench", "--preset", "nano", "--size", size, "--runs", 1, "--warmup", 0)
        totals.append(int(re.search(r"flops total = (\d+)", out).group(1)))
    assert totals[1] == 4 * totals[0]


def test_bench_from_checkpoint(capsys, nano_run):
    code, out, _ = run_cli(capsys, "bench", "--ckpt", nano_run.ckpt, "--size", 32, "--runs", 1, "--warmup", 0)
    assert code == 0
    assert "params total = " in out
    assert "env " in out


def test_bench_rejects_bad_size(capsys):
    code, _, err = run_cli(capsys, "bench", "--preset", "nano", "--size", 33, "--runs", 1)
    assert code == 2
    assert "error:" in err


# ---------------------------------------------------------------------------
# ablate

_ROW = re.compile(r"^(\S+)\s+([\d.]+)\s+([\d.]+)\s+([\d.]+)\s+(\d+)\s+(\d+)$")


def _table_rows(out):
    rows = {}
    for line in out.splitlines():
        match = _ROW.match(line)
        if match:
            rows[match.group(1)] = SimpleNamespace(
                iou=float(match.group(2)), params=int(match.group(5)), flops=int(match.group(6)),
            )
    return rows


def test_ablate_components_table(capsys, data_root):
    code, out, _ = run_cli(
        capsys, "ablate", "--data", data_root, "--preset", "components",
        "--model-preset", "nano", "--epochs", 1, "--batch-size", 2,
    )
    assert code == 0
    rows = _table_rows(out)
    assert list(rows) == ["naive", "emff", "emff+bce", "emff+bce+mae"]
    assert rows["emff"].params < rows["naive"].params
    assert rows["emff"].flops < rows["naive"].flops


def test_ablate_losses_table(capsys, data_root):
    code, out, _ = run_cli(
        capsys, "ablate", "--data", data_root, "--preset", "losses",
        "--model-preset", "nano", "--epochs", 1, "--batch-size", 2,
    )
    assert code == 0
    assert list(_table_rows(out)) == ["ce+kl", "ce+mse", "soft_miou+mae", "ce+mae"]


def test_ablate_backbones_table(capsys, data_root):
    code, out, _ = run_cli(
        capsys, "ablate", "--data", data_root, "--preset", "backbones",
        "--epochs", 1, "--batch-size", 2,
    )
    assert code == 0
    rows = _table_rows(out)
    assert list(rows) == ["nano", "tiny", "small"]
    assert rows["nano"].params < rows["tiny"].params < rows["small"].params


def test_ablate_needs_test_split(capsys, no_test_root):
    code, _, err = run_cli(
        capsys, "ablate", "--data", no_test_root, "--preset", "components",
        "--model-preset", "nano", "--epochs", 1,
    )
    assert code == 2
    assert "error:" in err


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_single_op(capsys):
    code, out, _ = run_cli(capsys, "gradcheck", "--op", "relu", "--instances", 5)
    assert code == 0
    assert "PASS relu" in out
    assert "1 of 1 ops passed" in out


def test_gradcheck_unknown_op(capsys):
    code, _, err = run_cli(capsys, "gradcheck", "--op", "frobnicate")
    assert code == 2
    assert "unknown gradcheck op" in err


def test_gradcheck_failure_exits_nonzero(capsys, monkeypatch):
    import changedet.cli as cli

    broken = OpReport(op="relu", instances=5, max_rel_err=1.0, passed=False, seconds=0.0)
    monkeypatch.setattr(cli, "check_op", lambda *a, **k: broken)
    code, out, _ = run_cli(capsys, "gradcheck", "--op", "relu", "--instances", 5)
    assert code == 1
    assert "FAIL relu" in out
    assert "0 of 1 ops passed" in out


# ---------------------------------------------------------------------------
# output log mirroring


def test_log_mirrors_stdout(capsys, tmp_path):
    log = tmp_path / "run.log"
    _, out, _ = run_cli(
        capsys, "bench", "--preset", "nano", "--size", 32, "--runs", 1, "--warmup", 0, "--log", log,
    )
    assert log.read_text(encoding="utf-8") == out


def test_log_captures_errors_too(capsys, tmp_path):
    log = tmp_path / "run.log"
    code, _, err = run_cli(capsys, "synth", "--out", tmp_path / "ds", "--size", 33, "--log", log)
    assert code == 2
    assert "error:" in log.read_text(encoding="utf-8")
