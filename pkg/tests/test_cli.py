import json
import shutil
import subprocess

import numpy as np
import pytest

from chrnn import cli, data


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.mark.parametrize("cell,line", [("srn", "matrices=42 params=2752512"), ("lstm", "matrices=150 params=9830400")])
def test_audit_reference_size(capsys, cell, line):
    code, out, _ = run(capsys, "audit", "--paper", "--cell", cell)
    assert code == 0 and line in out.splitlines()


def test_audit_tiny_config(capsys):
    code, out, _ = run(capsys, "audit", "--scales", "1x1,2x2", "--set", "model.conv=4:3:1:1:relu:2:2",
                       "--set", "model.image_size=8")
    # 4 directions x 3 matrices x 16 entries + one 4x4 cross map
    assert code == 0 and "matrices=13 params=208" in out


@pytest.mark.parametrize("cell", ["srn", "lstm"])
def test_gradcheck_passes(capsys, cell):
    code, out, _ = run(capsys, "gradcheck", "--cell", cell)
    assert code == 0
    assert "hrnn.cross.1to2" in out and "FAIL" not in out


def test_gradcheck_fault_injection_exits_5(capsys):
    code, out, err = run(capsys, "gradcheck", "--inject-fault")
    assert code == 5
    assert "gradcheck failed: hrnn.s2.ne.W_row at (0, 0)" in err


@pytest.mark.parametrize("argv", [["--grid", "5"], ["--hidden", "9"], ["--scales", "1x1,6x6"]])
def test_gradcheck_size_limits(capsys, argv):
    code, _, err = run(capsys, "gradcheck", *argv)
    assert code == 2 and ("limited" in err or "hidden" in err)


def test_degencheck(capsys):
    assert run(capsys, "degencheck")[0] == 0
    code, out, _ = run(capsys, "degencheck", "--zero-input", "--tol", "0")
    assert code == 0 and "max_abs_deviation=0.000e+00" in out
    code, _, err = run(capsys, "degencheck", "--perturb")
    assert code == 5 and "deviation" in err


def test_train_smoke_and_evaluate(capsys, tmp_path):
    out_dir = tmp_path / "run"
    argv = ["train", "--task", "synthetic", "--cell", "srn", "--seed", "7", "--out", str(out_dir),
            "--set", "data.n_train=64", "--set", "data.n_val=32", "--set", "train.epochs=1",
            "--set", "train.batch_size=32"]
    code, out, _ = run(capsys, *argv)
    assert code == 0
    assert "# seed = 7" in out and "[model]" in out and "cell = srn" in out
    assert (out_dir / "checkpoint.ckpt").is_file() and (out_dir / "metrics.jsonl").is_file()
    recs = [json.loads(x) for x in (out_dir / "metrics.jsonl").read_text().splitlines()]
    assert recs[0]["event"] == "start" and recs[0]["seed"] == 7
    assert {r.get("split") for r in recs[1:]} == {"train", "val"}
    ck = data.load_checkpoint(out_dir / "checkpoint.ckpt")
    assert ck.run.train.seed == 7 and ck.meta["step"] == "2"

    # identical echo -> bit-identical rerun
    out2 = tmp_path / "run2"
    argv[argv.index(str(out_dir))] = str(out2)
    assert run(capsys, *argv)[0] == 0
    assert data.params_equal(ck.params, data.load_checkpoint(out2 / "checkpoint.ckpt").params)

    code, out, _ = run(capsys, "evaluate", str(out_dir / "checkpoint.ckpt"))
    assert code == 0
    m = json.loads(out.strip().splitlines()[-1])
    assert 0 <= m["top1"] <= 1


def test_train_resume(capsys, tmp_path):
    common = ["--task", "synthetic", "--set", "data.n_train=48", "--set", "data.n_val=16",
              "--set", "train.epochs=1", "--set", "train.batch_size=16"]
    assert run(capsys, "train", *common, "--out", str(tmp_path / "full"))[0] == 0
    assert run(capsys, "train", *common, "--out", str(tmp_path / "part"), "--max-steps", "1")[0] == 0
    assert run(capsys, "train", *common, "--out", str(tmp_path / "part"),
               "--resume", str(tmp_path / "part" / "checkpoint.ckpt"))[0] == 0
    a = data.load_checkpoint(tmp_path / "full" / "checkpoint.ckpt")
    b = data.load_checkpoint(tmp_path / "part" / "checkpoint.ckpt")
    assert data.params_equal(a.params, b.params)


def test_train_errors(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--set", "model.bogus=1", "--out", str(tmp_path))
    assert code == 2 and "model.bogus" in err
    code, _, err = run(capsys, "train", "--task", "idx", "--out", str(tmp_path))
    assert code == 3 and "train_images" in err
    code, _, err = run(capsys, "train", "--task", "idx", "--train-images", str(tmp_path / "nope"),
                       "--train-labels", "x", "--val-images", "y", "--val-labels", "z", "--out", str(tmp_path))
    assert code == 3 and "no such file" in err
    code, _, err = run(capsys, "train", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path))
    assert code == 2
    code, _, err = run(capsys, "evaluate", str(tmp_path / "missing.ckpt"))
    assert code == 3
    code, _, err = run(capsys, "train", "--set", "train.flip_augment=true", "--out", str(tmp_path))
    assert code == 2 and "flip_augment" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numerical_abort(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--task", "synthetic", "--set", "data.n_train=32", "--set", "data.n_val=8",
                       "--set", "train.lr=1e30", "--set", "train.epochs=3", "--set", "train.batch_size=8",
                       "--out", str(tmp_path))
    assert code == 4 and "non-finite loss" in err


def test_train_on_idx_files(capsys, tmp_path):
    rng = np.random.default_rng(0)
    for split, n in (("train", 20), ("val", 8)):
        data.write_idx(tmp_path / f"{split}-images.idx", rng.integers(0, 256, size=(n, 24, 24)))
        data.write_idx(tmp_path / f"{split}-labels.idx", rng.integers(0, 2, size=n))
    code, _, err = run(capsys, "train", "--task", "idx", "--out", str(tmp_path / "run"),
                       "--train-images", str(tmp_path / "train-images.idx"),
                       "--train-labels", str(tmp_path / "train-labels.idx"),
                       "--val-images", str(tmp_path / "val-images.idx"),
                       "--val-labels", str(tmp_path / "val-labels.idx"),
                       "--set", "train.epochs=1", "--set", "train.batch_size=10")
    assert code == 0, err
    ck = data.load_checkpoint(tmp_path / "run" / "checkpoint.ckpt")
    assert ck.mean is not None and ck.mean.shape == (1, 24, 24)


def test_console_script_and_log_env(tmp_path):
    exe = shutil.which("chrnn")
    if exe is None:
        pytest.skip("console script not installed")
    r = subprocess.run([exe, "audit", "--paper"], capture_output=True, text=True,
                       env={"HRNN_LOG": "DEBUG", "PATH": "/usr/bin:/bin"})
    assert r.returncode == 0 and "matrices=42 params=2752512" in r.stdout
    assert "DEBUG" in r.stderr
