import csv
import math
import subprocess
import sys

import numpy as np
import pytest

from tlvmogp.cli import main
from tlvmogp.data import load_dataset

TRAIN_INI = """
[model]
n_blocks = 2
n_inducing = 6
latent_dim = 2
[train]
epochs = 5
seed = 3
[eval]
samples = 4
"""


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.ini").write_text("[synth]\nn_inputs = 12\nn_outputs = 4\nnoise = 0.05\n")
    (root / "train.ini").write_text(TRAIN_INI)
    assert main(["synth", "--spec", str(root / "synth.ini"), "--seed", "1", "--out", str(root / "data")]) == 0
    assert main(["split", "--data", str(root / "data"), "--out", str(root / "split"), "--fraction", "0.25",
                 "--seed", "2"]) == 0
    assert main(["train", "--config", str(root / "train.ini"), "--data", str(root / "split" / "train"),
                 "--out", str(root / "m.ckpt"), "--history", str(root / "hist.csv")]) == 0
    return root


def test_synth_and_split_outputs(workspace):
    full = load_dataset(str(workspace / "data"))
    tr = load_dataset(str(workspace / "split" / "train"))
    te = load_dataset(str(workspace / "split" / "test"))
    assert (full.N, full.P) == (12, 4)
    assert (workspace / "data" / "truth.json").exists()
    assert tr.n_obs + te.n_obs == full.n_obs
    assert te.n_obs == round(0.25 * full.n_obs)


def test_train_writes_history(workspace):
    rows = read_csv(workspace / "hist.csv")
    assert rows[0] == ["epoch", "elbo", "seconds"]
    assert len(rows) == 6
    assert all(math.isfinite(float(r[1])) for r in rows[1:])


def test_predict_file(workspace, capsys):
    out = workspace / "pred.csv"
    assert main(["predict", "--ckpt", str(workspace / "m.ckpt"), "--data", str(workspace / "split" / "test"),
                 "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[0] == ["input_id", "output_id", "pred_mean", "pred_var"]
    te = load_dataset(str(workspace / "split" / "test"))
    assert len(rows) == te.n_obs + 1
    assert all(float(r[3]) > 0 for r in rows[1:])
    # fixed prediction stream: a second run gives identical output
    out2 = workspace / "pred2.csv"
    main(["predict", "--ckpt", str(workspace / "m.ckpt"), "--data", str(workspace / "split" / "test"),
          "--out", str(out2)])
    assert out.read_text() == out2.read_text()


def test_eval_file_and_summary(workspace):
    out = workspace / "eval.csv"
    assert main(["eval", "--ckpt", str(workspace / "m.ckpt"), "--data", str(workspace / "split" / "test"),
                 "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[0] == ["input_id", "output_id", "y_true", "pred_mean", "pred_var", "nll"]
    body, summary = rows[1:-1], rows[-1]
    assert summary[0] == "# summary"
    y = np.array([float(r[2]) for r in body])
    m = np.array([float(r[3]) for r in body])
    nll = np.array([float(r[5]) for r in body])
    assert float(summary[1].split("=")[1]) == pytest.approx(np.mean((y - m) ** 2), rel=1e-12)
    assert float(summary[2].split("=")[1]) == pytest.approx(nll.mean(), rel=1e-12)


def test_gradcheck_command(workspace, capsys):
    assert main(["gradcheck", "--config", str(workspace / "train.ini"), "--data", str(workspace / "data")]) == 0
    out = capsys.readouterr().out
    assert "standard:" in out and "tighter:" in out


def test_ablate_command(workspace):
    grid = workspace / "grid.ini"
    grid.write_text(TRAIN_INI.replace("epochs = 5", "epochs = 2")
                    + "[grid]\nseeds = 0, 1\n[split]\nfraction = 0.25\n"
                      "[config sn]\nmodel.sn_bound = 1.0\n[config free]\nmodel.spectral_norm = false\n")
    assert main(["ablate", "--grid", str(grid), "--data", str(workspace / "data"),
                 "--out", str(workspace / "abl")]) == 0
    rows = read_csv(workspace / "abl" / "results.csv")
    assert rows[0] == ["config_name", "seed", "mse", "nll", "sec_per_epoch", "status"]
    assert [(r[0], r[1]) for r in rows[1:]] == [("sn", "0"), ("sn", "1"), ("free", "0"), ("free", "1")]
    summary = read_csv(workspace / "abl" / "summary.csv")
    assert [r[0] for r in summary[1:]] == ["sn", "free"]


@pytest.mark.parametrize("argv, kind", [
    (["train", "--config", "missing.ini", "--data", "nowhere", "--out", "x"], "FileNotFoundError"),
    (["predict", "--ckpt", "missing.ckpt", "--data", "nowhere", "--out", "x"], "FileNotFoundError"),
])
def test_errors_are_one_line(argv, kind, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert err.count("\n") == 1
    assert err.startswith(f"error: {kind}: ")


def test_bad_config_reports_key(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nwidth = 3\n")
    assert main(["train", "--config", str(bad), "--data", str(workspace / "data"), "--out", str(tmp_path / "m")]) == 1
    assert "error: ConfigError:" in capsys.readouterr().err


def test_corrupt_checkpoint_fails(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    raw = (workspace / "m.ckpt").read_bytes()
    bad.write_bytes(raw[:-5] + b"00000")
    assert main(["eval", "--ckpt", str(bad), "--data", str(workspace / "data"), "--out", str(tmp_path / "e")]) == 1
    assert "error: ChecksumError:" in capsys.readouterr().err


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "tlvmogp", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("train", "predict", "eval", "split", "synth", "gradcheck", "ablate"):
        assert cmd in res.stdout
