import csv
import subprocess
import sys

import numpy as np
import pytest

from twohand.cli import EXIT_INVALID, EXIT_OK, run
from twohand.config import Config
from twohand.metrics import read_pck_csv

TINY = dict(feature_dim=8, heads=2, cheb_order=2, res_blocks=1, patch_grids=(2, 4, 8), n_samples=6,
            batch_size=2, epochs=1, max_steps=4, eval_every=0, checkpoint_every=1, pretrain_meshes=20)


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    d = tmp_path_factory.mktemp("cfg")
    cfg = Config().replace(**TINY)
    path = d / "tiny.txt"
    cfg.save(path)
    return cfg, path


def read_matrix(path):
    rows = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return np.array([[float(x) for x in r] for r in csv.reader(rows)])


def test_bad_usage_exits_with_validation_code(tmp_path, capsys):
    assert run([]) == EXIT_INVALID
    assert run(["nope"]) == EXIT_INVALID
    assert run(["oracle", "--graphs", "many"]) == EXIT_INVALID
    assert run(["eval"]) == EXIT_INVALID
    bad = tmp_path / "bad.txt"
    bad.write_text("feature_dim = 10\nheads = 4\n")
    assert run(["coarsen", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_INVALID
    assert "error" in capsys.readouterr().err


def test_missing_files_exit_with_validation_code(tmp_path):
    assert run(["pck-plot", "--input", str(tmp_path / "absent.csv")]) == EXIT_INVALID
    assert run(["coarsen", "--config", str(tmp_path / "absent.txt")]) == EXIT_INVALID


def test_oracle_command(tmp_path, capsys):
    assert run(["oracle", "--graphs", "5"]) == EXIT_OK
    assert "cheb: max relative error" in capsys.readouterr().out


def test_gradcheck_command_on_tiny_model(tiny_cfg, capsys):
    _, path = tiny_cfg
    assert run(["gradcheck", "--config", str(path), "--coords", "2"]) == EXIT_OK
    assert "max relative error" in capsys.readouterr().out


def test_coarsen_writes_levels(tmp_path):
    assert run(["coarsen", "--out", str(tmp_path)]) == EXIT_OK
    stats = (tmp_path / "stats.txt").read_text()
    assert "config_hash" in stats
    assert sorted(p.name for p in tmp_path.glob("level*.obj")) == ["level0.obj", "level1.obj", "level2.obj"]


def test_generate_train_eval_pipeline(tiny_cfg, tmp_path):
    cfg, path = tiny_cfg
    c = ["--config", str(path)]
    assert run(["gen-data", *c, "--out", str(tmp_path / "data")]) == EXIT_OK
    assert len(list((tmp_path / "data" / "train").glob("*.bin"))) == 5
    assert run(["train", *c, "--data", str(tmp_path / "data"), "--out", str(tmp_path / "run")]) == EXIT_OK
    assert (tmp_path / "run" / "final.bin").exists()
    assert f"# config_hash = {cfg.hash()}" in (tmp_path / "run" / "pck.csv").read_text()
    assert run(["eval", *c, "--data", str(tmp_path / "data"), "--checkpoint", str(tmp_path / "run" / "final.bin"),
                "--out", str(tmp_path / "eval")]) == EXIT_OK
    a = (tmp_path / "run" / "metrics.txt").read_text()
    b = (tmp_path / "eval" / "metrics.txt").read_text()
    assert a == b
    assert run(["eval", *c, "--checkpoint", str(tmp_path / "nope.bin")]) == EXIT_INVALID


def test_attnmap_rows_sum_to_one(tiny_cfg, tmp_path):
    cfg, path = tiny_cfg
    assert run(["attnmap", "--config", str(path), "--out", str(tmp_path)]) == EXIT_OK
    csvs = sorted(tmp_path.glob("*.csv"))
    assert len(csvs) == 3 * 4
    for f in csvs:
        w = read_matrix(f)
        assert np.abs(w.sum(1) - 1).max() < 1e-9
        svg = f.with_suffix(".svg").read_text()
        assert svg.startswith("<svg") or svg.startswith("<?xml")
        assert cfg.hash() in svg


def test_attnmap_honours_disable_flags(tiny_cfg, tmp_path):
    _, path = tiny_cfg
    assert run(["attnmap", "--config", str(path), "--disable-cha", "--disable-pifa", "--out", str(tmp_path)]) == 0
    assert list(tmp_path.glob("*.csv")) == []


def test_pck_plot_of_zero_errors(tmp_path):
    pck = tmp_path / "pck.csv"
    pck.write_text("threshold_mm,pck\n" + "".join(f"{t},1\n" for t in range(0, 51)))
    assert run(["pck-plot", "--input", str(pck)]) == EXIT_OK
    svg = (tmp_path / "pck.svg").read_text()
    assert "polyline" in svg or "path" in svg
    th, curve = read_pck_csv(pck)
    assert np.all(curve == 1.0) and len(th) == 51


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "twohand", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout
