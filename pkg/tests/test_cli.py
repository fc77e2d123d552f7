import json
from pathlib import Path

import pytest

from crossprompt.cli import main

FIXTURE = Path(__file__).resolve().parents[1] / "src" / "crossprompt" / "fixtures" / "drape_coin.csv"

SMALL_INI = """\
[stream]
n_tasks = 2
samples_per_task = 40
m = 4
d_v = 8
vocab = 24
seed = 3

[model]
prompt_len = 2
hidden = 8
n_heads = 2
model_dim = 16
decoder_heads = 2
epochs = 2
"""


def test_metrics_on_fixture(capsys):
    assert main(["metrics", "--matrix", str(FIXTURE)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "stage,bwt,mean_accuracy"
    assert out[-1] == "final_average,67.48"


def test_metrics_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("stage,a,b\n1,50,20\n2,40,30\n")
    assert main(["metrics", "--matrix", str(bad)]) == 2
    assert main(["metrics", "--matrix", str(tmp_path / "absent.csv")]) == 2
    assert "error" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "1"]) == 0
    assert "seed 1" in capsys.readouterr().out


def test_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[model]\neps = 2\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
    assert main(["run", "--config", str(tmp_path / "absent.ini"), "--out", str(tmp_path / "r")]) == 2


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "c.ini").write_text(SMALL_INI)
    assert main(["run", "--config", str(root / "c.ini"), "--out", str(root / "run"), "--eps", "0.95"]) == 0
    return root / "run"


def test_run_directory_layout(run_dir):
    for rel in (
        "config.ini",
        "summary.json",
        "logs/train.log",
        "checkpoints/task_1/manifest.txt",
        "checkpoints/task_2/arrays.bin",
        "reports/accuracy_matrix.csv",
        "reports/stage_metrics.csv",
        "reports/routing_confusion.csv",
        "reports/spectra.csv",
        "reports/loss_curve.csv",
        "reports/attention.csv",
    ):
        assert (run_dir / rel).exists(), rel
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["nullspace"] is True
    assert summary["config"]["model"]["eps"] == 0.95
    assert summary["config"]["stream"]["n_tasks"] == 2
    assert set(summary["checkpoint_manifests"]) == {"task_1", "task_2"}
    assert "eps = 0.95" in (run_dir / "config.ini").read_text()


def test_run_is_reproducible(run_dir, tmp_path):
    again = tmp_path / "again"
    assert main(["run", "--config", str(run_dir / "config.ini"), "--out", str(again)]) == 0
    assert (again / "summary.json").read_text() == (run_dir / "summary.json").read_text()
    assert (again / "logs/train.log").read_text() == (run_dir / "logs/train.log").read_text()


def test_routeprobe(run_dir, tmp_path, capsys):
    out = tmp_path / "conf.csv"
    assert main(["routeprobe", "--checkpoint", str(run_dir / "checkpoints/task_2"), "--out", str(out)]) == 0
    assert "overall" in capsys.readouterr().out
    assert out.read_text().startswith("true_task,routed_1,routed_2")
    assert main(["routeprobe", "--checkpoint", str(tmp_path)]) == 2
