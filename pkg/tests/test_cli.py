import json
import os

import pytest
from click.testing import CliRunner

from ansguard import db
from ansguard.datasets import DATA_ENV, has_dataset
from ansguard.main import cli
from ansguard.models import build, save_model

needs_mnist = pytest.mark.skipif(
    not os.environ.get(DATA_ENV) or not has_dataset("mnist"),
    reason=f"set {DATA_ENV} to a directory holding the MNIST IDX files",
)


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def tiny_checkpoint(tmp_path):
    path = tmp_path / "tiny.ckpt"
    save_model(build("tiny_cnn", classes=2), path)
    return path


def test_energy_report_passes_resnet_gates(runner, tmp_path):
    out = tmp_path / "energy"
    result = runner.invoke(cli, ["energy-report", "--arch", "resnet18", "--attach", "5", "--check", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "[PASS]" in result.output and "[FAIL]" not in result.output
    report = json.loads((out / "energy.json").read_text())
    assert {c["passed"] for c in report["checks"]} == {True}
    assert (out / "scenarios.csv").is_file()
    assert (out / "network.csv").is_file()
    (run,) = db.list_runs(path=tmp_path / "runs.db")
    assert run["command"] == "energy-report" and run["status"] == "ok"


def test_energy_report_gate_failure_exits_6(runner, tmp_path):
    out = tmp_path / "energy"
    result = runner.invoke(
        cli, ["energy-report", "--arch", "vgg19", "--attach", "7", "--hidden", "100000", "--check", "--out", str(out)]
    )
    assert result.exit_code == 6
    assert "[FAIL]" in result.output
    (run,) = db.list_runs(path=tmp_path / "runs.db")
    assert run["status"] == "check-failed"


def test_energy_report_argument_errors(runner, tmp_path):
    descriptor = tmp_path / "net.csv"
    descriptor.write_text("kind,C,H,W,R,S,P,Q,K,stride\n")
    both = runner.invoke(
        cli, ["energy-report", "--arch", "vgg19", "--descriptor", str(descriptor), "--attach", "1",
              "--out", str(tmp_path / "a")]
    )
    assert both.exit_code == 2
    neither = runner.invoke(cli, ["energy-report", "--attach", "1", "--out", str(tmp_path / "b")])
    assert neither.exit_code == 2
    bad_attach = runner.invoke(cli, ["energy-report", "--arch", "vgg19", "--attach", "40", "--out", str(tmp_path / "c")])
    assert bad_attach.exit_code == 1


def test_missing_dataset_exits_3(runner, tmp_path, tiny_checkpoint):
    empty = tmp_path / "data"
    empty.mkdir()
    result = runner.invoke(
        cli, ["attack-eval", "--dataset", "mnist", "--data-dir", str(empty), "--checkpoint", str(tiny_checkpoint),
              "--attack", "fgsm:0.1", "--out", str(tmp_path / "out")]
    )
    assert result.exit_code == 3
    assert "not found" in result.output


def test_unknown_preset_exits_4(runner, tmp_path, tiny_checkpoint):
    result = runner.invoke(
        cli, ["attack-eval", "--dataset", "synthetic", "--checkpoint", str(tiny_checkpoint),
              "--attack", "pgd:zzz", "--out", str(tmp_path / "out")]
    )
    assert result.exit_code == 4


def test_inspect_reports_version_mismatch(runner, tmp_path, tiny_checkpoint):
    ok = runner.invoke(cli, ["inspect", str(tiny_checkpoint)])
    assert ok.exit_code == 0
    assert json.loads(ok.output)["kind"] == "tiny_cnn"

    raw = bytearray(tiny_checkpoint.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    tiny_checkpoint.write_bytes(bytes(raw))
    result = runner.invoke(cli, ["inspect", str(tiny_checkpoint)])
    assert result.exit_code == 5
    assert "format version 99" in result.output


def test_runs_without_ledger(runner, tmp_path):
    result = runner.invoke(cli, ["runs", "--root", str(tmp_path)])
    assert result.exit_code == 0
    assert "No runs recorded." in result.output


def test_synthetic_pipeline(runner, tmp_path):
    def invoke(*args):
        result = runner.invoke(cli, list(args))
        assert result.exit_code == 0, result.output
        return result

    data = ["--dataset", "synthetic", "--limit", "32"]
    invoke("train", *data, "--model", "tiny_cnn", "--epochs", "3", "--train-limit", "128", "--plot",
           "--out", str(tmp_path / "train"))
    checkpoint = str(tmp_path / "train" / "model.ckpt")
    assert (tmp_path / "train" / "train.svg").is_file()

    ans = invoke("ans", *data, "--checkpoint", checkpoint, "--attack", "fgsm:0.1", "--out", str(tmp_path / "ans"))
    assert "Selected layer for" in ans.output
    assert len((tmp_path / "ans" / "ans.csv").read_text().splitlines()) == 3

    invoke("detector", *data, "--checkpoint", checkpoint, "--layer", "1", "--train", "fgsm:0.3",
           "--test", "fgsm:0.3", "--test", "pgd:i,ii", "--train-size", "64", "--val-size", "16", "--hidden", "16",
           "--epochs", "2", "--out", str(tmp_path / "detector"))
    detector = str(tmp_path / "detector" / "detector.ckpt")
    checks = json.loads((tmp_path / "detector" / "detector.json").read_text())["checks"]
    assert {"auc fgsm:0.3", "auc pgd:i", "one-way transferability"} <= {c["name"] for c in checks}

    invoke("quant-sweep", *data, "--checkpoint", checkpoint, "--detector", detector, "--attack", "fgsm:0.3",
           "--bits", "8,1", "--out", str(tmp_path / "quant"))
    sweep = (tmp_path / "quant" / "quant_sweep.csv").read_text().splitlines()
    assert len(sweep) == 1 + 2 * 3

    invoke("blackbox", *data, "--checkpoint", checkpoint, "--substitute", checkpoint, "--detector", detector,
           "--check", "--out", str(tmp_path / "blackbox"))
    header = (tmp_path / "blackbox" / "blackbox.csv").read_text().splitlines()[0]
    assert header == "attack,substitute_accuracy,target_accuracy,white_box_accuracy,detector_auc"

    substitute = tmp_path / "substitute.ckpt"
    save_model(build("tiny_cnn", classes=2, seed=9), substitute)
    invoke("blackbox", *data, "--checkpoint", checkpoint, "--substitute", str(substitute), "--detector", detector,
           "--out", str(tmp_path / "transfer"))
    checks = json.loads((tmp_path / "transfer" / "blackbox.json").read_text())["checks"]
    assert [c["name"] for c in checks] == ["transfer weaker than white-box fgsm:0.3"]

    listing = invoke("runs", "--root", str(tmp_path))
    for command in ("train", "ans", "detector", "quant-sweep", "blackbox"):
        assert f" {command} [ok]" in listing.output
    only_train = invoke("runs", "--root", str(tmp_path), "--command", "train")
    assert " ans [" not in only_train.output


@pytest.mark.slow
@needs_mnist
def test_mnist_lenet_meets_accuracy_gates(runner, tmp_path):
    train = runner.invoke(cli, ["train", "--dataset", "mnist", "--model", "lenet", "--check",
                                "--out", str(tmp_path / "train")])
    assert train.exit_code == 0, train.output
    checkpoint = str(tmp_path / "train" / "model.ckpt")
    attacked = runner.invoke(cli, ["attack-eval", "--dataset", "mnist", "--checkpoint", checkpoint,
                                   "--attack", "fgsm:0.3", "--check", "--out", str(tmp_path / "attack")])
    assert attacked.exit_code == 0, attacked.output
