import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from dybnn.cli import apply_override, load_run_document, main
from dybnn.errors import InvalidConfig

from test_datasets import fake_mnist

FAST = ["--set", "model.stem.out_channels=4",
        "--set", "model.blocks=[{in_channels: 4, out_channels: 8, stride: 2}]",
        "--epochs", "1", "--set", "train.batch_size=4"]


@pytest.fixture
def mnist_dir(tmp_path):
    root = tmp_path / "mnist"
    root.mkdir()
    fake_mnist(root, n_train=12, n_test=6)
    return root


def test_count_ops_text_and_structured(capsys):
    assert main(["count-ops", "mobilenet-reactnet-dynamic"]) == 0
    assert "OPs = 0.99" in capsys.readouterr().out
    assert main(["count-ops", "mobilenet-reactnet-static", "--format", "structured"]) == 0
    total = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert abs(total["ops"] / 0.97e8 - 1) < 0.05
    assert main(["count-ops", "empty", "--format", "structured"]) == 0
    total = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert (total["bops"], total["flops"], total["ops"]) == (0, 0, 0.0)


def test_compare_ops(capsys):
    assert main(["compare-ops", "mobilenet-reactnet-static", "mobilenet-reactnet-dynamic"]) == 0
    assert "change: +2.465%" in capsys.readouterr().out


def test_invalid_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("input_shape: [1, 8, 8]\nblocks: [{in_channels: 3, out_channels: 3}]\n")
    assert main(["count-ops", str(bad)]) == 2
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1 and "blocks[0].in_channels" in err


def test_override_parsing():
    doc = load_run_document("mnist-dynamic")
    apply_override(doc, "train.epochs=3")
    apply_override(doc, "model.blocks.1.stride=1")
    apply_override(doc, "data.train_limit=10")
    assert doc["train"]["epochs"] == 3
    assert doc["model"]["blocks"][1]["stride"] == 1
    with pytest.raises(InvalidConfig):
        apply_override(doc, "optimizer.lr=1")
    with pytest.raises(InvalidConfig):
        apply_override(doc, "model.blocks.9.stride=1")
    with pytest.raises(InvalidConfig):
        apply_override(doc, "no-equals-sign")


def test_unknown_key_rejected(tmp_path, mnist_dir):
    out = tmp_path / "run"
    assert main(["train", "--config", "mnist-dynamic", "--out", str(out), "--data", str(mnist_dir),
                 "--set", "train.momentum=0.9"]) == 2
    assert main(["train", "--config", "mnist-dynamic", "--out", str(out), "--data", str(mnist_dir),
                 "--set", "model.blocks.0.colour=1"]) == 2


def test_missing_dataset_exit_3(tmp_path, capsys):
    code = main(["train", "--config", "mnist-dynamic", "--out", str(tmp_path / "run"),
                 "--data", str(tmp_path / "missing")])
    assert code == 3
    assert capsys.readouterr().err.startswith("error:")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_4(tmp_path, mnist_dir):
    code = main(["train", "--config", "mnist-dynamic", "--out", str(tmp_path / "run"), "--data", str(mnist_dir),
                 *FAST, "--set", "train.initial_lr=.inf"])
    assert code == 4


def test_train_two_step_replay_and_eval(tmp_path, mnist_dir, capsys):
    out = tmp_path / "run"
    args = ["train", "--config", "mnist-dynamic", "--out", str(out), "--data", str(mnist_dir),
            "--seed", "7", "--protocol", "two-step", *FAST]
    assert main(args) == 0
    assert (out / "step1" / "model.dybnn").exists() and (out / "step2" / "model.dybnn").exists()
    resolved = yaml.safe_load((out / "resolved.yaml").read_text())
    assert resolved["train"]["seed"] == 7 and resolved["model"]["seed"] == 7
    metrics = (out / "metrics.log").read_text()
    last_test = [line for line in metrics.splitlines() if "split=test" in line][-1]

    replay = tmp_path / "replay"
    assert main(["train", "--config", str(out / "resolved.yaml"), "--out", str(replay)]) == 0
    assert (replay / "metrics.log").read_text() == metrics

    capsys.readouterr()
    assert main(["eval", str(out / "step2" / "model.dybnn"), "--data", str(mnist_dir)]) == 0
    printed = capsys.readouterr().out
    top1 = float(last_test.split("top1=")[1])
    assert f"top1={top1:.4f}" in printed
    assert main(["eval", str(out / "step2" / "model.dybnn"), "--data", str(mnist_dir), "--limit", "2"]) == 0
    assert "samples=2" in capsys.readouterr().out


def test_eval_shape_mismatch_exit_2(tmp_path, mnist_dir):
    out = tmp_path / "run"
    assert main(["train", "--config", "mnist-dynamic", "--out", str(out), "--data", str(mnist_dir),
                 "--protocol", "one-step", *FAST]) == 0
    assert main(["eval", str(out / "model.dybnn"), "--dataset", "cifar10", "--data", str(mnist_dir)]) in (2, 3)
    ckpt = out / "model.dybnn"
    cifar_like = tmp_path / "cifar"
    cifar_like.mkdir()
    rec = np.zeros((2, 3073), dtype=np.uint8)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        (cifar_like / name).write_bytes(rec.tobytes())
    assert main(["eval", str(ckpt), "--dataset", "cifar10", "--data", str(cifar_like)]) == 2


def test_inspect_and_export(tmp_path, mnist_dir, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", "mnist-static", "--out", str(out), "--data", str(mnist_dir),
                 "--protocol", "one-step", *FAST]) == 0
    capsys.readouterr()
    assert main(["inspect", str(out / "model.dybnn")]) == 0
    listing = capsys.readouterr().out
    assert listing.splitlines()[0].startswith("config") and "end" in listing
    npz = tmp_path / "w.npz"
    assert main(["export", str(out / "model.dybnn"), str(npz)]) == 0
    arrays = np.load(npz)
    assert arrays["blocks.0.conv1.weight.packed"].dtype == np.uint64
    assert tuple(arrays["blocks.0.conv1.weight.shape"]) == (4, 4, 3, 3)
    assert main(["inspect", str(tmp_path / "missing.dybnn")]) == 2


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dybnn.cli", "count-ops", "empty"], capture_output=True, text=True)
    assert proc.returncode == 0 and "total" in proc.stdout
