import io
import json
import subprocess
import sys

import pytest

from robustcnn.cli import EXIT_CONFIG, EXIT_RUNTIME, run
from robustcnn.data import save_dataset, synthetic_dataset
from robustcnn.evaluate import RobustnessReport
from robustcnn.models import PRESETS, format_config, get_preset, load_checkpoint, parse_config

from test_models import tiny_cifar_spec


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(format_config(tiny_cifar_spec()))
    save_dataset(root / "data", synthetic_dataset(16, 3, 32, seed=0))
    return root


def test_flops_text_and_tsv():
    code, out, _ = call("flops", "--preset", "resnet50")
    assert code == 0 and "(4.089 G)" in out
    code, out, _ = call("flops", "--preset", "resnet50", "--format", "tsv")
    rows = [line.split("\t") for line in out.splitlines()]
    assert code == 0 and len({len(r) for r in rows}) == 1


def test_flops_resolution_override():
    _, base, _ = call("flops", "--preset", "robust-dw", "--format", "tsv")
    code, small, _ = call("flops", "--preset", "robust-dw", "--resolution", "256", "--format", "tsv")
    assert code == 0 and small != base


def test_tune_uses_preset_budget():
    code, out, _ = call("tune", "--preset", "robust-up-inverted-dw", "--format", "tsv")
    assert code == 0
    depth = int(out.splitlines()[0].split("\t")[1])
    assert depth == get_preset("robust-up-inverted-dw").spec.stage_depths[2]


def test_tune_infeasible_budget_is_runtime_error():
    code, _, err = call("tune", "--preset", "robust-dw", "--budget", "1e6")
    assert code == EXIT_RUNTIME and "error" in err


def test_presets_round_trip():
    code, out, _ = call("presets")
    assert code == 0
    blocks = out.strip().split("\n\n")
    assert len(blocks) == len(PRESETS)
    for block, preset in zip(blocks, PRESETS.values()):
        assert block.startswith(f"# {preset.name}:")
        assert parse_config(block) == preset.spec


@pytest.mark.parametrize(
    "argv",
    [
        ("eval", "--checkpoint", "none", "--dataset", "empty/"),
        ("flops",),
        ("flops", "--preset", "no-such-model"),
        ("flops", "--config", "missing.cfg"),
        ("bogus-command",),
        ("tune", "--preset", "resnet50"),
    ],
)
def test_configuration_errors_exit_2(argv):
    assert call(*argv)[0] == EXIT_CONFIG


def test_bad_config_file_exits_2(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(format_config(tiny_cifar_spec()).replace("kernel = 11", "kernel = 4"))
    code, _, err = call("flops", "--config", cfg)
    assert code == EXIT_CONFIG and "config error" in err


def test_train_eval_corrupt_gen_end_to_end(workspace):
    ckpt, log = workspace / "m.ckpt", workspace / "log.tsv"
    code, out, err = call(
        "train", "--config", workspace / "tiny.cfg", "--dataset", workspace / "data", "--out", ckpt,
        "--log", log, "--epochs", 2, "--batch-size", 8, "--warmup-epochs", 0,
    )
    assert code == 0, err
    assert "deviation:" in out
    assert len(log.read_text().splitlines()) == 2
    assert load_checkpoint(ckpt).spec == tiny_cifar_spec()

    report = workspace / "r.json"
    code, out, err = call(
        "eval", "--checkpoint", ckpt, "--dataset", workspace / "data", "--corruptions", "contrast,brightness",
        "--severities", "1,3", "--out", report, "--threads", 2,
    )
    assert code == 0, err
    saved = RobustnessReport.load(report)
    assert set(saved.errors) == {("contrast", 1), ("contrast", 3), ("brightness", 1), ("brightness", 3)}
    assert json.loads(report.read_text())["mce"] == saved.mce
    code, out, _ = call("eval", "--checkpoint", ckpt, "--dataset", workspace / "data", "--corruptions", "contrast",
                        "--severities", "1,3", "--normalize-by", report)
    assert code == 0 and "mCE (normalized): 100.00" in out

    code, out, _ = call("corrupt-gen", "--dataset", workspace / "data", "--corruptions", "pixelate",
                        "--severities", "2", "--out", workspace / "c")
    assert code == 0 and (workspace / "c" / "pixelate" / "2" / "manifest.tsv").is_file()

    code, out, err = call(
        "distill", "--config", workspace / "tiny.cfg", "--dataset", workspace / "data", "--out", workspace / "s.ckpt",
        "--teacher", ckpt, "--epochs", 1, "--batch-size", 8, "--warmup-epochs", 0, "--temperature", 2,
    )
    assert code == 0, err
    assert "temperature=2" in out


def test_train_argument_errors(workspace):
    base = ("train", "--config", workspace / "tiny.cfg", "--dataset", workspace / "data")
    assert call(*base)[0] == EXIT_CONFIG  # no --out
    assert call(*base, "--out", workspace / "x.ckpt", "--erase-prob", 2)[0] == EXIT_CONFIG
    assert call("eval", "--checkpoint", workspace / "tiny.cfg", "--dataset", workspace / "data")[0] == EXIT_CONFIG
    assert call("eval", "--dataset", workspace / "data", "--checkpoint", "x", "--severities", "7")[0] == EXIT_CONFIG


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "robustcnn", "presets"], capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0 and "# resnet50:" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "robustcnn", "eval", "--checkpoint", "none", "--dataset", "empty/"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 2
