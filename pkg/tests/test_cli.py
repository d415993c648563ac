import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from sourceid.cli import EXIT_CONFIG, EXIT_OK, main

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

TINY = """
[dataset]
n_patients = 8
size = 16
n_slices = 4
n_val = 1
n_test = 2

[task]
kind = "CSI"
n_per_mixture = 2

[model]
depth = 2
base_width = 2

[pretrain]
epochs_max = 1
iters_per_epoch = 2
val_samples = 2
augment = false

[finetune]
epochs_max = 1
iters_per_epoch = 2
batch_size = 2
augment = false

[eval]
lambdas = [0.1, 0.9]
n_eval = 2
overlap_pairs = 20
"""


def _dir_digest(path: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(path.rglob("*")):
        if f.is_file():
            h.update(f.relative_to(path).as_posix().encode())
            h.update(f.read_bytes())
    return h.hexdigest()


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return p


def _only_run(out: Path) -> Path:
    (run,) = [d for d in out.iterdir() if d.is_dir()]
    return run


def test_generate_phantom_deterministic(tmp_path, tiny_config):
    for name in ("a", "b"):
        assert main(["generate-phantom", "--config", str(tiny_config), "--seed", "4", "--out", str(tmp_path / name)]) == EXIT_OK
    assert _dir_digest(tmp_path / "a") == _dir_digest(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert len(manifest["patients"]) == 8


def test_invalid_lesion_params_exit_2_naming_field(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(TINY.replace("[dataset]", "[dataset]\nlesion_radius = [0.6, 0.8]"))
    assert main(["generate-phantom", "--config", str(cfg), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "radius" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


@pytest.mark.parametrize(
    "old, new, fragment",
    [
        ("[model]", "[model]\nwidth = 3", "model.width"),
        ("size = 16", "size = 18", "divisible"),
        ('kind = "CSI"', 'kind = "XYZ"', "task.kind"),
        ("[eval]", "[eval]\nablation_settings = [[4, 3]]", "N"),
    ],
)
def test_validation_failures_exit_2_before_compute(tmp_path, capsys, old, new, fragment):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(TINY.replace(old, new, 1))
    out = tmp_path / "runs"
    assert main(["pretrain", "--config", str(cfg), "--out", str(out)]) == EXIT_CONFIG
    assert fragment in capsys.readouterr().err
    assert not out.exists()


def test_seed_overrides_all_sections(tmp_path, tiny_config):
    assert main(["overlap-stats", "--config", str(tiny_config), "--seed", "11", "--out", str(tmp_path)]) == EXIT_OK
    cfg = tomllib.loads((_only_run(tmp_path) / "config.toml").read_text())
    assert {cfg[s]["seed"] for s in ("dataset", "model", "pretrain", "finetune", "eval")} == {11}
    assert (_only_run(tmp_path) / "overlap.json").exists()


def test_end_to_end_pipeline_and_compare(tmp_path, tiny_config, capsys):
    c = str(tiny_config)
    assert main(["generate-phantom", "--config", c, "--out", str(tmp_path / "data")]) == EXIT_OK
    base = ["--config", c, "--dataset", str(tmp_path / "data")]
    assert main(["pretrain", *base, "--out", str(tmp_path / "pre")]) == EXIT_OK
    pre = _only_run(tmp_path / "pre")
    assert {"checkpoint.sidckpt", "run_record.csv", "run_record.json", "config.toml"} <= {f.name for f in pre.iterdir()}

    ck = str(pre / "checkpoint.sidckpt")
    assert main(["finetune", *base, "--checkpoint", ck, "--labeled-budget", "3", "--out", str(tmp_path / "ft")]) == EXIT_OK
    assert main(["finetune", *base, "--mixup", "--out", str(tmp_path / "rand")]) == EXIT_OK
    reports = []
    for arm in ("ft", "rand"):
        model = str(_only_run(tmp_path / arm) / "model.sidckpt")
        assert main(["evaluate", *base, "--checkpoint", model, "--out", str(tmp_path / f"ev-{arm}")]) == EXIT_OK
        reports.append(_only_run(tmp_path / f"ev-{arm}") / "eval.json")
    assert main(["compare", str(reports[0]), str(reports[1]), "--out", str(tmp_path / "cmp")]) == EXIT_OK
    cmp = json.loads((tmp_path / "cmp" / "comparison.json").read_text())
    assert set(cmp["classes"]) == {"lesion"}

    assert main(["compare", str(reports[0]), str(reports[0]), "--out", str(tmp_path / "same")]) == EXIT_OK
    same = json.loads((tmp_path / "same" / "comparison.json").read_text())["classes"]["lesion"]
    assert same["p"] == 1.0 and same["degenerate"]


def test_evaluate_needs_checkpoint(tmp_path, tiny_config):
    assert main(["evaluate", "--config", str(tiny_config), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_runtime_failure_exit_1(tmp_path, tiny_config):
    bad = tmp_path / "bad.sidckpt"
    bad.write_bytes(b"garbage")
    assert main(["finetune", "--config", str(tiny_config), "--checkpoint", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_solvability_command(tmp_path, tiny_config):
    assert main(["solvability", "--config", str(tiny_config), "--out", str(tmp_path)]) == EXIT_OK
    run = _only_run(tmp_path)
    table = json.loads((run / "solvability.json").read_text())["table"]
    assert [row["lambda"] for row in table] == [0.1, 0.9]
    assert (run / "solvability_lambda_0.90.png").exists()


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "sourceid", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "generate-phantom" in r.stdout
