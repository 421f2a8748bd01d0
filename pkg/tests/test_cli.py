import json
import subprocess
import sys

import numpy as np
import pytest

from sparseanno import config
from sparseanno.jsonio import file_digest

from cli_helpers import GOLDEN, build_invocations, data_args, outputs, run


@pytest.fixture
def invocations(mini_dir, tmp_path):
    return build_invocations(mini_dir, tmp_path)


def test_golden_stats(mini_dir, tmp_path):
    assert run("stats", *data_args(mini_dir), "--part-map", mini_dir / "part_map.json", "--out", tmp_path) == 0
    assert (tmp_path / "stats.tsv").read_text() == (GOLDEN / "stats.tsv").read_text()


def test_golden_calibrate(mini_dir, tmp_path):
    assert run("calibrate", *data_args(mini_dir), "--detections", mini_dir / "detections.json",
               "--min-precision", "0.5", "--out", tmp_path) == 0
    assert (tmp_path / "thresholds.json").read_text() == (GOLDEN / "thresholds.json").read_text()


@pytest.mark.parametrize("mode", ["baseline", "part-aware"])
def test_golden_assign(mini_dir, tmp_path, mode):
    assert run("assign", *data_args(mini_dir), "--proposals", mini_dir / "proposals.json", "--mode", mode,
               "--part-map", mini_dir / "part_map.json", "--out", tmp_path) == 0
    got = json.loads((tmp_path / "assignments.json").read_text())
    want = json.loads((GOLDEN / f"labels_{mode}.json").read_text())
    assert got["mode"] == mode
    for entry in got["assignments"]:
        assert entry["category_ids"] == want["category_ids"]
        assert entry["labels"] == want["labels"][str(entry["image_id"])]


def test_part_aware_differs_only_by_ignores(mini_dir, tmp_path):
    common = [*data_args(mini_dir), "--proposals", mini_dir / "proposals.json", "--part-map", mini_dir / "part_map.json"]
    assert run("assign", *common, "--out", tmp_path / "b") == 0
    assert run("assign", *common, "--mode", "part-aware", "--out", tmp_path / "p") == 0
    base = json.loads((tmp_path / "b" / "assignments.json").read_text())["assignments"]
    part = json.loads((tmp_path / "p" / "assignments.json").read_text())["assignments"]
    n_changed = 0
    for b, p in zip(base, part):
        lb, lp = np.array(b["labels"]), np.array(p["labels"])
        diff = lb != lp
        assert (lb[diff] == -1).all() and (lp[diff] == 0).all()
        n_changed += int(diff.sum())
    assert n_changed > 0


def test_sparsify_alpha_zero_is_identity(mini_dir, tmp_path):
    assert run("sparsify", *data_args(mini_dir), "--alpha", "0", "--out", tmp_path) == 0
    from sparseanno.dataset import load_dataset

    before = load_dataset(mini_dir / "annotations.json", mini_dir / "verifications.json")
    after = load_dataset(tmp_path / "annotations.json", tmp_path / "verifications.json")
    assert before == after
    assert json.loads((tmp_path / "deletions.json").read_text())["deleted"] == []


def test_stats_empty_map(mini_dir, tmp_path):
    pm = tmp_path / "pm.json"
    pm.write_text('{"part_map": []}')
    assert run("stats", *data_args(mini_dir), "--part-map", pm, "--out", tmp_path / "o") == 0
    assert (tmp_path / "o" / "stats.tsv").read_text().count("\n") == 1


def test_exit_codes(mini_dir, tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert run("stats", "--dataset", missing, "--out", tmp_path) == 1
    assert str(missing) in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert run("stats", "--dataset", bad, "--out", tmp_path) == 1
    with pytest.raises(SystemExit) as e:
        run("sparsify", *data_args(mini_dir), "--alpha", "1.5", "--out", tmp_path)
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        run("assign", *data_args(mini_dir), "--proposals", mini_dir / "proposals.json", "--mode", "x", "--out", tmp_path)
    assert e.value.code == 2
    assert run("assign", *data_args(mini_dir), "--proposals", mini_dir / "proposals.json",
               "--mode", "part-aware", "--out", tmp_path) == 2


def test_seed_env_fallback(mini_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("SPARSEANNO_SEED", "11")
    assert run("sparsify", *data_args(mini_dir), "--alpha", "0.5", "--out", tmp_path) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 11
    monkeypatch.setenv("SPARSEANNO_SEED", "abc")
    assert run("sparsify", *data_args(mini_dir), "--alpha", "0.5", "--out", tmp_path) == 2


def _help(*sub):
    return subprocess.run([sys.executable, "-m", "sparseanno", *sub, "--help"], capture_output=True, text=True,
                          check=True).stdout


def _options(text):
    """Map each long flag to its joined help entry from the options section."""
    body = text.split("options:", 1)[1]
    out, current = {}, None
    for line in body.splitlines():
        stripped = line.strip()
        if line.startswith("  -") and not line.startswith("   "):
            current = next((t.rstrip(",") for t in stripped.split() if t.startswith("--")), None)
            out[current] = stripped
        elif current and stripped:
            out[current] += " " + stripped
    return out


def test_help_lists_defaults():
    top = _help()
    for name in ("stats", "sparsify", "assign", "calibrate", "eval", "simulate", "eval-loss", "replay"):
        assert name in top
    expected = {
        "stats": {"--tau": config.TAU},
        "assign": {"--tau": config.TAU, "--fg-iou": config.FG_IOU, "--gt-iou": config.GT_IOU,
                   "--roi-iou": config.ROI_IOU, "--oracle-iou": config.ORACLE_IOU, "--w-min": config.SOFT_W_MIN},
        "calibrate": {"--min-precision": config.MIN_PRECISION, "--iou": config.CALIBRATION_IOU},
    }
    assert (config.TAU, config.FG_IOU, config.GT_IOU, config.ROI_IOU, config.MIN_PRECISION) == (0.9, 0.5, 0.8, 0.5, 0.5)
    for sub, flags in expected.items():
        entries = _options(_help(sub))
        for flag, default in flags.items():
            assert f"(default: {default})" in entries[flag], (sub, flag, entries[flag])
    assert "--jobs" in _help("assign") and "--seed" in _help("sparsify")


def test_replay_every_subcommand(invocations, tmp_path):
    for name, argv in invocations.items():
        first = tmp_path / f"{name}_1"
        assert run(*argv, "--out", first) == 0, name
        orig = outputs(first)
        second = tmp_path / f"{name}_2"
        assert run("replay", first / "manifest.json", "--out", second) == 0, name
        again = outputs(second)
        assert orig.keys() == again.keys()
        for k in orig:
            assert orig[k] == again[k], (name, k)


def test_replay_detects_changed_input(mini_dir, tmp_path):
    src = tmp_path / "ann.json"
    src.write_bytes((mini_dir / "annotations.json").read_bytes())
    assert run("sparsify", "--dataset", src, "--alpha", "0.3", "--out", tmp_path / "o") == 0
    src.write_text(src.read_text().replace('"mini_1.jpg"', '"other.jpg"'))
    assert run("replay", tmp_path / "o" / "manifest.json") == 1


def test_manifest_contents(mini_dir, tmp_path):
    assert run("calibrate", *data_args(mini_dir), "--detections", mini_dir / "detections.json", "--out", tmp_path) == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["subcommand"] == "calibrate"
    assert m["parameters"]["min_precision"] == 0.5
    assert m["tool_version"]
    assert m["inputs"][str(mini_dir / "detections.json")] == file_digest(mini_dir / "detections.json")
    assert m["outputs"]["thresholds"]["digest"] == file_digest(tmp_path / "thresholds.json")


def test_eval_outputs(mini_dir, tmp_path):
    assert run("eval", *data_args(mini_dir), "--detections", mini_dir / "detections.json", "--metric", "map50",
               "--categories", "dog", "5", "--sweep", "0,0.99", "--out", tmp_path) == 0
    res = json.loads((tmp_path / "eval.json").read_text())
    assert set(res["per_category"]) <= {"5", "7"}
    assert (tmp_path / "sweep.tsv").read_text().splitlines()[-1] == "0.99\t0.0"
