"""CLI tests: exit-code contract, dataset generation determinism,
reconstruction outputs, evaluation report, and render reproducibility."""

import filecmp
import json
import os

import numpy as np
import pytest

from lorf.cli import EXIT_IO, EXIT_OK, EXIT_PIPELINE, EXIT_USAGE, main


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds") / "corridor"
    code = main(["generate", "--kind", "corridor", "--frames", "6",
                 "--size", "40", "--length", "2.0", "--seed", "7",
                 "--out", str(out)])
    assert code == EXIT_OK
    return out


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "cfg.json"
    doc = {
        "schedule": {"bootstrap_frames": 3, "window": 3,
                     "depth_warmup_iters": 2, "fba_iters": 2,
                     "radiance_iters": 2, "shift_fraction": 0.8,
                     "anchor_frames": 4, "depth_lr": 0.02,
                     "rays_per_iter": 128, "field_radius": 3.0},
        "weights": {"photo": 1.0, "smooth": 0.05, "metric": 0.0,
                    "depth": 0.1, "ba": 1.0, "flow": 0.1},
    }
    p.write_text(json.dumps(doc))
    return p


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, dataset_dir, config_path):
    out = tmp_path_factory.mktemp("run") / "r"
    code = main(["reconstruct", "--data", str(dataset_dir), "--out", str(out),
                 "--config", str(config_path), "--seed", "3", "--trace-ba"])
    assert code == EXIT_OK
    return out


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def test_generate_outputs(dataset_dir):
    for name in ("frames", "depth", "gt_trajectory.txt", "intrinsics.json",
                 "manifest.json", "run_manifest.json"):
        assert (dataset_dir / name).exists()
    assert len(os.listdir(dataset_dir / "frames")) == 6


def test_generate_deterministic(tmp_path, dataset_dir):
    out2 = tmp_path / "again"
    assert main(["generate", "--kind", "corridor", "--frames", "6",
                 "--size", "40", "--length", "2.0", "--seed", "7",
                 "--out", str(out2)]) == EXIT_OK
    for sub in ("frames", "depth"):
        names = sorted(os.listdir(dataset_dir / sub))
        match, mismatch, errors = filecmp.cmpfiles(
            dataset_dir / sub, out2 / sub, names, shallow=False)
        assert not mismatch and not errors
    assert (dataset_dir / "gt_trajectory.txt").read_bytes() == \
        (out2 / "gt_trajectory.txt").read_bytes()


def test_generate_zero_frames_usage_error(tmp_path, capsys):
    code = main(["generate", "--frames", "0", "--out", str(tmp_path / "x")])
    assert code == EXIT_USAGE
    assert "frames" in capsys.readouterr().err


def test_generate_bad_kind_usage_error(tmp_path):
    assert main(["generate", "--kind", "nope",
                 "--out", str(tmp_path / "x")]) == EXIT_USAGE


def test_missing_required_flag_usage_exit(capsys):
    assert main(["generate"]) == EXIT_USAGE
    capsys.readouterr()


# ---------------------------------------------------------------------------
# reconstruct
# ---------------------------------------------------------------------------

def test_reconstruct_outputs(run_dir):
    for name in ("est_trajectory.txt", "losses.csv", "run_manifest.json",
                 "run_config.json", "intrinsics.json", "ba_trace.csv"):
        assert (run_dir / name).exists()
    ckpts = [p for p in os.listdir(run_dir) if p.endswith(".lrf")]
    assert len(ckpts) >= 1
    lines = (run_dir / "losses.csv").read_text().strip().splitlines()
    # bootstrap + one window, 2+2+2 iterations each
    assert len(lines) == 1 + 2 * (2 + 2 + 2)
    trace = (run_dir / "ba_trace.csv").read_text().strip().splitlines()
    assert trace[0] == "level,iter,cost,mu,accepted"
    assert len(trace) > 1


def test_reconstruct_manifest(run_dir):
    doc = json.loads((run_dir / "run_manifest.json").read_text())
    assert doc["command"] == "reconstruct" and doc["seed"] == 3
    assert "pipeline" in doc["wall_times"]
    assert "est_trajectory.txt" in doc["outputs"]


def test_reconstruct_missing_dataset(tmp_path):
    assert main(["reconstruct", "--data", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "o")]) == EXIT_IO


def test_reconstruct_pipeline_failure_exit4(dataset_dir, tmp_path, capsys,
                                            monkeypatch):
    import lorf.cli as cli

    def boom(*a, **k):
        e = RuntimeError("synthetic failure")
        e.window_id = 5
        raise e

    monkeypatch.setattr(cli, "run_pipeline", boom)
    code = main(["reconstruct", "--data", str(dataset_dir),
                 "--out", str(tmp_path / "o")])
    assert code == EXIT_PIPELINE
    assert "window 5" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def test_evaluate_identical(dataset_dir, tmp_path, capsys):
    gt = dataset_dir / "gt_trajectory.txt"
    out = tmp_path / "report.csv"
    code = main(["evaluate", "--est", str(gt), "--gt", str(gt),
                 "--out", str(out)])
    assert code == EXIT_OK
    text = capsys.readouterr().out
    assert "ate_m" in text and "0.000000" in text
    rows = dict(line.split(",") for line in
                out.read_text().strip().splitlines()[1:])
    assert float(rows["ate_m"]) == 0.0
    assert float(rows["rpe_r_deg"]) == 0.0
    assert rows["align_mode"] == "se3"


def test_evaluate_missing_file(tmp_path):
    assert main(["evaluate", "--est", str(tmp_path / "a.txt"),
                 "--gt", str(tmp_path / "b.txt")]) == EXIT_IO


def test_evaluate_no_overlap_usage_error(dataset_dir, tmp_path, capsys):
    gt = dataset_dir / "gt_trajectory.txt"
    shifted = tmp_path / "shifted.txt"
    lines = gt.read_text().strip().splitlines()
    shifted.write_text("\n".join(
        " ".join([str(float(l.split()[0]) + 100.0)] + l.split()[1:])
        for l in lines) + "\n")
    code = main(["evaluate", "--est", str(shifted), "--gt", str(gt)])
    assert code == EXIT_USAGE
    assert "not comparable" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------

def test_render_missing_checkpoints(tmp_path):
    assert main(["render", "--run", str(tmp_path / "empty"),
                 "--out", str(tmp_path / "o")]) == EXIT_IO


def test_render_deterministic(run_dir, tmp_path):
    o1, o2 = tmp_path / "a", tmp_path / "b"
    for o in (o1, o2):
        assert main(["render", "--run", str(run_dir), "--out", str(o),
                     "--frame", "0", "--samples", "16", "--depth",
                     "--seed", "5"]) == EXIT_OK
    assert (o1 / "render_000000.png").read_bytes() == \
        (o2 / "render_000000.png").read_bytes()
    assert (o1 / "depth_000000.pfm").read_bytes() == \
        (o2 / "depth_000000.pfm").read_bytes()


def test_render_outside_fields_background(run_dir, tmp_path, caplog):
    import logging
    far_pose = tmp_path / "far.txt"
    far_pose.write_text("0.0 500.0 500.0 500.0 0.0 0.0 0.0 1.0\n")
    with caplog.at_level(logging.WARNING, logger="lorf"):
        code = main(["render", "--run", str(run_dir), "--out",
                     str(tmp_path / "o"), "--poses", str(far_pose),
                     "--frame", "0", "--samples", "8"])
    assert code == EXIT_OK
    assert any("outside" in r.message for r in caplog.records)
