import json
import os

import numpy as np
import pytest

from skullcarve import cli, pipeline
from skullcarve.geometry import TransformSet, dq_from_rt, dq_identity
from skullcarve.meshio import write_obj
from skullcarve.primitives import icosphere
from skullcarve.stabilize import CarveError, transforms_from_json, transforms_to_json

TINY = {
    "grid_resolution": 24,
    "dims": {"resolution": 16, "channels": 8, "hidden": 32},
    "fit": {"epochs": 2, "band_samples": 4000, "uniform_samples": 1000, "holdout_samples": 1000,
            "max_band_error": 50.0},
    "mode_pursuit": {"bin_schedule": [[8, 10], [4, 10], [2, 10]]},
    "carve": {"grid_points_per_axis": 20, "bin_schedule": [[2, 5], [1, 5]]},
    "icp": {"max_iterations": 10},
}


@pytest.fixture
def project(tmp_path):
    base = icosphere(3)
    base = type(base)(base.vertices * np.array([30.0, 40.0, 35.0]), base.triangles)
    q = dq_from_rt([0, 1, 0], np.radians(3.0), [2.0, 1.0, 0.0])
    write_obj(tmp_path / "neutral.obj", base)
    write_obj(tmp_path / "moved.obj", base.transformed(q))
    write_obj(tmp_path / "reference.obj", base)
    np.savetxt(tmp_path / "mask.txt", np.ones(len(base.vertices)))
    (tmp_path / "config.json").write_text(json.dumps(TINY))
    man = {"scans": ["neutral.obj", "moved.obj"], "scan_ids": ["neutral", "moved"],
           "reference": "reference.obj", "mask": "mask.txt", "config": "config.json",
           "output": "out", "cache": "cache"}
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    return tmp_path


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_build_sdf_and_cache_hit(project, capsys):
    assert run("build-sdf", "--manifest", project / "manifest.json") == 0
    out = capsys.readouterr().out
    assert "inside fraction" in out
    assert len(os.listdir(project / "cache" / "grids")) == 2
    assert run("build-sdf", "--manifest", project / "manifest.json") == 0
    assert capsys.readouterr().out.count("cache hit") == 2
    meta = json.loads((project / "out" / "run_build-sdf.json").read_text())
    assert meta["cache_hits"] == 2 and "versions" in meta and meta["config"]["grid_resolution"] == 24


def test_missing_file_exit_code(project, capsys):
    man = json.loads((project / "manifest.json").read_text())
    man["scans"].append("nowhere.obj")
    man["scan_ids"].append("nowhere")
    (project / "bad.json").write_text(json.dumps(man))
    assert run("build-sdf", "--manifest", project / "bad.json") == 2
    assert "nowhere.obj" in capsys.readouterr().err
    assert run("build-sdf", "--manifest", project / "absent.json") == 2


def test_missing_stage_exit_code(project, capsys):
    assert run("fit", "--manifest", project / "manifest.json") == 3
    assert "build-sdf" in capsys.readouterr().err
    assert run("stabilize", "--manifest", project / "manifest.json") == 3


def test_pipeline_all_methods(project):
    m = project / "manifest.json"
    assert run("build-sdf", "--manifest", m) == 0
    assert run("fit", "--manifest", m) == 0
    assert run("stabilize", "--manifest", m, "--method", "all") == 0
    for method in cli.METHODS:
        doc = json.loads((project / "out" / f"transforms_{method}.json").read_text())
        assert doc["method"] == method and len(doc["scans"]) == 2
        assert doc["scans"][0]["dual_quaternion"] == [1.0, 0, 0, 0, 0, 0, 0, 0]
        assert (project / "out" / f"hull_{method}.obj").exists()
    meta = json.loads((project / "out" / "run_stabilize_all.json").read_text())
    assert set(cli.METHODS) <= set(meta["timings_s"])


def test_fit_failure_exit_code(project):
    cfg = json.loads(json.dumps(TINY))
    cfg["fit"]["max_band_error"] = 1e-6
    (project / "strict.json").write_text(json.dumps(cfg))
    m = project / "manifest.json"
    assert run("build-sdf", "--manifest", m) == 0
    assert run("fit", "--manifest", m, "--config", project / "strict.json") == 4
    assert (project / "out" / "diagnostics_fit.json").exists()


def test_carve_abort_exit_code(project, monkeypatch, capsys):
    m = project / "manifest.json"
    assert run("build-sdf", "--manifest", m) == 0
    assert run("fit", "--manifest", m) == 0

    def boom(*a, **k):
        raise CarveError("non-finite loss at iteration 3", 3, {"transforms": []})

    monkeypatch.setattr(pipeline, "skull_carve", boom)
    assert run("stabilize", "--manifest", m, "--method", "carve") == 4
    diag = json.loads((project / "out" / "diagnostics_carve.json").read_text())
    assert diag["iteration"] == 3
    assert "diagnostics" in capsys.readouterr().err


def test_score_identical_estimates(tmp_path, capsys):
    Q = TransformSet((dq_identity(), dq_from_rt([0, 0, 1], 0.1, [1, 2, 3])))
    for s in ("subject_00", "subject_01"):
        d = tmp_path / s
        (d / "out").mkdir(parents=True)
        (d / "ground_truth.json").write_text(transforms_to_json(Q, ["a", "b"], "ground-truth"))
        (d / "out" / "transforms_icp-l2.json").write_text(transforms_to_json(Q, ["a", "b"], "icp-l2"))
        (d / "teeth.json").write_text(json.dumps({"points": [[0, -20, 60], [10, -20, 55]]}))
    (tmp_path / "benchmark.json").write_text(json.dumps({"subjects": ["subject_00", "subject_01"]}))
    assert run("score", "--benchmark", tmp_path, "--method", "icp-l2") == 0
    rep = json.loads((tmp_path / "brackets.json").read_text())
    assert rep["methods"]["icp-l2"]["counts"]["<=1mm"] == 2
    assert "100.0%" in capsys.readouterr().out
    assert run("score", "--benchmark", tmp_path, "--method", "carve") == 3


def test_synth_command(tmp_path):
    assert run("synth", "--out", tmp_path / "b", "--subjects", 1, "--expressions", 2, "--seed", 4) == 0
    bench = json.loads((tmp_path / "b" / "benchmark.json").read_text())
    assert bench["subjects"] == ["subject_00"]
    man = cli.PipelineManifest.load(tmp_path / "b" / "subject_00" / "manifest.json")
    assert len(man.scans) == 2 and os.path.isfile(man.landmarks)
    gt, ids = transforms_from_json((tmp_path / "b" / "subject_00" / "ground_truth.json").read_text())
    assert len(gt) == 2 and gt[0] == dq_identity()


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit):
        run("stabilize")
    assert run("synth") == 2
