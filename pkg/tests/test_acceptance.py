"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The benchmark criteria share one full six-subject run through the command line.
Run with ``pytest tests/test_acceptance.py -v``; the summary lines appear at the end.
"""

import json
import os
import time

import numpy as np
import pytest

import test_baselines
import test_isosurface
import test_neural_sdf
import test_sdf_build
import test_stabilize
from conftest import EllipsoidSdf, MovedSdf, random_pose
from skullcarve import cli
from skullcarve.geometry import BoundingCube, GridLayout, VoxelGrid, dq_identity, rigid_error
from skullcarve.neural_sdf import FitConfig, NeuralSdfDims, fit, save_neural_sdf
from skullcarve.pipeline import METHODS, build_grids, desk_config, fit_sdfs, shared_layout, stabilize
from skullcarve.primitives import icosphere
from skullcarve.sdf_build import PartialGrid, SignField, build_sdf, fast_sweep, load_grid
from skullcarve.stabilize import coarse_align
from skullcarve.synth import BracketReport, generate, rigid_spec
from test_sdf_build import upwind_residual

pytestmark = pytest.mark.acceptance

SEVEN_MB = 7 * 1024 * 1024


# ------------------------------------------------------------ shared runs

@pytest.fixture(scope="module")
def rigid_run():
    t0 = time.perf_counter()
    s = generate(rigid_spec(seed=0, n_expressions=4, max_angle_deg=10.0, max_translation=20.0))
    cfg = desk_config()
    grids = build_grids(s.scans, shared_layout(s.scans, cfg.grid_resolution, cfg.grid_padding))
    sdfs, _ = fit_sdfs(grids, cfg)
    coarse = coarse_align(s.scans, s.reference, s.landmarks)
    results = {}
    mp = stabilize("mode-pursuit", sdfs, s.scans, s.reference, s.mask, cfg, coarse=coarse)
    for m in METHODS:
        init = mp if m in ("carve", "carve-ng") else None
        results[m] = mp if m == "mode-pursuit" else stabilize(m, sdfs, s.scans, s.reference, s.mask, cfg,
                                                              coarse=coarse, initial=init)
    return s, coarse, results, time.perf_counter() - t0


@pytest.fixture(scope="module")
def benchmark_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("benchmark")
    t0 = time.perf_counter()
    code = cli.main(["benchmark", "--out", str(out), "--subjects", "6", "--expressions", "8", "--seed", "0"])
    elapsed = time.perf_counter() - t0
    assert code == 0
    report = BracketReport.from_json((out / "brackets.json").read_text())
    return out, report, elapsed


# ------------------------------------------------------------ criteria

def test_rigid_recovery(rigid_run, criterion):
    s, _, results, elapsed = rigid_run
    worst = {}
    for m in ("mode-pursuit", "icp-l2", "icp-l1", "icp-gm", "carve"):
        errs = [rigid_error(q, g) for q, g in zip(results[m].transforms, s.ground_truth)]
        worst[m] = (max(e[0] for e in errs), max(e[1] for e in errs))
    ok = all(t < 0.5 and a < 0.5 for t, a in worst.values()) and elapsed < 300
    detail = ", ".join(f"{m} {t:.3f} mm/{a:.3f} deg" for m, (t, a) in worst.items()) + f"; {elapsed:.0f} s"
    criterion(1, ok, detail)
    assert ok, detail


def test_carving_superiority(benchmark_run, criterion):
    _, rep, elapsed = benchmark_run
    n = len(rep.subjects)
    carve_1mm = rep.cumulative("carve")[0]
    others = [m for m in rep.methods if m != "carve"]
    dominated = {m: rep.dominates("carve", m) for m in others}
    ok = carve_1mm >= 0.9 * n and all(dominated.values()) and elapsed < 1800
    cum = "; ".join(f"{m} {rep.cumulative(m)}" for m in rep.methods)
    detail = f"carve <=1mm {carve_1mm}/{n}, cumulative [<=1,<=2,<=3]: {cum}; {elapsed:.0f} s"
    print(rep.table())
    criterion(2, ok, detail)
    assert ok, detail


def test_ablation_effect(benchmark_run, criterion):
    _, rep, _ = benchmark_run
    full, ng = rep.cumulative("carve")[0], rep.cumulative("carve-ng")[0]
    ok = full > 0 and ng <= full / 2
    detail = f"<=1mm count carve {full}, carve-ng {ng}"
    criterion(3, ok, detail)
    assert ok, detail


def test_neural_sdf_fidelity(benchmark_run, criterion, tmp_path):
    out, rep, _ = benchmark_run
    maes = []
    for name in rep.subjects:
        meta = json.loads((out / name / "out" / "run_fit.json").read_text())
        maes += [r["band_mae"] for r in meta["fit_reports"].values()]
    # one scan again at the default dims, which also fixes the file size
    entry = json.loads((out / rep.subjects[0] / "out" / "grids.json").read_text())["entries"][1]
    model, frep = fit(load_grid(entry["path"]), FitConfig(), NeuralSdfDims())
    save_neural_sdf(tmp_path / "default.skns", model)
    size = os.path.getsize(tmp_path / "default.skns")
    ok = len(maes) == 48 and max(maes) < 1.0 and frep.band_mae < 1.0 and abs(size - SEVEN_MB) <= 0.2 * SEVEN_MB
    detail = (f"{len(maes)} desk fits, worst band MAE {max(maes):.3f} mm; default dims band MAE "
              f"{frep.band_mae:.3f} mm, file {size / 2 ** 20:.2f} MiB")
    criterion(4, ok, detail)
    assert ok, detail


def test_eikonal_accuracy(criterion):
    lay = GridLayout(64, BoundingCube((0.0, 0.0, 0.0), 40.0))
    h, radius = lay.spacing, 25.0
    exact = np.linalg.norm(lay.points(), axis=-1) - radius
    # analytic seeds and signs
    known = np.abs(exact) <= 2 * h
    seeds = PartialGrid(lay, np.where(known, np.abs(exact), np.inf), known)
    grid = fast_sweep(seeds, SignField(VoxelGrid(lay, np.where(exact < 0, -1.0, 1.0))))
    err_a = np.max(np.abs(grid.values - exact))
    frac_a = np.mean(upwind_residual(grid.values, h)[~known] < 0.05)
    # the full mesh route on a fine icosphere
    mesh = icosphere(5, radius=radius)
    built = build_sdf(mesh, lay)
    err_m = np.max(np.abs(built.values - exact))
    seeded = np.abs(exact) <= 2 * h
    frac_m = np.mean(upwind_residual(built.values, h)[~seeded] < 0.05)
    ok = err_a < 1.5 * h and err_m < 1.5 * h and frac_a >= 0.95 and frac_m >= 0.95
    detail = (f"max error {err_a / h:.3f} h analytic seeds, {err_m / h:.3f} h mesh; residual < 0.05 on "
              f"{100 * frac_a:.1f}% / {100 * frac_m:.1f}% of non-seed voxels")
    criterion(5, ok, detail)
    assert ok, detail


def _run_checks(checks):
    failed = []
    for name, fn in checks:
        try:
            fn()
        except AssertionError as exc:
            failed.append(f"{name} ({exc})" if str(exc) else name)
    return failed


def test_gradient_suite(criterion):
    rng = lambda: np.random.default_rng(1234)  # noqa: E731
    checks = [
        ("triplane_encode", lambda: test_neural_sdf.test_triplane_gradient(rng(), "default")),
        ("sdf_eval d/dx", lambda: test_neural_sdf.test_sdf_eval_grad_x(rng(), "default")),
        ("sdf_eval d/dtheta", lambda: test_neural_sdf.test_sdf_eval_grad_params(rng(), "default")),
        ("grid_sample", lambda: test_sdf_build.test_grid_sample_gradient(rng())),
        ("vertex_grads", lambda: test_isosurface.test_directional_finite_differences(rng())),
        ("gm_loss", lambda: test_baselines.test_gm_examples(rng())),
        ("psi", lambda: test_stabilize.test_psi_grad_finite_differences(rng())),
    ]
    rng7 = np.random.default_rng(7)
    ell = EllipsoidSdf(test_stabilize.RADII)
    gts = [random_pose(rng7, 6, 10) for _ in range(2)]
    case = ([ell] + [MovedSdf(ell, q) for q in gts], gts, BoundingCube((0, 0, 0), 60.0), rng7)
    checks.append(("carving loss d/dq", lambda: test_stabilize.test_end_to_end_gradient(case)))
    failed = _run_checks(checks)
    ok = not failed
    detail = f"{len(checks) - len(failed)}/{len(checks)} checks" + (f"; failed: {', '.join(failed)}" if failed else "")
    criterion(6, ok, detail)
    assert ok, detail


def test_definitional_properties(rigid_run, criterion):
    _, coarse, results, _ = rigid_run

    def transform_zero():
        assert coarse[0] == dq_identity()
        for m, r in results.items():
            assert np.array_equal(r.transforms[0].params(), coarse[0].params()), m

    checks = [
        ("single-scan hull", test_stabilize.test_single_scan_hull_is_scan_isosurface),
        ("hull on max=0", lambda: test_stabilize.test_hull_vertices_on_intersection_surface(
            np.random.default_rng(1234))),
        ("transform 0 fixed", transform_zero),
        ("two-sphere lens", test_stabilize.test_two_sphere_lens),
    ]
    failed = _run_checks(checks)
    ok = not failed
    detail = f"{len(checks) - len(failed)}/{len(checks)} checks" + (f"; failed: {', '.join(failed)}" if failed else "")
    criterion(7, ok, detail)
    assert ok, detail


def test_determinism(tmp_path, criterion):
    outs = []
    for run in ("a", "b"):
        d = tmp_path / run
        assert cli.main(["benchmark", "--out", str(d), "--subjects", "1", "--expressions", "3", "--seed", "5"]) == 0
        files = sorted((d / "subject_00" / "out").glob("transforms_*.json")) + [d / "brackets.json"]
        outs.append({f.name: f.read_bytes() for f in files})
    a, b = outs
    same = [k for k in a if a[k] == b.get(k)]
    ok = len(a) == len(METHODS) + 1 and a.keys() == b.keys() and len(same) == len(a)
    detail = f"{len(same)}/{len(a)} files byte-identical across two runs with separate caches"
    criterion(8, ok, detail)
    assert ok, detail
