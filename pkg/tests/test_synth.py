import json
from dataclasses import replace

import numpy as np
import pytest

from skullcarve.geometry import TransformSet, dq_apply, dq_compose, dq_from_rt, dq_identity, dq_inverse
from skullcarve.primitives import icosphere
from skullcarve.stabilize import kabsch
from skullcarve.synth import (ACTION_UNITS, BracketReport, Bump, Expression, SynthHeadSpec, bracket_label,
                              check_coverage, default_spec, directions_to_angles, generate, load_teeth,
                              rigid_spec, score, skull_radius, teeth_errors, thickness, write_subject)


@pytest.fixture(scope="module")
def subject():
    return generate(replace(default_spec(3), subdivisions=4))


def test_zero_deformation_identity_poses_match_neutral():
    spec = SynthHeadSpec(expressions=(Expression("n"), Expression("a"), Expression("b")), noise_sigma=0.0,
                         subdivisions=3)
    s = generate(spec)
    for m in s.scans[1:]:
        assert np.array_equal(m.vertices, s.scans[0].vertices)
        assert np.array_equal(m.triangles, s.scans[0].triangles)


def test_known_pose_recovered_by_horn_fit():
    q = dq_from_rt([0.3, 1.0, -0.2], np.radians(3.0), [10.0, 0.0, 0.0])
    spec = SynthHeadSpec(expressions=(Expression("n"), Expression("moved", pose=tuple(q.params()))),
                         noise_sigma=0.0, subdivisions=4)
    s = generate(spec)
    R, t = kabsch(s.scans[0].vertices, s.scans[1].vertices)
    Rq = q.rotation
    assert np.max(np.abs(R - Rq)) < 1e-3 and np.max(np.abs(t - q.translation)) < 1e-3


def test_default_spec_coverage(subject):
    fr = check_coverage(subject.spec, subject.reference, subject.mask)
    assert len(fr) == 8 and min(fr) >= 0.10
    assert subject.ground_truth[0] == dq_identity()
    assert len(subject.scans) == 8


def test_thickness_non_negative(subject):
    u = subject.reference.vertices / np.linalg.norm(subject.reference.vertices, axis=1, keepdims=True)
    az, el = directions_to_angles(u)
    for e in subject.spec.expressions:
        assert thickness(subject.spec, e, az, el).min() >= 0


def test_invalid_specs():
    with pytest.raises(ValueError):
        SynthHeadSpec(expressions=(Expression("n", pose=tuple(dq_from_rt([0, 0, 1], 0.1, [0, 0, 0]).params())),))
    with pytest.raises(ValueError):
        SynthHeadSpec(expressions=(Expression("n", bumps=(replace(ACTION_UNITS["smile"], amplitude=-1.0),)),))
    with pytest.raises(ValueError):
        SynthHeadSpec()
    # thick tissue everywhere leaves no near-minimal region
    heavy = Bump(0.0, 0.0, 400.0, 400.0, 10.0, power=2.0)
    spec = SynthHeadSpec(expressions=(Expression("n"),), stable_region=(), subdivisions=3)
    spec = replace(spec, expressions=(Expression("n", bumps=(heavy,)),))
    with pytest.raises(ValueError):
        generate(spec)


def test_ground_truth_consistency(subject):
    """Undoing the pose and the tissue layer leaves the neutral skull plus noise."""
    spec = subject.spec
    u = icosphere(spec.subdivisions, 1.0).vertices
    az, el = directions_to_angles(u)
    skull = u * skull_radius(spec, az, el)[:, None]
    for m, q, e in zip(subject.scans, subject.ground_truth, spec.expressions):
        back = dq_apply(dq_inverse(q), m.vertices) - u * thickness(spec, e, az, el)[:, None]
        dev = back - skull
        assert np.sqrt(np.mean(dev ** 2)) < 1.5 * spec.noise_sigma
        assert np.max(np.abs(dev)) < 6 * spec.noise_sigma


def test_rigid_spec_has_no_deformation():
    spec = replace(rigid_spec(1), subdivisions=3, noise_sigma=0.0)
    s = generate(spec)
    for m, q in zip(s.scans, s.ground_truth):
        assert np.allclose(dq_apply(dq_inverse(q), m.vertices), s.reference.vertices, atol=1e-9)
    assert not any(e.teeth_exposed for e in spec.expressions)


def test_reproducible(subject):
    again = generate(subject.spec)
    assert all(np.array_equal(a.vertices, b.vertices) for a, b in zip(subject.scans, again.scans))
    assert all(a == b for a, b in zip(subject.ground_truth, again.ground_truth))


def test_score_examples(subject, rng):
    gt = subject.ground_truth
    teeth = subject.teeth_points
    s = score(gt, gt, teeth)
    assert s.worst == 0.0 and s.bracket == "<=1mm"
    shifted = gt.replace(3, dq_compose(dq_from_rt([1, 0, 0], 0.0, [0.0, 2.5, 0.0]), gt[3]))
    s = score(shifted, gt, teeth)
    assert np.isclose(s.worst, 2.5) and s.bracket == "<=3mm"
    # rotation about the teeth centroid
    c = teeth.points.mean(axis=0)
    alpha, axis = np.radians(2.0), np.array([0.0, 1.0, 0.0])
    rot = dq_compose(dq_from_rt(axis, 0.0, c), dq_compose(dq_from_rt(axis, alpha, [0, 0, 0]),
                                                         dq_from_rt(axis, 0.0, -c)))
    est = gt.replace(2, dq_compose(gt[2], rot))
    d = teeth.points - c
    radius = np.max(np.linalg.norm(d - np.outer(d @ axis, axis), axis=1))
    s = score(est, gt, teeth)
    assert np.isclose(s.errors[2], radius * 2 * np.sin(alpha / 2), rtol=1e-9)
    with pytest.raises(ValueError):
        teeth_errors(TransformSet.identity(2), gt, teeth)


def test_bracket_labels():
    assert bracket_label(1.0) == "<=1mm"
    assert bracket_label(1.01) == "<=2mm"
    assert bracket_label(3.0) == "<=3mm"
    assert bracket_label(3.5) == ">3mm"


def test_bracket_report():
    rep = BracketReport(["s0", "s1", "s2", "s3"])
    rep.add("carve", [0.5, 0.7, 1.5, 0.2])
    rep.add("icp", [0.5, 2.5, 4.0, 9.0])
    rep.add("tie", [0.5, 0.7, 1.5, 0.2])
    assert rep.cumulative("carve") == [3, 4, 4]
    assert rep.counts("icp") == {"<=1mm": 1, "<=2mm": 1, "<=3mm": 2, ">3mm": 2}
    for m in rep.methods:
        c = rep.cumulative(m)
        assert c == sorted(c)
    assert rep.dominates("carve", "icp") and not rep.dominates("icp", "carve")
    assert not rep.dominates("carve", "tie")
    back = BracketReport.from_json(rep.to_json())
    assert back.methods == rep.methods and back.to_json() == rep.to_json()
    assert "carve" in rep.table() and "75.0%" in rep.table()
    with pytest.raises(ValueError):
        rep.add("bad", [1.0])


def test_identical_estimate_scores_all_in_first_bracket(subject):
    rep = BracketReport(["a"])
    rep.add("gt", [score(subject.ground_truth, subject.ground_truth, subject.teeth_points).worst])
    assert rep.counts("gt")["<=1mm"] == 1


def test_write_subject(tmp_path, subject):
    man = write_subject(subject, tmp_path / "subj")
    assert len(man["scans"]) == 8
    for name in man["scans"] + ["reference.obj", "mask.txt", "landmarks.json", "ground_truth.json"]:
        assert (tmp_path / "subj" / name).exists()
    assert np.allclose(load_teeth(tmp_path / "subj" / "teeth.json").points, subject.teeth_points.points)
    spec = json.loads((tmp_path / "subj" / "spec.json").read_text())
    assert SynthHeadSpec.from_dict(spec) == subject.spec
