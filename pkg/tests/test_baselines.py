import numpy as np
import pytest

from conftest import EllipsoidSdf, MovedSdf, random_pose
from skullcarve.baselines import IcpConfig, _loss_fn, gm_loss, gm_loss_grad, icp_sdf
from skullcarve.geometry import dq_compose, dq_from_rt, dq_identity, rigid_error
from skullcarve.primitives import icosphere

RADII = (30.0, 40.0, 35.0)


def test_gm_examples(rng):
    assert gm_loss(0.0, 2.0) == 0.0
    assert gm_loss(2.0, 2.0) == 0.5
    d = rng.normal(size=100) * 4
    assert np.allclose(gm_loss(d, 2.0), gm_loss(-d, 2.0))
    assert gm_loss(1e6, 2.0) > 0.999999
    # five-point stencil: truncation ~h^4, roundoff ~1e-13 at this h
    h = 1e-3
    f = lambda x: gm_loss(x, 2.0)  # noqa: E731
    fd = (f(d - 2 * h) - 8 * f(d - h) + 8 * f(d + h) - f(d + 2 * h)) / (12 * h)
    assert np.max(np.abs(gm_loss_grad(d, 2.0) - fd) / np.maximum(np.abs(fd), 1e-3)) < 1e-8
    with pytest.raises(ValueError):
        gm_loss(1.0, 0.0)


def test_l1_subgradient_zero():
    val, grad = _loss_fn("l1", 2.0)(np.array([0.0, 3.0, -3.0]))
    assert grad[0] == 0.0
    assert np.allclose(grad[1:], [1, -1])
    assert np.allclose(val[1:], 3.0)


def test_config_validation():
    with pytest.raises(ValueError):
        IcpConfig(loss="huber")
    with pytest.raises(ValueError):
        IcpConfig(loss="gm", gm_scale=0.0)
    c = IcpConfig(loss="gm")
    assert IcpConfig.from_dict(c.to_dict()) == c


def test_self_registration():
    ell = EllipsoidSdf(RADII)
    pts = icosphere(3).vertices * np.array(RADII)
    for loss in ("l2", "l1", "gm"):
        r = icp_sdf(ell, pts, dq_identity(), IcpConfig(loss=loss))
        t, a = rigid_error(r.transform, dq_identity())
        assert t < 0.1 and a < 0.1


@pytest.mark.parametrize("loss", ["l2", "l1", "gm"])
def test_rigid_recovery(loss, rng):
    ell = EllipsoidSdf(RADII)
    pts = icosphere(3).vertices * np.array(RADII)
    gt = random_pose(rng, 8, 15)
    init = dq_compose(gt, dq_from_rt([1, 0, 0], np.radians(2.0), [2.0, -1.5, 1.0]))
    r = icp_sdf(MovedSdf(ell, gt), pts, init, IcpConfig(loss=loss))
    t, a = rigid_error(r.transform, gt)
    assert t < 0.5 and a < 0.5
    assert np.isfinite(r.loss) and r.iterations > 0
