import numpy as np

from skullcarve.optim import Adam, lbfgs


def rosen(x):
    f = 100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
    g = np.array([-400 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]), 200 * (x[1] - x[0] ** 2)])
    return f, g


def test_lbfgs_rosenbrock():
    r = lbfgs(rosen, [-1.2, 1.0], max_iter=200)
    assert np.allclose(r.x, [1, 1], atol=1e-5)
    assert r.fun < 1e-10


def test_lbfgs_returns_best_iterate():
    r = lbfgs(rosen, [-1.2, 1.0], max_iter=3)
    assert r.fun <= rosen(np.array([-1.2, 1.0]))[0]
    assert r.iterations <= 3


def test_adam_quadratic():
    x = np.array([3.0, -2.0])
    opt = Adam([x], lr=0.05)
    for _ in range(2000):
        opt.step([2 * x])
    assert np.max(np.abs(x)) < 1e-2
