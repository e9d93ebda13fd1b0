"""Adam and L-BFGS (two-loop recursion, strong Wolfe line search)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import line_search


class Adam:
    """Plain Adam over a list of arrays, updated in place."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g.astype(p.dtype, copy=False)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    iterations: int
    evaluations: int
    line_search_failed: bool
    converged: bool


def lbfgs(fun_grad, x0, memory: int = 10, c1: float = 1e-4, c2: float = 0.9,
          max_iter: int = 100, gtol: float = 1e-8, ftol: float = 1e-12) -> LbfgsResult:
    """Minimize ``fun_grad(x) -> (f, g)``; returns the best iterate seen."""
    x = np.asarray(x0, dtype=np.float64).copy()
    cache = {}
    nev = [0]

    def fg(z):
        key = z.tobytes()
        if key not in cache:
            nev[0] += 1
            f, g = fun_grad(z)
            cache.clear()
            cache[key] = (float(f), np.asarray(g, dtype=np.float64))
        return cache[key]

    f, g = fg(x)
    best_x, best_f = x.copy(), f
    S, Y = [], []
    failed = converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.linalg.norm(g, np.inf) <= gtol:
            converged = True
            break
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(S), reversed(Y)):
            a = (s @ q) / (y @ s)
            alphas.append(a)
            q -= a * y
        if S:
            q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        for (s, y), a in zip(zip(S, Y), reversed(alphas)):
            b = (y @ q) / (y @ s)
            q += (a - b) * s
        d = -q
        if g @ d >= 0:
            d = -g
            S.clear()
            Y.clear()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            step, *_ = line_search(lambda z: fg(z)[0], lambda z: fg(z)[1], x, d, gfk=g, old_fval=f,
                                   c1=c1, c2=c2, maxiter=20)
        if step is None:
            failed = True
            break
        x_new = x + step * d
        f_new, g_new = fg(x_new)
        s, y = x_new - x, g_new - g
        if y @ s > 1e-16:
            S.append(s)
            Y.append(y)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        df = f - f_new
        x, f, g = x_new, f_new, g_new
        if f < best_f:
            best_x, best_f = x.copy(), f
        if 0 <= df <= ftol * max(1.0, abs(f)):
            converged = True
            break
    return LbfgsResult(best_x, best_f, it, nev[0], failed, converged)
