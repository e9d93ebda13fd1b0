"""Gradient-based ICP against an SDF with l2, l1 and Geman-McClure losses.

There is no explicit correspondence step: the SDF value at a transformed
reference point is its implicit closest-surface distance.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import DualQuat, dq_normalize
from .optim import lbfgs
from .stabilize import _registration_loss

log = logging.getLogger(__name__)

L1_EPS = 1e-6


def gm_loss(d, c: float):
    """Geman-McClure ``d^2 / (d^2 + c^2)``."""
    if not c > 0:
        raise ValueError("GM scale must be positive")
    d2 = np.square(d)
    return d2 / (d2 + c * c)


def gm_loss_grad(d, c: float):
    if not c > 0:
        raise ValueError("GM scale must be positive")
    d = np.asarray(d, dtype=np.float64)
    den = d * d + c * c
    return 2.0 * d * c * c / (den * den)


def _loss_fn(kind: str, gm_scale: float):
    if kind == "l2":
        return lambda d: (d * d, 2.0 * d)
    if kind == "l1":
        return lambda d: (np.sqrt(d * d + L1_EPS ** 2), d / np.sqrt(d * d + L1_EPS ** 2))
    if kind == "gm":
        return lambda d: (gm_loss(d, gm_scale), gm_loss_grad(d, gm_scale))
    raise ValueError(f"unknown ICP loss {kind!r}")


@dataclass
class IcpConfig:
    loss: str = "l2"
    gm_scale: float = 2.0
    max_iterations: int = 200
    memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    tolerance: float = 1e-12
    length_scale: float = 10.0

    def __post_init__(self):
        if self.loss not in ("l2", "l1", "gm"):
            raise ValueError(f"unknown ICP loss {self.loss!r}")
        if self.loss == "gm" and not self.gm_scale > 0:
            raise ValueError("gm_scale must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "IcpConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IcpResult:
    transform: DualQuat
    loss: float
    iterations: int
    line_search_failed: bool


def icp_sdf(sdf, reference_points, init: DualQuat, config: IcpConfig = IcpConfig(), weights=None) -> IcpResult:
    """L-BFGS on the 8 dual-quaternion parameters; returns the best iterate by loss."""
    pts = np.asarray(getattr(reference_points, "points", reference_points), dtype=np.float64)
    w = np.ones(len(pts)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    fn = _loss_fn(config.loss, config.gm_scale)
    L = config.length_scale
    scale = np.array([1.0] * 4 + [L] * 4)

    def fun_grad(u):
        # raw parameters are projected to a unit dual quaternion inside the loss
        f, g = _registration_loss(sdf, pts, w, u * scale, fn)
        return f, g * scale

    u0 = dq_normalize(init).params() / scale
    res = lbfgs(fun_grad, u0, memory=config.memory, c1=config.c1, c2=config.c2,
                max_iter=config.max_iterations, ftol=config.tolerance)
    if res.line_search_failed and not res.converged:
        log.debug("ICP line search stopped after %d iterations", res.iterations)
    q = dq_normalize(DualQuat.from_params(res.x * scale))
    return IcpResult(q, float(res.fun), res.iterations, res.line_search_failed)
