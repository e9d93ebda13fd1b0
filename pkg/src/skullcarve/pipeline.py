"""Stage functions shared by the command line and the benchmark runner."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import IcpConfig, icp_sdf
from .geometry import BoundingCube, GridLayout, PointSet, TransformSet, bounding_cube
from .neural_sdf import FitConfig, NeuralSdfDims, fit
from .sdf_build import build_sdf
from .stabilize import (CarveConfig, ModePursuitConfig, StabilizationResult, carving_cube, coarse_align,
                        mode_pursuit_init, residual_stats, skull_carve, stable_hull)

log = logging.getLogger(__name__)

METHODS = ("carve", "carve-ng", "icp-l2", "icp-l1", "icp-gm", "mode-pursuit")


@dataclass
class StageConfig:
    """Everything a stage reads besides its inputs; hashed into cache keys."""
    grid_resolution: int = 64
    grid_padding: float = 10.0
    dims: NeuralSdfDims = field(default_factory=NeuralSdfDims)
    fit: FitConfig = field(default_factory=FitConfig)
    mode_pursuit: ModePursuitConfig = field(default_factory=ModePursuitConfig)
    carve: CarveConfig = field(default_factory=CarveConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)

    def to_dict(self) -> dict:
        return {"grid_resolution": self.grid_resolution, "grid_padding": self.grid_padding,
                "dims": asdict(self.dims), "fit": asdict(self.fit),
                "mode_pursuit": self.mode_pursuit.to_dict(), "carve": self.carve.to_dict(),
                "icp": self.icp.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        return cls(grid_resolution=int(d.get("grid_resolution", 64)),
                   grid_padding=float(d.get("grid_padding", 10.0)),
                   dims=NeuralSdfDims(**d.get("dims", {})),
                   fit=FitConfig(**d.get("fit", {})),
                   mode_pursuit=ModePursuitConfig.from_dict(d.get("mode_pursuit", {})),
                   carve=CarveConfig.from_dict(d.get("carve", {})),
                   icp=IcpConfig.from_dict(d.get("icp", {})))


def desk_config() -> StageConfig:
    """Reduced neural dims and carving iterations sized for a single CPU core."""
    return StageConfig(dims=NeuralSdfDims(64, 8, 32), fit=FitConfig(epochs=30),
                       carve=CarveConfig(bin_schedule=((2.0, 300), (1.0, 300))))


def shared_layout(scans, resolution: int = 64, padding: float = 10.0) -> GridLayout:
    return GridLayout(resolution, bounding_cube(scans, padding))


def build_grids(scans, layout: GridLayout, ids=None):
    ids = ids or [str(i) for i in range(len(scans))]
    return [build_sdf(s, layout, source=sid) for s, sid in zip(scans, ids)]


def fit_sdfs(grids, config: StageConfig, ids=None):
    ids = ids or [str(i) for i in range(len(grids))]
    out = [fit(g, config.fit, config.dims, scan_id=sid) for g, sid in zip(grids, ids)]
    return [m for m, _ in out], [r for _, r in out]


def masked_reference(reference, mask) -> tuple[PointSet, np.ndarray]:
    mask = np.asarray(mask, dtype=np.float64)
    keep = mask > 0
    return PointSet(np.asarray(reference.vertices)[keep]), mask[keep]


def stabilize(method: str, sdfs, scans, reference, mask, config: StageConfig, landmarks=None,
              coarse: TransformSet | None = None, initial: StabilizationResult | None = None) -> StabilizationResult:
    """Run one method from coarse alignment; ``initial`` reuses a mode-pursuit result for carving."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    pts, w = masked_reference(reference, mask)
    if coarse is None:
        coarse = coarse_align(scans, reference, landmarks)
    t0 = time.perf_counter()
    if method.startswith("icp-"):
        cfg = IcpConfig.from_dict({**config.icp.to_dict(), "loss": method[4:]})
        qs, flags = [coarse[0]], [False]
        for i in range(1, len(sdfs)):
            r = icp_sdf(sdfs[i], pts, coarse[i], cfg, weights=w)
            qs.append(r.transform)
            flags.append(r.line_search_failed)
        result = StabilizationResult(TransformSet(tuple(qs)), None, [], flags=flags)
    else:
        mp = initial if initial is not None else mode_pursuit_init(sdfs, pts, coarse, config.mode_pursuit, w)
        if method == "mode-pursuit":
            result = mp
        else:
            cfg = CarveConfig.from_dict({**config.carve.to_dict(), "no_surface_grad": method == "carve-ng"})
            result = skull_carve(sdfs, mp.transforms, cfg, carving_cube(pts, cfg.box_padding))
            result.flags = mp.flags
    if not result.residuals:
        cfg = config.carve
        try:
            hull = stable_hull(result.transforms, sdfs, cfg, carving_cube(pts, cfg.box_padding))
            result.hull = hull
            result.residuals = residual_stats(sdfs, result.transforms, hull, cfg.bin_schedule[-1][0])
        except RuntimeError:
            result.residuals = []
    log.info("%s finished in %.1f s", method, time.perf_counter() - t0)
    return result
