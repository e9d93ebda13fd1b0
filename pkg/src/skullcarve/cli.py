"""``skullcarve`` command line: build-sdf, fit, stabilize, synth, score, benchmark.

Exit codes: 0 success, 1 unexpected error, 2 missing input file or bad usage,
3 a prior stage's outputs are missing, 4 numerical abort (diagnostics written).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__, _accel
from .geometry import GridLayout, BoundingCube
from .meshio import load_scan, write_obj
from .neural_sdf import FitError, fit, load_neural_sdf, save_neural_sdf
from .pipeline import METHODS, StageConfig, desk_config, shared_layout, stabilize
from .sdf_build import build_sdf, load_grid, save_grid
from .stabilize import CarveError, MaskSpec, coarse_align, load_landmarks, transforms_from_json, transforms_to_json
from .synth import BracketReport, default_spec, generate, load_teeth, score, write_subject

log = logging.getLogger("skullcarve")

EXIT_OK, EXIT_ERROR, EXIT_MISSING, EXIT_STAGE, EXIT_NUMERIC = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


# ------------------------------------------------------------------ manifest

@dataclass
class PipelineManifest:
    scans: list
    scan_ids: list
    reference: str
    mask: str
    landmarks: str | None
    config: str | None
    output: str
    cache: str

    @classmethod
    def load(cls, path, out=None, cache=None, config=None) -> "PipelineManifest":
        if not os.path.isfile(path):
            raise CliError(f"manifest not found: {path}", EXIT_MISSING)
        with open(path) as fh:
            d = json.load(fh)
        base = os.path.dirname(os.path.abspath(path))

        def rel(p):
            return None if p is None else os.path.normpath(os.path.join(base, p))

        scans = [rel(p) for p in d["scans"]]
        ids = list(d.get("scan_ids") or [os.path.splitext(os.path.basename(p))[0] for p in scans])
        m = cls(scans, ids, rel(d["reference"]), rel(d["mask"]), rel(d.get("landmarks")),
                config or rel(d.get("config")), out or rel(d.get("output", "out")),
                cache or rel(d.get("cache", "cache")))
        m.validate()
        return m

    def validate(self) -> None:
        if not self.scans:
            raise CliError("manifest lists no scans", EXIT_MISSING)
        if len(self.scan_ids) != len(self.scans):
            raise CliError("scan_ids and scans differ in length", EXIT_MISSING)
        for p in self.scans + [self.reference, self.mask] + [x for x in (self.landmarks, self.config) if x]:
            if not os.path.isfile(p):
                raise CliError(f"missing file: {p}", EXIT_MISSING)


def load_stage_config(path, seed=None) -> StageConfig:
    if path is None:
        cfg = desk_config()
    else:
        with open(path) as fh:
            cfg = StageConfig.from_dict(json.load(fh))
    if seed is not None:
        cfg.fit.seed = seed
        cfg.carve.seed = seed
    return cfg


# ------------------------------------------------------------------ cache

def _sha(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else json.dumps(p, sort_keys=True).encode())
    return h.hexdigest()[:24]


def _file_sha(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write_json(path, doc) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def _read_index(path, stage):
    if not os.path.isfile(path):
        raise CliError(f"{os.path.basename(path)} not found; run '{stage}' first", EXIT_STAGE)
    with open(path) as fh:
        doc = json.load(fh)
    for entry in doc["entries"]:
        if not os.path.isfile(entry["path"]):
            raise CliError(f"cached file {entry['path']} is missing; rerun '{stage}'", EXIT_STAGE)
    return doc


def _versions() -> dict:
    import scipy
    out = {"skullcarve": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "scipy": scipy.__version__, "backend": _accel.backend()}
    if _accel.USE_NUMBA:
        import numba
        out["numba"] = numba.__version__
    return out


def _metadata(out_dir, command, args, config, timings, extra=None) -> None:
    doc = {"command": command, "argv": sys.argv[1:], "config": config.to_dict() if config else None,
           "versions": _versions(), "timings_s": timings, "seed": getattr(args, "seed", None)}
    if extra:
        doc.update(extra)
    _write_json(os.path.join(out_dir, f"run_{command}.json"), doc)


def _pool_map(fn, items, threads):
    if threads and threads > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


# ------------------------------------------------------------------ stages

def _build_one(job):
    path, sid, res, center, half, key, grid_path = job
    if os.path.isfile(grid_path):
        return sid, key, grid_path, True, None
    try:
        mesh = load_scan(path)
    except (ValueError, OSError) as exc:
        return sid, key, grid_path, False, f"{path}: {exc}"
    layout = GridLayout(res, BoundingCube(tuple(center), half))
    grid = build_sdf(mesh, layout, source=sid)
    tmp = grid_path + ".tmp"
    save_grid(tmp, grid)
    os.replace(tmp, grid_path)
    return sid, key, grid_path, False, float(np.mean(grid.values < 0))


def cmd_build_sdf(m: PipelineManifest, cfg: StageConfig, args) -> int:
    t0 = time.perf_counter()
    scans = []
    for p in m.scans:
        try:
            scans.append(load_scan(p))
        except (ValueError, OSError) as exc:
            raise CliError(f"cannot read scan {p}: {exc}", EXIT_ERROR)
    layout = shared_layout(scans, cfg.grid_resolution, cfg.grid_padding)
    c = layout.cube
    gdir = os.path.join(m.cache, "grids")
    os.makedirs(gdir, exist_ok=True)
    jobs = []
    for p, sid in zip(m.scans, m.scan_ids):
        key = _sha(_file_sha(p).encode(), [cfg.grid_resolution, list(c.center), c.half_extent, 1])
        jobs.append((p, sid, cfg.grid_resolution, list(c.center), c.half_extent, key,
                     os.path.join(gdir, f"{key}.skvg")))
    results = _pool_map(_build_one, jobs, args.threads)
    entries, failed = [], []
    for sid, key, path, hit, info in results:
        if isinstance(info, str):
            failed.append(info)
            continue
        if hit:
            print(f"{sid}: cache hit")
        else:
            print(f"{sid}: built grid, inside fraction {info:.3f}")
        entries.append({"scan_id": sid, "key": key, "path": path, "cache_hit": hit})
    if failed:
        for f in failed:
            print(f"error: {f}", file=sys.stderr)
        return EXIT_ERROR
    index = {"entries": [{k: e[k] for k in ("scan_id", "key", "path")} for e in entries]}
    _write_json(os.path.join(m.output, "grids.json"), index)
    _metadata(m.output, "build-sdf", args, cfg, {"total": time.perf_counter() - t0},
              {"cache_hits": sum(e["cache_hit"] for e in entries)})
    return EXIT_OK


def _fit_one(job):
    grid_path, sid, key, out_path, cfg_dict = job
    if os.path.isfile(out_path):
        return sid, out_path, True, None
    cfg = StageConfig.from_dict(cfg_dict)
    grid = load_grid(grid_path)
    try:
        nsdf, rep = fit(grid, cfg.fit, cfg.dims, scan_id=sid)
    except FitError as exc:
        return sid, out_path, False, {"error": str(exc), "band_mae": exc.band_error}
    tmp = out_path + ".tmp"
    save_neural_sdf(tmp, nsdf)
    os.replace(tmp, out_path)
    return sid, out_path, False, {"band_mae": rep.band_mae, "uniform_mae": rep.uniform_mae}


def cmd_fit(m: PipelineManifest, cfg: StageConfig, args) -> int:
    t0 = time.perf_counter()
    grids = _read_index(os.path.join(m.output, "grids.json"), "build-sdf")
    ndir = os.path.join(m.cache, "nsdf")
    os.makedirs(ndir, exist_ok=True)
    jobs = []
    for e in grids["entries"]:
        key = _sha(e["key"].encode(), cfg.to_dict()["dims"], cfg.to_dict()["fit"])
        jobs.append((e["path"], e["scan_id"], key, os.path.join(ndir, f"{key}.skns"), cfg.to_dict()))
    results = _pool_map(_fit_one, jobs, args.threads)
    entries, reports, bad = [], {}, []
    for sid, path, hit, info in results:
        if info is not None and "error" in info:
            bad.append(info)
            reports[sid] = info
            continue
        print(f"{sid}: " + ("cache hit" if hit else f"band MAE {info['band_mae']:.3f} mm"))
        entries.append({"scan_id": sid, "path": path})
        if info is not None:
            reports[sid] = info
    if bad:
        diag = os.path.join(m.output, "diagnostics_fit.json")
        _write_json(diag, reports)
        print(f"error: {len(bad)} fit(s) exceeded the band error limit; see {diag}", file=sys.stderr)
        return EXIT_NUMERIC
    _write_json(os.path.join(m.output, "sdfs.json"), {"entries": entries})
    _metadata(m.output, "fit", args, cfg, {"total": time.perf_counter() - t0}, {"fit_reports": reports})
    return EXIT_OK


def cmd_stabilize(m: PipelineManifest, cfg: StageConfig, args) -> int:
    t0 = time.perf_counter()
    index = _read_index(os.path.join(m.output, "sdfs.json"), "fit")
    sdfs = [load_neural_sdf(e["path"]) for e in index["entries"]]
    scans = [load_scan(p) for p in m.scans]
    reference = load_scan(m.reference)
    mask = MaskSpec.load(m.mask)
    landmarks = load_landmarks(m.landmarks) if m.landmarks else None
    methods = list(METHODS) if args.method == "all" else [args.method]
    if "mode-pursuit" in methods:
        # carving starts from the mode-pursuit result; compute it once
        methods.remove("mode-pursuit")
        methods.insert(0, "mode-pursuit")
    timings = {}
    mp = None
    coarse = coarse_align(scans, reference, landmarks)
    for method in methods:
        t1 = time.perf_counter()
        try:
            res = stabilize(method, sdfs, scans, reference, mask.weights, cfg, landmarks, coarse=coarse,
                            initial=mp if method in ("carve", "carve-ng") else None)
        except CarveError as exc:
            diag = os.path.join(m.output, f"diagnostics_{method}.json")
            _write_json(diag, {"method": method, "error": str(exc), "iteration": exc.iteration,
                               **exc.diagnostics})
            print(f"error: {exc}; diagnostics in {diag}", file=sys.stderr)
            return EXIT_NUMERIC
        if method == "mode-pursuit":
            mp = res
        timings[method] = time.perf_counter() - t1
        path = os.path.join(m.output, f"transforms_{method}.json")
        os.makedirs(m.output, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(transforms_to_json(res.transforms, m.scan_ids, method, res.residuals))
        if res.hull is not None:
            write_obj(os.path.join(m.output, f"hull_{method}.obj"), res.hull)
        failed = [m.scan_ids[i] for i, f in enumerate(res.flags) if f]
        print(f"{method}: wrote {path}" + (f" (flagged: {', '.join(failed)})" if failed else ""))
    timings["total"] = time.perf_counter() - t0
    _metadata(m.output, f"stabilize_{args.method}", args, cfg, timings)
    return EXIT_OK


def cmd_synth(args) -> int:
    out = args.out
    os.makedirs(out, exist_ok=True)
    subjects = []
    for s in range(args.subjects):
        spec = default_spec(seed=args.seed * 1000 + s, n_expressions=args.expressions)
        name = f"subject_{s:02d}"
        write_subject(generate(spec), os.path.join(out, name))
        subjects.append(name)
    _write_json(os.path.join(out, "benchmark.json"), {"subjects": subjects, "seed": args.seed,
                                                       "expressions": args.expressions})
    print(f"wrote {len(subjects)} subjects to {out}")
    return EXIT_OK


def score_benchmark(bench_dir, methods=None) -> BracketReport:
    path = os.path.join(bench_dir, "benchmark.json")
    if not os.path.isfile(path):
        raise CliError(f"not a benchmark directory: {bench_dir}", EXIT_MISSING)
    with open(path) as fh:
        subjects = json.load(fh)["subjects"]
    report = BracketReport(subjects)
    methods = list(methods or METHODS)
    for method in methods:
        worst = []
        for s in subjects:
            sdir = os.path.join(bench_dir, s)
            tp = os.path.join(sdir, "out", f"transforms_{method}.json")
            if not os.path.isfile(tp):
                raise CliError(f"{tp} not found; run 'stabilize --method {method}' first", EXIT_STAGE)
            with open(tp) as fh:
                q_est, _ = transforms_from_json(fh.read())
            with open(os.path.join(sdir, "ground_truth.json")) as fh:
                q_gt, _ = transforms_from_json(fh.read())
            worst.append(score(q_est, q_gt, load_teeth(os.path.join(sdir, "teeth.json"))).worst)
        report.add(method, worst)
    return report


def cmd_score(args) -> int:
    bench = args.benchmark or args.out
    methods = None if args.method in (None, "all") else [args.method]
    report = score_benchmark(bench, methods)
    with open(os.path.join(bench, "brackets.json"), "w") as fh:
        fh.write(report.to_json())
    table = report.table()
    with open(os.path.join(bench, "brackets.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)
    return EXIT_OK


def run_benchmark(out_dir, subjects: int = 6, expressions: int = 8, seed: int = 0, config_path=None,
                  threads: int = 1, methods=METHODS) -> BracketReport:
    """Synthesize, then build, fit, stabilize with every method, and score."""
    ns = argparse.Namespace(out=out_dir, subjects=subjects, expressions=expressions, seed=seed,
                            threads=threads, method="all", config=config_path, benchmark=out_dir)
    cmd_synth(ns)
    with open(os.path.join(out_dir, "benchmark.json")) as fh:
        names = json.load(fh)["subjects"]
    for name in names:
        m = PipelineManifest.load(os.path.join(out_dir, name, "manifest.json"), config=config_path)
        cfg = load_stage_config(m.config, seed)
        for fn in (cmd_build_sdf, cmd_fit):
            code = fn(m, cfg, ns)
            if code:
                raise CliError(f"{name}: {fn.__name__} failed", code)
        for method in (["all"] if set(methods) == set(METHODS) else methods):
            ns.method = method
            code = cmd_stabilize(m, cfg, ns)
            if code:
                raise CliError(f"{name}: stabilize {method} failed", code)
    ns.method = "all"
    report = score_benchmark(out_dir, methods)
    with open(os.path.join(out_dir, "brackets.json"), "w") as fh:
        fh.write(report.to_json())
    with open(os.path.join(out_dir, "brackets.txt"), "w") as fh:
        fh.write(report.table() + "\n")
    return report


# ------------------------------------------------------------------ entry

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skullcarve", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=True):
        if manifest:
            sp.add_argument("--manifest", required=True, help="pipeline manifest JSON")
        sp.add_argument("--config", help="stage config JSON (default: desk-scale config)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", help="output directory (overrides the manifest)")
        sp.add_argument("--cache", help="cache directory (overrides the manifest)")
        sp.add_argument("--threads", type=int, default=1, help="worker processes for per-scan stages")
        return sp

    common(sub.add_parser("build-sdf", help="signed distance grids for every scan"))
    common(sub.add_parser("fit", help="fit a neural SDF per grid"))
    sp = common(sub.add_parser("stabilize", help="estimate per-scan rigid transforms"))
    sp.add_argument("--method", choices=METHODS + ("all",), default="carve")
    sp = common(sub.add_parser("synth", help="write a synthetic benchmark"), manifest=False)
    sp.add_argument("--subjects", type=int, default=6)
    sp.add_argument("--expressions", type=int, default=8)
    sp = common(sub.add_parser("score", help="bracket report for a stabilized benchmark"), manifest=False)
    sp.add_argument("--benchmark", help="benchmark directory (default: --out)")
    sp.add_argument("--method", choices=METHODS + ("all",), default="all")
    sp = common(sub.add_parser("benchmark", help="synth + full pipeline + score"), manifest=False)
    sp.add_argument("--subjects", type=int, default=6)
    sp.add_argument("--expressions", type=int, default=8)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("synth", "score", "benchmark"):
            if args.command != "score" and not args.out:
                raise CliError("--out is required", EXIT_MISSING)
            if args.seed is None:
                args.seed = 0
            if args.command == "synth":
                return cmd_synth(args)
            if args.command == "score":
                if not (args.benchmark or args.out):
                    raise CliError("--benchmark or --out is required", EXIT_MISSING)
                return cmd_score(args)
            report = run_benchmark(args.out, args.subjects, args.expressions, args.seed, args.config, args.threads)
            print(report.table())
            return EXIT_OK
        m = PipelineManifest.load(args.manifest, args.out, args.cache, args.config)
        cfg = load_stage_config(m.config, args.seed)
        fn = {"build-sdf": cmd_build_sdf, "fit": cmd_fit, "stabilize": cmd_stabilize}[args.command]
        return fn(m, cfg, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: missing file: {exc.filename}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
