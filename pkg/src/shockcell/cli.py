"""Command-line surface: homogenize | optimize | sweep | coverage | select | verify.

Exit codes: 0 success, 1 error, 2 partial (a run that produced usable but
incomplete output, e.g. a curve that stopped mid-schedule or a sweep with
failed pairs).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import family as family_mod
from .config import ConfigError, RunConfig, load_config
from .contact import ContactError
from .fem import HomogState, InadmissibleState, effective_stress
from .mesher import MeshError, inflate
from .shapeopt import (ObjectiveSpec, OptResult, _freeze_contact, dense_verify,
                       extend_range)
from .solver import (CurveSample, SolveSettings, SolverError, StressStrainCurve,
                     _contact_setup, _grad_tol, _incremental)
from .topology import ShapeParams, bundled_names, bundled_topology, default_params

log = logging.getLogger(__name__)

_RUN_ERRORS = (SolverError, MeshError, InadmissibleState, ContactError, ValueError)


def _config_hash(cfg: RunConfig, extra: dict | None = None) -> str:
    doc = {"material": [cfg.material.lam, cfg.material.mu],
           "resolution": cfg.resolution, "dhat": cfg.dhat, "kappa": cfg.kappa,
           "tol_grad": cfg.tol_grad, "tol_constraint": cfg.tol_constraint,
           "penalty_w0": cfg.penalty_w0, "max_newton": cfg.max_newton,
           "shear_weight": cfg.shear_weight,
           "shear_threshold": cfg.shear_threshold,
           "n_samples": cfg.n_samples, "eps_stop": cfg.eps_stop,
           "max_iter": cfg.max_iter}
    doc.update(extra or {})
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _load_params(topology, params_file) -> np.ndarray:
    if params_file is None:
        return default_params(topology).to_vector()
    doc = json.loads(Path(params_file).read_text())
    if isinstance(doc, dict) and "q" in doc:
        doc = doc["q"]
    return np.asarray(doc, float)


def cmd_homogenize(cfg: RunConfig, args) -> int:
    topology = bundled_topology(args.topology)
    q = _load_params(topology, args.params)
    mesh = inflate(topology, ShapeParams.from_vector(q, topology.n_orbits),
                   cfg.resolution)
    eps_max = args.eps_max if args.eps_max is not None else cfg.eps_max
    step = args.step
    schedule = np.round(np.arange(step, eps_max + 0.5 * step, step), 10)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    settings = cfg.settings()
    if cfg.trace:
        settings = replace(settings, trace_path=str(out / "homogenize_trace.jsonl"))
    tiling, kappa = _contact_setup(mesh, cfg.material, settings)
    tol = _grad_tol(mesh, cfg.material, settings)

    curve = StressStrainCurve()
    state = HomogState.rest(mesh, cfg.material)
    w0 = settings.penalty_w0
    partial = False
    for eps in schedule:
        try:
            state, iters, w0_out = _incremental(state, float(eps), tiling,
                                                kappa, tol, settings, w0)
        except (SolverError, InadmissibleState, ContactError) as err:
            log.error("schedule stopped at eps=%g: %s", eps, err)
            partial = True
            break
        if settings.persist_w0:
            w0 = w0_out
        curve.append(CurveSample(float(eps), effective_stress(state),
                                 state.G00, state.G01, state, iters))
    csv_path = out / f"curve_{args.topology}.csv"
    curve.to_csv(csv_path)
    print(f"{'partial ' if partial else ''}curve with {len(curve)} samples "
          f"-> {csv_path}")
    return 2 if partial else 0


def _bundle_dir(cfg: RunConfig, topology: str, target: float) -> Path:
    return Path(cfg.out_dir) / f"opt_{topology}_{target:g}"


def cmd_optimize(cfg: RunConfig, args) -> int:
    topology = bundled_topology(args.topology)
    target = float(args.target)
    if target <= 0:
        raise ConfigError("target stress must be positive")
    bundle = _bundle_dir(cfg, args.topology, target)
    chash = _config_hash(cfg, {"topology": args.topology, "target": target})
    result_path = bundle / "result.json"
    if result_path.exists():
        doc = json.loads(result_path.read_text())
        if doc.get("config_hash") == chash and doc.get("accepted_eps"):
            print(f"bundle up to date (config {chash}); accepted eps_max "
                  f"{doc['accepted_eps']}, no recompute")
            return 0

    bundle.mkdir(parents=True, exist_ok=True)
    q0 = _load_params(topology, args.params)
    settings = cfg.settings()
    if cfg.trace:
        settings = replace(settings, trace_path=str(bundle / "trace.jsonl"))
    spec = ObjectiveSpec.for_range(target, cfg.eps_max, cfg.n_samples,
                                   shear_weight=cfg.shear_weight,
                                   shear_threshold=cfg.shear_threshold)
    results = extend_range(topology, q0, spec, material=cfg.material,
                           resolution=cfg.resolution, settings=settings,
                           eps_start=cfg.eps_max, eps_stop=cfg.eps_stop,
                           n_samples=cfg.n_samples, max_iter=cfg.max_iter)
    accepted = [r for r in results if r.accepted]
    doc = {"config_hash": chash, "topology": args.topology, "target": target,
           "stages": [r.to_dict() for r in results],
           "accepted_eps": accepted[-1].eps_max if accepted else None,
           "q": list(map(float, (accepted[-1] if accepted else results[-1]).q))}
    result_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if accepted:
        best = accepted[-1]
        stage = ObjectiveSpec.for_range(target, best.eps_max, cfg.n_samples)
        _, curve = dense_verify(topology, best.q, stage, material=cfg.material,
                                resolution=cfg.resolution, settings=settings)
        curve.to_csv(bundle / "curve.csv")
        print(f"accepted eps_max {best.eps_max:g} "
              f"(dense dev {best.dense_max_dev:.3f}) -> {bundle}")
        return 0
    print(f"no accepted strain range (last: {results[-1].message}) -> {bundle}")
    return 2


def cmd_sweep(cfg: RunConfig, args) -> int:
    topologies = cfg.topologies or family_mod.DEFAULT_TOPOLOGIES
    targets = cfg.targets or family_mod.DEFAULT_TARGETS
    db = family_mod.sweep(topologies, targets,
                          out_dir=Path(cfg.out_dir) / "family",
                          resolution=cfg.resolution, material=cfg.material,
                          settings=cfg.settings(), eps_start=cfg.eps_max,
                          eps_stop=cfg.eps_stop, n_samples=cfg.n_samples,
                          jobs=args.jobs if args.jobs else cfg.jobs,
                          use_cache=not args.no_cache, max_iter=cfg.max_iter)
    print(f"{len(db.entries)} entries, {len(db.failures)} failures "
          f"-> {Path(cfg.out_dir) / 'family'}")
    for f in db.failures:
        print(f"  failed {f.topology} @ {f.sigma_target:g} Pa: {f.reason}")
    return 2 if db.failures else 0


def cmd_coverage(cfg: RunConfig, args) -> int:
    db_dir = Path(args.db) if args.db else Path(cfg.out_dir) / "family"
    db = family_mod.FamilyDatabase.load(db_dir)
    cov = family_mod.coverage(db)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "coverage.csv"
    cov.to_csv(csv_path)
    n_cov = sum(c.covered for c in cov.cells)
    print(f"{n_cov}/{len(cov.cells)} cells covered -> {csv_path}")
    return 0


def cmd_select(cfg: RunConfig, args) -> int:
    sigma_f = family_mod.select_material(args.mass, args.area, args.decel)
    report = {"sigma_f": sigma_f, "mass": args.mass, "area": args.area,
              "decel": args.decel}
    line = f"sigma_f = {sigma_f:g} Pa"
    if args.height is not None:
        db_dir = Path(args.db) if args.db else Path(cfg.out_dir) / "family"
        alpha = args.alpha
        if alpha is None:
            db = family_mod.FamilyDatabase.load(db_dir)
            alpha = family_mod.alpha_for(db, sigma_f)
        h = family_mod.required_thickness(sigma_f, alpha, args.mass,
                                          args.height, args.area,
                                          g=args.gravity)
        report.update({"alpha": alpha, "height": args.height, "thickness": h})
        line += f", alpha = {alpha:g}, thickness = {h:g} m"
    print(line)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "selection.json").write_text(json.dumps(report, indent=2,
                                                   sort_keys=True) + "\n")
    return 0


def cmd_verify(cfg: RunConfig, args) -> int:
    bundle = Path(args.bundle)
    doc = json.loads((bundle / "result.json").read_text())
    if not doc.get("accepted_eps"):
        print("bundle has no accepted strain range; nothing to verify")
        return 1
    topology = bundled_topology(doc["topology"])
    spec = ObjectiveSpec.for_range(float(doc["target"]),
                                   float(doc["accepted_eps"]), cfg.n_samples)
    dev, _ = dense_verify(topology, np.asarray(doc["q"], float), spec,
                          material=cfg.material, resolution=cfg.resolution,
                          settings=cfg.settings())
    ok = dev <= 0.1
    print(f"dense max deviation {dev:.4f} ({'within' if ok else 'exceeds'} 10%)")
    return 0 if ok else 1


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shockcell",
                                description="flat-response microstructure toolkit")
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--out-dir", help="output directory (overrides config)")
    p.add_argument("--resolution", type=int, help="inflator resolution")
    p.add_argument("--trace", action="store_true", help="write solver traces")
    sub = p.add_subparsers(dest="command", required=True)

    h = sub.add_parser("homogenize", help="stress-strain curve for one cell")
    h.add_argument("topology", choices=bundled_names())
    h.add_argument("--params", help="JSON file with the parameter vector")
    h.add_argument("--eps-max", type=float, help="last scheduled strain")
    h.add_argument("--step", type=float, default=0.02)

    o = sub.add_parser("optimize", help="flat-response optimization bundle")
    o.add_argument("topology", choices=bundled_names())
    o.add_argument("target", type=float, help="target stress in Pa")
    o.add_argument("--params", help="JSON warm-start parameter vector")

    s = sub.add_parser("sweep", help="build the family database")
    s.add_argument("--jobs", type=int, default=0, help="parallel pairs")
    s.add_argument("--no-cache", action="store_true")

    c = sub.add_parser("coverage", help="coverage CSV from a family database")
    c.add_argument("--db", help="database directory (default <out>/family)")

    m = sub.add_parser("select", help="material selection from payload specs")
    m.add_argument("--mass", type=float, required=True)
    m.add_argument("--area", type=float, required=True)
    m.add_argument("--decel", type=float, required=True)
    m.add_argument("--height", type=float, help="drop height for thickness")
    m.add_argument("--gravity", type=float, default=9.81)
    m.add_argument("--alpha", type=float, help="strain extent override")
    m.add_argument("--db", help="family database for alpha lookup")

    v = sub.add_parser("verify", help="dense 1%% re-check of a bundle")
    v.add_argument("bundle", help="bundle directory from `optimize`")
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        overrides = {"out_dir": Path(args.out_dir) if args.out_dir else None,
                     "resolution": args.resolution,
                     "trace": True if args.trace else None}
        cfg = load_config(args.config, overrides)
        handler = {"homogenize": cmd_homogenize, "optimize": cmd_optimize,
                   "sweep": cmd_sweep, "coverage": cmd_coverage,
                   "select": cmd_select, "verify": cmd_verify}[args.command]
        return handler(cfg, args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(f"missing file: {err}", file=sys.stderr)
        return 1
    except _RUN_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
