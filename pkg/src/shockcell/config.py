"""Run configuration: a TOML file validated into one plain object.

Sections mirror the pipeline stages (material, mesher resolution, contact,
solver, objective, sweep grid); command-line flags override file values.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .fem import Material
from .shapeopt import DEFAULT_MATERIAL, ObjectiveSpec
from .solver import SolveSettings
from .topology import bundled_names


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    material: Material = DEFAULT_MATERIAL
    resolution: int = 24
    dhat: float | None = None
    kappa: float | None = None
    tol_grad: float | None = None
    tol_constraint: float = 1e-8
    penalty_w0: float = 1e4
    max_newton: int = 200
    sigma_target: float | None = None
    eps_max: float = 0.3
    n_samples: int = 5
    shear_weight: float = 1.0
    shear_threshold: float = 0.05
    topologies: tuple = ()
    targets: tuple = ()
    eps_stop: float = 0.5
    max_iter: int = 200
    out_dir: Path = Path("runs")
    jobs: int = 1
    seed: int = 0
    trace: bool = False

    def settings(self) -> SolveSettings:
        return SolveSettings(penalty_w0=self.penalty_w0,
                             tol_grad=self.tol_grad,
                             tol_constraint=self.tol_constraint,
                             max_newton=self.max_newton,
                             dhat=self.dhat, kappa=self.kappa)

    def objective(self) -> ObjectiveSpec:
        if self.sigma_target is None:
            raise ConfigError("objective.sigma_target is required for this command")
        return ObjectiveSpec.for_range(self.sigma_target, self.eps_max,
                                       self.n_samples,
                                       shear_weight=self.shear_weight,
                                       shear_threshold=self.shear_threshold)


_SECTIONS = {"material": {"lam", "mu"},
             "mesher": {"resolution"},
             "contact": {"dhat", "kappa"},
             "solver": {"tol_grad", "tol_constraint", "penalty_w0", "max_newton"},
             "objective": {"sigma_target", "eps_max", "n_samples",
                           "shear_weight", "shear_threshold"},
             "sweep": {"topologies", "targets", "eps_stop", "max_iter", "jobs"},
             "run": {"out_dir", "seed", "trace"}}


def _positive(doc: dict, section: str, key: str, value):
    if not (isinstance(value, (int, float)) and value > 0):
        raise ConfigError(f"[{section}] {key} must be a positive number, got {value!r}")
    return float(value)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Parse and validate a TOML config; overrides win over file values."""
    doc: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"malformed config {path}: {err}") from err

    for section, table in doc.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(table, dict):
            raise ConfigError(f"[{section}] must be a table")
        unknown = set(table) - _SECTIONS[section]
        if unknown:
            raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{section}]")

    cfg = RunConfig()
    mat = doc.get("material", {})
    if mat:
        lam = _positive(doc, "material", "lam", mat.get("lam", cfg.material.lam))
        mu = _positive(doc, "material", "mu", mat.get("mu", cfg.material.mu))
        cfg.material = Material(lam=lam, mu=mu)
    mesher = doc.get("mesher", {})
    if "resolution" in mesher:
        cfg.resolution = int(_positive(doc, "mesher", "resolution", mesher["resolution"]))
    contact = doc.get("contact", {})
    if "dhat" in contact:
        cfg.dhat = _positive(doc, "contact", "dhat", contact["dhat"])
    if "kappa" in contact:
        cfg.kappa = _positive(doc, "contact", "kappa", contact["kappa"])
    solver = doc.get("solver", {})
    if "tol_grad" in solver:
        cfg.tol_grad = _positive(doc, "solver", "tol_grad", solver["tol_grad"])
    if "tol_constraint" in solver:
        cfg.tol_constraint = _positive(doc, "solver", "tol_constraint",
                                       solver["tol_constraint"])
    if "penalty_w0" in solver:
        cfg.penalty_w0 = _positive(doc, "solver", "penalty_w0", solver["penalty_w0"])
    if "max_newton" in solver:
        cfg.max_newton = int(_positive(doc, "solver", "max_newton", solver["max_newton"]))
    obj = doc.get("objective", {})
    if "sigma_target" in obj:
        cfg.sigma_target = _positive(doc, "objective", "sigma_target", obj["sigma_target"])
    if "eps_max" in obj:
        cfg.eps_max = _positive(doc, "objective", "eps_max", obj["eps_max"])
        if not 0.1 <= cfg.eps_max < 1.0:
            raise ConfigError("[objective] eps_max must lie in [0.1, 1)")
    if "n_samples" in obj:
        cfg.n_samples = int(_positive(doc, "objective", "n_samples", obj["n_samples"]))
    if "shear_weight" in obj:
        w = obj["shear_weight"]
        if not (isinstance(w, (int, float)) and w >= 0):
            raise ConfigError("[objective] shear_weight must be non-negative")
        cfg.shear_weight = float(w)
    if "shear_threshold" in obj:
        cfg.shear_threshold = _positive(doc, "objective", "shear_threshold",
                                        obj["shear_threshold"])
    sw = doc.get("sweep", {})
    if "topologies" in sw:
        names = sw["topologies"]
        if not isinstance(names, list) or not names:
            raise ConfigError("[sweep] topologies must be a nonempty list")
        known = set(bundled_names())
        for n in names:
            if n not in known:
                raise ConfigError(f"[sweep] unknown topology {n!r}; "
                                  f"bundled: {sorted(known)}")
        cfg.topologies = tuple(names)
    if "targets" in sw:
        vals = sw["targets"]
        if not isinstance(vals, list) or not vals:
            raise ConfigError("[sweep] targets must be a nonempty list")
        cfg.targets = tuple(_positive(doc, "sweep", "targets", v) for v in vals)
    if "eps_stop" in sw:
        cfg.eps_stop = _positive(doc, "sweep", "eps_stop", sw["eps_stop"])
    if "max_iter" in sw:
        cfg.max_iter = int(sw["max_iter"])
        if cfg.max_iter < 0:
            raise ConfigError("[sweep] max_iter must be non-negative")
    if "jobs" in sw:
        cfg.jobs = int(_positive(doc, "sweep", "jobs", sw["jobs"]))
    run = doc.get("run", {})
    if "out_dir" in run:
        cfg.out_dir = Path(run["out_dir"])
    if "seed" in run:
        cfg.seed = int(run["seed"])
    if "trace" in run:
        if not isinstance(run["trace"], bool):
            raise ConfigError("[run] trace must be a boolean")
        cfg.trace = run["trace"]

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown override {key!r}")
        setattr(cfg, key, value)
    return cfg
