"""Microstructure family database and material selection.

A family is built by sweeping cell topologies against a grid of target
stresses: each accepted optimization contributes one entry (parameters, the
reached strain extent alpha, and a dense verification curve). Coverage maps
which (target, strain) points some family member serves within tolerance, and
the selection helpers turn payload mass / deceleration / drop height into a
target stress and a pad thickness.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fem import Material
from .shapeopt import DEFAULT_MATERIAL, ObjectiveSpec, extend_range, dense_verify
from .solver import SolveSettings, StressStrainCurve, load_curve_csv
from .topology import bundled_topology, default_params

log = logging.getLogger(__name__)

#: desk-scale sweep grid: log-spaced targets over the family's stress range
DEFAULT_TARGETS = tuple(float(x) for x in np.round(np.geomspace(300.0, 20000.0, 4), 6))
DEFAULT_TOPOLOGIES = ("chi", "diamond_chain", "rhomboid")

DB_VERSION = 1


@dataclass
class FamilyEntry:
    """One accepted member: cell parameters reaching alpha for its target."""

    topology: str
    q: tuple
    sigma_target: float
    alpha: float                 # largest accepted strain extent
    dense_max_dev: float
    curve_file: str              # dense verification curve, relative to the db root

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        self.q = tuple(float(x) for x in self.q)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FamilyEntry":
        return cls(topology=d["topology"], q=tuple(d["q"]),
                   sigma_target=float(d["sigma_target"]),
                   alpha=float(d["alpha"]),
                   dense_max_dev=float(d["dense_max_dev"]),
                   curve_file=d["curve_file"])


@dataclass
class FamilyFailure:
    """A swept (topology, target) pair that produced no accepted range."""

    topology: str
    sigma_target: float
    reason: str


@dataclass
class FamilyDatabase:
    entries: list[FamilyEntry] = field(default_factory=list)
    failures: list[FamilyFailure] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    root: Path | None = None

    def __eq__(self, other):
        if not isinstance(other, FamilyDatabase):
            return NotImplemented
        return (self.entries == other.entries and self.failures == other.failures
                and self.metadata == other.metadata)

    def save(self, out_dir) -> Path:
        """Write family.json; curve CSVs are expected alongside already."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        doc = {"version": DB_VERSION,
               "metadata": self.metadata,
               "entries": [e.to_dict() for e in self.entries],
               "failures": [asdict(f) for f in self.failures]}
        path = out_dir / "family.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, out_dir) -> "FamilyDatabase":
        out_dir = Path(out_dir)
        doc = json.loads((out_dir / "family.json").read_text())
        if doc.get("version") != DB_VERSION:
            raise ValueError(f"unsupported family database version {doc.get('version')}")
        return cls(entries=[FamilyEntry.from_dict(d) for d in doc["entries"]],
                   failures=[FamilyFailure(**d) for d in doc["failures"]],
                   metadata=doc["metadata"], root=out_dir)

    def curve(self, entry: FamilyEntry) -> StressStrainCurve:
        if self.root is None:
            raise ValueError("database has no root directory to read curves from")
        return load_curve_csv(self.root / entry.curve_file)


# ------------------------------------------------------------------- sweep ----


def _settings_dict(settings: SolveSettings | None) -> dict:
    return {} if settings is None else {k: v for k, v in asdict(settings).items()
                                        if v is not None and k != "trace_path"}


def _task_key(topology: str, target: float, resolution: int,
              material: Material, settings: SolveSettings | None,
              sweep_kwargs: dict) -> str:
    payload = json.dumps({"topology": topology, "target": target,
                          "resolution": resolution,
                          "material": [material.lam, material.mu],
                          "settings": _settings_dict(settings),
                          "sweep": sweep_kwargs}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _curve_filename(topology: str, target: float) -> str:
    return f"{topology}_{target:g}.csv"


def _run_pair(args):
    """One (topology, target) job; returns plain picklable pieces."""
    (name, target, resolution, mat_lam, mat_mu, settings_dict, eps_start,
     eps_stop, n_samples, opt_kwargs) = args
    material = Material(lam=mat_lam, mu=mat_mu)
    settings = SolveSettings(**settings_dict) if settings_dict else None
    topology = bundled_topology(name)
    q0 = default_params(topology).to_vector()
    spec = ObjectiveSpec.for_range(target, eps_start, n_samples)
    results = extend_range(topology, q0, spec, material=material,
                           resolution=resolution, settings=settings,
                           eps_start=eps_start, eps_stop=eps_stop,
                           n_samples=n_samples, **opt_kwargs)
    accepted = [r for r in results if r.accepted]
    if not accepted:
        reason = results[-1].message if results else "no optimization stages ran"
        dev = results[-1].dense_max_dev if results else None
        if dev is not None and np.isfinite(dev):
            reason = f"dense deviation {dev:.3f} above 0.1 ({reason})"
        return {"entry": None, "reason": reason, "curve": None}
    best = accepted[-1]
    stage = ObjectiveSpec.for_range(target, best.eps_max, n_samples)
    dev, curve = dense_verify(topology, best.q, stage, material=material,
                              resolution=resolution, settings=settings)
    entry = FamilyEntry(topology=name, q=tuple(best.q), sigma_target=target,
                        alpha=best.eps_max, dense_max_dev=dev,
                        curve_file=_curve_filename(name, target))
    # states are unpicklable and unneeded downstream
    for s in curve.samples:
        s.state = None
    return {"entry": entry.to_dict(), "reason": None, "curve": curve}


def sweep(topologies=DEFAULT_TOPOLOGIES, targets=DEFAULT_TARGETS, *,
          out_dir, resolution: int = 24, material: Material | None = None,
          settings: SolveSettings | None = None, eps_start: float = 0.3,
          eps_stop: float = 0.5, n_samples: int = 5, jobs: int = 1,
          use_cache: bool = True, **opt_kwargs) -> FamilyDatabase:
    """Build the family database over topologies x targets.

    Failed pairs are recorded, not raised. Finished pairs are cached by a
    content hash of their inputs, so an interrupted sweep resumes without
    recomputing. The merge order is fixed, making the database content
    independent of `jobs`.
    """
    if not topologies or len(targets) == 0:
        raise ValueError("sweep needs at least one topology and one target")
    material = material if material is not None else DEFAULT_MATERIAL
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = out_dir / "cache"
    cache_dir.mkdir(exist_ok=True)

    sweep_kwargs = {"eps_start": eps_start, "eps_stop": eps_stop,
                    "n_samples": n_samples,
                    "opt": {k: repr(v) for k, v in sorted(opt_kwargs.items())}}
    pairs = sorted((str(t), float(s)) for t in topologies for s in targets)
    keys = {pair: _task_key(pair[0], pair[1], resolution, material, settings,
                            sweep_kwargs)
            for pair in pairs}

    outcomes: dict[tuple, dict] = {}
    pending = []
    for pair in pairs:
        cached = cache_dir / f"{keys[pair]}.json"
        if use_cache and cached.exists():
            outcomes[pair] = json.loads(cached.read_text())
            log.info("sweep cache hit for %s @ %g Pa", *pair)
        else:
            pending.append(pair)

    def job_args(pair):
        return (pair[0], pair[1], resolution, material.lam, material.mu,
                _settings_dict(settings), eps_start, eps_stop, n_samples,
                opt_kwargs)

    if pending:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                raw = list(pool.map(_run_pair, [job_args(p) for p in pending]))
        else:
            raw = [_run_pair(job_args(p)) for p in pending]
        for pair, out in zip(pending, raw):
            curve = out.pop("curve")
            if curve is not None:
                curve.to_csv(out_dir / _curve_filename(*pair))
                out["curve_csv"] = (out_dir / _curve_filename(*pair)).read_text()
            outcomes[pair] = out
            (cache_dir / f"{keys[pair]}.json").write_text(
                json.dumps(out, sort_keys=True))

    entries, failures = [], []
    for pair in pairs:
        out = outcomes[pair]
        if out.get("entry") is not None:
            entries.append(FamilyEntry.from_dict(out["entry"]))
            csv_path = out_dir / _curve_filename(*pair)
            if not csv_path.exists() and "curve_csv" in out:
                csv_path.write_text(out["curve_csv"])
        else:
            failures.append(FamilyFailure(pair[0], pair[1],
                                          out.get("reason") or "unknown"))

    db = FamilyDatabase(entries=entries, failures=failures,
                        metadata={"resolution": resolution,
                                  "material": [material.lam, material.mu],
                                  "targets": [float(t) for t in targets],
                                  "topologies": [str(t) for t in topologies],
                                  "eps_stop": eps_stop},
                        root=out_dir)
    db.save(out_dir)
    return db


# ---------------------------------------------------------------- coverage ----


DEFAULT_COVERAGE_STRAINS = tuple(float(x) for x in np.round(np.arange(0.2, 0.71, 0.1), 10))


@dataclass
class CoverageCell:
    sigma_target: float
    strain: float
    covered: bool
    topology: str | None
    deviation: float | None


@dataclass
class CoverageMap:
    cells: list[CoverageCell]
    tolerance: float = 0.1

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("sigma_target,strain,covered,topology,deviation\n")
            for c in self.cells:
                topo = c.topology if c.topology is not None else ""
                dev = repr(c.deviation) if c.deviation is not None else ""
                fh.write(f"{c.sigma_target!r},{c.strain!r},"
                         f"{str(c.covered).lower()},{topo},{dev}\n")


def coverage(db: FamilyDatabase, strains=DEFAULT_COVERAGE_STRAINS,
             tolerance: float = 0.1) -> CoverageMap:
    """Mark each (target, strain) cell with the best family member's deviation.

    A cell is covered when the best deviation is within tolerance; among
    entries the smallest deviation wins.
    """
    targets = sorted({e.sigma_target for e in db.entries})
    curves = [(e, db.curve(e)) for e in db.entries]
    cells = []
    for sig in targets:
        for eps in strains:
            best = None
            for e, curve in curves:
                s = curve.strains
                if eps < s[0] - 1e-9 or eps > s[-1] + 1e-9:
                    continue
                val = float(np.interp(eps, s, curve.stress11))
                dev = abs(val / sig - 1.0)
                if best is None or dev < best[1]:
                    best = (e.topology, dev)
            cells.append(CoverageCell(sig, float(eps), covered=bool(best and best[1] <= tolerance),
                                      topology=best[0] if best else None,
                                      deviation=best[1] if best else None))
    return CoverageMap(cells=cells, tolerance=tolerance)


# -------------------------------------------------------- material selection ----


def select_material(m: float, A: float, G: float) -> float:
    """Target stress from the force balance m G = A sigma_f."""
    if m <= 0 or A <= 0 or G <= 0:
        raise ValueError("mass, area and deceleration must be positive")
    return m * G / A


def required_thickness(sigma_f: float, alpha: float, m: float, H: float,
                       A: float, g: float = 9.81) -> float:
    """Pad thickness from the energy balance alpha sigma_f A h = m g H."""
    if min(sigma_f, alpha, m, H, A, g) <= 0:
        raise ValueError("all selection inputs must be positive")
    return m * g * H / (alpha * sigma_f * A)


def alpha_for(db: FamilyDatabase, sigma_f: float) -> float:
    """Strain extent available at sigma_f, interpolated linearly in log target.

    Outside the family's target range the nearest entry is used (with a
    warning); ties inside the range interpolate between the bracketing
    entries' alphas.
    """
    if not db.entries:
        raise ValueError("family database has no accepted entries")
    if sigma_f <= 0:
        raise ValueError("sigma_f must be positive")
    by_target: dict[float, float] = {}
    for e in db.entries:
        by_target[e.sigma_target] = max(by_target.get(e.sigma_target, 0.0), e.alpha)
    targets = np.array(sorted(by_target))
    alphas = np.array([by_target[t] for t in targets])
    if sigma_f < targets[0] or sigma_f > targets[-1]:
        nearest = int(np.argmin(np.abs(np.log(targets) - np.log(sigma_f))))
        log.warning("sigma_f=%g outside the family range [%g, %g]; using the "
                    "nearest entry", sigma_f, targets[0], targets[-1])
        return float(alphas[nearest])
    return float(np.interp(np.log(sigma_f), np.log(targets), alphas))


@dataclass(frozen=True)
class IdealCurve:
    """The min-max optimum: constant stress sigma_f over the whole stroke."""

    sigma_f: float

    def __post_init__(self):
        if self.sigma_f <= 0:
            raise ValueError("sigma_f must be positive")

    def __call__(self, eps):
        return np.full_like(np.asarray(eps, float), self.sigma_f)

    @property
    def max(self) -> float:
        return self.sigma_f

    @property
    def integral(self) -> float:
        """Absorbed energy density over a unit stroke."""
        return self.sigma_f


def ideal_curve(sigma_f: float) -> IdealCurve:
    return IdealCurve(sigma_f)
