"""Quasi-static solves of the periodic cell under prescribed compression.

The unknown vector v stacks the independent fluctuation displacements and the
macroscopic entries (G00, G01, G11). A strain schedule is walked with warm
starts; each target strain is reached by minimizing the total energy with a
quadratic penalty on G11 of doubling weight, then polished with G11 eliminated
from the unknowns. Line searches are capped by continuous collision detection
and element non-inversion, so accepted states are always admissible.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import cvxopt
import cvxopt.cholmod

from .contact import (ContactError, TiledSurface, barrier_energy, build_tiling,
                      chain_to_v, step_limit, tiled_displacement)
from .fem import (HomogState, InadmissibleState, Material,
                  effective_stress, elastic_energy)
from .mesher import PeriodicMesh, replicate

log = logging.getLogger(__name__)

MAX_ROTATION = np.deg2rad(20.0)


class SolverError(RuntimeError):
    pass


@dataclass
class SolveSettings:
    penalty_w0: float = 1e4      # initial G11 penalty weight
    tol_grad: float | None = None  # default 1e-6 * mu * a * b, set per solve
    tol_constraint: float = 1e-8   # |G11 + eps| acceptance
    max_newton: int = 200
    max_weight: float = 1e12
    dhat: float | None = None      # contact activation distance
    kappa: float | None = None     # barrier stiffness, default 1e3 * mu * min(a,b)
    persist_w0: bool = False       # carry a raised penalty weight to later strains
    trace_path: str | None = None  # JSONL per-iteration log

    def __post_init__(self):
        if self.penalty_w0 <= 0 or self.tol_constraint <= 0 or self.max_weight <= 0:
            raise ValueError("solver tolerances and weights must be positive")
        if self.tol_grad is not None and self.tol_grad <= 0:
            raise ValueError("solver tolerances and weights must be positive")


@dataclass
class CurveSample:
    strain: float            # compression, positive
    stress: np.ndarray       # averaged first Piola stress, 2x2
    G00: float
    G01: float
    state: HomogState
    newton_iters: int = 0
    wall_ms: int = 0         # kept at 0: curve files must be byte-reproducible

    @property
    def stress11(self) -> float:
        """Compressive reaction along y, reported positive."""
        return -float(self.stress[1, 1])


@dataclass
class StressStrainCurve:
    samples: list[CurveSample] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def append(self, sample: CurveSample) -> None:
        if self.samples and sample.strain <= self.samples[-1].strain:
            raise ValueError("curve strains must be strictly increasing")
        if sample.state is not None and sample.state.G11 != -sample.strain:
            raise ValueError("stored state does not match the sample strain")
        self.samples.append(sample)

    @property
    def strains(self) -> np.ndarray:
        return np.array([s.strain for s in self.samples])

    @property
    def stress11(self) -> np.ndarray:
        return np.array([s.stress11 for s in self.samples])

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("strain,stress11,G00,G01,newton_iters,wall_ms\n")
            for s in self.samples:
                fh.write(f"{s.strain!r},{s.stress11!r},{s.G00!r},{s.G01!r},"
                         f"{s.newton_iters},{s.wall_ms}\n")


def load_curve_csv(path) -> StressStrainCurve:
    """Curve file back into samples; states are not persisted."""
    curve = StressStrainCurve()
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:4] != ["strain", "stress11", "G00", "G01"]:
            raise ValueError(f"unrecognized curve file {path}")
        for line in fh:
            parts = line.strip().split(",")
            eps, s11, g00, g01 = map(float, parts[:4])
            stress = np.array([[0.0, 0.0], [0.0, -s11]])
            curve.samples.append(CurveSample(eps, stress, g00, g01, state=None,
                                             newton_iters=int(parts[4])))
    return curve


# --------------------------------------------------------- linear algebra ----


def _cholesky(H: sp.csr_matrix):
    """cholmod factor of H, or None if H is not positive definite."""
    coo = sp.triu(H).tocoo()
    A = cvxopt.spmatrix(coo.data, coo.col.tolist(), coo.row.tolist(), H.shape)
    F = cvxopt.cholmod.symbolic(A)
    try:
        cvxopt.cholmod.numeric(A, F)
    except ArithmeticError:
        return None
    return F


def _spd_shift(H: sp.csr_matrix):
    """(factor, beta) with beta the smallest tried diagonal shift that works."""
    F = _cholesky(H)
    if F is not None:
        return F, 0.0
    eye = sp.identity(H.shape[0], format="csr")
    scale = np.abs(H.data).max() if H.nnz else 0.0
    beta = 1e-8
    while beta <= max(1e8 * scale, 1e-8):
        F = _cholesky((H + beta * eye).tocsr())
        if F is not None:
            return F, beta
        beta *= 2.0
    raise SolverError("Hessian cannot be regularized: ill-conditioned system")


def force_spd(H: sp.spmatrix) -> sp.csr_matrix:
    """H plus the smallest power-of-two multiple of 1e-8 I that factors."""
    H = H.tocsr()
    _, beta = _spd_shift(H)
    if beta == 0.0:
        return H
    return (H + beta * sp.identity(H.shape[0], format="csr")).tocsr()


def _solve_direction(H: sp.csr_matrix, g: np.ndarray) -> np.ndarray:
    F, _ = _spd_shift(H)
    b = cvxopt.matrix(-g)
    cvxopt.cholmod.solve(F, b)
    return np.array(b).ravel()


# ------------------------------------------------------------ total energy ----


def total_energy(state: HomogState, tiling: TiledSurface, kappa: float,
                 order: int = 2):
    """Elastic plus contact energy with derivatives over v."""
    W, g, H = elastic_energy(state, order=order)
    u_t = tiled_displacement(state, tiling)
    Wc, gc, Hc = barrier_energy(tiling, u_t, kappa)
    W += Wc
    if order == 0:
        return W, None, None
    gv, Hv = chain_to_v(tiling, gc, Hc if order == 2 else None, state.dof_map)
    g = g + gv
    if order == 2:
        H = (H + Hv).tocsr()
    return W, g, H


def _contact_setup(mesh, material: Material, settings: SolveSettings,
                   tiling: TiledSurface | None = None):
    a, b = mesh.metadata["cell_dims"]
    kappa = settings.kappa if settings.kappa is not None else \
        1e3 * material.mu * min(a, b)
    if tiling is None:
        dhat = settings.dhat if settings.dhat is not None else 1e-3 * min(a, b)
        tiling = build_tiling(mesh, dhat=dhat)
    return tiling, kappa


def _grad_tol(mesh, material: Material, settings: SolveSettings) -> float:
    if settings.tol_grad is not None:
        return settings.tol_grad
    a, b = mesh.metadata["cell_dims"]
    return 1e-6 * material.mu * a * b


def _trace(settings: SolveSettings, **fields):
    if settings.trace_path:
        with open(settings.trace_path, "a") as fh:
            fh.write(json.dumps(fields) + "\n")


# ----------------------------------------------------------- Newton loops ----


def _newton(state: HomogState, g_target: float, w: float | None,
            tiling: TiledSurface, kappa: float, tol: float,
            settings: SolveSettings, phase: str):
    """Minimize W (+ penalty when w is given) over the unmasked entries of v.

    With w = None, G11 is frozen at its current value instead. Returns
    (state, iterations)."""
    dm = state.dof_map
    masked = list(dm.pinned_dofs)
    if w is None:
        masked.append(dm.iG11)
    free = np.setdiff1d(np.arange(dm.n_v), masked)

    def energy(st, order):
        W, g, H = total_energy(st, tiling, kappa, order)
        if w is not None:
            r = st.G11 - g_target
            W += w * r * r
            if order >= 1:
                g = g.copy()
                g[dm.iG11] += 2.0 * w * r
            if order == 2:
                H = H + sp.coo_matrix(([2.0 * w], ([dm.iG11], [dm.iG11])),
                                      shape=H.shape)
        return W, g, H

    W, g, H = energy(state, 2)
    it = 0
    while np.linalg.norm(g[free]) > tol:
        if it >= settings.max_newton:
            raise SolverError(f"{phase}: no convergence in {settings.max_newton} "
                              f"Newton iterations (|g| = {np.linalg.norm(g[free]):.3e})")
        p = np.zeros(dm.n_v)
        p[free] = _solve_direction(H[free][:, free].tocsr(), g[free])
        alpha = step_limit(tiling, state, p)
        accepted = None
        while alpha > 1e-12:
            trial = state.with_v(state.v + alpha * p)
            try:
                Wt = energy(trial, 0)[0]
            except (InadmissibleState, ContactError):
                Wt = math.inf
            if Wt < W:
                accepted = trial
                break
            alpha *= 0.5
        if accepted is None:
            raise SolverError(f"{phase}: line search failed at |g| = "
                              f"{np.linalg.norm(g[free]):.3e}")
        state = accepted
        it += 1
        W, g, H = energy(state, 2)
        _trace(settings, phase=phase, target=g_target, w=w, iter=it, W=W,
               gnorm=float(np.linalg.norm(g[free])), alpha=alpha)
    return state, it


def newton_solve(state: HomogState, eps_target: float, w: float, *,
                 tiling: TiledSurface | None = None,
                 settings: SolveSettings | None = None) -> HomogState:
    """Penalty-form solve: G11 free, pulled toward -eps_target with weight w."""
    settings = settings or SolveSettings()
    tiling, kappa = _contact_setup(state.mesh, state.material, settings, tiling)
    tol = _grad_tol(state.mesh, state.material, settings)
    return _newton(state, -eps_target, w, tiling, kappa, tol, settings,
                   "newton")[0]


def constrained_newton_solve(state: HomogState, eps_target: float, *,
                             tiling: TiledSurface | None = None,
                             settings: SolveSettings | None = None) -> HomogState:
    """Solve with G11 pinned bit-exactly to -eps_target."""
    settings = settings or SolveSettings()
    tiling, kappa = _contact_setup(state.mesh, state.material, settings, tiling)
    tol = _grad_tol(state.mesh, state.material, settings)
    state = replace(state, G11=-float(eps_target))
    return _newton(state, -eps_target, None, tiling, kappa, tol, settings,
                   "constrained")[0]


def _incremental(state: HomogState, eps_target: float, tiling: TiledSurface,
                 kappa: float, tol: float, settings: SolveSettings,
                 w0: float):
    """Penalty continuation to -eps_target followed by the constrained polish.

    Returns (state, newton_iterations, w0) where w0 may have been raised if the
    penalty stage had to restart."""
    g_target = -float(eps_target)
    start = state
    w = w0
    e0 = e = abs(state.G11 - g_target)
    iters = 0
    while e >= settings.tol_constraint:
        if w > settings.max_weight:
            raise SolverError(f"constraint not met at eps = {eps_target}: "
                              f"penalty weight exceeded {settings.max_weight:.0e}")
        state, it = _newton(state, g_target, w, tiling, kappa, tol, settings,
                            "penalty")
        iters += it
        e = abs(state.G11 - g_target)
        w *= 2.0
        if e > e0:  # worse than the warm start: restart harder
            w0 = w
            state = start
    state = replace(state, G11=g_target)
    state, it = _newton(state, g_target, None, tiling, kappa, tol, settings,
                        "constrained")
    iters += it
    return state, iters, w0


def incremental_solve(state: HomogState, eps_target: float, *,
                      tiling: TiledSurface | None = None,
                      settings: SolveSettings | None = None) -> HomogState:
    settings = settings or SolveSettings()
    tiling, kappa = _contact_setup(state.mesh, state.material, settings, tiling)
    tol = _grad_tol(state.mesh, state.material, settings)
    return _incremental(state, eps_target, tiling, kappa, tol, settings,
                        settings.penalty_w0)[0]


# ---------------------------------------------------------------- curves ----


def default_schedule(samples, coarse_to: float = 0.1, step: float = 0.02):
    """Strains 0.02..coarse_to plus the requested sample points, sorted."""
    grid = np.arange(step, coarse_to + 0.5 * step, step)
    eps = np.unique(np.concatenate([grid, np.asarray(samples, float)]))
    return eps[eps > 0.0]


def solve_curve(mesh, material: Material, schedule,
                settings: SolveSettings | None = None,
                tiling: TiledSurface | None = None) -> StressStrainCurve:
    """Walk the strain schedule with warm starts; record sigma and G per strain."""
    settings = settings or SolveSettings()
    schedule = np.asarray(schedule, float)
    curve = StressStrainCurve()
    if len(schedule) == 0:
        return curve
    if schedule[0] <= 0 or np.any(np.diff(schedule) <= 0):
        raise ValueError("strain schedule must be strictly increasing and positive")
    tiling, kappa = _contact_setup(mesh, material, settings, tiling)
    tol = _grad_tol(mesh, material, settings)
    state = HomogState.rest(mesh, material)
    w0 = settings.penalty_w0
    for eps in schedule:
        try:
            state, iters, w0_out = _incremental(state, float(eps), tiling, kappa,
                                                tol, settings, w0)
        except (SolverError, InadmissibleState, ContactError) as err:
            raise SolverError(f"solve failed at eps = {eps:.6g}: {err}") from err
        if settings.persist_w0:
            w0 = w0_out
        curve.append(CurveSample(float(eps), effective_stress(state),
                                 state.G00, state.G01, state, iters))
        log.info("eps=%.4f stress11=%.6g iters=%d", eps,
                 curve.samples[-1].stress11, iters)
    return curve


def homogenize_tiled(mesh, material: Material, n: int, schedule,
                     settings: SolveSettings | None = None) -> StressStrainCurve:
    """Re-homogenize on an n x n supercell, where cell-periodic equilibria may
    break symmetry; stresses are normalized by the supercell area."""
    if n not in (1, 2):
        raise ValueError("supercell factor must be 1 or 2")
    settings = settings or SolveSettings()
    if n == 1:
        return solve_curve(mesh, material, schedule, settings)
    a, b = mesh.metadata["cell_dims"]
    # keep the physical contact scales of the unit cell
    explicit = replace(
        settings,
        dhat=settings.dhat if settings.dhat is not None else 1e-3 * min(a, b),
        kappa=settings.kappa if settings.kappa is not None else
        1e3 * material.mu * min(a, b))
    return solve_curve(replicate(mesh, n, n), material, schedule, explicit)


# ------------------------------------------------------------- rotations ----


def rotate_rest(mesh: PeriodicMesh, theta: float) -> PeriodicMesh:
    """Rotate the rest cell about its center so the load axis stays vertical."""
    if abs(theta) > MAX_ROTATION + 1e-12:
        raise ValueError("rest rotation is limited to +-20 degrees")
    if theta == 0.0:
        return replace(mesh)
    a, b = mesh.metadata["cell_dims"]
    c = np.array([0.5 * a, 0.5 * b])
    R = np.array([[np.cos(theta), -np.sin(theta)],
                  [np.sin(theta), np.cos(theta)]])
    verts = (mesh.vertices - c) @ R.T + c
    lattice = R @ mesh.lattice
    # keep slave positions exactly on master + lattice offset
    sl = np.flatnonzero(mesh.master != np.arange(mesh.n_vertices))
    verts[sl] = verts[mesh.master[sl]] + mesh.offset_tags[sl] @ lattice.T
    vel = np.einsum("ij,njp->nip", R, mesh.shape_velocity)
    if mesh.n_params:
        # the rotation center moves with the cell dimensions
        da = np.array([0.5, 0.0])
        db = np.array([0.0, 0.5])
        vel[:, :, -2] = (mesh.shape_velocity[:, :, -2] - da) @ R.T + da
        vel[:, :, -1] = (mesh.shape_velocity[:, :, -1] - db) @ R.T + db
    return replace(mesh, vertices=verts, lattice=lattice,
                   lattice_da=R @ mesh.lattice_da, lattice_db=R @ mesh.lattice_db,
                   shape_velocity=vel,
                   metadata={**mesh.metadata, "rotation": float(theta)})
