"""Shape optimization of a periodic cell toward a flat compressive response.

The objective sums squared deviations of the compressive reaction from a
target stress over a strain window, plus a hinge penalty on macroscopic
shear. Its gradient with respect to the reduced shape parameters
[orbit positions, orbit radii, a, b] is computed with one adjoint solve per
strain sample against the forward Hessian, combined with assembled rest-shape
derivatives of the elastic force, the contact force, and the averaged stress,
and chained through the mesher's shape velocities. On top of that sit a
projected L-BFGS loop that treats failed forward solves as rejected trial
steps, and a strain-range extension driver with dense-sample acceptance.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import cvxopt
import cvxopt.cholmod

from .contact import (ContactError, TiledSurface, barrier_energy, null_tiling,
                      tiled_displacement)
from .fem import (HomogState, InadmissibleState, Material, _nh_batch,
                  _deformation_gradients, effective_stress,
                  effective_stress_gradient, element_data)
from .mesher import MeshError, inflate, replicate
from .solver import (SolveSettings, SolverError, StressStrainCurve,
                     _contact_setup, _spd_shift, default_schedule, solve_curve,
                     total_energy)
from .topology import CellTopology, ShapeParams, default_bounds

log = logging.getLogger(__name__)

# TPU-like rubber: E = 5 MPa, nu = 0.35
DEFAULT_MATERIAL = Material(lam=4.32e6, mu=1.85e6)

_DL1 = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])  # P1 reference gradients


@dataclass(frozen=True)
class ObjectiveSpec:
    """Target stress and strain window of the flat-response objective."""

    sigma_target: float             # Pa, positive; compressive reaction target
    samples: tuple[float, ...]      # strain sample points, [0.1, eps_max]
    shear_weight: float = 1.0
    shear_threshold: float = 0.05

    def __post_init__(self):
        if self.sigma_target <= 0:
            raise ValueError("sigma_target must be positive")
        s = np.asarray(self.samples, float)
        if len(s) == 0 or np.any(s <= 0) or np.any(s >= 1) or np.any(np.diff(s) <= 0):
            raise ValueError("strain samples must be strictly increasing within (0, 1)")
        if abs(s[0] - 0.1) > 1e-9:
            raise ValueError("the strain window starts at 0.1")
        object.__setattr__(self, "samples", tuple(float(x) for x in s))

    @property
    def eps_max(self) -> float:
        return self.samples[-1]

    @classmethod
    def for_range(cls, sigma_target: float, eps_max: float, n_samples: int = 5,
                  **kw) -> "ObjectiveSpec":
        samples = np.round(np.linspace(0.1, eps_max, n_samples), 10)
        return cls(sigma_target, tuple(samples), **kw)


@dataclass
class OptResult:
    q: np.ndarray                # final reduced parameters
    J_trace: list[float]         # objective at accepted iterates
    deviations: np.ndarray       # |s_i/sigma* - 1| at the optimizer samples
    accepted: bool               # dense verification within 10 percent
    eps_max: float               # strain range this result targets
    n_iter: int
    converged: bool
    grad_norm: float
    dense_max_dev: float | None = None
    message: str = ""

    def to_dict(self) -> dict:
        return {"q": np.asarray(self.q).tolist(),
                "J_trace": [float(j) for j in self.J_trace],
                "deviations": np.asarray(self.deviations).tolist(),
                "accepted": bool(self.accepted),
                "eps_max": float(self.eps_max),
                "n_iter": int(self.n_iter),
                "converged": bool(self.converged),
                "grad_norm": float(self.grad_norm),
                "dense_max_dev": None if self.dense_max_dev is None
                else float(self.dense_max_dev),
                "message": self.message}

    @classmethod
    def from_dict(cls, d: dict) -> "OptResult":
        return cls(q=np.asarray(d["q"], float), J_trace=list(d["J_trace"]),
                   deviations=np.asarray(d["deviations"], float),
                   accepted=bool(d["accepted"]), eps_max=float(d["eps_max"]),
                   n_iter=int(d["n_iter"]), converged=bool(d["converged"]),
                   grad_norm=float(d["grad_norm"]),
                   dense_max_dev=d.get("dense_max_dev"),
                   message=d.get("message", ""))


# ---------------------------------------------------------------- objective ----


def _select_samples(curve: StressStrainCurve, spec: ObjectiveSpec):
    """Curve samples at the spec strains; the ramp below 0.1 is ignored."""
    out = []
    strains = curve.strains
    for eps in spec.samples:
        hits = np.flatnonzero(np.abs(strains - eps) <= 1e-9)
        if len(hits) != 1:
            raise ValueError(f"curve does not contain the objective sample eps={eps}")
        out.append(curve.samples[int(hits[0])])
    return out


def _sample_partials(spec: ObjectiveSpec, s11: float, g01: float):
    """(J_i, dJ_i/d(sigma_bar11), dJ_i/dG01) for one strain sample."""
    r = s11 / spec.sigma_target - 1.0
    t = abs(g01) - spec.shear_threshold
    J = r * r + (spec.shear_weight * t * t if t > 0 else 0.0)
    dJ_dsig = -2.0 * r / spec.sigma_target        # s11 = -sigma_bar[1,1]
    dJ_dG01 = 2.0 * spec.shear_weight * t * math.copysign(1.0, g01) if t > 0 else 0.0
    return J, dJ_dsig, dJ_dG01


def objective(curve: StressStrainCurve, spec: ObjectiveSpec):
    """Flat-response objective and its per-sample partials over v.

    Returns (J, partials) with one (n_v,) array per spec sample; entries at
    masked unknowns (pinned fluctuation, G11) are kept and masked by callers.
    """
    picked = _select_samples(curve, spec)
    J = 0.0
    partials = []
    for sample in picked:
        if sample.state is None:
            raise ValueError("objective partials need curve samples with states")
        Ji, dJ_dsig, dJ_dG01 = _sample_partials(spec, sample.stress11, sample.G01)
        J += Ji
        dv = dJ_dsig * effective_stress_gradient(sample.state)
        dv[sample.state.dof_map.iG01] += dJ_dG01
        partials.append(dv)
    return J, partials


# --------------------------------------------------------- shape derivatives ----


def _p1_gradients(mesh) -> np.ndarray:
    """Physical gradients of the linear corner basis, (E, 3, 2)."""
    tri = mesh.triangles
    p0 = mesh.vertices[tri[:, 0]]
    e1 = mesh.vertices[tri[:, 1]] - p0
    e2 = mesh.vertices[tri[:, 2]] - p0
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    Jinv = np.empty((len(tri), 2, 2))
    Jinv[:, 0, 0] = e2[:, 1]
    Jinv[:, 0, 1] = -e2[:, 0]
    Jinv[:, 1, 0] = -e1[:, 1]
    Jinv[:, 1, 1] = e1[:, 0]
    Jinv /= det[:, None, None]
    return np.einsum("kj,eji->eki", _DL1, Jinv)


def _affine_cross_entries(force: np.ndarray, n_v: int, iG00: int, iG01: int,
                          iG11: int) -> sp.coo_matrix:
    """Rows of f_i d2(u_i)/dx_i dG: the rest-position dependence of the
    affine part of the displacement map. force is (K, 2) per vertex."""
    K = len(force)
    idx = np.arange(K)
    rows = np.concatenate([2 * idx, 2 * idx, 2 * idx + 1, 2 * idx + 1])
    cols = np.concatenate([np.full(K, iG00), np.full(K, iG01),
                           np.full(K, iG01), np.full(K, iG11)])
    vals = np.concatenate([force[:, 0], force[:, 1], force[:, 0], force[:, 1]])
    return sp.coo_matrix((vals, (rows, cols)), shape=(2 * K, n_v))


def elastic_shape_term(state: HomogState, mesh=None) -> sp.csr_matrix:
    """d2(W_e)/dX dv as a (2N, n_v) sparse matrix over rest coordinates X.

    Rows follow [x0x, x0y, x1x, ...]. Corner rows collect the geometric terms
    (volume change, basis-gradient change); every node additionally feels the
    rest-position dependence of u = u~ + G x, via the tangent and via the
    G-columns of the chain.
    """
    mesh = state.mesh if mesh is None else mesh
    dm = state.dof_map
    ed = element_data(mesh, dm)
    E, Q = ed.qfac.shape
    F = _deformation_gradients(state, ed)
    _, P, C = _nh_batch(F.reshape(E * Q, 2, 2), state.material, order=2)
    P = P.reshape(E, Q, 2, 2)
    C = C.reshape(E, Q, 2, 2, 2, 2)
    Gu = F.copy()
    Gu[:, :, 0, 0] -= 1.0
    Gu[:, :, 1, 1] -= 1.0
    Lg = _p1_gradients(mesh)

    # nodal force f_(n,i) per element, and the element tangent block
    fe = np.matmul(ed.dNx, (ed.qfac[..., None, None] * P).swapaxes(2, 3)).sum(axis=1)
    Cw = (ed.qfac.reshape(E, Q, 1) * C.reshape(E, Q, 16)).reshape(E, Q, 4, 4)
    He = np.matmul(ed.BmatT, np.matmul(Cw, ed.Bmat)).sum(axis=1)   # (E, 12, 12)

    # rows (m, c) x cols (n, i); all twelve rows feel He G, corner rows add
    # the geometric variation of the force integrand
    G = state.G
    BL = np.einsum("eamj,jc->emca", He.reshape(E, 12, 6, 2), G)
    t1 = np.einsum("ekc,ea->ekca", Lg, fe.reshape(E, 12))
    t2 = -np.einsum("eq,eqijml,eqmc,ekl,eqnj->ekcni", ed.qfac, C, Gu, Lg,
                    ed.dNx, optimize=True).reshape(E, 3, 2, 12)
    t3 = -np.einsum("eq,eqij,ekj,eqnc->ekcni", ed.qfac, P, Lg, ed.dNx,
                    optimize=True).reshape(E, 3, 2, 12)
    BL[:, :3] += t1 + t2 + t3

    S_u = sp.coo_matrix((BL.reshape(E, 144).ravel(), (ed.rows, ed.cols)),
                        shape=(2 * ed.n_nodes, 2 * ed.n_nodes)).tocsr()

    f_nodal = np.zeros((ed.n_nodes, 2))
    np.add.at(f_nodal[:, 0], ed.tri.ravel(), fe[:, :, 0].ravel())
    np.add.at(f_nodal[:, 1], ed.tri.ravel(), fe[:, :, 1].ravel())
    A = _affine_cross_entries(f_nodal, dm.n_v, dm.iG00, dm.iG01, dm.iG11)
    return (S_u @ ed.J_v + A).tocsr()


def contact_shape_term(state: HomogState, tiling: TiledSurface,
                       kappa: float | None = None):
    """Rest-shape derivatives of the contact force.

    Returns (S_bar, S_til): S_bar is d2(W_c)/dX dv over the cell's vertex
    coordinates, (2N, n_v) sparse; S_til is the explicit derivative with
    respect to the cell dimensions (a, b) through the tile shifts, (2, n_v).
    """
    mesh = tiling.mesh
    dm = state.dof_map
    N = mesh.n_vertices
    if kappa is None:
        a, b = mesh.metadata["cell_dims"]
        kappa = 1e3 * state.material.mu * min(a, b)
    u_t = tiled_displacement(state, tiling)
    _, gt, Ht = barrier_energy(tiling, u_t, kappa)
    if not gt.any():
        return sp.csr_matrix((2 * N, dm.n_v)), np.zeros((2, dm.n_v))

    M = tiling.M
    Jt = tiling.chain(dm)
    IG = np.eye(2) + state.G
    S_t = sp.kron(sp.identity(M, format="csr"), sp.csr_matrix(IG.T)) @ (Ht @ Jt)
    S_t = (S_t + _affine_cross_entries(gt.reshape(M, 2), dm.n_v, dm.iG00,
                                       dm.iG01, dm.iG11)).tocsr()

    im = tiling.index_map
    rows_cell = np.empty(2 * M, dtype=int)
    rows_cell[0::2] = 2 * im
    rows_cell[1::2] = 2 * im + 1
    scatter = sp.csr_matrix((np.ones(2 * M), (rows_cell, np.arange(2 * M))),
                            shape=(2 * N, 2 * M))
    S_bar = (scatter @ S_t).tocsr()

    ta = tiling.tags @ mesh.lattice_da.T     # d(tile shift)/da per tiled vertex
    tb = tiling.tags @ mesh.lattice_db.T
    wa = np.empty(2 * M)
    wb = np.empty(2 * M)
    wa[0::2], wa[1::2] = ta[:, 0], ta[:, 1]
    wb[0::2], wb[1::2] = tb[:, 0], tb[:, 1]
    S_til = np.vstack([wa @ S_t, wb @ S_t])
    return S_bar, S_til


def stress_shape_term(state: HomogState):
    """Rest-shape derivative of the averaged stress entry sigma_bar[1,1].

    Returns (rows, dims): rows is (2N,) over vertex coordinates, dims is the
    explicit (d/da, d/db) from the 1/|V| normalization.
    """
    mesh = state.mesh
    ed = element_data(mesh, state.dof_map)
    E, Q = ed.qfac.shape
    F = _deformation_gradients(state, ed)
    _, P, C = _nh_batch(F.reshape(E * Q, 2, 2), state.material, order=2)
    P = P.reshape(E, Q, 2, 2)
    C11 = C.reshape(E, Q, 2, 2, 2, 2)[:, :, 1, 1]
    Gu = F.copy()
    Gu[:, :, 0, 0] -= 1.0
    Gu[:, :, 1, 1] -= 1.0
    Lg = _p1_gradients(mesh)

    corner = np.einsum("eq,eq,ekc->ekc", ed.qfac, P[:, :, 1, 1], Lg)
    corner -= np.einsum("eq,eqml,eqmc,ekl->ekc", ed.qfac, C11, Gu, Lg,
                        optimize=True)
    allnode = np.einsum("eq,eqkl,kc,eqnl->enc", ed.qfac, C11, state.G, ed.dNx,
                        optimize=True)
    acc = np.zeros((ed.n_nodes, 2))
    np.add.at(acc, ed.tri[:, :3], corner)
    np.add.at(acc, ed.tri, allnode)
    vol = mesh.cell_volume
    rows = acc.ravel() / vol

    sig11 = float(np.einsum("eq,eq->", ed.qfac, P[:, :, 1, 1])) / vol
    dims = -sig11 * np.array([
        np.trace(np.linalg.solve(mesh.lattice, mesh.lattice_da)),
        np.trace(np.linalg.solve(mesh.lattice, mesh.lattice_db))])
    return rows, dims


def adjoint_gradient(states, mesh, spec: ObjectiveSpec,
                     settings: SolveSettings | None = None,
                     tiling: TiledSurface | None = None) -> np.ndarray:
    """dJ/dq over the reduced parameters, one adjoint solve per strain sample.

    states must be the converged solutions at spec.samples, in order, computed
    with the same contact settings passed here; pass the forward solve's tiling
    when it was not the default one (e.g. a null tiling).
    """
    if len(states) != len(spec.samples):
        raise ValueError("one converged state per objective sample is required")
    if mesh.n_params == 0:
        raise ValueError("mesh carries no shape velocities")
    settings = settings if settings is not None else SolveSettings()
    material = states[0].material
    tiling, kappa = _contact_setup(mesh, material, settings, tiling)
    dm = states[0].dof_map
    masked = list(dm.pinned_dofs) + [dm.iG11]
    free = np.setdiff1d(np.arange(dm.n_v), masked)
    Vflat = mesh.shape_velocity.reshape(2 * mesh.n_vertices, mesh.n_params)

    dJdq = np.zeros(mesh.n_params)
    for eps, state in zip(spec.samples, states):
        if abs(state.G11 + eps) > 1e-9:
            raise ValueError(f"state does not sit at eps={eps}")
        sigma = effective_stress(state)
        _, dJ_dsig, dJ_dG01 = _sample_partials(spec, -sigma[1, 1], state.G01)
        dJdv = dJ_dsig * effective_stress_gradient(state)
        dJdv[dm.iG01] += dJ_dG01

        _, _, H = total_energy(state, tiling, kappa, order=2)
        Hff = H[free][:, free].tocsr()
        Fchol, beta = _spd_shift(Hff)
        if beta:
            log.warning("adjoint Hessian needed a %.3g shift at eps=%.3g; "
                        "gradient accuracy may be reduced", beta, eps)
        rhs = cvxopt.matrix(-dJdv[free])
        cvxopt.cholmod.solve(Fchol, rhs)
        p = np.zeros(dm.n_v)
        p[free] = np.array(rhs).ravel()

        D = elastic_shape_term(state) @ p
        S_bar, S_til = contact_shape_term(state, tiling, kappa)
        D += S_bar @ p
        rows, dims = stress_shape_term(state)
        D += dJ_dsig * rows
        dJdq += Vflat.T @ D
        dJdq[-2] += S_til[0] @ p + dJ_dsig * dims[0]
        dJdq[-1] += S_til[1] @ p + dJ_dsig * dims[1]
    return dJdq


# ----------------------------------------------------------------- optimizer ----


_FORWARD_ERRORS = (SolverError, MeshError, InadmissibleState, ContactError)


def _freeze_contact(settings: SolveSettings | None, q0: np.ndarray,
                    material: Material) -> SolveSettings:
    """Pin dhat/kappa at the initial dimensions so the energy's only shape
    dependence is geometric (the adjoint assumes fixed contact parameters)."""
    settings = settings if settings is not None else SolveSettings()
    scale = min(float(q0[-2]), float(q0[-1]))
    return replace(settings,
                   dhat=settings.dhat if settings.dhat is not None else 1e-3 * scale,
                   kappa=settings.kappa if settings.kappa is not None
                   else 1e3 * material.mu * scale)


def _inflate_connected(topology: CellTopology, q: np.ndarray,
                       resolution: int):
    """Inflate, rejecting geometries with floating pieces (their stiffness is
    singular and the homogenized response meaningless)."""
    params = ShapeParams.from_vector(q, topology.n_orbits)
    mesh = inflate(topology, params, resolution)
    if mesh.metadata.get("disconnected"):
        raise MeshError(f"{mesh.metadata['n_components']} disconnected "
                        "components in the inflated cell")
    return mesh


def _forward(topology: CellTopology, q: np.ndarray, spec: ObjectiveSpec,
             material: Material, resolution: int, settings: SolveSettings,
             tile_n: int = 1, contact: bool = True):
    """One full evaluation: inflate, solve the curve, objective, gradient."""
    mesh = _inflate_connected(topology, q, resolution)
    if tile_n > 1:
        mesh = replicate(mesh, tile_n, tile_n)
    tiling = None if contact else null_tiling(mesh)
    curve = solve_curve(mesh, material, default_schedule(spec.samples),
                        settings, tiling)
    J, _ = objective(curve, spec)
    states = [s.state for s in _select_samples(curve, spec)]
    g = adjoint_gradient(states, mesh, spec, settings, tiling=tiling)
    return J, g, curve


def _two_loop(g, mem_s, mem_y):
    """L-BFGS two-loop recursion; returns the quasi-Newton step -H g."""
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(mem_s), reversed(mem_y)):
        a = np.dot(s, q) / np.dot(y, s)
        alphas.append(a)
        q -= a * y
    if mem_s:
        q *= np.dot(mem_s[-1], mem_y[-1]) / np.dot(mem_y[-1], mem_y[-1])
    for (s, y), a in zip(zip(mem_s, mem_y), reversed(alphas)):
        b = np.dot(y, q) / np.dot(y, s)
        q += (a - b) * s
    return -q


def optimize(topology: CellTopology, q0: np.ndarray, spec: ObjectiveSpec,
             bounds=None, *, material: Material | None = None,
             resolution: int = 48, settings: SolveSettings | None = None,
             max_iter: int = 200, history: int = 8, max_halvings: int = 20,
             verify_tiled: bool = False, tile_n: int = 1,
             contact: bool = True) -> OptResult:
    """Projected L-BFGS over the reduced parameters against box bounds.

    Line-search trials whose forward solve fails are rejected like uphill
    steps. With verify_tiled, an accepted result whose 2x2-tile response
    deviates more than 10 percent from the single-cell curve is re-optimized
    with the supercell as the forward model. contact=False drops the barrier
    entirely (ablation studies): the forward model then ignores self-contact.
    """
    material = material if material is not None else DEFAULT_MATERIAL
    q0 = np.asarray(q0, float)
    lo, hi = bounds if bounds is not None else default_bounds(topology)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    if not (len(lo) == len(hi) == len(q0)):
        raise ValueError("bounds do not match the parameter vector")
    settings = _freeze_contact(settings, q0, material)

    q = np.clip(q0, lo, hi)
    if not np.array_equal(q, q0):
        log.info("initial parameters clipped to bounds")
    J, g, curve = _forward(topology, q, spec, material, resolution, settings,
                           tile_n, contact)
    trace = [J]
    gtol = 1e-6 * max(1.0, abs(J))
    jtol = 1e-8
    span = float(np.max(hi - lo))
    mem_s: list[np.ndarray] = []
    mem_y: list[np.ndarray] = []
    converged = False
    message = "iteration limit"
    n_iter = 0

    def proj_grad_norm(q, g):
        return float(np.linalg.norm(q - np.clip(q - g, lo, hi)))

    for n_iter in range(1, max_iter + 1):
        pg = proj_grad_norm(q, g)
        if pg <= gtol or J <= jtol:
            converged = True
            message = "gradient below tolerance" if pg <= gtol else "objective below tolerance"
            n_iter -= 1
            break

        accepted = False
        for attempt in range(2):   # quasi-Newton direction, then steepest descent
            if attempt == 0 and mem_s:
                d = _two_loop(g, mem_s, mem_y)
            else:
                d = -g
                dmax = np.max(np.abs(d))
                if dmax > 0:
                    d *= min(1.0, 0.02 * span / dmax)
            alpha = 1.0
            for _ in range(max_halvings):
                qt = np.clip(q + alpha * d, lo, hi)
                step = qt - q
                if np.max(np.abs(step)) < 1e-14:
                    break
                slope = float(np.dot(g, step))
                if slope >= 0:
                    alpha *= 0.5
                    continue
                try:
                    Jt, gt, curvet = _forward(topology, qt, spec, material,
                                              resolution, settings, tile_n,
                                              contact)
                except _FORWARD_ERRORS as exc:
                    log.debug("trial step rejected: %s", exc)
                    alpha *= 0.5
                    continue
                if Jt <= J + 1e-4 * slope:
                    accepted = True
                    break
                alpha *= 0.5
            if accepted:
                break
            if attempt == 0 and mem_s:
                log.info("quasi-Newton direction failed its line search; "
                         "falling back to steepest descent")
                mem_s.clear()
                mem_y.clear()
            elif not mem_s:
                break   # steepest descent already tried
        if not accepted:
            message = "line search failed"
            break

        s_vec = qt - q
        y_vec = gt - g
        if np.dot(s_vec, y_vec) > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            mem_s.append(s_vec)
            mem_y.append(y_vec)
            if len(mem_s) > history:
                mem_s.pop(0)
                mem_y.pop(0)
        q, J, g, curve = qt, Jt, gt, curvet
        trace.append(J)

    devs = np.array([abs(s.stress11 / spec.sigma_target - 1.0)
                     for s in _select_samples(curve, spec)])
    result = OptResult(q=q, J_trace=trace, deviations=devs, accepted=False,
                       eps_max=spec.eps_max, n_iter=n_iter, converged=converged,
                       grad_norm=proj_grad_norm(q, g), message=message)

    if verify_tiled and tile_n == 1:
        dev2 = _tiled_deviation(topology, q, spec, material, resolution, settings)
        if dev2 > 0.1:
            log.warning("2x2 response deviates %.1f%% from the single cell; "
                        "re-optimizing on the supercell", 100 * dev2)
            return optimize(topology, q, spec, (lo, hi), material=material,
                            resolution=resolution, settings=settings,
                            max_iter=max_iter, history=history,
                            max_halvings=max_halvings, tile_n=2,
                            contact=contact)
    return result


def _tiled_deviation(topology, q, spec, material, resolution, settings) -> float:
    """Max relative gap between the 2x2-tile and single-cell stress curves."""
    mesh = _inflate_connected(topology, q, resolution)
    schedule = default_schedule(spec.samples)
    c1 = solve_curve(mesh, material, schedule, settings)
    c2 = solve_curve(replicate(mesh, 2, 2), material, schedule, settings)
    s1 = np.array([s.stress11 for s in _select_samples(c1, spec)])
    s2 = np.array([s.stress11 for s in _select_samples(c2, spec)])
    return float(np.max(np.abs(s2 / s1 - 1.0)))


# ----------------------------------------------------- strain-range extension ----


def dense_verify(topology: CellTopology, q: np.ndarray, spec: ObjectiveSpec, *,
                 material: Material | None = None, resolution: int = 48,
                 settings: SolveSettings | None = None, contact: bool = True):
    """Dense 1 percent sweep of [0.1, eps_max]; returns (max deviation, curve)."""
    material = material if material is not None else DEFAULT_MATERIAL
    settings = _freeze_contact(settings, q, material)
    mesh = _inflate_connected(topology, q, resolution)
    dense = np.round(np.arange(0.1, spec.eps_max + 1e-9, 0.01), 10)
    curve = solve_curve(mesh, material, default_schedule(dense), settings,
                        None if contact else null_tiling(mesh))
    picked = curve.strains >= 0.1 - 1e-12
    dev = np.abs(curve.stress11[picked] / spec.sigma_target - 1.0)
    return float(dev.max()), curve


def extend_range(topology: CellTopology, q: np.ndarray, spec: ObjectiveSpec, *,
                 material: Material | None = None, resolution: int = 48,
                 settings: SolveSettings | None = None, eps_start: float = 0.3,
                 eps_stop: float = 0.7, eps_step: float = 0.1,
                 n_samples: int = 5, **opt_kwargs) -> list[OptResult]:
    """Optimize over growing strain ranges until dense verification rejects.

    Each accepted stage warm-starts the next from its parameters; the first
    rejection (deviation above 10 percent on the 1 percent sweep) stops the
    loop.
    """
    material = material if material is not None else DEFAULT_MATERIAL
    q = np.asarray(q, float)
    results: list[OptResult] = []
    eps = eps_start
    while eps <= eps_stop + 1e-9:
        stage = ObjectiveSpec(spec.sigma_target,
                              tuple(np.round(np.linspace(0.1, eps, n_samples), 10)),
                              shear_weight=spec.shear_weight,
                              shear_threshold=spec.shear_threshold)
        try:
            res = optimize(topology, q, stage, material=material,
                           resolution=resolution, settings=settings, **opt_kwargs)
        except _FORWARD_ERRORS as exc:
            log.warning("optimization at eps_max=%.2f failed: %s", eps, exc)
            results.append(OptResult(q=q.copy(), J_trace=[], deviations=np.array([]),
                                     accepted=False, eps_max=eps, n_iter=0,
                                     converged=False, grad_norm=float("nan"),
                                     message=f"forward solve failed: {exc}"))
            break
        try:
            max_dev, _ = dense_verify(topology, res.q, stage, material=material,
                                      resolution=resolution, settings=settings)
        except _FORWARD_ERRORS as exc:
            log.warning("dense verification at eps_max=%.2f failed: %s", eps, exc)
            res = replace(res, dense_max_dev=float("inf"),
                          message=f"dense verification failed: {exc}")
            results.append(res)
            break
        res = replace(res, dense_max_dev=max_dev, accepted=max_dev <= 0.1)
        results.append(res)
        if not res.accepted:
            break
        q = res.q
        eps = round(eps + eps_step, 10)
    return results
