"""Neo-Hookean finite elements on the periodic quadratic mesh.

Plane strain, with the Lamé parameters used directly in the 2D energy

    w(F) = (mu/2)(tr(F Fᵀ) - 2 - 2 log det F) + (lambda/2) log² det F.

Displacements are quadratic (6-node triangles, straight edges, affine
geometry); integrals use a 6-point degree-4 rule. Energy derivatives are
assembled per node and condensed onto the homogenization unknowns
v = [fluctuations; G00, G01, G11] through a sparse chain matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

# 6-point degree-4 triangle rule; weights sum to one, integral = area * sum(w f)
_QA1, _QW1 = 0.445948490915965, 0.223381589678011
_QA2, _QW2 = 0.091576213509771, 0.109951743655322
QUAD_BARY = np.array([
    [1 - 2 * _QA1, _QA1, _QA1],
    [_QA1, 1 - 2 * _QA1, _QA1],
    [_QA1, _QA1, 1 - 2 * _QA1],
    [1 - 2 * _QA2, _QA2, _QA2],
    [_QA2, 1 - 2 * _QA2, _QA2],
    [_QA2, _QA2, 1 - 2 * _QA2],
])
QUAD_W = np.array([_QW1, _QW1, _QW1, _QW2, _QW2, _QW2])


class InadmissibleState(RuntimeError):
    """Deformation gradient lost positive determinant somewhere."""


@dataclass(frozen=True)
class Material:
    lam: float   # first Lamé parameter, Pa
    mu: float    # shear modulus, Pa

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


def plane_strain_uniaxial_modulus(material: Material) -> float:
    """Small-strain stiffness of uniaxial stress with free lateral strain."""
    lam, mu = material.lam, material.mu
    return 4 * mu * (lam + mu) / (lam + 2 * mu)


def _nh_batch(F: np.ndarray, material: Material, order: int = 2):
    """Energy density w, stress P = dw/dF, tangent C = d²w/dF² for (m,2,2) F."""
    lam, mu = material.lam, material.mu
    J = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    if np.any(J <= 0):
        raise InadmissibleState("det F <= 0 at a quadrature point")
    logJ = np.log(J)
    I1 = np.einsum("mij,mij->m", F, F)
    w = 0.5 * mu * (I1 - 2.0 - 2.0 * logJ) + 0.5 * lam * logJ ** 2
    if order == 0:
        return w, None, None
    Finv = np.empty_like(F)
    Finv[:, 0, 0] = F[:, 1, 1]
    Finv[:, 0, 1] = -F[:, 0, 1]
    Finv[:, 1, 0] = -F[:, 1, 0]
    Finv[:, 1, 1] = F[:, 0, 0]
    Finv /= J[:, None, None]
    FinvT = np.swapaxes(Finv, 1, 2)
    P = mu * (F - FinvT) + lam * logJ[:, None, None] * FinvT
    if order == 1:
        return w, P, None
    eye = np.eye(2)
    # C_ijkl = mu d_ik d_jl + (mu - lam logJ) Finv_jk Finv_li + lam Finv_ji Finv_lk
    C = (mu * np.einsum("ik,jl->ijkl", eye, eye)[None]
         + (mu - lam * logJ)[:, None, None, None, None]
         * np.einsum("mjk,mli->mijkl", Finv, Finv)
         + lam * np.einsum("mji,mlk->mijkl", Finv, Finv))
    return w, P, C


def neo_hookean(F: np.ndarray, material: Material):
    """Pointwise energy density, first and second derivatives at one F."""
    w, P, C = _nh_batch(np.asarray(F, float)[None], material)
    return float(w[0]), P[0], C[0]


# ------------------------------------------------------------- DOF map ----


@dataclass(frozen=True)
class PeriodicDofMap:
    """Aliases slave nodes onto masters and numbers the fluctuation DOFs.

    The rigid-translation null space is handled by pinning one node's
    fluctuation (solvers mask those two DOFs and recenter the mean after each
    accepted step, so converged fluctuations are mean-zero).
    """

    fluct_index: np.ndarray   # (N,) fluctuation slot of each node's master
    n_free: int               # 2 * number of independent nodes
    pin_node: int             # independent node whose fluctuation is pinned
    pinned_mean: bool = True

    @property
    def n_v(self) -> int:
        return self.n_free + 3

    @property
    def iG00(self) -> int:
        return self.n_free

    @property
    def iG01(self) -> int:
        return self.n_free + 1

    @property
    def iG11(self) -> int:
        return self.n_free + 2

    @property
    def pinned_dofs(self) -> tuple[int, int]:
        k = self.fluct_index[self.pin_node]
        return (2 * k, 2 * k + 1)


def build_dof_map(mesh) -> PeriodicDofMap:
    master = mesh.master
    if not np.array_equal(master[master], master):
        raise ValueError("inconsistent pairing: a slave's master is itself a slave")
    independent = np.flatnonzero(master == np.arange(len(master)))
    slot = np.full(len(master), -1, dtype=int)
    slot[independent] = np.arange(len(independent))
    fluct_index = slot[master]
    return PeriodicDofMap(fluct_index=fluct_index, n_free=2 * len(independent),
                          pin_node=int(independent[0]))


# ---------------------------------------------------------------- state ----


@dataclass(frozen=True)
class HomogState:
    mesh: object
    material: Material
    dof_map: PeriodicDofMap
    fluct: np.ndarray    # (n_free,) interleaved [u0x, u0y, u1x, u1y, ...]
    G00: float
    G01: float
    G11: float

    @classmethod
    def rest(cls, mesh, material: Material, dof_map: PeriodicDofMap | None = None) -> "HomogState":
        dm = dof_map if dof_map is not None else build_dof_map(mesh)
        return cls(mesh, material, dm, np.zeros(dm.n_free), 0.0, 0.0, 0.0)

    @property
    def G(self) -> np.ndarray:
        return np.array([[self.G00, self.G01], [self.G01, self.G11]])

    @property
    def v(self) -> np.ndarray:
        return np.concatenate([self.fluct, [self.G00, self.G01, self.G11]])

    def with_v(self, v: np.ndarray) -> "HomogState":
        v = np.asarray(v, float)
        return replace(self, fluct=v[:-3].copy(), G00=float(v[-3]),
                       G01=float(v[-2]), G11=float(v[-1]))


def reconstruct(state: HomogState) -> np.ndarray:
    """Nodal displacements u_i = u~_{master(i)} + G x_i (quadratic nodes too)."""
    fl = state.fluct.reshape(-1, 2)[state.dof_map.fluct_index]
    return fl + state.mesh.vertices @ state.G.T


# ------------------------------------------------------ element pipeline ----


class _ElementData:
    """Per-mesh quantities reused across every energy/stress evaluation."""

    def __init__(self, mesh, dof_map: PeriodicDofMap):
        tri = mesh.triangles
        p0 = mesh.vertices[tri[:, 0]]
        e1 = mesh.vertices[tri[:, 1]] - p0
        e2 = mesh.vertices[tri[:, 2]] - p0
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(det <= 0):
            raise ValueError("mesh has non-positive element areas")
        area = 0.5 * det
        Jinv = np.empty((len(tri), 2, 2))
        Jinv[:, 0, 0] = e2[:, 1]
        Jinv[:, 0, 1] = -e2[:, 0]
        Jinv[:, 1, 0] = -e1[:, 1]
        Jinv[:, 1, 1] = e1[:, 0]
        Jinv /= det[:, None, None]

        # quadratic shape gradients in reference coordinates at the rule points
        L = QUAD_BARY
        dL = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])  # dL_k/d(xi, eta)
        dN = np.empty((len(L), 6, 2))
        for q, (l0, l1, l2) in enumerate(L):
            lam_ = (l0, l1, l2)
            for k in range(3):
                dN[q, k] = (4 * lam_[k] - 1) * dL[k]
            dN[q, 3] = 4 * (lam_[0] * dL[1] + lam_[1] * dL[0])
            dN[q, 4] = 4 * (lam_[1] * dL[2] + lam_[2] * dL[1])
            dN[q, 5] = 4 * (lam_[2] * dL[0] + lam_[0] * dL[2])
        # physical gradients: dNx[e,q,n,i] = dN[q,n,k] Jinv[e,k,i]
        self.dNx = np.einsum("qnk,eki->eqni", dN, Jinv)
        self.qfac = area[:, None] * QUAD_W[None, :]
        self.tri = tri
        self.n_nodes = mesh.n_vertices
        # dF_ij/du_(n,c) as a (E, Q, 4, 12) strain-displacement operator, so the
        # tangent assembly runs as batched matrix products instead of an 8-index
        # contraction
        E, Q = self.qfac.shape
        B = np.zeros((E, Q, 4, 12))
        for i in range(2):
            for j in range(2):
                for n in range(6):
                    B[:, :, 2 * i + j, 2 * n + i] = self.dNx[:, :, n, j]
        self.Bmat = B
        self.BmatT = np.ascontiguousarray(B.swapaxes(2, 3))

        # nodal scatter pattern for 12x12 element blocks
        edof = np.empty((len(tri), 12), dtype=int)
        edof[:, 0::2] = 2 * tri
        edof[:, 1::2] = 2 * tri + 1
        self.rows = np.repeat(edof, 12, axis=1).ravel()
        self.cols = np.tile(edof, (1, 12)).ravel()
        self.edof = edof

        # chain matrix d(u_nodal)/d(v): J_v (2N x n_v)
        x = mesh.vertices
        N = mesh.n_vertices
        r, c, vals = [], [], []
        fl = dof_map.fluct_index
        for i in range(N):
            r += [2 * i, 2 * i, 2 * i, 2 * i + 1, 2 * i + 1, 2 * i + 1]
            c += [2 * fl[i], dof_map.iG00, dof_map.iG01,
                  2 * fl[i] + 1, dof_map.iG01, dof_map.iG11]
            vals += [1.0, x[i, 0], x[i, 1], 1.0, x[i, 0], x[i, 1]]
        self.J_v = sp.csr_matrix((vals, (r, c)), shape=(2 * N, dof_map.n_v))


def element_data(mesh, dof_map: PeriodicDofMap) -> _ElementData:
    cache = getattr(mesh, "_fem_cache", None)
    if cache is None or cache[0] is not dof_map:
        cache = (dof_map, _ElementData(mesh, dof_map))
        mesh._fem_cache = cache
    return cache[1]


def _deformation_gradients(state: HomogState, ed: _ElementData) -> np.ndarray:
    u = reconstruct(state)
    ue = u[ed.tri]                           # (E, 6, 2)
    # F_ij = sum_n u_ni dNx_nj
    F = np.matmul(ue.swapaxes(1, 2)[:, None], ed.dNx)
    F[:, :, 0, 0] += 1.0
    F[:, :, 1, 1] += 1.0
    return F


def elastic_energy(state: HomogState, order: int = 2):
    """Total strain energy with gradient and sparse Hessian over v.

    order 0 returns (W, None, None); order 1 skips the Hessian.
    """
    ed = element_data(state.mesh, state.dof_map)
    E, Q = ed.qfac.shape
    F = _deformation_gradients(state, ed).reshape(E * Q, 2, 2)
    w, P, C = _nh_batch(F, state.material, order=order)
    W = float(np.dot(ed.qfac.ravel(), w))
    if order == 0:
        return W, None, None
    P = P.reshape(E, Q, 2, 2)
    # f_(n,i) = sum_q w P_ij dNx_nj
    fe = np.matmul(ed.dNx, (ed.qfac[..., None, None] * P).swapaxes(2, 3)).sum(axis=1)
    f_nodal = np.zeros(2 * ed.n_nodes)
    np.add.at(f_nodal, 2 * ed.tri, fe[:, :, 0])
    np.add.at(f_nodal, 2 * ed.tri + 1, fe[:, :, 1])
    g_v = ed.J_v.T @ f_nodal
    if order == 1:
        return W, g_v, None
    Cw = (ed.qfac.reshape(E, Q, 1) * C.reshape(E, Q, 16)).reshape(E, Q, 4, 4)
    He = np.matmul(ed.BmatT, np.matmul(Cw, ed.Bmat)).sum(axis=1)
    H_nodal = sp.coo_matrix((He.reshape(E, 144).ravel(), (ed.rows, ed.cols)),
                            shape=(2 * ed.n_nodes, 2 * ed.n_nodes)).tocsr()
    H_v = (ed.J_v.T @ H_nodal @ ed.J_v).tocsr()
    H_v = 0.5 * (H_v + H_v.T)
    return W, g_v, H_v


def effective_stress(state: HomogState) -> np.ndarray:
    """Volume average of the first Piola stress over the cell box, 2x2."""
    ed = element_data(state.mesh, state.dof_map)
    E, Q = ed.qfac.shape
    F = _deformation_gradients(state, ed).reshape(E * Q, 2, 2)
    _, P, _ = _nh_batch(F, state.material, order=1)
    P = P.reshape(E, Q, 2, 2)
    return np.einsum("eq,eqij->ij", ed.qfac, P) / state.mesh.cell_volume


def effective_stress_gradient(state: HomogState) -> np.ndarray:
    """d(sigma_bar[1,1])/dv, the row needed by stress-tracking objectives."""
    ed = element_data(state.mesh, state.dof_map)
    E, Q = ed.qfac.shape
    F = _deformation_gradients(state, ed).reshape(E * Q, 2, 2)
    _, _, C = _nh_batch(F, state.material, order=2)
    C = C.reshape(E, Q, 2, 2, 2, 2)
    ge = np.einsum("eq,eqcl,eqnl->enc", ed.qfac, C[:, :, 1, 1], ed.dNx,
                   optimize=True)
    g_nodal = np.zeros(2 * ed.n_nodes)
    np.add.at(g_nodal, 2 * ed.tri, ge[:, :, 0])
    np.add.at(g_nodal, 2 * ed.tri + 1, ge[:, :, 1])
    return (ed.J_v.T @ g_nodal) / state.mesh.cell_volume


def dump_element_energies(state: HomogState, path) -> None:
    """Per-element strain energies as CSV (diagnostics)."""
    ed = element_data(state.mesh, state.dof_map)
    E, Q = ed.qfac.shape
    F = _deformation_gradients(state, ed).reshape(E * Q, 2, 2)
    w, _, _ = _nh_batch(F, state.material, order=0)
    we = (ed.qfac * w.reshape(E, Q)).sum(axis=1)
    with open(path, "w") as fh:
        fh.write("element,energy\n")
        for e, val in enumerate(we):
            fh.write(f"{e},{val!r}\n")
