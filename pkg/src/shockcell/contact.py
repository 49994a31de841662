"""Periodic self-contact through a 2x2 tiling of the cell's surface mesh.

The cell surface is replicated at offsets {0,1}² of the lattice; contact is a
smooth barrier over point-edge squared distances on the deformed tiled
surface. A pair is counted once per interaction class by keeping only pairs
whose componentwise min tag is (0,0), which makes the energy the per-cell
contact energy of the infinite tiling. Derivatives are exact (no spectral
projection); the solver's SPD fallback handles indefiniteness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .fem import PeriodicDofMap


class ContactError(RuntimeError):
    pass


@dataclass
class TiledSurface:
    x: np.ndarray          # (M, 2) tiled rest positions
    index_map: np.ndarray  # (M,) tiled vertex -> cell vertex
    tags: np.ndarray       # (M, 2) int in {0,1}
    edges: np.ndarray      # (S, 2) into the tiled vertex array
    dhat: float
    mesh: object
    phys: np.ndarray = None  # (M,) id of the underlying infinite-tiling vertex
    _chain_cache: dict = field(default_factory=dict, repr=False)

    @property
    def M(self) -> int:
        return len(self.x)

    def chain(self, dof_map: PeriodicDofMap) -> sp.csr_matrix:
        """d(u_tiled)/d(v): fluctuation scatter by index map, G-columns by x_t."""
        key = id(dof_map)
        J = self._chain_cache.get(key)
        if J is None:
            fl = dof_map.fluct_index[self.index_map]
            r, c, vals = [], [], []
            for j in range(self.M):
                xj, yj = self.x[j]
                r += [2 * j, 2 * j, 2 * j, 2 * j + 1, 2 * j + 1, 2 * j + 1]
                c += [2 * fl[j], dof_map.iG00, dof_map.iG01,
                      2 * fl[j] + 1, dof_map.iG01, dof_map.iG11]
                vals += [1.0, xj, yj, 1.0, xj, yj]
            J = sp.csr_matrix((vals, (r, c)), shape=(2 * self.M, dof_map.n_v))
            self._chain_cache[key] = J
        return J


def build_tiling(mesh, dims=None, dhat: float | None = None) -> TiledSurface:
    """Replicate the cell's contact surface at offsets (0,0),(1,0),(0,1),(1,1)."""
    if dims is None:
        dims = mesh.metadata["cell_dims"]
    if dhat is None:
        dhat = 1e-3 * min(dims)
    if dhat <= 0:
        raise ValueError("dhat must be positive")
    bverts = np.unique(mesh.boundary_edges.ravel())
    local = np.full(mesh.n_vertices, -1, dtype=int)
    local[bverts] = np.arange(len(bverts))
    B = len(bverts)
    xs, imap, tags, edges = [], [], [], []
    for k, (ax, by) in enumerate(((0, 0), (1, 0), (0, 1), (1, 1))):
        off = mesh.lattice @ np.array([ax, by], float)
        xs.append(mesh.vertices[bverts] + off)
        imap.append(bverts)
        tags.append(np.tile([ax, by], (B, 1)))
        edges.append(local[mesh.boundary_edges] + k * B)
    index_map = np.concatenate(imap)
    tags = np.vstack(tags).astype(int)
    # Tiled copies geometrically duplicate seam-crossing vertices: the slave at
    # x=a inside copy (0,0) coincides with copy (1,0)'s image of its master.
    # Identify each tiled vertex by (master, total offset) so those duplicates
    # are recognized as the same point of the infinite tiling.
    total = tags + mesh.offset_tags[index_map]
    phys = mesh.master[index_map] * 16 + (total[:, 0] * 4 + total[:, 1])
    return TiledSurface(
        x=np.vstack(xs), index_map=index_map,
        tags=tags, edges=np.vstack(edges).astype(int),
        dhat=float(dhat), mesh=mesh, phys=phys)


def null_tiling(mesh) -> TiledSurface:
    """A tiling with no surface at all: barrier, collision stepping, and
    intersection checks become no-ops, leaving the bare elastic problem in
    which the material is free to pass through itself."""
    return TiledSurface(x=np.zeros((0, 2)), index_map=np.zeros(0, int),
                        tags=np.zeros((0, 2), int), edges=np.zeros((0, 2), int),
                        dhat=1.0, mesh=mesh, phys=np.zeros(0, int))


def tiled_displacement(state, tiling: TiledSurface) -> np.ndarray:
    """u_t[j] = u~_{I(j)} + G x_t[j]."""
    if tiling.mesh is not state.mesh:
        raise ValueError("tiling was built from a different mesh than the state")
    fl = state.fluct.reshape(-1, 2)[state.dof_map.fluct_index[tiling.index_map]]
    return fl + tiling.x @ state.G.T


# ------------------------------------------------------- distance kernel ----


def _point_edge_candidates(y, edges, pts, radius):
    """Broad-phase (point, edge) index pairs within `radius` by edge midpoints."""
    if len(edges) == 0 or len(pts) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    seg = y[edges]
    mids = seg.mean(axis=1)
    half = 0.5 * np.linalg.norm(seg[:, 1] - seg[:, 0], axis=1)
    tree = cKDTree(mids)
    lists = tree.query_ball_point(y[pts], radius + half.max())
    counts = np.fromiter((len(l) for l in lists), int, count=len(lists))
    if counts.sum() == 0:
        return np.zeros(0, int), np.zeros(0, int)
    pi = np.repeat(np.arange(len(lists)), counts)
    ei = np.concatenate([np.asarray(l, int) for l in lists if len(l)])
    return pts[pi], ei


def _squared_distance(y, p_idx, edges_arr):
    """Squared point-edge distances with branch data for derivatives."""
    p = y[p_idx]
    e0 = y[edges_arr[:, 0]]
    e1 = y[edges_arr[:, 1]]
    r = p - e0
    e = e1 - e0
    q2 = np.einsum("ij,ij->i", e, e)
    w = np.einsum("ij,ij->i", r, e)
    t = np.clip(w / q2, 0.0, 1.0)
    diff = r - t[:, None] * e
    s = np.einsum("ij,ij->i", diff, diff)
    return s, r, e, q2, w, t


def _pair_derivatives(r, e, q2, w, t):
    """Gradient (n,6) and Hessian (n,6,6) of the squared distance in (p,e0,e1)."""
    n = len(r)
    g_r = np.empty((n, 2))
    g_e = np.empty((n, 2))
    H_rr = np.empty((n, 2, 2))
    H_re = np.empty((n, 2, 2))
    H_ee = np.empty((n, 2, 2))
    I2 = np.eye(2)
    mid = (t > 0.0) & (t < 1.0)
    lo = t <= 0.0
    hi = t >= 1.0
    if mid.any():
        rm, em, q2m, wm = r[mid], e[mid], q2[mid], w[mid]
        g_r[mid] = 2 * rm - 2 * (wm / q2m)[:, None] * em
        g_e[mid] = -2 * (wm / q2m)[:, None] * rm + 2 * (wm ** 2 / q2m ** 2)[:, None] * em
        ee = np.einsum("ni,nj->nij", em, em)
        er = np.einsum("ni,nj->nij", em, rm)
        rr = np.einsum("ni,nj->nij", rm, rm)
        re = np.einsum("ni,nj->nij", rm, em)
        H_rr[mid] = 2 * I2 - 2 * ee / q2m[:, None, None]
        H_re[mid] = (-2 * er / q2m[:, None, None]
                     + 4 * (wm / q2m ** 2)[:, None, None] * ee
                     - 2 * (wm / q2m)[:, None, None] * I2)
        H_ee[mid] = (-2 * rr / q2m[:, None, None]
                     + 4 * (wm / q2m ** 2)[:, None, None] * (re + er)
                     - 8 * (wm ** 2 / q2m ** 3)[:, None, None] * ee
                     + 2 * (wm ** 2 / q2m ** 2)[:, None, None] * I2)
    if lo.any():  # nearest to e0: s = |r|^2
        g_r[lo] = 2 * r[lo]
        g_e[lo] = 0.0
        H_rr[lo] = 2 * I2
        H_re[lo] = 0.0
        H_ee[lo] = 0.0
    if hi.any():  # nearest to e1: s = |r - e|^2
        d = r[hi] - e[hi]
        g_r[hi] = 2 * d
        g_e[hi] = -2 * d
        H_rr[hi] = 2 * I2
        H_re[hi] = -2 * I2
        H_ee[hi] = 2 * I2
    # chain (r, e) -> (p, e0, e1): r = p - e0, e = e1 - e0
    g = np.empty((n, 6))
    g[:, 0:2] = g_r
    g[:, 2:4] = -g_r - g_e
    g[:, 4:6] = g_e
    H = np.empty((n, 6, 6))
    H_er = np.swapaxes(H_re, 1, 2)
    H[:, 0:2, 0:2] = H_rr
    H[:, 0:2, 2:4] = -H_rr - H_re
    H[:, 0:2, 4:6] = H_re
    H[:, 2:4, 2:4] = H_rr + H_re + H_er + H_ee
    H[:, 2:4, 4:6] = -H_re - H_ee
    H[:, 4:6, 4:6] = H_ee
    H[:, 2:4, 0:2] = np.swapaxes(H[:, 0:2, 2:4], 1, 2)
    H[:, 4:6, 0:2] = np.swapaxes(H[:, 0:2, 4:6], 1, 2)
    H[:, 4:6, 2:4] = np.swapaxes(H[:, 2:4, 4:6], 1, 2)
    return g, H


def _barrier_terms(d, dhat):
    """b, b', b'' of the log barrier b(d) = -(d - dhat)^2 log(d / dhat)."""
    ln = np.log(d / dhat)
    dd = d - dhat
    b = -dd ** 2 * ln
    bp = -2 * dd * ln - dd ** 2 / d
    bpp = -2 * ln - 4 * dd / d + dd ** 2 / d ** 2
    return b, bp, bpp


def _active_pairs(tiling: TiledSurface, u_t: np.ndarray):
    """(point index, edge array) of pairs within dhat, deduplicated by tags."""
    y = tiling.x + u_t
    pts = np.arange(tiling.M)
    pi, ei = _point_edge_candidates(y, tiling.edges, pts, tiling.dhat)
    if len(pi) == 0:
        return y, pi, np.zeros((0, 2), int)
    ev = tiling.edges[ei]
    ph = tiling.phys
    keep = (ph[pi] != ph[ev[:, 0]]) & (ph[pi] != ph[ev[:, 1]])
    # one representative per interaction class of the infinite tiling
    tag_min = np.minimum(tiling.tags[pi], tiling.tags[ev[:, 0]])
    keep &= (tag_min == 0).all(axis=1)
    pi, ev = pi[keep], ev[keep]
    s, *_ = _squared_distance(y, pi, ev)
    act = s < tiling.dhat ** 2
    return y, pi[act], ev[act]


def barrier_energy(tiling: TiledSurface, u_t: np.ndarray, kappa: float = 1.0):
    """Contact energy over the tiled surface with gradient/Hessian over u_t.

    Returns (W_c, gradient (2M,), Hessian csr (2M, 2M)). Raises on a touching
    or crossed configuration.
    """
    M = tiling.M
    y, pi, ev = _active_pairs(tiling, u_t)
    grad = np.zeros(2 * M)
    if len(pi) == 0:
        return 0.0, grad, sp.csr_matrix((2 * M, 2 * M))
    s, r, e, q2, w, t = _squared_distance(y, pi, ev)
    d = np.sqrt(s)
    if np.any(d < 1e-14 * tiling.dhat):
        raise ContactError("touching or intersecting configuration")
    _check_tiling_sufficiency(tiling, pi, ev)
    b, bp, bpp = _barrier_terms(d, tiling.dhat)
    W = kappa * float(b.sum())
    dBds = bp / (2 * d)
    d2Bds2 = (bpp - bp / d) / (4 * s)
    gs, Hs = _pair_derivatives(r, e, q2, w, t)
    gpair = kappa * dBds[:, None] * gs
    Hpair = kappa * (d2Bds2[:, None, None] * np.einsum("ni,nj->nij", gs, gs)
                     + dBds[:, None, None] * Hs)
    cols = np.empty((len(pi), 6), dtype=int)
    cols[:, 0] = 2 * pi
    cols[:, 1] = 2 * pi + 1
    cols[:, 2] = 2 * ev[:, 0]
    cols[:, 3] = 2 * ev[:, 0] + 1
    cols[:, 4] = 2 * ev[:, 1]
    cols[:, 5] = 2 * ev[:, 1] + 1
    np.add.at(grad, cols.ravel(), gpair.ravel())
    rows6 = np.repeat(cols, 6, axis=1).ravel()
    cols6 = np.tile(cols, (1, 6)).ravel()
    H = sp.coo_matrix((Hpair.ravel(), (rows6, cols6)), shape=(2 * M, 2 * M)).tocsr()
    return W, grad, H


def _check_tiling_sufficiency(tiling, pi, ev):
    """Contact between diagonal copies must happen near the shared corner.

    An active pair whose copies differ in both tag components but whose rest
    positions are far apart means the deformation wrapped farther than one
    cell: the 2x2 tiling no longer sees every contact, so fail loudly.
    """
    dtag = np.abs(tiling.tags[pi] - tiling.tags[ev[:, 0]])
    diag = dtag.all(axis=1)
    if not diag.any():
        return
    lim = 1.2 * max(np.linalg.norm(tiling.mesh.lattice[:, 0]),
                    np.linalg.norm(tiling.mesh.lattice[:, 1]))
    xr = tiling.x
    rest_sep = np.linalg.norm(
        xr[pi[diag]] - 0.5 * (xr[ev[diag, 0]] + xr[ev[diag, 1]]), axis=1)
    if np.any(rest_sep > lim):
        raise ContactError(
            "contact across the full tiling box: 2x2 tiling is insufficient "
            f"(rest separation {rest_sep.max():.3g} > {lim:.3g})")


def chain_to_v(tiling: TiledSurface, grad_ut, hess_ut, dof_map: PeriodicDofMap):
    """Condense contact derivatives over u_t onto the homogenization unknowns."""
    J = tiling.chain(dof_map)
    g_v = J.T @ grad_ut
    H_v = None
    if hess_ut is not None:
        H_v = (J.T @ hess_ut @ J).tocsr()
        H_v = 0.5 * (H_v + H_v.T)
    return g_v, H_v


# --------------------------------------------------------------- safety ----


def surfaces_intersect(tiling: TiledSurface, u_t: np.ndarray) -> bool:
    """Proper segment-segment crossing test on the deformed tiled surface."""
    if len(tiling.edges) == 0:
        return False
    y = tiling.x + u_t
    seg = y[tiling.edges]
    mids = seg.mean(axis=1)
    half = 0.5 * np.linalg.norm(seg[:, 1] - seg[:, 0], axis=1)
    tree = cKDTree(mids)
    pairs = tree.query_pairs(2.0 * half.max() + 1e-12, output_type="ndarray")
    if len(pairs) == 0:
        return False
    ea = tiling.edges[pairs[:, 0]]
    eb = tiling.edges[pairs[:, 1]]
    share = ((ea[:, :, None] == eb[:, None, :]).any(axis=(1, 2)))
    pairs, ea, eb = pairs[~share], ea[~share], eb[~share]
    if len(pairs) == 0:
        return False
    p, q = y[ea[:, 0]], y[ea[:, 1]]
    a, b = y[eb[:, 0]], y[eb[:, 1]]

    def orient(o, u, v):
        return (u[:, 0] - o[:, 0]) * (v[:, 1] - o[:, 1]) - (u[:, 1] - o[:, 1]) * (v[:, 0] - o[:, 0])

    d1 = orient(p, q, a)
    d2 = orient(p, q, b)
    d3 = orient(a, b, p)
    d4 = orient(a, b, q)
    return bool(np.any((d1 * d2 < 0) & (d3 * d4 < 0)))


def step_limit(tiling: TiledSurface, state, direction: np.ndarray) -> float:
    """Largest safe fraction of a v-space step: continuous collision detection
    on the tiled surface plus per-element non-inversion, with a 0.9 backoff."""
    from .fem import element_data, _deformation_gradients

    alpha = 1.0
    dof_map = state.dof_map
    u_t = tiled_displacement(state, tiling)
    du_t = (tiling.chain(dof_map) @ direction).reshape(-1, 2)
    y = tiling.x + u_t
    move = np.linalg.norm(du_t, axis=1)
    if len(move) and len(tiling.edges) and move.max() > 0:
        reach = 2.0 * move.max() + 1e-15
        pts = np.arange(tiling.M)
        pi, ei = _point_edge_candidates(y, tiling.edges, pts, reach)
        ev = tiling.edges[ei]
        ph = tiling.phys
        keep = (ph[pi] != ph[ev[:, 0]]) & (ph[pi] != ph[ev[:, 1]])
        pi, ev = pi[keep], ev[keep]
        if len(pi):
            A = y[pi] - y[ev[:, 0]]
            C = y[ev[:, 1]] - y[ev[:, 0]]
            Bv = du_t[pi] - du_t[ev[:, 0]]
            D = du_t[ev[:, 1]] - du_t[ev[:, 0]]
            c0 = A[:, 0] * C[:, 1] - A[:, 1] * C[:, 0]
            c1 = (A[:, 0] * D[:, 1] - A[:, 1] * D[:, 0]
                  + Bv[:, 0] * C[:, 1] - Bv[:, 1] * C[:, 0])
            c2 = Bv[:, 0] * D[:, 1] - Bv[:, 1] * D[:, 0]
            alpha = min(alpha, _earliest_root(c0, c1, c2, A, C, Bv, D))
    # element non-inversion: det(F + a dF) stays positive
    ed = element_data(state.mesh, dof_map)
    F = _deformation_gradients(state, ed)
    du = (ed.J_v @ direction).reshape(-1, 2)
    dF = np.einsum("eni,eqnj->eqij", du[ed.tri], ed.dNx)
    a0 = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    a1 = (F[..., 0, 0] * dF[..., 1, 1] + dF[..., 0, 0] * F[..., 1, 1]
          - F[..., 0, 1] * dF[..., 1, 0] - dF[..., 0, 1] * F[..., 1, 0])
    a2 = dF[..., 0, 0] * dF[..., 1, 1] - dF[..., 0, 1] * dF[..., 1, 0]
    alpha = min(alpha, _smallest_positive_root(a0.ravel(), a1.ravel(), a2.ravel()))
    return float(alpha)


def _earliest_root(c0, c1, c2, A, C, Bv, D):
    """First alpha in (0,1] where a point crosses an edge's span, with backoff."""
    n = len(c0)
    cand = np.full((n, 2), np.inf)
    quad = np.abs(c2) > 1e-300
    disc = c1 ** 2 - 4 * c2 * c0
    ok = quad & (disc >= 0)
    if ok.any():
        sq = np.sqrt(disc[ok])
        cand[ok, 0] = (-c1[ok] - sq) / (2 * c2[ok])
        cand[ok, 1] = (-c1[ok] + sq) / (2 * c2[ok])
    lin = ~quad & (np.abs(c1) > 1e-300)
    if lin.any():
        cand[lin, 0] = -c0[lin] / c1[lin]
    ks, rs = np.nonzero((cand > 0) & (cand <= 1.0))
    if len(ks) == 0:
        return 1.0
    # the point must land within the edge's span at the crossing time
    al = cand[ks, rs]
    Aa = A[ks] + al[:, None] * Bv[ks]
    Ca = C[ks] + al[:, None] * D[ks]
    q2 = np.einsum("ij,ij->i", Ca, Ca)
    tpar = np.einsum("ij,ij->i", Aa, Ca) / np.where(q2 > 0, q2, 1.0)
    hit = (q2 > 0) & (tpar >= -1e-9) & (tpar <= 1 + 1e-9)
    if not hit.any():
        return 1.0
    return 0.9 * float(al[hit].min())


def _smallest_positive_root(a0, a1, a2) -> float:
    """Smallest positive root of a0 + a1 x + a2 x², scaled by 0.9, capped at 1."""
    best = 1.0
    quad = np.abs(a2) > 1e-30
    disc = a1 ** 2 - 4 * a2 * a0
    ok = quad & (disc >= 0)
    if ok.any():
        sq = np.sqrt(disc[ok])
        for r in ((-a1[ok] - sq) / (2 * a2[ok]), (-a1[ok] + sq) / (2 * a2[ok])):
            pos = r[r > 0]
            if len(pos):
                best = min(best, 0.9 * float(pos.min()))
    lin = ~quad & (np.abs(a1) > 1e-30)
    if lin.any():
        r = -a0[lin] / a1[lin]
        pos = r[r > 0]
        if len(pos):
            best = min(best, 0.9 * float(pos.min()))
    return min(best, 1.0)
