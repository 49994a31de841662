"""Smoothed implicit field of an inflated cell graph.

Primitives are capsules along graph edges with linearly interpolated endpoint
radii (isolated nodes become disks, encoded as zero-length capsules). Each
primitive is instanced at the 3x3 unit translates whose inflated bounding box
touches the unit square, so the zero level set tiles periodically. Instances
combine through a p-norm smooth minimum that is exact wherever a single
primitive falls within the blend band:

    phi = s - (sum_k max(0, s - d_k)^p)^(1/p)

with band width s and exponent p. Far from all primitives phi saturates at s;
the field is only meaningful within the band, which is all contouring needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .topology import CellTopology, ShapeParams, expand_symmetry

_Q2_FLOOR = 1e-30


def _capsule_batch(P_i, P_j, r_i, r_j, X, want_grads):
    """Distance of points X (m,2) to one variable-radius capsule.

    Returns d and, when requested, derivatives w.r.t. the endpoint positions
    and radii. The spine parameter t = clamp((x-P_i)·e / |e|², 0, 1) chains
    into the position derivatives only where it is unclamped.
    """
    e = P_j - P_i
    q2 = float(e @ e)
    q2s = max(q2, _Q2_FLOOR)
    r = X - P_i                      # (m, 2)
    w = r @ e
    t_raw = w / q2s
    t = np.clip(t_raw, 0.0, 1.0)
    interior = (t_raw > 0.0) & (t_raw < 1.0)
    m_vec = r - t[:, None] * e
    mlen = np.linalg.norm(m_vec, axis=1)
    d = mlen - ((1.0 - t) * r_i + t * r_j)
    if not want_grads:
        return d, None
    mhat = m_vec / np.maximum(mlen, 1e-300)[:, None]
    dr = r_j - r_i
    g_t = -dr                        # dd/dt on the unclamped branch (m̂·e = 0 there)
    chain = interior.astype(float)[:, None]
    dt_dPi = chain * (-e[None, :] - r + 2.0 * t[:, None] * e[None, :]) / q2s
    dt_dPj = chain * (r - 2.0 * t[:, None] * e[None, :]) / q2s
    dd_dPi = -(1.0 - t)[:, None] * mhat + g_t * dt_dPi
    dd_dPj = -t[:, None] * mhat + g_t * dt_dPj
    dd_dri = -(1.0 - t)
    dd_drj = -t
    return d, (dd_dPi, dd_dPj, dd_dri, dd_drj)


@dataclass
class InflatedField:
    """Callable field over the unit cell with shape-parameter derivatives."""

    positions: np.ndarray            # (n, 2) per-node positions, unit coordinates
    radii: np.ndarray                # (n,)
    prims: tuple[tuple[int, int], ...]
    blend: float
    power: int
    instances: list[tuple[int, np.ndarray]]
    topology: CellTopology | None = None

    def value(self, X: np.ndarray) -> np.ndarray:
        return self._eval(np.asarray(X, float), want_grads=False)[0]

    def value_and_node_grads(self, X: np.ndarray):
        """phi, d(phi)/d(positions) (m,n,2), d(phi)/d(radii) (m,n)."""
        return self._eval(np.asarray(X, float), want_grads=True)

    def value_and_qgrad(self, X: np.ndarray):
        """phi and its gradient w.r.t. the reduced parameter block
        [orbit positions..., orbit radii...] (dims columns are geometric
        scaling and live in the mesher)."""
        if self.topology is None:
            raise ValueError("field was built without a topology; no reduced parameters")
        f, d_pos, d_rad = self._eval(np.asarray(X, float), want_grads=True)
        top = self.topology
        K = top.n_orbits
        d_q = np.zeros((len(f), 3 * K))
        sign = np.where(top.member_flip, -1.0, 1.0)
        for i in range(top.n_nodes):
            o = top.orbit_of[i]
            d_q[:, 2 * o] += sign[i] * d_pos[:, i, 0]
            d_q[:, 2 * o + 1] += d_pos[:, i, 1]
            d_q[:, 2 * K + o] += d_rad[:, i]
        return f, d_q

    @property
    def n_qparams(self) -> int:
        if self.topology is None:
            raise ValueError("field was built without a topology")
        return 3 * self.topology.n_orbits

    def _eval(self, X, want_grads):
        X = np.atleast_2d(X)
        m = len(X)
        n = len(self.positions)
        s, p = self.blend, self.power
        U_p = np.zeros(m)
        per_inst = []
        for k, off in self.instances:
            i, j = self.prims[k]
            d, grads = _capsule_batch(self.positions[i] + off, self.positions[j] + off,
                                      self.radii[i], self.radii[j], X, want_grads)
            u = np.maximum(0.0, s - d)
            U_p += u ** p
            if want_grads:
                per_inst.append((i, j, u, grads))
        U = U_p ** (1.0 / p)
        f = s - U
        if not want_grads:
            return f, None, None
        d_pos = np.zeros((m, n, 2))
        d_rad = np.zeros((m, n))
        Usafe = np.where(U > 0.0, U, 1.0)
        for i, j, u, (dd_dPi, dd_dPj, dd_dri, dd_drj) in per_inst:
            wk = (u / Usafe) ** (p - 1)
            d_pos[:, i] += wk[:, None] * dd_dPi
            d_pos[:, j] += wk[:, None] * dd_dPj
            d_rad[:, i] += wk * dd_dri
            d_rad[:, j] += wk * dd_drj
        return f, d_pos, d_rad


def _build_instances(positions, radii, prims, blend):
    """3x3 translate instancing with AABB culling against the unit square."""
    out = []
    for k, (i, j) in enumerate(prims):
        lo = np.minimum(positions[i], positions[j]) - (max(radii[i], radii[j]) + blend)
        hi = np.maximum(positions[i], positions[j]) + (max(radii[i], radii[j]) + blend)
        for oy in (-1.0, 0.0, 1.0):
            for ox in (-1.0, 0.0, 1.0):
                off = np.array([ox, oy])
                if np.all(lo + off <= 1.0) and np.all(hi + off >= 0.0):
                    out.append((k, off))
    return out


def implicit_field(topology: CellTopology, params, point=None, *,
                   blend: float = 0.03, power: int = 8):
    """Inflate the cell graph into a periodic implicit solid.

    `params` is either a ShapeParams (expanded through the symmetry orbits) or
    a pre-expanded (positions, radii) pair. With `point` given, returns the
    scalar field value there (negative inside the solid); otherwise returns
    the InflatedField object.
    """
    if isinstance(params, ShapeParams):
        pos, rad = expand_symmetry(topology, params)
        top = topology
    else:
        pos, rad = params
        pos = np.asarray(pos, float)
        rad = np.asarray(rad, float)
        top = None
    deg = np.zeros(len(pos), dtype=int)
    for (i, j) in topology.edges:
        deg[i] += 1
        deg[j] += 1
    prims = list(topology.edges) + [(i, i) for i in range(len(pos)) if deg[i] == 0]
    field = InflatedField(pos, rad, tuple(prims), blend, power,
                          _build_instances(pos, rad, prims, blend), topology=top)
    if point is not None:
        pt = np.asarray(point, float)
        pt = pt - np.floor(pt)  # evaluation wraps into the unit cell
        return float(field.value(pt[None, :])[0])
    return field
