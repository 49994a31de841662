"""Periodic quadratic triangle meshes of an inflated cell domain.

The unit cell is contoured by marching squares on an R x R grid with the
field row/column at the wrap seam copied bitwise from the opposite side, so
crossing vertices on the right/top box lines are exact translates of their
left/bottom masters. Cell polygons (always convex) are fan-triangulated from
their vertex centroid; full cells split along checkerboard diagonals, which
keeps the connectivity mirror-equivariant at even resolutions. Saddle cells
resolve by the mean of their corner values.

Shape velocities dX/dq come from implicit differentiation of the crossing
interpolation on surface vertices and are extended to interior vertices by
the same damped Jacobi averaging that smooths the interior positions, so the
velocity field is the exact parameter derivative of the mesh the solver sees.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .implicit import implicit_field
from .topology import CellTopology, ShapeParams

log = logging.getLogger(__name__)


class MeshError(RuntimeError):
    pass


def _cross2(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


@dataclass
class PeriodicMesh:
    """Quadratic periodic triangle mesh in physical coordinates.

    vertices holds corner nodes first, then mid-edge nodes; triangles are
    (v0, v1, v2, m01, m12, m20). Slave vertices satisfy
    vertices[s] == vertices[master[s]] + lattice @ offset_tags[s] exactly.
    shape_velocity columns follow the reduced parameter vector layout
    [orbit positions..., orbit radii..., a, b].
    """

    vertices: np.ndarray        # (N, 2) meters
    triangles: np.ndarray       # (n_t, 6) int
    master: np.ndarray          # (N,) int, self for unaliased vertices
    offset_tags: np.ndarray     # (N, 2) int
    boundary_edges: np.ndarray  # (n_s, 2) int, contact segments (midside-split)
    shape_velocity: np.ndarray  # (N, 2, nv)
    lattice: np.ndarray         # (2, 2), columns are the cell translations
    lattice_da: np.ndarray      # (2, 2) d(lattice)/da
    lattice_db: np.ndarray
    n_corner: int
    metadata: dict = field(default_factory=dict)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_params(self) -> int:
        return self.shape_velocity.shape[2]

    @property
    def periodic_pairs(self) -> list[tuple[int, int]]:
        return [(i, int(m)) for i, m in enumerate(self.master) if m != i]

    @property
    def cell_volume(self) -> float:
        return abs(float(np.linalg.det(self.lattice)))

    def signed_areas(self) -> np.ndarray:
        p0 = self.vertices[self.triangles[:, 0]]
        p1 = self.vertices[self.triangles[:, 1]]
        p2 = self.vertices[self.triangles[:, 2]]
        return 0.5 * _cross2(p1 - p0, p2 - p0)


# ------------------------------------------------------------ contouring ----


def _walk_cell(i, j, ins, corner_id, cross_id):
    """Inside polygon of one grid cell as vertex ids, in CCW walk order."""
    cs = ((i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1))
    flags = [ins[c] for c in cs]
    poly = []
    for k in range(4):
        if flags[k]:
            poly.append(corner_id(cs[k]))
        if flags[k] != flags[(k + 1) % 4]:
            poly.append(cross_id(cs[k], cs[(k + 1) % 4]))
    return poly, flags, cs


def inflate(topology: CellTopology, params: ShapeParams, resolution: int = 96, *,
            blend: float = 0.03, power: int = 8, snap: float = 0.01,
            smooth_sweeps: int = 4, smooth_omega: float = 0.6) -> PeriodicMesh:
    """Mesh the inflated cell graph at `resolution` marching-squares cells per side."""
    if resolution < 16:
        raise ValueError("resolution must be at least 16")
    R = resolution
    fld = implicit_field(topology, params, blend=blend, power=power)
    ij = np.arange(R) / R
    gx, gy = np.meshgrid(ij, ij, indexing="ij")
    X = np.column_stack([gx.ravel(), gy.ravel()])
    vals, qg = fld.value_and_qgrad(X)
    nq = fld.n_qparams
    F = np.empty((R + 1, R + 1))
    F[:R, :R] = vals.reshape(R, R)
    Q = np.empty((R + 1, R + 1, nq))
    Q[:R, :R] = qg.reshape(R, R, nq)
    F[R, :R] = F[0, :R]
    F[:R, R] = F[:R, 0]
    F[R, R] = F[0, 0]
    Q[R, :R] = Q[0, :R]
    Q[:R, R] = Q[:R, 0]
    Q[R, R] = Q[0, 0]

    inside = F <= 0.0
    if inside[:R, :R].all():
        raise MeshError("empty void region: the solid fills the whole cell")
    if not inside[:R, :R].any():
        raise MeshError("empty solid: the field is positive on the entire grid")

    keys: dict = {}
    pos: list[np.ndarray] = []
    vel: list[np.ndarray] = []

    def corner_id(c):
        key = ("g",) + c
        idx = keys.get(key)
        if idx is None:
            idx = len(pos)
            keys[key] = idx
            pos.append(np.array([c[0] / R, c[1] / R]))
            vel.append(np.zeros((2, nq)))
        return idx

    def cross_id(c0, c1):
        key = ("x", min(c0, c1), max(c0, c1))
        idx = keys.get(key)
        if idx is None:
            f0, f1 = F[c0], F[c1]
            t_raw = f0 / (f0 - f1)
            t = min(max(t_raw, snap), 1.0 - snap)
            p0 = np.array([c0[0] / R, c0[1] / R])
            p1 = np.array([c1[0] / R, c1[1] / R])
            if snap < t_raw < 1.0 - snap:
                dt = (f0 * Q[c1] - f1 * Q[c0]) / (f0 - f1) ** 2
            else:
                dt = np.zeros(nq)
            idx = len(pos)
            keys[key] = idx
            pos.append(p0 + t * (p1 - p0))
            vel.append(np.outer(p1 - p0, dt))
        return idx

    tris: list[tuple[int, int, int]] = []
    for i in range(R):
        for j in range(R):
            poly, flags, cs = _walk_cell(i, j, inside, corner_id, cross_id)
            n_in = sum(flags)
            if n_in == 0:
                continue
            if n_in == 4:
                v = poly
                if (i + j) % 2 == 0:
                    tris.append((v[0], v[1], v[2]))
                    tris.append((v[0], v[2], v[3]))
                else:
                    tris.append((v[1], v[2], v[3]))
                    tris.append((v[1], v[3], v[0]))
                continue
            if n_in == 2 and flags[0] == flags[2]:  # saddle
                center = 0.25 * (F[cs[0]] + F[cs[1]] + F[cs[2]] + F[cs[3]])
                if center > 0.0:
                    for k in range(4):
                        if flags[k]:
                            tris.append((cross_id(cs[(k - 1) % 4], cs[k]),
                                         corner_id(cs[k]),
                                         cross_id(cs[k], cs[(k + 1) % 4])))
                    continue
                # center inside: keep the 6-vertex band from the walk
            if len(poly) == 3:
                tris.append(tuple(poly))
            else:
                key = ("c", i, j)
                cid = len(pos)
                keys[key] = cid
                pos.append(np.mean([pos[v] for v in poly], axis=0))
                vel.append(np.mean([vel[v] for v in poly], axis=0))
                for k in range(len(poly)):
                    tris.append((cid, poly[k], poly[(k + 1) % len(poly)]))

    pos_arr = np.array(pos)
    vel_arr = np.array(vel)
    tri_arr = np.array(tris, dtype=int)

    # --- periodic identification of seam vertices ------------------------
    def wrapped(key):
        if key[0] == "g":
            _, i, j = key
            return ("g", i % R, j % R), (i // R, j // R)
        if key[0] == "x":
            _, c0, c1 = key
            t0 = (c0[0] // R, c0[1] // R)
            w0 = (c0[0] % R, c0[1] % R)
            w1 = (c1[0] % R, c1[1] % R)
            return ("x", min(w0, w1), max(w0, w1)), t0
        return key, (0, 0)

    groups: dict = {}
    for key, idx in keys.items():
        wkey, tag = wrapped(key)
        groups.setdefault(wkey, []).append((key, idx, tag))
    master = np.arange(len(pos_arr))
    tags = np.zeros((len(pos_arr), 2), dtype=int)
    for wkey, members in groups.items():
        if len(members) == 1:
            continue
        owners = [m for m in members if m[0] == wkey]
        if len(owners) != 1:
            raise MeshError(f"inconsistent periodic pairing at {wkey}")
        mi = owners[0][1]
        for key, idx, tag in members:
            if idx == mi:
                continue
            master[idx] = mi
            tags[idx] = tag
            pos_arr[idx] = pos_arr[mi] + np.asarray(tag, float)
            vel_arr[idx] = vel_arr[mi]

    # --- interior smoothing (positions and velocities together) ----------
    seam = np.zeros(len(pos_arr), dtype=bool)
    on_line = {"x0": np.zeros(len(pos_arr), bool), "x1": np.zeros(len(pos_arr), bool),
               "y0": np.zeros(len(pos_arr), bool), "y1": np.zeros(len(pos_arr), bool)}
    surface = np.zeros(len(pos_arr), dtype=bool)
    for key, idx in keys.items():
        if key[0] == "x":
            surface[idx] = True
            ends = (key[1], key[2])
            if all(c[0] == 0 for c in ends):
                on_line["x0"][idx] = True
            if all(c[0] == R for c in ends):
                on_line["x1"][idx] = True
            if all(c[1] == 0 for c in ends):
                on_line["y0"][idx] = True
            if all(c[1] == R for c in ends):
                on_line["y1"][idx] = True
        elif key[0] == "g":
            _, i, j = key
            on_line["x0"][idx] = i == 0
            on_line["x1"][idx] = i == R
            on_line["y0"][idx] = j == 0
            on_line["y1"][idx] = j == R
    for flag in on_line.values():
        seam |= flag

    nbrs: dict[int, set[int]] = {}
    for (v0, v1, v2) in tri_arr:
        for a, b in ((v0, v1), (v1, v2), (v2, v0)):
            nbrs.setdefault(a, set()).add(b)
            nbrs.setdefault(b, set()).add(a)
    movable = [v for v in range(len(pos_arr)) if not surface[v] and not seam[v] and v in nbrs]

    def areas(p):
        a = p[tri_arr[:, 0]]
        return 0.5 * _cross2(p[tri_arr[:, 1]] - a, p[tri_arr[:, 2]] - a)

    if (areas(pos_arr) <= 0).any():
        raise MeshError("degenerate contour: non-positive triangle area before smoothing")
    if smooth_sweeps > 0 and movable:
        sp = pos_arr.copy()
        sv = vel_arr.copy()
        nb_list = [np.fromiter(nbrs[v], int) for v in movable]
        for _ in range(smooth_sweeps):
            new_p = sp.copy()
            new_v = sv.copy()
            for v, nb in zip(movable, nb_list):
                new_p[v] = (1 - smooth_omega) * sp[v] + smooth_omega * sp[nb].mean(axis=0)
                new_v[v] = (1 - smooth_omega) * sv[v] + smooth_omega * sv[nb].mean(axis=0)
            sp, sv = new_p, new_v
        if (areas(sp) > 0).all():
            pos_arr, vel_arr = sp, sv
        else:
            log.warning("smoothing flipped a triangle; keeping unsmoothed mesh")

    # --- quadratic mid-edge nodes ----------------------------------------
    n_corner = len(pos_arr)
    mid_pos: list[np.ndarray] = []
    mid_vel: list[np.ndarray] = []
    mid_key: dict[tuple[int, int], int] = {}
    mid_ends: list[tuple[int, int]] = []

    def midside(a, b):
        key = (a, b) if a < b else (b, a)
        idx = mid_key.get(key)
        if idx is None:
            idx = n_corner + len(mid_pos)
            mid_key[key] = idx
            mid_pos.append(0.5 * (pos_arr[a] + pos_arr[b]))
            mid_vel.append(0.5 * (vel_arr[a] + vel_arr[b]))
            mid_ends.append(key)
        return idx

    tri6 = np.empty((len(tri_arr), 6), dtype=int)
    tri6[:, :3] = tri_arr
    for e, (v0, v1, v2) in enumerate(tri_arr):
        tri6[e, 3] = midside(v0, v1)
        tri6[e, 4] = midside(v1, v2)
        tri6[e, 5] = midside(v2, v0)

    pos_all = np.vstack([pos_arr, np.array(mid_pos)]) if mid_pos else pos_arr
    vel_all = np.vstack([vel_arr, np.array(mid_vel)]) if mid_vel else vel_arr
    master = np.concatenate([master, np.arange(n_corner, len(pos_all))])
    tags = np.vstack([tags, np.zeros((len(mid_pos), 2), dtype=int)])

    mgroups: dict = {}
    for (a, b), idx in mid_key.items():
        key = tuple(sorted((int(master[a]), int(master[b]))))
        mgroups.setdefault(key, []).append(idx)
    for key, members in mgroups.items():
        if len(members) == 1:
            continue
        if len(members) > 2:
            raise MeshError(f"inconsistent mid-edge pairing on masters {key}")
        members.sort(key=lambda v: (pos_all[v][0], pos_all[v][1]))
        mi, si = members
        off = pos_all[si] - pos_all[mi]
        tag = np.round(off).astype(int)
        if np.max(np.abs(off - tag)) > 1e-9 or not tag.any():
            raise MeshError(f"mid-edge pair offset {off} is not a lattice translation")
        master[si] = mi
        tags[si] = tag
        pos_all[si] = pos_all[mi] + tag
        vel_all[si] = vel_all[mi]

    # --- contact surface edges --------------------------------------------
    counts: dict[tuple[int, int], int] = {}
    for (v0, v1, v2) in tri_arr:
        for a, b in ((v0, v1), (v1, v2), (v2, v0)):
            key = (a, b) if a < b else (b, a)
            counts[key] = counts.get(key, 0) + 1
    segments = []
    for (a, b), c in counts.items():
        if c != 1:
            continue
        if any(on_line[k][a] and on_line[k][b] for k in on_line):
            continue  # wrap seam, not a material surface
        m = mid_key[(a, b)]
        segments.append((a, m))
        segments.append((m, b))
    boundary_edges = np.array(sorted(segments), dtype=int).reshape(-1, 2)

    # --- connectivity diagnostics ------------------------------------------
    root = {}

    def find(x):
        while root.setdefault(x, x) != x:
            root[x] = root[root[x]]
            x = root[x]
        return x

    for (v0, v1, v2) in tri_arr:
        m0 = find(int(master[v0]))
        for v in (v1, v2):
            root[find(int(master[v]))] = m0
    comps = {find(int(master[v])) for t in tri_arr for v in t}
    if len(comps) > 1:
        log.warning("inflated solid has %d disconnected components", len(comps))

    # --- scale to physical coordinates --------------------------------------
    a_dim, b_dim = params.cell_dims
    scale = np.array([a_dim, b_dim])
    verts = pos_all * scale
    nv = nq + 2
    velocity = np.zeros((len(verts), 2, nv))
    velocity[:, 0, :nq] = a_dim * vel_all[:, 0, :]
    velocity[:, 1, :nq] = b_dim * vel_all[:, 1, :]
    velocity[:, 0, nq] = pos_all[:, 0]       # d(x)/da
    velocity[:, 1, nq + 1] = pos_all[:, 1]   # d(y)/db
    lattice = np.diag(scale).astype(float)
    slaves = np.flatnonzero(master != np.arange(len(verts)))
    verts[slaves] = verts[master[slaves]] + tags[slaves] @ lattice.T

    mesh = PeriodicMesh(
        vertices=verts, triangles=tri6, master=master, offset_tags=tags,
        boundary_edges=boundary_edges, shape_velocity=velocity,
        lattice=lattice, lattice_da=np.array([[1.0, 0.0], [0.0, 0.0]]),
        lattice_db=np.array([[0.0, 0.0], [0.0, 1.0]]), n_corner=n_corner,
        metadata={"resolution": R, "blend": blend, "snap": snap,
                  "cell_dims": (a_dim, b_dim), "topology_id": topology.id,
                  "n_components": len(comps), "disconnected": len(comps) > 1,
                  "rotation": 0.0})
    bad = mesh.signed_areas().min()
    if bad <= 0:
        raise MeshError(f"meshing failure: minimum signed area {bad:g}")
    return mesh


# ------------------------------------------------------- solid reference ----


def solid_cell_mesh(a: float, b: float, resolution: int = 16) -> PeriodicMesh:
    """Structured quadratic mesh of the full cell (no void), for benchmarks.

    Carries an empty contact surface and no shape-velocity columns.
    """
    R = resolution
    idx = {}
    pos = []
    for i in range(R + 1):
        for j in range(R + 1):
            idx[(i, j)] = len(pos)
            pos.append((i / R, j / R))
    pos = np.array(pos)
    master = np.arange(len(pos))
    tags = np.zeros((len(pos), 2), dtype=int)
    for i in range(R + 1):
        for j in range(R + 1):
            wi, wj = i % R, j % R
            if (wi, wj) != (i, j):
                master[idx[(i, j)]] = idx[(wi, wj)]
                tags[idx[(i, j)]] = (i // R, j // R)
    tris = []
    for i in range(R):
        for j in range(R):
            c = [idx[(i, j)], idx[(i + 1, j)], idx[(i + 1, j + 1)], idx[(i, j + 1)]]
            if (i + j) % 2 == 0:
                tris.append((c[0], c[1], c[2]))
                tris.append((c[0], c[2], c[3]))
            else:
                tris.append((c[1], c[2], c[3]))
                tris.append((c[1], c[3], c[0]))
    tri_arr = np.array(tris, dtype=int)

    n_corner = len(pos)
    mid_key = {}
    mid_pos = []
    tri6 = np.empty((len(tri_arr), 6), dtype=int)
    tri6[:, :3] = tri_arr

    def midside(va, vb):
        key = (va, vb) if va < vb else (vb, va)
        k = mid_key.get(key)
        if k is None:
            k = n_corner + len(mid_pos)
            mid_key[key] = k
            mid_pos.append(0.5 * (pos[va] + pos[vb]))
        return k

    for e, (v0, v1, v2) in enumerate(tri_arr):
        tri6[e, 3] = midside(v0, v1)
        tri6[e, 4] = midside(v1, v2)
        tri6[e, 5] = midside(v2, v0)
    pos_all = np.vstack([pos, np.array(mid_pos)])
    master = np.concatenate([master, np.arange(n_corner, len(pos_all))])
    tags = np.vstack([tags, np.zeros((len(mid_pos), 2), dtype=int)])
    mgroups: dict = {}
    for (va, vb), k in mid_key.items():
        key = tuple(sorted((int(master[va]), int(master[vb]))))
        mgroups.setdefault(key, []).append(k)
    for key, members in mgroups.items():
        if len(members) == 1:
            continue
        members.sort(key=lambda v: (pos_all[v][0], pos_all[v][1]))
        mi, si = members
        tag = np.round(pos_all[si] - pos_all[mi]).astype(int)
        master[si] = mi
        tags[si] = tag
        pos_all[si] = pos_all[mi] + tag

    lattice = np.diag([a, b]).astype(float)
    verts = pos_all * np.array([a, b])
    slaves = np.flatnonzero(master != np.arange(len(verts)))
    verts[slaves] = verts[master[slaves]] + tags[slaves] @ lattice.T
    return PeriodicMesh(
        vertices=verts, triangles=tri6, master=master, offset_tags=tags,
        boundary_edges=np.zeros((0, 2), dtype=int),
        shape_velocity=np.zeros((len(verts), 2, 0)),
        lattice=lattice, lattice_da=np.array([[1.0, 0.0], [0.0, 0.0]]),
        lattice_db=np.array([[0.0, 0.0], [0.0, 1.0]]), n_corner=n_corner,
        metadata={"resolution": R, "cell_dims": (a, b), "topology_id": "solid",
                  "n_components": 1, "disconnected": False, "rotation": 0.0})


# --------------------------------------------------------- supercell tiling ----


def replicate(mesh: PeriodicMesh, nx: int = 2, ny: int = 2) -> PeriodicMesh:
    """Weld an nx x ny supercell out of copies of the mesh.

    Interior wrap seams fuse into shared vertices; the outer boundary gets
    fresh slave copies against the supercell lattice. Shape velocities carry
    over: every copy inherits its source vertex's columns plus the lattice
    shift's dependence on (a, b), so supercell solves stay differentiable
    with respect to the same reduced parameters.
    """
    Lsup = mesh.lattice @ np.diag([nx, ny])
    canon: dict[tuple[int, int, int], int] = {}
    verts: list[np.ndarray] = []
    master_l: list[int] = []
    tags_l: list[tuple[int, int]] = []
    source: list[int] = []
    shift_l: list[tuple[int, int]] = []   # total unit-lattice shift per vertex

    def canonical(m, cx, cy):
        key = (m, cx, cy)
        k = canon.get(key)
        if k is None:
            k = len(verts)
            canon[key] = k
            verts.append(mesh.vertices[m] + mesh.lattice @ np.array([cx, cy], float))
            master_l.append(k)
            tags_l.append((0, 0))
            source.append(m)
            shift_l.append((cx, cy))
        return k

    slaved: dict[tuple[int, int, int, int, int], int] = {}

    def resolve(v, cx, cy):
        m = int(mesh.master[v])
        tx, ty = mesh.offset_tags[v]
        px, py = cx + int(tx), cy + int(ty)
        sx, sy = px // nx, py // ny
        wx, wy = px % nx, py % ny
        if sx == 0 and sy == 0:
            return canonical(m, wx, wy)
        key = (m, wx, wy, sx, sy)
        k = slaved.get(key)
        if k is None:
            base = canonical(m, wx, wy)
            k = len(verts)
            slaved[key] = k
            verts.append(verts[base] + Lsup @ np.array([sx, sy], float))
            master_l.append(base)
            tags_l.append((sx, sy))
            source.append(m)
            shift_l.append((wx + nx * sx, wy + ny * sy))
        return k

    tri_out = []
    seg_out = []
    for cy in range(ny):
        for cx in range(nx):
            for t in mesh.triangles:
                tri_out.append([resolve(v, cx, cy) for v in t])
            for s in mesh.boundary_edges:
                seg_out.append([resolve(v, cx, cy) for v in s])

    verts_arr = np.array(verts)
    tri_arr = np.array(tri_out, dtype=int)
    # note: vertex order interleaves corners and mid-edge nodes here; n_corner
    # only counts them (nothing downstream assumes corners-first ordering)
    n_corner = int(np.sum(np.asarray(source) < mesh.n_corner))
    vel = mesh.shape_velocity[np.asarray(source, dtype=int)].copy()
    if vel.shape[2]:
        sh = np.asarray(shift_l, dtype=float)
        vel[:, :, -2] += sh @ mesh.lattice_da.T
        vel[:, :, -1] += sh @ mesh.lattice_db.T
    return PeriodicMesh(
        vertices=verts_arr, triangles=tri_arr, master=np.array(master_l),
        offset_tags=np.array(tags_l, dtype=int),
        boundary_edges=np.array(seg_out, dtype=int).reshape(-1, 2),
        shape_velocity=vel,
        lattice=Lsup, lattice_da=mesh.lattice_da @ np.diag([nx, ny]),
        lattice_db=mesh.lattice_db @ np.diag([nx, ny]),
        n_corner=n_corner,
        metadata={**mesh.metadata, "supercell": (nx, ny),
                  "cell_dims": (mesh.metadata["cell_dims"][0] * nx,
                                mesh.metadata["cell_dims"][1] * ny)})


# ------------------------------------------------------------------ dump ----


def dump_mesh(mesh: PeriodicMesh, path) -> None:
    """OBJ-style geometry plus a JSON sidecar with pairing and velocities."""
    path = str(path)
    with open(path, "w") as fh:
        fh.write("# periodic cell mesh\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]!r} {v[1]!r} 0\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
    side = {
        "periodic_pairs": [[int(s), int(m)] for s, m in mesh.periodic_pairs],
        "offset_tags": mesh.offset_tags.tolist(),
        "lattice": mesh.lattice.tolist(),
        "triangles6": mesh.triangles.tolist(),
        "boundary_edges": mesh.boundary_edges.tolist(),
        "shape_velocity": mesh.shape_velocity.tolist(),
        "metadata": {k: (list(v) if isinstance(v, tuple) else v)
                     for k, v in mesh.metadata.items()},
    }
    with open(path + ".json", "w") as fh:
        json.dump(side, fh)
