"""Cell topology graphs and their reduced shape parametrization.

A topology is a small annotated graph in the unit square: node positions,
edges, and symmetry orbits grouping nodes that are identified under the
mirror reflection about x = 0.5 (and, optionally, under unit-lattice
translation for nodes pinned on opposite box boundaries). Shape parameters
live on the orbits: one 2D position and one radius per orbit, plus the
physical cell dimensions (a, b).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

_POS_TOL = 1e-9


class TopologyError(ValueError):
    """Topology file fails validation."""


# ---------------------------------------------------------------- types ----


@dataclass(frozen=True)
class CellTopology:
    """Annotated cell graph.

    ``member_flip``/``member_shift`` encode, per node, the transform that maps
    its orbit representative's reduced position to the node's position:
    pos = A @ rep + shift, with A = diag(-1, 1) when flipped (mirror about
    x = 0.5 folds into shift) else the identity.
    """

    id: str
    nodes: np.ndarray            # (n, 2) authored reference positions, unit square
    edges: tuple[tuple[int, int], ...]
    orbits: tuple[tuple[int, ...], ...]
    orbit_of: np.ndarray         # (n,) orbit index per node
    member_flip: np.ndarray      # (n,) bool
    member_shift: np.ndarray     # (n, 2)
    default_radius: float = 0.08
    default_cell_dims: tuple[float, float] = (0.05, 0.05)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_orbits(self) -> int:
        return len(self.orbits)


@dataclass
class ShapeParams:
    """Reduced design vector q = (orbit positions, orbit radii, a, b)."""

    reduced_positions: np.ndarray  # (n_orbits, 2), unit-cell coordinates
    radii: np.ndarray              # (n_orbits,), unit-cell units
    cell_dims: tuple[float, float]  # (a, b) meters

    def __post_init__(self):
        self.reduced_positions = np.asarray(self.reduced_positions, dtype=float)
        self.radii = np.asarray(self.radii, dtype=float)
        a, b = self.cell_dims
        if np.any(self.radii <= 0):
            raise ValueError("radii must be positive")
        if a <= 0 or b <= 0:
            raise ValueError("cell dimensions must be positive")

    # q-vector layout: [p0x, p0y, p1x, p1y, ..., r0, r1, ..., a, b]
    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.reduced_positions.ravel(), self.radii, np.asarray(self.cell_dims, dtype=float)])

    @classmethod
    def from_vector(cls, q: np.ndarray, n_orbits: int) -> "ShapeParams":
        q = np.asarray(q, dtype=float)
        if q.size != 3 * n_orbits + 2:
            raise ValueError(f"parameter vector has {q.size} entries, expected {3 * n_orbits + 2}")
        pos = q[: 2 * n_orbits].reshape(n_orbits, 2)
        radii = q[2 * n_orbits: 3 * n_orbits]
        return cls(pos, radii, (float(q[-2]), float(q[-1])))

    def copy(self) -> "ShapeParams":
        return ShapeParams(self.reduced_positions.copy(), self.radii.copy(), tuple(self.cell_dims))

    def to_json_dict(self) -> dict:
        return {
            "reduced_positions": self.reduced_positions.tolist(),
            "radii": self.radii.tolist(),
            "cell_dims": list(self.cell_dims),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ShapeParams":
        return cls(np.asarray(d["reduced_positions"], float), np.asarray(d["radii"], float),
                   tuple(float(v) for v in d["cell_dims"]))


# ------------------------------------------------------------- loading ----


def _mirror(p) -> np.ndarray:
    return np.array([1.0 - p[0], p[1]])


def _auto_orbits(nodes: np.ndarray) -> list[list[int]]:
    """Group nodes into mirror orbits by position matching."""
    n = len(nodes)
    assigned = [False] * n
    orbits: list[list[int]] = []
    for i in range(n):
        if assigned[i]:
            continue
        group = [i]
        assigned[i] = True
        m = _mirror(nodes[i])
        if abs(nodes[i][0] - 0.5) > _POS_TOL:  # off-axis: look for the twin
            for j in range(n):
                if not assigned[j] and np.max(np.abs(nodes[j] - m)) < _POS_TOL:
                    group.append(j)
                    assigned[j] = True
                    break
        orbits.append(group)
    return orbits


def _member_transform(rep: np.ndarray, member: np.ndarray) -> tuple[bool, np.ndarray]:
    """Find (flip, shift) with member = A@rep + shift, shift on the unit lattice
    (plus the mirror fold (1,0) when flipped)."""
    for flip in (False, True):
        base = np.array([-rep[0], rep[1]]) + np.array([1.0, 0.0]) if flip else rep
        shift = member - base
        if np.max(np.abs(shift - np.round(shift))) < _POS_TOL:
            out = np.round(shift)
            if flip:
                out = out + np.array([1.0, 0.0])  # fold the mirror offset into shift
            return flip, out
    raise TopologyError("orbit member %s not reachable from representative %s" % (member, rep))


def _validate_graph(nodes: np.ndarray, edges: list[tuple[int, int]]) -> None:
    n = len(nodes)
    seen = set()
    for (i, j) in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise TopologyError("edge endpoint out of range: (%d, %d) with %d nodes" % (i, j, n))
        key = (min(i, j), max(i, j))
        if key in seen:
            raise TopologyError("duplicate edge (%d, %d)" % key)
        seen.add(key)
    # periodic consistency: boundary nodes need partners on the opposite side
    for i, p in enumerate(nodes):
        for axis in (0, 1):
            if abs(p[axis]) < _POS_TOL or abs(p[axis] - 1.0) < _POS_TOL:
                q = p.copy()
                q[axis] = 1.0 - round(p[axis])
                hit = np.any(np.all(np.abs(nodes - q) < _POS_TOL, axis=1))
                if not hit:
                    raise TopologyError(
                        "node %d at %s sits on the box boundary but has no periodic "
                        "partner at %s" % (i, p.tolist(), q.tolist()))


def _build(id_str: str, nodes: np.ndarray, edges: list[tuple[int, int]],
           orbits: list[list[int]] | None, default_radius: float,
           default_cell_dims: tuple[float, float]) -> CellTopology:
    _validate_graph(nodes, edges)
    if orbits is None:
        orbits = _auto_orbits(nodes)
    flat = sorted(i for g in orbits for i in g)
    if flat != list(range(len(nodes))):
        raise TopologyError("symmetry orbits must partition the node set")
    orbit_of = np.empty(len(nodes), dtype=int)
    flips = np.zeros(len(nodes), dtype=bool)
    shifts = np.zeros((len(nodes), 2))
    for oi, group in enumerate(orbits):
        rep = nodes[group[0]]
        for m in group:
            orbit_of[m] = oi
            flips[m], shifts[m] = _member_transform(rep, nodes[m])
    return CellTopology(
        id=id_str, nodes=nodes, edges=tuple((int(i), int(j)) for i, j in edges),
        orbits=tuple(tuple(int(i) for i in g) for g in orbits),
        orbit_of=orbit_of, member_flip=flips, member_shift=shifts,
        default_radius=default_radius, default_cell_dims=default_cell_dims)


def load_topology(path: str | Path) -> CellTopology:
    """Load and validate a topology JSON file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise TopologyError(f"cannot parse {path}: {e}") from e
    return topology_from_dict(data, fallback_id=path.stem)


def topology_from_dict(data: dict, fallback_id: str = "unnamed") -> CellTopology:
    if "nodes" not in data:
        raise TopologyError("topology file missing 'nodes'")
    nodes = np.asarray(data["nodes"], dtype=float)
    if nodes.ndim != 2 or nodes.shape[1] != 2:
        raise TopologyError("'nodes' must be an array of [x, y] pairs")
    edges = [tuple(int(v) for v in e) for e in data.get("edges", [])]
    axis = data.get("mirror_axis", "x=0.5")
    if axis != "x=0.5":
        raise TopologyError(f"unsupported mirror_axis {axis!r} (only 'x=0.5')")
    orbits = data.get("orbits")
    if orbits is not None:
        orbits = [[int(i) for i in g] for g in orbits]
    return _build(
        data.get("id", fallback_id), nodes, edges, orbits,
        float(data.get("default_radius", 0.08)),
        tuple(float(v) for v in data.get("default_cell_dims", (0.05, 0.05))))


def bundled_topology(name: str) -> CellTopology:
    """Load one of the topologies shipped with the package."""
    ref = resources.files("shockcell").joinpath(f"topologies/{name}.json")
    if not ref.is_file():
        avail = sorted(p.name[:-5] for p in resources.files("shockcell").joinpath("topologies").iterdir()
                       if p.name.endswith(".json"))
        raise TopologyError(f"no bundled topology {name!r}; available: {avail}")
    return topology_from_dict(json.loads(ref.read_text()), fallback_id=name)


def bundled_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("shockcell").joinpath("topologies").iterdir()
                  if p.name.endswith(".json"))


# ------------------------------------------------------ parametrization ----


def default_params(topology: CellTopology) -> ShapeParams:
    reps = np.array([topology.nodes[g[0]] for g in topology.orbits])
    radii = np.full(topology.n_orbits, topology.default_radius)
    return ShapeParams(reps, radii, topology.default_cell_dims)


def expand_symmetry(topology: CellTopology, params: ShapeParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-node positions and radii from the reduced orbit parameters.

    Reflected members get mirrored positions and the orbit's radius; nodes on
    the mirror axis are fixed points of the reflection.
    """
    if len(params.reduced_positions) != topology.n_orbits or len(params.radii) != topology.n_orbits:
        raise ValueError(
            f"params carry {len(params.radii)} orbits but topology {topology.id!r} has {topology.n_orbits}")
    reps = params.reduced_positions[topology.orbit_of]           # (n, 2)
    sign = np.where(topology.member_flip, -1.0, 1.0)
    pos = np.column_stack([sign * reps[:, 0], reps[:, 1]]) + topology.member_shift
    return pos, params.radii[topology.orbit_of]


def reduce_node_gradient(topology: CellTopology, d_pos: np.ndarray, d_rad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fold per-node position/radius gradients back onto the orbit parameters
    (adjoint of expand_symmetry)."""
    gp = np.zeros((topology.n_orbits, 2))
    gr = np.zeros(topology.n_orbits)
    sign = np.where(topology.member_flip, -1.0, 1.0)
    np.add.at(gp[:, 0], topology.orbit_of, sign * d_pos[:, 0])
    np.add.at(gp[:, 1], topology.orbit_of, d_pos[:, 1])
    np.add.at(gr, topology.orbit_of, d_rad)
    return gp, gr


def default_bounds(topology: CellTopology, params: ShapeParams | None = None,
                   pos_box: tuple[float, float] = (0.08, 0.92),
                   radius_box: tuple[float, float] = (0.02, 0.22),
                   dims_box: tuple[float, float] = (0.02, 0.12)) -> tuple[np.ndarray, np.ndarray]:
    """Box bounds for the reduced parameter vector.

    Coordinates that would break mirror symmetry (x of an unpaired orbit) or
    detach a boundary-pinned node are frozen by equal bounds.
    """
    if params is None:
        params = default_params(topology)
    n = topology.n_orbits
    lo = np.empty(3 * n + 2)
    hi = np.empty(3 * n + 2)
    has_flip = [any(topology.member_flip[m] for m in g) for g in topology.orbits]
    for oi, g in enumerate(topology.orbits):
        rep = params.reduced_positions[oi]
        for c in range(2):
            k = 2 * oi + c
            frozen = abs(rep[c]) < _POS_TOL or abs(rep[c] - 1.0) < _POS_TOL
            if c == 0 and not has_flip[oi]:
                frozen = True  # orbit lives on the mirror axis
            if frozen:
                lo[k] = hi[k] = rep[c]
            else:
                lo[k], hi[k] = pos_box
        lo[2 * n + oi], hi[2 * n + oi] = radius_box
    lo[-2:] = dims_box[0]
    hi[-2:] = dims_box[1]
    return lo, hi
