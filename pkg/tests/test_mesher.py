import numpy as np
import pytest

from shockcell.mesher import MeshError, dump_mesh, inflate, replicate, solid_cell_mesh
from shockcell.topology import ShapeParams, bundled_topology, default_params, topology_from_dict


def _pair_identity_dev(mesh):
    sl = np.flatnonzero(mesh.master != np.arange(mesh.n_vertices))
    if len(sl) == 0:
        return 0.0
    target = mesh.vertices[mesh.master[sl]] + mesh.offset_tags[sl] @ mesh.lattice.T
    return float(np.abs(mesh.vertices[sl] - target).max())


def test_disk_boundary_on_circle():
    t = topology_from_dict({"nodes": [[0.5, 0.5]], "edges": []})
    p = ShapeParams(np.array([[0.5, 0.5]]), np.array([0.25]), (1.0, 1.0))
    mesh = inflate(t, p, 64)
    bverts = np.unique(mesh.boundary_edges.ravel())
    r = np.linalg.norm(mesh.vertices[bverts] - 0.5, axis=1)
    assert np.abs(r - 0.25).max() < 2 / 64


def test_full_solid_is_an_error():
    t = topology_from_dict({"nodes": [[0.5, 0.5]], "edges": []})
    p = ShapeParams(np.array([[0.5, 0.5]]), np.array([1.5]), (1.0, 1.0))
    with pytest.raises(MeshError, match="empty void"):
        inflate(t, p, 32)


def test_empty_solid_is_an_error():
    # a speck smaller than the grid spacing, centered between grid points
    t = topology_from_dict({"nodes": [[0.515, 0.515]], "edges": []})
    p = ShapeParams(np.array([[0.515, 0.515]]), np.array([0.004]), (1.0, 1.0))
    with pytest.raises(MeshError, match="empty solid"):
        inflate(t, p, 32)


def test_resolution_floor():
    t = bundled_topology("rhomboid")
    with pytest.raises(ValueError):
        inflate(t, default_params(t), 8)


@pytest.mark.parametrize("name", ["rhomboid", "chi", "diamond_chain"])
def test_mesh_invariants(name):
    t = bundled_topology(name)
    mesh = inflate(t, default_params(t), 48)
    assert mesh.signed_areas().min() > 0
    a, b = mesh.metadata["cell_dims"]
    assert _pair_identity_dev(mesh) <= 1e-12 * max(a, b)
    # master chains have depth one
    assert np.array_equal(mesh.master[mesh.master], mesh.master)
    # velocity rows of pairs: identical in field columns, offset-shifted in dims
    sl = np.flatnonzero(mesh.master != np.arange(mesh.n_vertices))
    nq = mesh.n_params - 2
    assert np.array_equal(mesh.shape_velocity[sl][:, :, :nq],
                          mesh.shape_velocity[mesh.master[sl]][:, :, :nq])
    dd = mesh.shape_velocity[sl][:, :, nq:] - mesh.shape_velocity[mesh.master[sl]][:, :, nq:]
    expect = np.zeros_like(dd)
    expect[:, 0, 0] = mesh.offset_tags[sl][:, 0]
    expect[:, 1, 1] = mesh.offset_tags[sl][:, 1]
    assert np.allclose(dd, expect, atol=1e-12)


def test_boundary_edges_exclude_wrap_seam():
    t = bundled_topology("chi")
    mesh = inflate(t, default_params(t), 48)
    a, b = mesh.metadata["cell_dims"]
    for seg in mesh.boundary_edges:
        x = mesh.vertices[seg]
        on_line = (np.isclose(x[:, 0], 0.0).all() or np.isclose(x[:, 0], a).all()
                   or np.isclose(x[:, 1], 0.0).all() or np.isclose(x[:, 1], b).all())
        assert not on_line


def test_shape_velocity_matches_fd():
    t = bundled_topology("chi")
    p = default_params(t)
    mesh0 = inflate(t, p, 32)
    q0 = p.to_vector()
    bset = np.unique(mesh0.boundary_edges.ravel())
    h = 1e-5
    for k in range(len(q0)):
        qp = q0.copy(); qp[k] += h
        qm = q0.copy(); qm[k] -= h
        mp = inflate(t, ShapeParams.from_vector(qp, t.n_orbits), 32)
        mm = inflate(t, ShapeParams.from_vector(qm, t.n_orbits), 32)
        assert mp.n_vertices == mesh0.n_vertices
        fd = (mp.vertices - mm.vertices) / (2 * h)
        err = np.linalg.norm(fd - mesh0.shape_velocity[:, :, k], axis=1)
        scale = max(np.linalg.norm(fd[bset], axis=1).max(), 1e-9)
        assert err[bset].max() / scale < 1e-3


def test_mirror_symmetric_vertex_set():
    t = bundled_topology("diamond_chain")
    mesh = inflate(t, default_params(t), 48)
    a, b = mesh.metadata["cell_dims"]
    pts = mesh.vertices[:mesh.n_corner]
    mirrored = np.column_stack([a - pts[:, 0], pts[:, 1]])
    # every mirrored corner vertex coincides with some vertex
    from scipy.spatial import cKDTree
    d, _ = cKDTree(pts).query(mirrored)
    assert d.max() < 1e-9


def test_radius_velocity_is_outward_normal():
    t = topology_from_dict({"nodes": [[0.5, 0.5]], "edges": []})
    p = ShapeParams(np.array([[0.5, 0.5]]), np.array([0.25]), (1.0, 1.0))
    mesh = inflate(t, p, 64)
    bverts = np.unique(mesh.boundary_edges.ravel())
    bverts = bverts[bverts < mesh.n_corner]
    rvec = mesh.vertices[bverts] - 0.5
    nhat = rvec / np.linalg.norm(rvec, axis=1, keepdims=True)
    vcol = mesh.shape_velocity[bverts, :, 2]  # radius column for 1 orbit
    # crossings snapped away from grid corners are pinned (zero velocity);
    # the rest must move at unit speed along the outward normal
    moving = np.linalg.norm(vcol, axis=1) > 0
    assert moving.mean() > 0.9
    dot = np.einsum("ij,ij->i", vcol[moving], nhat[moving])
    assert np.abs(dot - 1.0).max() < 0.05


def test_solid_cell_mesh_structure():
    mesh = solid_cell_mesh(0.05, 0.04, 8)
    assert mesh.signed_areas().min() > 0
    assert len(mesh.boundary_edges) == 0
    assert _pair_identity_dev(mesh) == 0.0
    total = mesh.signed_areas().sum()
    assert total == pytest.approx(0.05 * 0.04, rel=1e-12)


def test_replicate_supercell():
    t = bundled_topology("rhomboid")
    mesh = inflate(t, default_params(t), 32)
    sup = replicate(mesh, 2, 2)
    assert sup.signed_areas().min() > 0
    assert len(sup.triangles) == 4 * len(mesh.triangles)
    assert sup.signed_areas().sum() == pytest.approx(4 * mesh.signed_areas().sum(), rel=1e-12)
    assert _pair_identity_dev(sup) < 1e-12 * max(*sup.metadata["cell_dims"])
    assert np.allclose(sup.lattice, mesh.lattice * 2)
    # welded interior: strictly fewer than 4x the vertices
    assert sup.n_vertices < 4 * mesh.n_vertices


def test_replicate_velocity_matches_fd():
    # copies inherit their source columns plus the lattice-shift dependence
    # on the cell dims; both pieces have to agree with re-inflating
    t = bundled_topology("rhomboid")
    p = default_params(t)
    q0 = p.to_vector()
    sup0 = replicate(inflate(t, p, 32), 2, 2)
    bset = np.unique(sup0.boundary_edges.ravel())
    h = 1e-5
    for k in range(len(q0)):
        qp = q0.copy(); qp[k] += h
        qm = q0.copy(); qm[k] -= h
        sp = replicate(inflate(t, ShapeParams.from_vector(qp, t.n_orbits), 32), 2, 2)
        sm = replicate(inflate(t, ShapeParams.from_vector(qm, t.n_orbits), 32), 2, 2)
        assert sp.n_vertices == sup0.n_vertices
        fd = (sp.vertices - sm.vertices) / (2 * h)
        err = np.linalg.norm(fd - sup0.shape_velocity[:, :, k], axis=1)
        scale = max(np.linalg.norm(fd[bset], axis=1).max(), 1e-9)
        assert err[bset].max() / scale < 1e-3


def test_dump_mesh(tmp_path):
    t = bundled_topology("rhomboid")
    mesh = inflate(t, default_params(t), 32)
    out = tmp_path / "cell.obj"
    dump_mesh(mesh, out)
    txt = out.read_text()
    assert txt.count("\nf ") == len(mesh.triangles)
    import json
    side = json.loads((tmp_path / "cell.obj.json").read_text())
    assert len(side["periodic_pairs"]) == len(mesh.periodic_pairs)


def test_quadratic_nodes_at_midpoints():
    t = bundled_topology("chi")
    mesh = inflate(t, default_params(t), 32)
    tri = mesh.triangles
    v = mesh.vertices
    assert np.allclose(v[tri[:, 3]], 0.5 * (v[tri[:, 0]] + v[tri[:, 1]]), atol=1e-13)
    assert np.allclose(v[tri[:, 4]], 0.5 * (v[tri[:, 1]] + v[tri[:, 2]]), atol=1e-13)
    assert np.allclose(v[tri[:, 5]], 0.5 * (v[tri[:, 2]] + v[tri[:, 0]]), atol=1e-13)
