import numpy as np
import pytest

from shockcell.implicit import implicit_field
from shockcell.topology import ShapeParams, bundled_topology, default_params, topology_from_dict


def disk_topology():
    return topology_from_dict({"nodes": [[0.5, 0.5]], "edges": []})


def test_disk_center_value():
    p = ShapeParams(np.array([[0.5, 0.5]]), np.array([0.2]), (0.05, 0.05))
    assert implicit_field(disk_topology(), p, point=(0.5, 0.5)) == pytest.approx(-0.2, abs=1e-14)


def test_disk_surface_value():
    p = ShapeParams(np.array([[0.5, 0.5]]), np.array([0.2]), (0.05, 0.05))
    assert implicit_field(disk_topology(), p, point=(0.7, 0.5)) == pytest.approx(0.0, abs=1e-14)


def test_capsule_axis_midpoint():
    t = topology_from_dict({"nodes": [[0.3, 0.5], [0.7, 0.5]], "edges": [[0, 1]]})
    p = ShapeParams(np.array([[0.3, 0.5]]), np.array([0.1]), (0.05, 0.05))
    # single primitive in band: the smooth union is exact there
    assert implicit_field(t, p, point=(0.5, 0.5)) == pytest.approx(-0.1, abs=1e-13)


def test_variable_radius_capsule():
    t = topology_from_dict({"nodes": [[0.3, 0.5], [0.7, 0.5]], "edges": [[0, 1]],
                            "orbits": [[0], [1]]})
    pos = np.array([[0.3, 0.5], [0.7, 0.5]])
    rad = np.array([0.05, 0.15])
    fld = implicit_field(t, (pos, rad))
    # linearly interpolated radius along the spine
    mid = fld.value(np.array([[0.5, 0.5]]))[0]
    assert mid == pytest.approx(-0.10, abs=1e-13)
    quarter = fld.value(np.array([[0.4, 0.5]]))[0]
    assert quarter == pytest.approx(-0.075, abs=1e-13)


def test_periodic_wrapping():
    t = bundled_topology("chi")
    p = default_params(t)
    for pt in [(0.02, 0.5), (0.5, 0.03), (0.97, 0.44)]:
        v0 = implicit_field(t, p, point=pt)
        v1 = implicit_field(t, p, point=(pt[0] + 1.0, pt[1]))
        v2 = implicit_field(t, p, point=(pt[0] - 1.0, pt[1] + 1.0))
        assert v1 == pytest.approx(v0, abs=1e-12)
        assert v2 == pytest.approx(v0, abs=1e-12)


def test_sign_semantics():
    t = bundled_topology("rhomboid")
    p = default_params(t)
    fld = implicit_field(t, p)
    on_strut = np.array([[0.75, 0.25]])   # middle of a diamond edge
    in_void = np.array([[0.5, 0.5]])      # diamond interior
    assert fld.value(on_strut)[0] < 0
    assert fld.value(in_void)[0] > 0


def test_union_never_exceeds_single_distances():
    t = bundled_topology("diamond_chain")
    p = default_params(t)
    fld = implicit_field(t, p)
    rng = np.random.default_rng(11)
    X = rng.uniform(0, 1, size=(200, 2))
    f = fld.value(X)
    assert np.all(f <= fld.blend + 1e-15)


def test_node_gradients_match_fd():
    t = bundled_topology("chi")
    pos, rad = np.array(t.nodes), np.full(t.n_nodes, 0.08)
    fld = implicit_field(t, (pos, rad))
    rng = np.random.default_rng(0)
    X = rng.uniform(0.05, 0.95, size=(30, 2))
    _, d_pos, d_rad = fld.value_and_node_grads(X)
    h = 1e-6
    for i in (0, 1, 4, 6):
        for c in range(2):
            pp = pos.copy(); pp[i, c] += h
            pm = pos.copy(); pm[i, c] -= h
            fd = (implicit_field(t, (pp, rad)).value(X) - implicit_field(t, (pm, rad)).value(X)) / (2 * h)
            assert np.max(np.abs(fd - d_pos[:, i, c])) < 1e-7
        rp = rad.copy(); rp[i] += h
        rm = rad.copy(); rm[i] -= h
        fd = (implicit_field(t, (pos, rp)).value(X) - implicit_field(t, (pos, rm)).value(X)) / (2 * h)
        assert np.max(np.abs(fd - d_rad[:, i])) < 1e-7


def test_reduced_gradients_match_fd():
    t = bundled_topology("chi")
    p = default_params(t)
    fld = implicit_field(t, p)
    rng = np.random.default_rng(1)
    X = rng.uniform(0.05, 0.95, size=(40, 2))
    _, d_q = fld.value_and_qgrad(X)
    q0 = p.to_vector()
    h = 1e-6
    for k in range(fld.n_qparams):
        qp = q0.copy(); qp[k] += h
        qm = q0.copy(); qm[k] -= h
        fp = implicit_field(t, ShapeParams.from_vector(qp, t.n_orbits)).value(X)
        fm = implicit_field(t, ShapeParams.from_vector(qm, t.n_orbits)).value(X)
        fd = (fp - fm) / (2 * h)
        assert np.max(np.abs(fd - d_q[:, k])) < 1e-7


def test_isolated_node_renders_as_disk():
    t = topology_from_dict({"nodes": [[0.5, 0.2], [0.5, 0.8], [0.2, 0.5], [0.8, 0.5]],
                            "edges": [[0, 1]]})
    p = ShapeParams(np.array([[0.5, 0.2], [0.5, 0.8], [0.2, 0.5]]),
                    np.array([0.06, 0.06, 0.06]), (0.05, 0.05))
    fld = implicit_field(t, p)
    assert fld.value(np.array([[0.2, 0.5]]))[0] == pytest.approx(-0.06, abs=1e-13)


def test_mirror_symmetry_of_field():
    t = bundled_topology("diamond_chain")
    p = default_params(t)
    fld = implicit_field(t, p)
    rng = np.random.default_rng(5)
    X = rng.uniform(0, 1, size=(100, 2))
    Xm = np.column_stack([1.0 - X[:, 0], X[:, 1]])
    assert np.max(np.abs(fld.value(X) - fld.value(Xm))) < 1e-12
