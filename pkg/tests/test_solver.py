import json
import numpy as np
import pytest
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.spatial import cKDTree

from shockcell.contact import build_tiling, surfaces_intersect, tiled_displacement
from shockcell.fem import (HomogState, Material, build_dof_map, effective_stress,
                           elastic_energy, neo_hookean,
                           plane_strain_uniaxial_modulus)
from shockcell.mesher import inflate, replicate, solid_cell_mesh
from shockcell.solver import (SolveSettings, SolverError, StressStrainCurve,
                              constrained_newton_solve, force_spd,
                              homogenize_tiled, incremental_solve,
                              load_curve_csv, newton_solve, rotate_rest,
                              solve_curve, total_energy)
from shockcell.topology import bundled_topology, default_params

MAT = Material(lam=4.32e6, mu=1.85e6)


@pytest.fixture(scope="module")
def solid():
    return solid_cell_mesh(0.05, 0.05, resolution=8)


@pytest.fixture(scope="module")
def rhomboid16():
    t = bundled_topology("rhomboid")
    return inflate(t, default_params(t), 16)


# --------------------------------------------------------------- force_spd ----


def test_force_spd_keeps_definite_matrix():
    H = sp.identity(3, format="csr")
    assert (force_spd(H) - H).nnz == 0


def test_force_spd_indefinite_shift():
    H = sp.diags([1.0, -1.0]).tocsr()
    Ht = force_spd(H)
    beta = Ht[0, 0] - 1.0
    # smallest 1e-8 * 2^k exceeding the negative eigenvalue magnitude
    assert beta == pytest.approx(1e-8 * 2 ** 27, rel=1e-12)
    assert Ht[1, 1] == pytest.approx(beta - 1.0, rel=1e-12)


def test_force_spd_zero_matrix():
    H = sp.csr_matrix((2, 2))
    Ht = force_spd(H)
    assert Ht[0, 0] == pytest.approx(1e-8, rel=1e-12)
    assert Ht[1, 1] == pytest.approx(1e-8, rel=1e-12)


def test_settings_validation():
    with pytest.raises(ValueError):
        SolveSettings(penalty_w0=0.0)
    with pytest.raises(ValueError):
        SolveSettings(tol_grad=-1.0)


# -------------------------------------------------------- solid-cell oracle ----


def _pointwise_oracle(eps):
    """Uniform-deformation energy minimum over (G00, G01) at fixed G11."""

    def dens(g):
        F = np.array([[1.0 + g[0], g[1]], [g[1], 1.0 - eps]])
        return neo_hookean(F, MAT)[0]

    r = minimize(dens, [0.0, 0.0], method="Nelder-Mead",
                 options={"xatol": 1e-13, "fatol": 1e-18})
    F = np.array([[1.0 + r.x[0], r.x[1]], [r.x[1], 1.0 - eps]])
    return neo_hookean(F, MAT)[1], r.x


def test_constrained_solve_matches_pointwise_minimum(solid):
    st = constrained_newton_solve(HomogState.rest(solid, MAT), 0.05)
    assert st.G11 == -0.05
    sig = effective_stress(st)
    sig_o, g_o = _pointwise_oracle(0.05)
    assert sig[1, 1] == pytest.approx(sig_o[1, 1], rel=1e-6)
    assert st.G00 == pytest.approx(g_o[0], abs=1e-8)


def test_small_strain_modulus(solid):
    st = constrained_newton_solve(HomogState.rest(solid, MAT), 1e-4)
    modulus = -effective_stress(st)[1, 1] / 1e-4
    assert modulus == pytest.approx(plane_strain_uniaxial_modulus(MAT), rel=1e-3)


def test_penalty_stationarity(solid):
    w = 1e4
    st = newton_solve(HomogState.rest(solid, MAT), 0.02, w)
    g = elastic_energy(st, order=1)[1]
    residual = abs(st.G11 + 0.02)
    assert residual == pytest.approx(abs(g[st.dof_map.iG11]) / (2 * w), rel=1e-4)


def test_incremental_path_independence(solid):
    rest = HomogState.rest(solid, MAT)
    one = incremental_solve(rest, 0.05)
    two = incremental_solve(incremental_solve(rest, 0.025), 0.05)
    s1 = effective_stress(one)[1, 1]
    s2 = effective_stress(two)[1, 1]
    assert abs(s1 - s2) <= 1e-10 * abs(s1)


def test_resolve_converged_sample_is_a_noop(solid):
    cv = solve_curve(solid, MAT, [0.05])
    st = cv.samples[0].state
    again = incremental_solve(st, 0.05)
    assert np.array_equal(again.v, st.v)


# ----------------------------------------------------------------- curves ----


def test_empty_schedule(solid):
    assert len(solve_curve(solid, MAT, [])) == 0


def test_bad_schedule_rejected(solid):
    with pytest.raises(ValueError):
        solve_curve(solid, MAT, [0.0, 0.05])
    with pytest.raises(ValueError):
        solve_curve(solid, MAT, [0.05, 0.05])


def test_solid_curve_monotone_and_exact_strain(solid):
    eps = np.arange(0.01, 0.101, 0.01).round(3)
    cv = solve_curve(solid, MAT, eps)
    assert np.all(np.diff(cv.stress11) > 0)
    assert np.array_equal(cv.strains, eps)
    for s in cv:
        assert s.state.G11 == -s.strain  # bit-exact by construction


def test_curve_monotonicity_guard():
    curve = StressStrainCurve()
    from shockcell.solver import CurveSample
    curve.append(CurveSample(0.1, np.zeros((2, 2)), 0.0, 0.0, None))
    with pytest.raises(ValueError):
        curve.append(CurveSample(0.1, np.zeros((2, 2)), 0.0, 0.0, None))


def test_curve_csv_roundtrip_and_determinism(solid, tmp_path):
    eps = [0.02, 0.04]
    cv1 = solve_curve(solid, MAT, eps)
    cv2 = solve_curve(solid, MAT, eps)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    cv1.to_csv(p1)
    cv2.to_csv(p2)
    assert p1.read_bytes() == p2.read_bytes()
    back = load_curve_csv(p1)
    assert np.array_equal(back.strains, cv1.strains)
    assert np.array_equal(back.stress11, cv1.stress11)
    header = p1.read_text().splitlines()[0]
    assert header == "strain,stress11,G00,G01,newton_iters,wall_ms"
    assert all(line.endswith(",0") for line in p1.read_text().splitlines()[1:])


def test_trace_jsonl(solid, tmp_path):
    trace = tmp_path / "trace.jsonl"
    settings = SolveSettings(trace_path=str(trace))
    solve_curve(solid, MAT, [0.02], settings)
    lines = [json.loads(l) for l in trace.read_text().splitlines()]
    assert len(lines) > 0
    assert {"phase", "W", "gnorm", "alpha"} <= set(lines[0])


# -------------------------------------------------- microstructured cells ----


def test_microstructure_curve(rhomboid16):
    cv = solve_curve(rhomboid16, MAT, [0.1, 0.2])
    assert np.all(np.diff(cv.stress11) > 0)
    tiling = build_tiling(rhomboid16)
    for s in cv:
        assert not surfaces_intersect(tiling, tiled_displacement(s.state, tiling))
    # lateral expansion under compression for this cell
    assert cv.samples[-1].G00 > 0


def _mirror_permutation(mesh):
    a, b = mesh.metadata["cell_dims"]
    mirrored = np.column_stack([a - mesh.vertices[:, 0], mesh.vertices[:, 1]])
    # mirror partners live at the reflected position up to a lattice shift
    wrapped = mirrored.copy()
    wrapped[:, 0] = np.where(wrapped[:, 0] >= a - 1e-12 * a, wrapped[:, 0] - a,
                             wrapped[:, 0])
    tree = cKDTree(mesh.vertices)
    d, idx = tree.query(wrapped)
    if d.max() > 1e-9 * max(a, b):
        d2, idx2 = tree.query(mirrored)
        idx = np.where(d <= d2, idx, idx2)
        d = np.minimum(d, d2)
    assert d.max() < 1e-9 * max(a, b)
    return idx


def test_reflected_solution_equivalence(rhomboid16):
    cv = solve_curve(rhomboid16, MAT, [0.15])
    st = cv.samples[0].state
    dm = st.dof_map
    perm = _mirror_permutation(rhomboid16)
    fl = st.fluct.reshape(-1, 2)
    fl_m = np.zeros_like(fl)
    masters = np.flatnonzero(rhomboid16.master == np.arange(rhomboid16.n_vertices))
    for i in masters:
        j = rhomboid16.master[perm[i]]
        fl_m[dm.fluct_index[j]] = [-fl[dm.fluct_index[i], 0], fl[dm.fluct_index[i], 1]]
    mirrored = HomogState(rhomboid16, MAT, dm, fl_m.ravel(),
                          st.G00, -st.G01, st.G11)
    tiling = build_tiling(rhomboid16)
    kappa = 1e3 * MAT.mu * min(rhomboid16.metadata["cell_dims"])
    W0 = total_energy(st, tiling, kappa, order=0)[0]
    W1 = total_energy(mirrored, tiling, kappa, order=0)[0]
    assert W1 == pytest.approx(W0, rel=1e-9)
    s0 = effective_stress(st)[1, 1]
    s1 = effective_stress(mirrored)[1, 1]
    assert s1 == pytest.approx(s0, rel=1e-9)
    assert mirrored.G01 == -st.G01


# -------------------------------------------------------------- rotations ----


def test_rotate_rest_identity_and_inverse(rhomboid16):
    m0 = rotate_rest(rhomboid16, 0.0)
    assert np.array_equal(m0.vertices, rhomboid16.vertices)
    th = np.deg2rad(12.0)
    back = rotate_rest(rotate_rest(rhomboid16, th), -th)
    assert np.abs(back.vertices - rhomboid16.vertices).max() < 1e-12
    assert np.abs(back.lattice - rhomboid16.lattice).max() < 1e-12


def test_rotate_rest_limit(rhomboid16):
    with pytest.raises(ValueError):
        rotate_rest(rhomboid16, np.deg2rad(25.0))


def test_rotated_solid_cell_is_isotropic(solid):
    rot = rotate_rest(solid, np.deg2rad(20.0))
    s0 = constrained_newton_solve(HomogState.rest(solid, MAT), 0.04)
    s1 = constrained_newton_solve(HomogState.rest(rot, MAT), 0.04)
    assert effective_stress(s1)[1, 1] == pytest.approx(
        effective_stress(s0)[1, 1], rel=1e-6)


# -------------------------------------------------------------- supercells ----


def test_homogenize_tiled_n1_matches_solve_curve(solid):
    eps = [0.02, 0.04]
    cv = solve_curve(solid, MAT, eps)
    cv1 = homogenize_tiled(solid, MAT, 1, eps)
    assert np.array_equal(cv.stress11, cv1.stress11)


def test_homogenize_tiled_solid_supercell(solid):
    eps = [0.02, 0.05]
    cv1 = solve_curve(solid, MAT, eps)
    cv2 = homogenize_tiled(solid, MAT, 2, eps)
    assert np.allclose(cv2.stress11, cv1.stress11, rtol=1e-8)


def test_supercell_dof_count(solid):
    dm1 = build_dof_map(solid)
    dm4 = build_dof_map(replicate(solid, 2, 2))
    assert dm4.n_free == 4 * dm1.n_free
    assert dm4.n_v == 4 * dm1.n_free + 3


def test_homogenize_tiled_bad_factor(solid):
    with pytest.raises(ValueError):
        homogenize_tiled(solid, MAT, 3, [0.02])
