import time
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from facetwin.camera import Extrinsics, Intrinsics, frontal_rotation, init_intrinsics
from facetwin.mesh import Mesh, cotangent_weights
from facetwin.solver import (BEHIND_CAMERA_RESIDUAL, BlendshapeBasis, FitParams, FitProblem, LandmarkSet,
                             SolverConfig, corrective_energy, fit, landmark_energy, load_anchor_table, load_basis,
                             load_fit, load_landmarks, prior_energy, reprojection_rmse, save_anchor_table,
                             save_basis, save_fit, save_landmarks, slide_contour_anchors, solve_arrowhead,
                             total_energy)
from facetwin.synthetic import frontal_extrinsics, synthesize_landmarks

from oracles import cotangent_weight_matrix

INTR = init_intrinsics(640, 480)


def prior_consistent_truth(template, rng):
    """Ground truth with every regularizer at zero: neutral face, unit focal scale, frontal rotation."""
    t = np.array([rng.uniform(-30, 30), rng.uniform(-30, 30), rng.uniform(450, 700)])
    extr = Extrinsics.from_matrix(frontal_rotation(), t)
    return FitParams.initial(template.mesh.n_vertices, template.basis.size, extr)


def random_state(template, rng, noise=5.0):
    extr = frontal_extrinsics(*rng.uniform(-20, 20, 3),
                              translation=(rng.uniform(-30, 30), rng.uniform(-30, 30), rng.uniform(450, 700)))
    n, m = template.mesh.n_vertices, template.basis.size
    params = FitParams(rng.normal(0, 0.5, m), rng.normal(0, 0.5, (n, 3)), extr, rng.uniform(0.8, 1.25))
    lms = synthesize_landmarks(template, params, INTR, noise=noise, rng=rng)
    return params, lms, rng.normal(0, 0.5, m)


# ---------------------------------------------------------------- constants and energies


def test_default_constants():
    cfg = SolverConfig()
    assert (cfg.omega_c, cfg.omega_r, cfg.lambda_delta, cfg.lambda_f, cfg.lambda_q, cfg.iterations) == \
        (25.0, 10.0, 4.0, 5.0, 5.0, 5)
    assert total_energy(1.0, 1.0, 1.0) == 36.0
    assert total_energy(0.0, 0.0, 0.0) == 0.0


def test_config_rejects_negative_weights():
    with pytest.raises(ValueError):
        SolverConfig(omega_c=-1.0)
    with pytest.raises(ValueError):
        SolverConfig(iterations=0)


def plane_setup(eye_gap):
    """Flat grid at depth 1000 seen head-on with f = 1000: one pixel per millimetre."""
    xs = np.arange(0.0, 101.0, 10.0)
    g = np.stack(np.meshgrid(xs, xs, indexing="ij"), -1).reshape(-1, 2)
    verts = np.column_stack([g, np.zeros(len(g))])
    k = len(xs)
    faces = []
    for i in range(k - 1):
        for j in range(k - 1):
            a, b, c, d = k * i + j, k * i + j + 1, k * (i + 1) + j, k * (i + 1) + j + 1
            faces += [[a, c, b], [b, c, d]]
    mesh = Mesh(verts, faces)
    vid = lambda x, y: int(np.flatnonzero((verts[:, 0] == x) & (verts[:, 1] == y))[0])  # noqa: E731
    picks = [vid(0, 50), vid(eye_gap, 50), vid(50, 20)]
    f_idx, bary = [], []
    for v in picks:
        fi = int(np.flatnonzero((mesh.faces == v).any(1))[0])
        f_idx.append(fi)
        bary.append((mesh.faces[fi] == v).astype(float))
    intr = Intrinsics(1000.0, 0.0, 0.0)
    params = FitParams.initial(mesh.n_vertices, 0, Extrinsics((1.0, 0, 0, 0), (0.0, 0.0, 1000.0)))
    pts = verts[picks, :2].copy()
    lms = LandmarkSet(pts, f_idx, bary, [False] * 3, (0, 1))
    return mesh, BlendshapeBasis.empty(mesh.n_vertices), params, lms, intr


@pytest.mark.parametrize("gap,expected", [(100.0, 25.0), (50.0, 50.0)])
def test_landmark_energy_hand_values(gap, expected):
    mesh, basis, params, lms, intr = plane_setup(gap)
    assert landmark_energy(params, mesh, basis, lms, intr)[0] == pytest.approx(0.0, abs=1e-20)
    moved = lms.points.copy()
    moved[2] += (3.0, 4.0)
    e, r = landmark_energy(params, mesh, basis, lms.with_points(moved), intr)
    assert e == pytest.approx(expected, rel=1e-12)
    assert len(r) == 6


def test_behind_camera_residual_is_clamped():
    mesh, basis, params, lms, intr = plane_setup(100.0)
    behind = FitParams(params.beta, params.delta, Extrinsics((1.0, 0, 0, 0), (0.0, 0.0, -10.0)))
    prob = FitProblem(mesh, basis, intr)
    r, flags = prob.landmark_residuals(behind, lms)
    assert flags.all() and np.all(r == BEHIND_CAMERA_RESIDUAL)


def test_landmark_energy_zero_at_generating_params(small_template, rng):
    params, lms, _ = random_state(small_template, rng, noise=0.0)
    e, _ = landmark_energy(params, small_template.mesh, small_template.basis, lms, INTR)
    assert e <= 1e-18


def test_corrective_energy_cases(small_template, rng):
    mesh, basis = small_template.mesh, small_template.basis
    w = cotangent_weights(mesh)
    beta = rng.normal(size=basis.size)
    zero = FitParams(beta, np.zeros((mesh.n_vertices, 3)), Extrinsics())
    assert corrective_energy(zero, mesh, basis, w, beta)[0] == 0.0
    c = np.array([1.0, -2.0, 0.5])
    shifted = FitParams(beta, np.tile(c, (mesh.n_vertices, 1)), Extrinsics())
    e, r = corrective_energy(shifted, mesh, basis, w, beta)
    assert e == pytest.approx(4.0 * mesh.n_vertices * (c @ c), rel=1e-9)
    np.testing.assert_allclose(r[:3 * mesh.n_vertices], 0.0, atol=1e-9)


def test_corrective_spike_matches_dense_operator(small_template):
    mesh, basis = small_template.mesh, small_template.basis
    delta = np.zeros((mesh.n_vertices, 3))
    delta[100] = [0.0, 2.0, 1.0]
    params = FitParams(np.zeros(basis.size), delta, Extrinsics())
    e, _ = corrective_energy(params, mesh, basis, cotangent_weights(mesh), np.zeros(basis.size))
    c = cotangent_weight_matrix(mesh.vertices, mesh.faces)
    lap = np.diag(c.sum(1)) - c
    want = np.sum((lap @ delta) ** 2) + 4.0 * np.sum(delta**2)
    assert e == pytest.approx(want, rel=1e-10)
    assert np.sum((lap @ delta) ** 2) > 0


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=3))
@settings(max_examples=20)
def test_corrective_laplacian_term_translation_invariant(small_template, shift):
    tpl = small_template
    mesh, basis = tpl.mesh, tpl.basis
    prob = FitProblem(mesh, basis, INTR)
    rng = np.random.default_rng(0)
    beta, beta_prev = rng.normal(size=basis.size), rng.normal(size=basis.size)
    delta = rng.normal(size=(mesh.n_vertices, 3))
    a = prob.corrective_residuals(FitParams(beta, delta, Extrinsics()), beta_prev)[0]
    b = prob.corrective_residuals(FitParams(beta, delta + np.asarray(shift), Extrinsics()), beta_prev)[0]
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_prior_energy_cases(small_template):
    basis = small_template.basis
    n = small_template.mesh.n_vertices
    frontal = Extrinsics.from_matrix(frontal_rotation(), np.zeros(3))
    base = FitParams.initial(n, basis.size, frontal)
    assert prior_energy(base, basis)[0] == 0.0
    beta = np.zeros(basis.size)
    beta[0] = basis.sigma[0]
    assert prior_energy(FitParams(beta, base.delta, frontal), basis)[0] == pytest.approx(1.0)
    assert prior_energy(FitParams(base.beta, base.delta, frontal, np.e), basis)[0] == pytest.approx(5.0)
    tilted = frontal.retract(np.array([0.0, 0.1, 0.0]))
    assert prior_energy(FitParams(base.beta, base.delta, tilted), basis)[0] == pytest.approx(5.0 * 0.01)


def test_prior_identity_reference_reading(small_template):
    basis = small_template.basis
    cfg = SolverConfig(rotation_reference=(1.0, 0.0, 0.0, 0.0))
    p = FitParams.initial(small_template.mesh.n_vertices, basis.size, Extrinsics())
    assert prior_energy(p, basis, cfg)[0] == 0.0


def test_energies_sum_matches_total(small_template, rng):
    params, lms, bp = random_state(small_template, rng)
    prob = FitProblem(small_template.mesh, small_template.basis, INTR)
    e = prob.energies(params, lms, bp)
    assert e["E"] == pytest.approx(e["E_l"] + 25 * e["E_c"] + 10 * e["E_r"], rel=1e-12)
    el, _ = landmark_energy(params, small_template.mesh, small_template.basis, lms, INTR)
    ec, _ = corrective_energy(params, small_template.mesh, small_template.basis, prob.weights, bp)
    er, _ = prior_energy(params, small_template.basis)
    assert (e["E_l"], e["E_c"], e["E_r"]) == pytest.approx((el, ec, er), rel=1e-12)
    res, _ = prob.residuals_and_jacobian(params, lms, bp)
    assert res @ res == pytest.approx(e["E"], rel=1e-10)


# ---------------------------------------------------------------- Jacobian


def test_jacobian_matches_central_differences(small_template):
    rng = np.random.default_rng(77)
    prob = FitProblem(small_template.mesh, small_template.basis, INTR)
    k, n, m = 68, small_template.mesh.n_vertices, small_template.basis.size
    rows = {"E_l": slice(0, 2 * k), "E_c": slice(2 * k, 2 * k + 6 * n), "E_r": slice(2 * k + 6 * n, None)}
    for _ in range(3):
        params, lms, bp = random_state(small_template, rng)
        _, jac = prob.residuals_and_jacobian(params, lms, bp)
        total = params.n_params
        for cols in (np.arange(m), np.arange(m, m + 3 * n), np.arange(total - 7, total)):
            v = np.zeros(total)
            v[cols] = rng.normal(size=len(cols))
            v /= np.linalg.norm(v)
            h = 1e-5
            fd = (prob.residuals_and_jacobian(params.retract(h * v), lms, bp)[0]
                  - prob.residuals_and_jacobian(params.retract(-h * v), lms, bp)[0]) / (2 * h)
            an = jac @ v
            for sl in rows.values():
                if np.linalg.norm(fd[sl]) > 0:
                    assert np.linalg.norm(an[sl] - fd[sl]) <= 1e-4 * np.linalg.norm(fd[sl])


def test_arrowhead_solve_matches_dense(rng):
    m, n3 = 3, 30
    a = rng.normal(size=(m + n3 + 7, m + n3 + 7)) * 0.1
    h = a @ a.T + np.eye(m + n3 + 7)
    from scipy import sparse
    rhs = rng.normal(size=len(h))
    np.testing.assert_allclose(solve_arrowhead(sparse.csc_matrix(h), rhs, m, n3), np.linalg.solve(h, rhs),
                               atol=1e-10)


# ---------------------------------------------------------------- sliding


def test_sliding_keeps_exact_anchor_and_non_contour(small_template, rng):
    params = prior_consistent_truth(small_template, rng)
    lms = synthesize_landmarks(small_template, params, INTR)
    out = slide_contour_anchors(params, small_template.mesh, small_template.basis, lms, INTR)
    assert np.array_equal(out.faces, lms.faces) and np.array_equal(out.bary, lms.bary)


def _contour_distance(params, tpl, lms):
    pf = params.face(tpl.mesh, tpl.basis)
    x = np.einsum("kc,kcd->kd", lms.bary, pf[tpl.mesh.faces[lms.faces]])
    y = params.extrinsics.apply(x)
    proj = params.fs * INTR.f * y[:, :2] / y[:, 2:3] + [INTR.cx, INTR.cy]
    return np.linalg.norm(proj - lms.points, axis=1)[lms.contour].sum()


def test_sliding_after_yaw_moves_towards_silhouette(small_template):
    tpl = small_template
    frontal = FitParams.initial(tpl.mesh.n_vertices, tpl.basis.size, frontal_extrinsics(0, 0, 0))
    yawed = FitParams.initial(tpl.mesh.n_vertices, tpl.basis.size, frontal_extrinsics(10, 0, 0))
    # landmarks of the frontal face outline, seen by the yawed camera
    lms = synthesize_landmarks(tpl, frontal, INTR)
    before = _contour_distance(yawed, tpl, lms)
    out = slide_contour_anchors(yawed, tpl.mesh, tpl.basis, lms, INTR)
    assert _contour_distance(yawed, tpl, out) <= before
    moved = ~((out.faces == lms.faces) & np.all(out.bary == lms.bary, axis=1))
    assert moved[lms.contour].any()
    assert not moved[~lms.contour].any()


@given(st.integers(0, 10_000))
@settings(max_examples=15)
def test_sliding_never_increases_contour_distance(small_template, seed):
    tpl = small_template
    rng = np.random.default_rng(seed)
    params, lms, _ = random_state(tpl, rng, noise=8.0)
    out = slide_contour_anchors(params, tpl.mesh, tpl.basis, lms, INTR)
    assert _contour_distance(params, tpl, out) <= _contour_distance(params, tpl, lms) + 1e-9
    assert np.array_equal(out.faces[~lms.contour], lms.faces[~lms.contour])
    assert np.array_equal(out.bary[~lms.contour], lms.bary[~lms.contour])


# ---------------------------------------------------------------- fit


def test_fit_recovers_prior_consistent_truth(small_template, rng):
    tpl = small_template
    truth = prior_consistent_truth(tpl, rng)
    lms = synthesize_landmarks(tpl, truth, INTR)
    result = fit(tpl.mesh, lms, tpl.basis, INTR)
    p = result.params
    assert result.converged
    assert result.diagnostics[-1]["E_l"] <= 1e-6
    assert np.linalg.norm(p.extrinsics.translation - truth.extrinsics.translation) <= 1e-3 * truth.extrinsics.t[2]
    ang = Rotation.from_matrix(p.extrinsics.rotation @ truth.extrinsics.rotation.T).magnitude()
    assert np.degrees(ang) <= 0.1
    # beta and dP were free throughout
    assert reprojection_rmse(p, tpl.mesh, tpl.basis, result.landmarks, INTR) <= 1e-4


def test_fit_energy_never_increases(small_template):
    rng = np.random.default_rng(21)
    for _ in range(3):
        _, lms, _ = random_state(small_template, rng, noise=2.0)
        result = fit(small_template.mesh, lms, small_template.basis, INTR)
        e = result.energies
        assert e[-1] <= e[0]
        assert len(result.diagnostics) == 6
        assert {"E_l", "E_c", "E_r", "E", "iteration"} <= set(result.diagnostics[0])


def test_huge_lambda_delta_suppresses_corrective_field(small_template, rng):
    _, lms, _ = random_state(small_template, rng, noise=3.0)
    result = fit(small_template.mesh, lms, small_template.basis, INTR, SolverConfig(lambda_delta=1e9))
    assert np.abs(result.params.delta).max() <= 1e-3


def test_epnp_failure_falls_back_to_frontal(small_template, rng, monkeypatch):
    import facetwin.solver as solver_mod
    from facetwin.camera import DegenerateConfigurationError

    def broken(*args, **kwargs):
        raise DegenerateConfigurationError("forced")

    monkeypatch.setattr(solver_mod, "epnp_pose", broken)
    truth = prior_consistent_truth(small_template, rng)
    lms = synthesize_landmarks(small_template, truth, INTR)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = fit(small_template.mesh, lms, small_template.basis, INTR, SolverConfig(iterations=1))
    assert any("frontal" in str(w.message) for w in caught)
    assert any("frontal" in w for w in result.warnings)
    assert result.energies[-1] <= result.energies[0]


def test_full_head_fit_is_fast(head_template):
    rng = np.random.default_rng(8)
    truth = prior_consistent_truth(head_template, rng)
    lms = synthesize_landmarks(head_template, truth, INTR, noise=1.0, rng=rng)
    start = time.perf_counter()
    result = fit(head_template.mesh, lms, head_template.basis, INTR)
    assert time.perf_counter() - start < 5.0
    assert result.converged and result.energies[-1] <= result.energies[0]


def test_fit_is_deterministic(small_template, rng):
    _, lms, _ = random_state(small_template, rng, noise=1.0)
    a = fit(small_template.mesh, lms, small_template.basis, INTR)
    b = fit(small_template.mesh, lms, small_template.basis, INTR)
    assert np.array_equal(a.params.delta, b.params.delta) and a.energies == b.energies


# ---------------------------------------------------------------- types and files


def test_landmark_set_invariants(small_template):
    a = small_template.anchors
    with pytest.raises(ValueError, match="W_eye"):
        LandmarkSet(np.zeros((68, 2)), a.faces, a.bary, a.contour, a.eye_outer)
    with pytest.raises(ValueError, match="anchor table"):
        LandmarkSet(np.ones((5, 2)), a.faces, a.bary, a.contour, a.eye_outer)


def test_basis_invariants():
    with pytest.raises(ValueError):
        BlendshapeBasis(np.zeros((2, 5, 3)), [1.0, 0.0])
    with pytest.raises(ValueError):
        BlendshapeBasis(np.zeros((2, 5)), [1.0, 1.0])


def test_file_round_trips(tmp_path, small_template, rng):
    params, lms, _ = random_state(small_template, rng)
    save_fit(params, tmp_path / "fit.json", INTR)
    back, intr = load_fit(tmp_path / "fit.json")
    assert np.array_equal(back.delta, params.delta) and back.extrinsics == params.extrinsics
    assert intr.f == INTR.f and intr.fs == params.fs
    save_basis(small_template.basis, tmp_path / "b.npz")
    assert np.array_equal(load_basis(tmp_path / "b.npz").blendshapes, small_template.basis.blendshapes)
    save_anchor_table(lms, tmp_path / "a.json")
    table = load_anchor_table(tmp_path / "a.json", lms.points)
    assert np.array_equal(table.faces, lms.faces) and np.array_equal(table.bary, lms.bary)
    assert table.strips.keys() == lms.strips.keys()
    save_landmarks(lms.points, tmp_path / "l.json", (640, 480))
    pts, size = load_landmarks(tmp_path / "l.json")
    assert np.array_equal(pts, lms.points) and size == (640, 480)
