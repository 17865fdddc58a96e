"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the "acceptance criteria" section of the terminal summary.
"""
import filecmp
import os
import time
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.spatial.transform import Rotation

from facetwin.camera import Extrinsics, frontal_rotation, init_intrinsics
from facetwin.cli import main
from facetwin.dr import decode_dr, encode_dr, feature_to_affine, rotation_exp
from facetwin.evaluation import armse, icp_refine
from facetwin.mesh import Mesh
from facetwin.sampler import pca_fit, sample_hypersphere_weights
from facetwin.solver import FitParams, FitProblem, SolverConfig, fit, reprojection_rmse, total_energy
from facetwin.synthetic import (checker_image, frontal_extrinsics, make_head, smooth_deformation, sphere_mesh,
                                synthesize_landmarks)
from facetwin.texture import (BACKGROUND, ProjectionContext, camera_points, front_facing, project_texture,
                              uv_texels)

from oracles import brute_armse, cotangent_weight_matrix, descent_decode, raycast_visible

INTR = init_intrinsics(640, 480)


# ---------------------------------------------------------------- 1


def test_criterion_01_dr_round_trip(acceptance):
    rng = np.random.default_rng(1)
    worst = 0.0
    start = time.perf_counter()
    for k in range(20):
        ref = sphere_mesh(int(rng.integers(100, 501))) if k % 2 == 0 else make_head(9, 15 + k % 4)
        target = smooth_deformation(ref.vertices, rng, amplitude=0.1)
        out = decode_dr(encode_dr(target, ref), ref, (0, target[0])).vertices
        diag = float(np.linalg.norm(np.ptp(target, axis=0)))
        worst = max(worst, float(np.abs(out - target).max()) / diag)
    elapsed = time.perf_counter() - start
    ok = acceptance(1, worst <= 1e-6 and elapsed < 5.0,
                    f"max error / bbox diagonal = {worst:.3e} (need <= 1e-6), runtime {elapsed:.2f} s (need < 5)")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_02_dr_analytic_cases(acceptance):
    errors = {}
    for ref in (sphere_mesh(200), make_head(9, 15)):
        v = ref.vertices
        errors["identity"] = max(errors.get("identity", 0.0), np.abs(encode_dr(v, ref).data).max())
        s = 1.35
        d = encode_dr(s * v, ref).data
        want = np.tile([0, 0, 0, s - 1, 0, 0, s - 1, 0, s - 1], (len(d), 1))
        errors["scale"] = max(errors.get("scale", 0.0), np.abs(d - want).max())
        w = np.array([0.5, -0.3, 0.8])
        d = encode_dr(v @ rotation_exp(w).T, ref).data
        err = max(np.abs(d[:, :3] - w).max(), np.abs(d[:, 3:]).max())
        errors["rotation"] = max(errors.get("rotation", 0.0), err)
    ok = errors["identity"] <= 1e-12 and errors["scale"] <= 1e-9 and errors["rotation"] <= 1e-9
    acceptance(2, ok, ", ".join(f"{k} {v:.2e}" for k, v in errors.items()) + " (need 1e-12, 1e-9, 1e-9)")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_03_decode_vs_descent_oracle(acceptance):
    ref = sphere_mesh(30)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(3):
        feature = encode_dr(smooth_deformation(ref.vertices, rng, amplitude=0.2), ref)
        got = decode_dr(feature, ref).vertices
        want = descent_decode(feature_to_affine(feature), ref.vertices,
                              cotangent_weight_matrix(ref.vertices, ref.faces))
        worst = max(worst, float(np.linalg.norm(got - want, axis=1).max()))
    ok = acceptance(3, worst <= 1e-4, f"max per-vertex gap to descent = {worst:.2e} (need <= 1e-4)")
    assert ok


# ---------------------------------------------------------------- 4


def _truth(template, rng):
    t = np.array([rng.uniform(-30, 30), rng.uniform(-30, 30), rng.uniform(450, 700)])
    return FitParams.initial(template.mesh.n_vertices, template.basis.size,
                             Extrinsics.from_matrix(frontal_rotation(), t))


def test_criterion_04_solver_recovery(head_template, acceptance):
    tpl = head_template
    rng = np.random.default_rng(4)
    worst_t = worst_r = worst_el = 0.0
    for _ in range(5):
        truth = _truth(tpl, rng)
        lms = synthesize_landmarks(tpl, truth, INTR)
        res = fit(tpl.mesh, lms, tpl.basis, INTR)
        p = res.params
        depth = truth.extrinsics.translation[2]
        worst_t = max(worst_t, np.linalg.norm(p.extrinsics.translation - truth.extrinsics.translation) / depth)
        worst_r = max(worst_r, np.degrees(
            Rotation.from_matrix(p.extrinsics.rotation @ truth.extrinsics.rotation.T).magnitude()))
        worst_el = max(worst_el, res.diagnostics[-1]["E_l"])
    worst_rmse = 0.0
    for _ in range(20):
        truth = _truth(tpl, rng)
        lms = synthesize_landmarks(tpl, truth, INTR, noise=1.0, rng=rng)
        res = fit(tpl.mesh, lms, tpl.basis, INTR)
        worst_rmse = max(worst_rmse, reprojection_rmse(res.params, tpl.mesh, tpl.basis, res.landmarks, INTR))
    ok = worst_t <= 1e-3 and worst_r <= 0.1 and worst_el <= 1e-6 and worst_rmse <= 2.0
    acceptance(4, ok, f"translation {worst_t:.1e} of depth, rotation {worst_r:.1e} deg, E_l {worst_el:.1e}, "
                      f"1 px noise RMSE {worst_rmse:.2f} px over 20 trials")
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_05_jacobian_blocks(small_template, acceptance):
    tpl = small_template
    prob = FitProblem(tpl.mesh, tpl.basis, INTR)
    n, m, k = tpl.mesh.n_vertices, tpl.basis.size, tpl.anchors.faces.shape[0]
    row_blocks = {"E_l": slice(0, 2 * k), "E_c": slice(2 * k, 2 * k + 6 * n), "E_r": slice(2 * k + 6 * n, None)}
    rng = np.random.default_rng(5)
    worst, blocks = 0.0, 0
    for _ in range(10):
        extr = frontal_extrinsics(*rng.uniform(-20, 20, 3),
                                  translation=(rng.uniform(-30, 30), rng.uniform(-30, 30), rng.uniform(450, 700)))
        params = FitParams(rng.normal(0, 0.5, m), rng.normal(0, 0.5, (n, 3)), extr, rng.uniform(0.8, 1.25))
        lms = synthesize_landmarks(tpl, params, INTR, noise=5.0, rng=rng)
        beta_prev = rng.normal(0, 0.5, m)
        _, jac = prob.residuals_and_jacobian(params, lms, beta_prev)
        total = params.n_params
        # beta and pose columns one by one; corrective columns along random directions
        directions = [np.eye(total)[c] for c in list(range(m)) + list(range(total - 7, total))]
        for _ in range(6):
            v = np.zeros(total)
            v[m:m + 3 * n] = rng.normal(size=3 * n)
            directions.append(v / np.linalg.norm(v))
        h = 1e-5
        an = np.column_stack([jac @ v for v in directions])
        fd = np.column_stack([(prob.residuals_and_jacobian(params.retract(h * v), lms, beta_prev)[0]
                               - prob.residuals_and_jacobian(params.retract(-h * v), lms, beta_prev)[0]) / (2 * h)
                              for v in directions])
        col_groups = {"beta": slice(0, m), "pose": slice(m, m + 7), "corrective": slice(m + 7, None)}
        for rows in row_blocks.values():
            for cols in col_groups.values():
                scale = np.linalg.norm(fd[rows, cols])
                if scale > 0:
                    worst = max(worst, np.linalg.norm(an[rows, cols] - fd[rows, cols]) / scale)
                    blocks += 1
    ok = acceptance(5, worst <= 1e-4, f"worst relative error {worst:.1e} over {blocks} nonzero blocks "
                                      f"at 10 states (need <= 1e-4)")
    assert ok


# ---------------------------------------------------------------- 6


def test_criterion_06_energy_constants(acceptance):
    cfg = SolverConfig()
    got = (cfg.omega_c, cfg.omega_r, cfg.lambda_delta, cfg.lambda_f, cfg.lambda_q, cfg.iterations)
    total = total_energy(1.0, 1.0, 1.0)
    ok = got == (25.0, 10.0, 4.0, 5.0, 5.0, 5) and total == 36.0
    acceptance(6, ok, f"constants {got}, total_energy(1,1,1) = {total}")
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_07_sampling_law(acceptance):
    rng = np.random.default_rng(7)
    a = np.array([sample_hypersphere_weights(5, rng) for _ in range(10_000)])
    r = np.linalg.norm(a, axis=1)
    p = stats.kstest(r, stats.uniform(loc=0.6, scale=0.7).cdf).pvalue
    ok = r.min() >= 0.6 and r.max() <= 1.3 and a.min() >= 0.0 and p > 0.01
    acceptance(7, ok, f"|a| in [{r.min():.4f}, {r.max():.4f}], min a_i {a.min():.1e}, KS p = {p:.3f}")
    assert ok


# ---------------------------------------------------------------- 8


def test_criterion_08_pca(acceptance):
    rng = np.random.default_rng(8)
    ref = sphere_mesh(400)
    basis = np.linalg.qr(rng.normal(size=(3 * ref.n_vertices, 10)))[0].T
    coeffs = rng.normal(size=(80, 10)) * np.geomspace(20.0, 0.5, 10)
    flat = ref.vertices.reshape(-1) + coeffs @ basis + rng.normal(scale=1e-6, size=(80, 3 * ref.n_vertices))
    model = pca_fit([Mesh(f.reshape(-1, 3), ref.faces) for f in flat], 10)
    explained = float(model.explained_ratio.sum())
    ok = acceptance(8, explained >= 0.9999, f"10 components explain {100 * explained:.6f}% (need >= 99.99%)")
    assert ok


# ---------------------------------------------------------------- 9


def _random_pair_mesh(rng):
    if rng.random() < 0.5:
        m = sphere_mesh(int(rng.integers(12, 102)), radius=rng.uniform(10, 60))
        return Mesh(m.vertices + rng.normal(scale=1.0, size=m.vertices.shape) + rng.normal(scale=5, size=3),
                    m.faces)
    n_tri = int(rng.integers(1, 201))
    return Mesh(rng.normal(scale=20.0, size=(3 * n_tri, 3)), np.arange(3 * n_tri).reshape(-1, 3))


def _plane(n, size, z):
    xs = np.linspace(-size / 2, size / 2, n)
    g = np.stack(np.meshgrid(xs, xs, indexing="ij"), -1).reshape(-1, 2)
    faces = [[n * i + j, n * (i + 1) + j, n * i + j + 1] for i in range(n - 1) for j in range(n - 1)]
    faces += [[n * i + j + 1, n * (i + 1) + j, n * (i + 1) + j + 1] for i in range(n - 1) for j in range(n - 1)]
    return Mesh(np.column_stack([g, np.full(len(g), z)]), faces)


def test_criterion_09_armse_oracle(acceptance):
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(50):
        a, b = _random_pair_mesh(rng), _random_pair_mesh(rng)
        assert a.n_faces <= 200 and b.n_faces <= 200
        worst = max(worst, abs(armse(a, b) - brute_armse(a.vertices, a.faces, b.vertices, b.faces)))
    h = 3.0
    plane = armse(_plane(8, 100.0, 0.0), _plane(11, 100.0, h))
    rel = abs(plane - h) / h
    ok = worst <= 1e-9 and rel <= 0.02
    acceptance(9, ok, f"max |BVH - brute| = {worst:.1e} over 50 pairs, plane offset error {100 * rel:.3f}%")
    assert ok


# ---------------------------------------------------------------- 10


def test_criterion_10_icp(acceptance):
    head = make_head(15, 34)
    axis = np.array([0.3, 1.0, -0.2]) / np.linalg.norm([0.3, 1.0, -0.2])
    r = Rotation.from_rotvec(np.radians(2.0) * axis).as_matrix()
    shift = np.array([1.0, 0.0, 0.0])
    moved = head.with_vertices(head.vertices @ r.T + shift)
    res = icp_refine(moved, head, max_iters=30)
    h = res.history
    monotone = all(b <= a for a, b in zip(h, h[1:]))
    ok = res.rmse_after <= 0.01 and res.iterations <= 30 and monotone
    acceptance(10, ok, f"{head.n_vertices} vertices, residual RMSE {res.rmse_after:.1e} mm after "
                       f"{res.iterations} iterations, non-increasing: {monotone}")
    assert ok


# ---------------------------------------------------------------- 11


def test_criterion_11_poisson(acceptance):
    from facetwin.texture import UVTexture, blend_region, mark_boundary, poisson_blend
    from oracles import poisson_stencil_residual
    rng = np.random.default_rng(11)
    worst_stencil = worst_offset = 0.0
    identical = untouched = True
    for _ in range(5):
        bg, fg = rng.random((64, 64, 3)), rng.random((64, 64, 3))
        mask = np.zeros((64, 64), np.uint8)
        for _ in range(3):
            r0, c0 = rng.integers(0, 56, 2)
            hh, ww = rng.integers(6, 32, 2)
            mask[r0:r0 + hh, c0:c0 + ww] = 1
        mask = mark_boundary(mask)
        region = blend_region(mask)
        identical &= np.array_equal(poisson_blend(UVTexture(bg, mask), UVTexture.full(bg)).pixels, bg)
        off = poisson_blend(UVTexture(bg + rng.uniform(-1, 1), mask), UVTexture.full(bg)).pixels
        worst_offset = max(worst_offset, float(np.abs(off - bg).max()))
        out = poisson_blend(UVTexture(fg, mask), UVTexture.full(bg)).pixels
        worst_stencil = max(worst_stencil, poisson_stencil_residual(out, fg, bg, region))
        untouched &= np.array_equal(out[~region], bg[~region])
    ok = identical and worst_offset <= 1e-6 and worst_stencil <= 1e-6 and untouched
    acceptance(11, ok, f"identical bitwise {identical}, offset {worst_offset:.1e}, stencil residual "
                       f"{worst_stencil:.1e}, outside untouched {untouched}")
    assert ok


# ---------------------------------------------------------------- 12


def test_criterion_12_visibility(head_template, acceptance):
    mesh = head_template.mesh
    w, h = 640, 480
    intr = init_intrinsics(w, h)
    extr = frontal_extrinsics(30.0, 0.0, 0.0, translation=(0.0, 0.0, 550.0))
    ctx = ProjectionContext(mesh, mesh.vertices, extr, intr, checker_image(w, h))
    depth = ctx.depth_buffer()
    tex = project_texture(ctx, (256, 256), depth=depth)
    rows, cols, fids, bary = uv_texels(mesh, (256, 256))
    cam = camera_points(mesh.vertices, extr)
    pts = np.einsum("kc,kcd->kd", bary, cam[mesh.faces[fids]])
    xy = intr.focal * pts[:, :2] / pts[:, 2:3] + [intr.cx, intr.cy]
    inside = (xy[:, 0] >= -0.5) & (xy[:, 0] <= w - 0.5) & (xy[:, 1] >= -0.5) & (xy[:, 1] <= h - 0.5)
    candidates = front_facing(mesh.vertices, mesh.faces, extr)[fids] & inside
    finite = depth[np.isfinite(depth)]
    eps = 1e-3 * float(finite.max() - finite.min())
    oracle = np.zeros(len(pts), bool)
    oracle[candidates] = raycast_visible(cam, mesh.faces, intr.focal, intr.cx, intr.cy, pts[candidates], eps)
    occluded = int(np.count_nonzero(candidates & ~oracle))
    ours = tex.mask[rows, cols] != BACKGROUND
    agree = float(np.mean(ours == oracle))
    ok = agree >= 0.999 and occluded > 0
    acceptance(12, ok, f"agreement {100 * agree:.3f}% over {len(rows)} covered texels "
                       f"({occluded} self-occluded front-facing texels)")
    assert ok


# ---------------------------------------------------------------- 13


def _run(capsys, argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out


def _tree_equal(a: Path, b: Path, replace: tuple[str, str]) -> list[str]:
    """Relative paths whose contents differ (path strings in ``a`` rewritten to ``b``)."""
    diffs = []
    names_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    names_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    if names_a != names_b:
        return ["file list"]
    for rel in names_a:
        da, db = (a / rel).read_bytes(), (b / rel).read_bytes()
        if da != db and da.replace(replace[0].encode(), replace[1].encode()) != db:
            diffs.append(str(rel))
    return diffs


def _pipeline(capsys, root: Path) -> dict[str, str]:
    """Run every command once into ``root``; returns stdout per command."""
    demo = root / "demo"
    outputs = {}
    outputs["make-demo"] = _run(capsys, ["--seed", 5, "make-demo", "--out-dir", demo, "--rings", 17,
                                         "--columns", 31, "--resolution", 64, "--per-group", 5])
    cfg = ["--config", demo / "config.ini", "--seed", 5]
    outputs["config"] = _run(capsys, cfg + ["config"])
    outputs["encode-dr"] = _run(capsys, cfg + ["encode-dr", demo / "dataset" / "template.obj",
                                               "--out", root / "t.dr"])
    outputs["decode-dr"] = _run(capsys, cfg + ["decode-dr", demo / "dataset" / "asian_male_00.dr",
                                               "--out", root / "decoded.obj"])
    outputs["sample"] = _run(capsys, cfg + ["--jobs", 2, "sample", "--count", 4, "--out-dir", root / "samples"])
    outputs["fit"] = _run(capsys, cfg + ["fit", "--landmarks", demo / "landmarks.json", "--out-dir", root / "fit"])
    outputs["texture"] = _run(capsys, cfg + ["texture", "--fit", root / "fit" / "fit.json", "--face",
                                             root / "fit" / "face.obj", "--image", demo / "photo.ppm",
                                             "--background", demo / "background.ppm", "--landmarks",
                                             demo / "landmarks.json", "--out", root / "tex.ppm",
                                             "--mask", root / "mask.pgm"])
    outputs["eval"] = _run(capsys, cfg + ["eval", "--gt", demo / "template.obj", "--pred",
                                          root / "samples" / "face_00000.obj", root / "fit" / "face.obj",
                                          "--out", root / "eval" / "report.csv", "--heatmap", root / "eval" / "h.obj"])
    outputs["heatmap"] = _run(capsys, cfg + ["heatmap", "--gt", demo / "template.obj", "--pred",
                                             root / "decoded.obj", "--out", root / "heat.obj"])
    return outputs


def test_criterion_13_cli_determinism(tmp_path, capsys, monkeypatch, acceptance):
    for name in [k for k in os.environ if k.startswith("FACETWIN_")]:
        monkeypatch.delenv(name)
    first = _pipeline(capsys, tmp_path / "a")
    second = _pipeline(capsys, tmp_path / "b")
    codes = {k: v[0] for k, v in first.items()}
    stdout_same = all(first[k][1].replace(str(tmp_path / "a"), str(tmp_path / "b")) == second[k][1] for k in first)
    diffs = _tree_equal(tmp_path / "a", tmp_path / "b", (str(tmp_path / "a"), str(tmp_path / "b")))
    n_files = sum(1 for p in (tmp_path / "a").rglob("*") if p.is_file())
    ok = all(c == 0 for c in codes.values()) and stdout_same and not diffs
    acceptance(13, ok, f"{len(first)} commands, {n_files} output files, exit codes {sorted(set(codes.values()))}, "
                       f"stdout identical {stdout_same}, differing files {diffs or 'none'}")
    assert ok
    assert filecmp.cmp(tmp_path / "a" / "tex.ppm", tmp_path / "b" / "tex.ppm", shallow=False)
