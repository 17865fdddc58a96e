"""Joint landmark fitting over expression, corrective field, pose and focal scale.

The total energy is ``E = E_l + w_c E_c + w_r E_r`` with

* ``E_l`` the eye-distance-normalized squared reprojection error of the
  barycentric landmark anchors,
* ``E_c`` the Laplacian change of the face relative to the previous
  iteration's expression plus ``lambda_delta |dP|^2``,
* ``E_r`` priors on expression weights, ``log(fs)`` and the rotation's
  deviation from a reference orientation.

All three are sums of squares, minimized with damped Gauss-Newton over the
stacked residual vector.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .camera import (DegenerateConfigurationError, Extrinsics, Intrinsics, epnp_pose,
                     frontal_rotation, quat_from_matrix, quat_to_matrix)
from .dr import rotation_to_rotvec, skew
from .mesh import Mesh, SparseWeights, cotangent_weights, laplacian_matrix, sample_surface_many

log = logging.getLogger(__name__)

BEHIND_CAMERA_RESIDUAL = 1e6
N_CONTOUR = 17


# ------------------------------------------------------------------ types


@dataclass(frozen=True, eq=False)
class BlendshapeBasis:
    """Expression displacement fields ``B_i`` (M, n, 3) and prior scales ``sigma``."""

    blendshapes: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.blendshapes, dtype=np.float64)
        s = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if b.ndim != 3 or b.shape[2] != 3:
            raise ValueError("blendshapes must have shape (M, n, 3)")
        if len(s) != len(b) or np.any(s <= 0):
            raise ValueError("one positive sigma per blendshape required")
        object.__setattr__(self, "blendshapes", b)
        object.__setattr__(self, "sigma", s)

    @property
    def size(self) -> int:
        return len(self.blendshapes)

    def combine(self, beta: np.ndarray) -> np.ndarray:
        return np.tensordot(np.asarray(beta, dtype=np.float64), self.blendshapes, axes=1)

    @classmethod
    def empty(cls, n: int) -> "BlendshapeBasis":
        return cls(np.zeros((0, n, 3)), np.zeros(0))


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Detected 2D landmarks with their barycentric anchors on the template.

    ``strips`` maps a landmark index to the vertex path its anchor may slide
    along; only landmarks flagged in ``contour`` slide.
    """

    points: np.ndarray
    faces: np.ndarray
    bary: np.ndarray
    contour: np.ndarray
    eye_outer: tuple[int, int]
    strips: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        k = len(pts)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1)
        bary = np.asarray(self.bary, dtype=np.float64).reshape(-1, 3)
        contour = np.asarray(self.contour, dtype=bool).reshape(-1)
        if not (len(faces) == len(bary) == len(contour) == k):
            raise ValueError("landmark count does not match the anchor table")
        if np.any(np.abs(bary.sum(1) - 1.0) > 1e-9):
            raise ValueError("anchor barycentrics must sum to 1")
        i, j = (int(x) for x in self.eye_outer)
        if i == j or not (0 <= i < k and 0 <= j < k):
            raise ValueError("eye_outer must name two distinct landmarks")
        if np.linalg.norm(pts[i] - pts[j]) <= 0:
            raise ValueError("outer eye landmarks coincide; W_eye undefined")
        for name, val in (("points", pts), ("faces", faces), ("bary", bary), ("contour", contour)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "eye_outer", (i, j))
        object.__setattr__(self, "strips", {int(a): np.asarray(s, dtype=np.int64) for a, s in self.strips.items()})

    def __len__(self) -> int:
        return len(self.points)

    @property
    def w_eye(self) -> float:
        i, j = self.eye_outer
        return float(np.linalg.norm(self.points[i] - self.points[j]))

    def with_points(self, points: np.ndarray) -> "LandmarkSet":
        return replace(self, points=np.asarray(points, dtype=np.float64))

    def with_anchors(self, faces: np.ndarray, bary: np.ndarray) -> "LandmarkSet":
        return replace(self, faces=faces, bary=bary)


@dataclass(frozen=True, eq=False)
class FitParams:
    """Expression weights, per-vertex correction (mm), camera pose and focal scale."""

    beta: np.ndarray
    delta: np.ndarray
    extrinsics: Extrinsics
    fs: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "delta", np.asarray(self.delta, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "fs", float(self.fs))
        if not (np.all(np.isfinite(self.beta)) and np.all(np.isfinite(self.delta)) and np.isfinite(self.fs)):
            raise ValueError("non-finite fit parameters")

    @classmethod
    def initial(cls, n_vertices: int, n_blend: int, extrinsics: Extrinsics) -> "FitParams":
        return cls(np.zeros(n_blend), np.zeros((n_vertices, 3)), extrinsics, 1.0)

    def face(self, mesh: Mesh, basis: BlendshapeBasis) -> np.ndarray:
        """``P_F = P + sum beta_i B_i + dP``."""
        return mesh.vertices + basis.combine(self.beta) + self.delta

    def retract(self, step: np.ndarray) -> "FitParams":
        """Apply a stacked increment ``[dbeta, ddelta, dtheta, dt, dfs]``."""
        m, n3 = len(self.beta), self.delta.size
        beta = self.beta + step[:m]
        delta = self.delta + step[m:m + n3].reshape(-1, 3)
        g = step[m + n3:]
        extr = self.extrinsics.retract(g[0:3], g[3:6])
        return FitParams(beta, delta, extr, self.fs + g[6])

    @property
    def n_params(self) -> int:
        return len(self.beta) + self.delta.size + 7


@dataclass(frozen=True)
class SolverConfig:
    """Energy weights and Gauss-Newton controls; defaults are the published constants."""

    iterations: int = 5
    omega_c: float = 25.0
    omega_r: float = 10.0
    lambda_delta: float = 4.0
    lambda_f: float = 5.0
    lambda_q: float = 5.0
    inner_iterations: int = 1
    damping: float = 1e-3
    damping_factor: float = 10.0
    max_retries: int = 12
    rtol: float = 1e-14
    rotation_reference: tuple[float, float, float, float] = tuple(quat_from_matrix(frontal_rotation()))

    def __post_init__(self):
        for name in ("omega_c", "omega_r", "lambda_delta", "lambda_f", "lambda_q", "damping"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.iterations < 1 or self.inner_iterations < 1:
            raise ValueError("iteration counts must be >= 1")


# ------------------------------------------------------------------ helpers


def inverse_left_jacobian(phi: np.ndarray) -> np.ndarray:
    """Inverse of the SO(3) left Jacobian: ``log(exp(d) exp(phi)) ~ phi + J^-1 d``."""
    theta = np.linalg.norm(phi)
    k = skew(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * k + (k @ k) / 12.0
    c = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * k + c * (k @ k)


def rotation_deviation(extr: Extrinsics, reference: tuple) -> np.ndarray:
    """Axis-angle 3-vector of ``R R_ref^T``."""
    return rotation_to_rotvec(extr.rotation @ quat_to_matrix(reference).T)


def solve_arrowhead(h: sparse.spmatrix, rhs: np.ndarray, m: int, n3: int) -> np.ndarray:
    """Solve the damped normal equations by eliminating the sparse dP block.

    Columns are ``[beta (m) | dP (n3) | pose and focal (7)]``; the dense
    border is condensed into a small Schur complement.
    """
    h = sparse.csc_matrix(h)
    d = np.arange(m, m + n3)
    g = np.r_[np.arange(m), np.arange(m + n3, h.shape[0])]
    h_dd = h[d][:, d].tocsc()
    h_dg = h[d][:, g].toarray()
    h_gg = h[g][:, g].toarray()
    lu = splinalg.splu(h_dd, permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})
    inv_dg = lu.solve(h_dg)
    inv_rd = lu.solve(rhs[d])
    x_g = np.linalg.solve(h_gg - h_dg.T @ inv_dg, rhs[g] - h_dg.T @ inv_rd)
    out = np.empty_like(rhs)
    out[g] = x_g
    out[d] = inv_rd - inv_dg @ x_g
    return out


def edge_face_map(faces: np.ndarray) -> dict[tuple[int, int], int]:
    out = {}
    for fi, tri in enumerate(faces):
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            out.setdefault((min(a, b), max(a, b)), fi)
    return out


class FitProblem:
    """Cached operators for one (template, basis, intrinsics, config) combination."""

    def __init__(self, mesh: Mesh, basis: BlendshapeBasis, intr: Intrinsics,
                 config: SolverConfig | None = None, weights: SparseWeights | None = None):
        self.mesh = mesh
        self.basis = basis
        self.intr = intr.with_scale(1.0)
        self.config = config or SolverConfig()
        self.weights = weights if weights is not None else cotangent_weights(mesh)
        n = mesh.n_vertices
        if basis.blendshapes.shape[1:] != (n, 3):
            raise ValueError("blendshape basis does not match the mesh vertex count")
        self.n = n
        self.m = basis.size
        self.lap = laplacian_matrix(self.weights)
        self.lap3 = sparse.kron(self.lap, sparse.identity(3), format="csr")
        # L B_m flattened vertex-major, one column per blendshape
        self.lap_b = np.column_stack([(self.lap @ b).reshape(-1) for b in basis.blendshapes]) \
            if self.m else np.zeros((3 * n, 0))
        self._edge_face = None

    @property
    def edge_faces(self):
        if self._edge_face is None:
            self._edge_face = edge_face_map(self.mesh.faces)
        return self._edge_face

    # ---------------------------------------------------------- residuals

    def landmark_residuals(self, params: FitParams, lms: LandmarkSet, jacobian: bool = False):
        """Residuals ``sqrt(100 / W_eye) (proj_i - L_i)`` stacked (x0, y0, x1, ...)."""
        scale = np.sqrt(100.0 / lms.w_eye)
        pf = params.face(self.mesh, self.basis)
        x = sample_surface_many(pf, self.mesh.faces, lms.faces, lms.bary)
        r_mat = params.extrinsics.rotation
        y = x @ r_mat.T + params.extrinsics.translation
        fz = params.fs * self.intr.f
        k = len(lms)
        behind = y[:, 2] <= 0
        z = np.where(behind, 1.0, y[:, 2])
        proj = fz * y[:, :2] / z[:, None] + [self.intr.cx, self.intr.cy]
        res = scale * (proj - lms.points)
        res[behind] = BEHIND_CAMERA_RESIDUAL
        res = res.reshape(-1)
        if not jacobian:
            return res, behind
        # d proj / d y : (k, 2, 3)
        dpy = np.zeros((k, 2, 3))
        dpy[:, 0, 0] = fz / z
        dpy[:, 1, 1] = fz / z
        dpy[:, 0, 2] = -fz * y[:, 0] / z**2
        dpy[:, 1, 2] = -fz * y[:, 1] / z**2
        dpy *= scale
        dpy[behind] = 0.0
        dpx = dpy @ r_mat  # d res / d x, (k, 2, 3)

        # globals: beta | dtheta | t | fs
        tri_b = self.basis.blendshapes[:, self.mesh.faces[lms.faces]]  # (M, k, 3, 3)
        dx_db = np.einsum("kc,mkcd->kdm", lms.bary, tri_b) if self.m else np.zeros((k, 3, 0))
        j_beta = np.einsum("kad,kdm->kam", dpx, dx_db).reshape(2 * k, self.m)
        rx = x @ r_mat.T
        j_rot = -np.einsum("kad,kde->kae", dpy, skew(rx)).reshape(2 * k, 3)
        j_t = dpy.reshape(2 * k, 3)
        j_fs = (scale * self.intr.f * y[:, :2] / z[:, None])
        j_fs[behind] = 0.0
        j_fs = j_fs.reshape(2 * k, 1)

        # corrective field: three vertices per landmark
        rows, cols, vals = [], [], []
        verts = self.mesh.faces[lms.faces]
        for c in range(3):
            blk = dpx * lms.bary[:, c][:, None, None]  # (k, 2, 3)
            for a in range(2):
                for d in range(3):
                    rows.append(2 * np.arange(k) + a)
                    cols.append(3 * verts[:, c] + d)
                    vals.append(blk[:, a, d])
        j_delta = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                    shape=(2 * k, 3 * self.n)).tocsr()
        j_glob = np.hstack([j_rot, j_t, j_fs])
        return res, behind, j_beta, j_delta, j_glob

    def corrective_residuals(self, params: FitParams, beta_prev: np.ndarray):
        """Laplacian change residual (3n) and ``sqrt(lambda_delta) dP`` (3n)."""
        disp = self.basis.combine(params.beta - beta_prev) + params.delta
        r_lap = (self.lap @ disp).reshape(-1)
        r_del = np.sqrt(self.config.lambda_delta) * params.delta.reshape(-1)
        return r_lap, r_del

    def prior_residuals(self, params: FitParams, jacobian: bool = False):
        """``beta / sigma``, ``sqrt(lambda_f) log fs``, ``sqrt(lambda_q) q_dev``."""
        cfg = self.config
        qdev = rotation_deviation(params.extrinsics, cfg.rotation_reference)
        r = np.concatenate([params.beta / self.basis.sigma,
                            [np.sqrt(cfg.lambda_f) * np.log(params.fs)],
                            np.sqrt(cfg.lambda_q) * qdev])
        if not jacobian:
            return r
        j_beta = np.zeros((len(r), self.m))
        j_beta[np.arange(self.m), np.arange(self.m)] = 1.0 / self.basis.sigma
        j_glob = np.zeros((len(r), 7))
        j_glob[self.m, 6] = np.sqrt(cfg.lambda_f) / params.fs
        j_glob[self.m + 1:, 0:3] = np.sqrt(cfg.lambda_q) * inverse_left_jacobian(qdev)
        return r, j_beta, j_glob

    # ---------------------------------------------------------- energies

    def energies(self, params: FitParams, lms: LandmarkSet, beta_prev: np.ndarray) -> dict:
        r_l, behind = self.landmark_residuals(params, lms)
        r_lap, r_del = self.corrective_residuals(params, beta_prev)
        r_r = self.prior_residuals(params)
        e_l, e_c, e_r = float(r_l @ r_l), float(r_lap @ r_lap + r_del @ r_del), float(r_r @ r_r)
        cfg = self.config
        return {"E_l": e_l, "E_c": e_c, "E_r": e_r,
                "E": total_energy(e_l, e_c, e_r, cfg), "behind_camera": int(behind.sum())}

    def residuals_and_jacobian(self, params: FitParams, lms: LandmarkSet, beta_prev: np.ndarray):
        """Stacked weighted residual vector and sparse Jacobian.

        Columns: ``[beta (M) | dP (3n, vertex-major) | dtheta (3) | t (3) | fs (1)]``.
        """
        cfg = self.config
        sc, sr = np.sqrt(cfg.omega_c), np.sqrt(cfg.omega_r)
        r_l, _, jl_b, jl_d, jl_g = self.landmark_residuals(params, lms, jacobian=True)
        r_lap, r_del = self.corrective_residuals(params, beta_prev)
        r_r, jr_b, jr_g = self.prior_residuals(params, jacobian=True)
        n3 = 3 * self.n
        blocks = [
            [sparse.csr_matrix(jl_b), jl_d, sparse.csr_matrix(jl_g)],
            [sparse.csr_matrix(sc * self.lap_b), sc * self.lap3, None],
            [None, np.sqrt(cfg.omega_c * cfg.lambda_delta) * sparse.identity(n3, format="csr"), None],
            [sparse.csr_matrix(sr * jr_b), None, sparse.csr_matrix(sr * jr_g)],
        ]
        if self.m == 0:
            blocks = [row[1:] for row in blocks]
        jac = sparse.bmat(blocks, format="csr")
        res = np.concatenate([r_l, sc * r_lap, sc * r_del, sr * r_r])
        return res, jac


def landmark_energy(params: FitParams, mesh: Mesh, basis: BlendshapeBasis, lms: LandmarkSet,
                    intr: Intrinsics) -> tuple[float, np.ndarray]:
    """``E_l`` and its residual vector."""
    r, _ = FitProblem(mesh, basis, intr, weights=_empty_weights(mesh)).landmark_residuals(params, lms)
    return float(r @ r), r


def corrective_energy(params: FitParams, mesh: Mesh, basis: BlendshapeBasis, weights: SparseWeights,
                      beta_prev: np.ndarray, config: SolverConfig | None = None) -> tuple[float, np.ndarray]:
    """``E_c`` and its residual vector ``[L change (3n), sqrt(lambda_delta) dP (3n)]``."""
    prob = FitProblem(mesh, basis, Intrinsics(1.0, 0.0, 0.0), config, weights)
    r_lap, r_del = prob.corrective_residuals(params, np.asarray(beta_prev, dtype=np.float64))
    r = np.concatenate([r_lap, r_del])
    return float(r @ r), r


def prior_energy(params: FitParams, basis: BlendshapeBasis, config: SolverConfig | None = None) -> tuple[float, np.ndarray]:
    """``E_r`` and its residual vector."""
    config = config or SolverConfig()
    qdev = rotation_deviation(params.extrinsics, config.rotation_reference)
    r = np.concatenate([params.beta / basis.sigma, [np.sqrt(config.lambda_f) * np.log(params.fs)],
                        np.sqrt(config.lambda_q) * qdev])
    return float(r @ r), r


def total_energy(e_l: float, e_c: float, e_r: float, config: SolverConfig | None = None) -> float:
    config = config or SolverConfig()
    return e_l + config.omega_c * e_c + config.omega_r * e_r


def _empty_weights(mesh: Mesh) -> SparseWeights:
    # landmark terms never touch the Laplacian; skip the cotangent assembly
    return SparseWeights(sparse.csr_matrix((mesh.n_vertices, mesh.n_vertices)))


# ---------------------------------------------------------------- sliding


def slide_contour_anchors(params: FitParams, mesh: Mesh, basis: BlendshapeBasis, lms: LandmarkSet,
                          intr: Intrinsics, edge_faces: dict | None = None) -> LandmarkSet:
    """Move each contour anchor along its strip to the point projecting nearest its landmark.

    The search is exact along each strip edge: the closest point on the
    projected 2D segment is mapped back to the 3D edge parameter through the
    perspective division. An anchor only moves if that strictly reduces its
    reprojection distance.
    """
    edge_faces = edge_faces if edge_faces is not None else edge_face_map(mesh.faces)
    pf = params.face(mesh, basis)
    extr = params.extrinsics
    fz = params.fs * intr.f
    c = np.array([intr.cx, intr.cy])
    faces = lms.faces.copy()
    bary = lms.bary.copy()
    for k in np.flatnonzero(lms.contour):
        strip = lms.strips.get(int(k))
        if strip is None or len(strip) < 2:
            continue
        target = lms.points[k]
        cur = extr.apply(sample_surface_many(pf, mesh.faces, faces[k:k + 1], bary[k:k + 1]))[0]
        best = np.linalg.norm(fz * cur[:2] / cur[2] + c - target) if cur[2] > 0 else np.inf
        ycam = extr.apply(pf[strip])
        for s in range(len(strip) - 1):
            ya, yb = ycam[s], ycam[s + 1]
            if ya[2] <= 0 or yb[2] <= 0:
                continue
            pa, pb = fz * ya[:2] / ya[2] + c, fz * yb[:2] / yb[2] + c
            seg = pb - pa
            ll = seg @ seg
            u = 0.0 if ll == 0 else float(np.clip((target - pa) @ seg / ll, 0.0, 1.0))
            dist = np.linalg.norm(pa + u * seg - target)
            if dist < best:
                # image-segment parameter -> 3D edge parameter
                t3 = u * ya[2] / (yb[2] * (1.0 - u) + u * ya[2])
                a, b = int(strip[s]), int(strip[s + 1])
                fi = edge_faces[(min(a, b), max(a, b))]
                w = np.zeros(3)
                tri = mesh.faces[fi]
                w[int(np.flatnonzero(tri == a)[0])] = 1.0 - t3
                w[int(np.flatnonzero(tri == b)[0])] = t3
                best, faces[k], bary[k] = dist, fi, w
    return lms.with_anchors(faces, bary)


# ---------------------------------------------------------------- fitting


@dataclass
class FitResult:
    params: FitParams
    landmarks: LandmarkSet
    diagnostics: list[dict]
    converged: bool = True
    warnings: list[str] = field(default_factory=list)

    @property
    def energies(self) -> list[float]:
        return [d["E"] for d in self.diagnostics]


def initial_pose(mesh: Mesh, lms: LandmarkSet, intr: Intrinsics, config: SolverConfig) -> tuple[Extrinsics, bool]:
    """EPnP on the non-contour anchors; frontal fallback when it fails."""
    x = sample_surface_many(mesh.vertices, mesh.faces, lms.faces, lms.bary)
    sel = ~lms.contour if np.count_nonzero(~lms.contour) >= 6 else np.ones(len(lms), bool)
    try:
        return epnp_pose(x[sel], lms.points[sel], intr.with_scale(1.0)), True
    except (DegenerateConfigurationError, np.linalg.LinAlgError):
        pass
    r = quat_to_matrix(config.rotation_reference)
    xc = (x - x.mean(0)) @ r.T
    spread3 = np.sqrt(np.mean(np.sum(xc[:, :2] ** 2, axis=1)))
    l2 = lms.points - lms.points.mean(0)
    spread2 = np.sqrt(np.mean(np.sum(l2**2, axis=1)))
    depth = intr.f * spread3 / max(spread2, 1e-9)
    m2 = (lms.points.mean(0) - [intr.cx, intr.cy]) * depth / intr.f
    t = np.array([m2[0], m2[1], depth]) - r @ x.mean(0)
    return Extrinsics.from_matrix(r, t), False


def fit(mesh: Mesh, lms: LandmarkSet, basis: BlendshapeBasis, intr: Intrinsics,
        config: SolverConfig | None = None, init: FitParams | None = None,
        weights: SparseWeights | None = None) -> FitResult:
    """Fit ``mesh`` to the landmarks with ``config.iterations`` outer Gauss-Newton rounds.

    Each round slides the contour anchors, freezes the current expression
    weights as the Laplacian reference, then takes ``inner_iterations``
    Levenberg-damped Gauss-Newton steps. A step is accepted only if it lowers
    the total energy; otherwise the damping grows tenfold and the step is
    retried.
    """
    config = config or SolverConfig()
    prob = FitProblem(mesh, basis, intr, config, weights)
    notes: list[str] = []
    if init is None:
        extr, ok = initial_pose(mesh, lms, intr, config)
        if not ok:
            notes.append("EPnP failed; starting from the frontal pose")
            warnings.warn(notes[-1], RuntimeWarning)
        params = FitParams.initial(mesh.n_vertices, basis.size, extr)
    else:
        params = init
    beta_prev = params.beta.copy()
    diag = [dict(iteration=0, damping=config.damping, retries=0, **prob.energies(params, lms, beta_prev))]
    mu = config.damping
    converged = True
    # absolute floor for the predicted decrease; below it the fit is at roundoff level
    e_floor = 1e-20 * max(diag[0]["E"], 1.0)
    for it in range(1, config.iterations + 1):
        lms = slide_contour_anchors(params, mesh, basis, lms, intr.with_scale(1.0), prob.edge_faces)
        beta_prev = params.beta.copy()
        e_cur = prob.energies(params, lms, beta_prev)["E"]
        retries = 0
        for _ in range(config.inner_iterations):
            res, jac = prob.residuals_and_jacobian(params, lms, beta_prev)
            jtj = (jac.T @ jac).tocsc()
            g = jac.T @ res
            dvec = jtj.diagonal()
            dvec = np.where(dvec > 0, dvec, 1.0)
            accepted = False
            for _ in range(config.max_retries):
                h = jtj + sparse.diags(mu * dvec, format="csc")
                step = solve_arrowhead(h, -g, prob.m, 3 * prob.n)
                predicted = -(g @ step) - 0.5 * step @ (jtj @ step)
                if predicted <= max(config.rtol * e_cur, e_floor):
                    accepted = None
                    break
                try:
                    cand = params.retract(step)
                    e_new = prob.energies(cand, lms, beta_prev)["E"] if cand.fs > 0 else np.inf
                except ValueError:
                    e_new = np.inf
                if e_new <= e_cur:
                    params, accepted = cand, True
                    mu = max(mu / config.damping_factor, 1e-12)
                    break
                mu *= config.damping_factor
                retries += 1
            if accepted is None:
                break
            if not accepted:
                gnorm = float(np.linalg.norm(g))
                if gnorm > 1e-6 * max(1.0, np.sqrt(e_cur)):
                    converged = False
                    notes.append(f"iteration {it}: no energy decrease after {config.max_retries} damping retries")
                    warnings.warn(notes[-1], RuntimeWarning)
                break
            if e_cur - e_new <= config.rtol * max(e_cur, 1e-300):
                e_cur = e_new
                break
            e_cur = e_new
        diag.append(dict(iteration=it, damping=mu, retries=retries, **prob.energies(params, lms, beta_prev)))
    return FitResult(params, lms, diag, converged, notes)


def reprojection_rmse(params: FitParams, mesh: Mesh, basis: BlendshapeBasis, lms: LandmarkSet,
                      intr: Intrinsics) -> float:
    pf = params.face(mesh, basis)
    x = params.extrinsics.apply(sample_surface_many(pf, mesh.faces, lms.faces, lms.bary))
    proj = params.fs * intr.f * x[:, :2] / x[:, 2:3] + [intr.cx, intr.cy]
    return float(np.sqrt(np.mean(np.sum((proj - lms.points) ** 2, axis=1))))


# ---------------------------------------------------------------- files


def save_basis(basis: BlendshapeBasis, path: str | Path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, blendshapes=basis.blendshapes, sigma=basis.sigma)


def load_basis(path: str | Path) -> BlendshapeBasis:
    with np.load(path) as z:
        return BlendshapeBasis(z["blendshapes"], z["sigma"])


def save_anchor_table(lms: LandmarkSet, path: str | Path) -> None:
    """Anchor table: landmark index -> face, barycentrics, contour flag, strip id."""
    rows = []
    for k in range(len(lms)):
        rows.append({"landmark": k, "face": int(lms.faces[k]), "bary": [float(x) for x in lms.bary[k]],
                     "contour": bool(lms.contour[k]), "strip": k if k in lms.strips else None})
    data = {"eye_outer": list(lms.eye_outer), "anchors": rows,
            "strips": {str(k): v.tolist() for k, v in sorted(lms.strips.items())}}
    Path(path).write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")


def load_anchor_table(path: str | Path, points: np.ndarray | None = None) -> LandmarkSet:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    rows = sorted(data["anchors"], key=lambda r: r["landmark"])
    strips_raw = data.get("strips", {})
    strips = {r["landmark"]: strips_raw[str(r["strip"])] for r in rows if r.get("strip") is not None}
    k = len(rows)
    if points is None:
        i, j = data["eye_outer"]
        points = np.zeros((k, 2))
        points[j] = (1.0, 0.0)
    return LandmarkSet(points, [r["face"] for r in rows], [r["bary"] for r in rows],
                       [r["contour"] for r in rows], tuple(data["eye_outer"]), strips)


def save_landmarks(points: np.ndarray, path: str | Path, image_size: tuple[int, int] | None = None,
                   markup: str = "68") -> None:
    data = {"markup": markup, "points": np.asarray(points, dtype=float).tolist()}
    if image_size is not None:
        data["image_size"] = list(image_size)
    Path(path).write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")


def load_landmarks(path: str | Path) -> tuple[np.ndarray, tuple[int, int] | None]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    pts = np.asarray(data["points"], dtype=np.float64).reshape(-1, 2)
    size = tuple(data["image_size"]) if "image_size" in data else None
    return pts, size


def save_fit(params: FitParams, path: str | Path, intr: Intrinsics | None = None) -> None:
    data = {
        "beta": params.beta.tolist(),
        "delta": params.delta.tolist(),
        "quaternion_wxyz": list(params.extrinsics.q),
        "translation": list(params.extrinsics.t),
        "fs": params.fs,
    }
    if intr is not None:
        data["intrinsics"] = {"f": intr.f, "cx": intr.cx, "cy": intr.cy}
    Path(path).write_text(json.dumps(data) + "\n", encoding="utf-8")


def load_fit(path: str | Path) -> tuple[FitParams, Intrinsics | None]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    params = FitParams(np.asarray(d["beta"]), np.asarray(d["delta"]),
                       Extrinsics(tuple(d["quaternion_wxyz"]), tuple(d["translation"])), d["fs"])
    intr = None
    if "intrinsics" in d:
        i = d["intrinsics"]
        intr = Intrinsics(i["f"], i["cx"], i["cy"], params.fs)
    return params, intr
