"""Pinhole camera with a focal scale factor, quaternion extrinsics and EPnP."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from itertools import combinations
from pathlib import Path

import numpy as np


class BehindCameraError(ValueError):
    pass


class DegenerateConfigurationError(ValueError):
    pass


# ----------------------------------------------------------------- quaternions


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product, quaternions stored (w, x, y, z)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_from_rotvec(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return quat_normalize(np.array([1.0, *(0.5 * w)]))
    return np.array([np.cos(theta / 2), *(np.sin(theta / 2) * w / theta)])


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    s = np.linalg.norm(q[1:])
    if s < 1e-12:
        return 2.0 * q[1:]
    return 2.0 * np.arctan2(s, q[0]) * q[1:] / s


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(max(1.0 + r[i, i] - r[j, j] - r[k, k], 1e-300))
        q = [0.0, 0.0, 0.0, 0.0]
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    return quat_normalize(np.array(q))


# ----------------------------------------------------------------- camera types


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics ``K = [[fs*f, 0, cx], [0, fs*f, cy], [0, 0, 1]]``."""

    f: float
    cx: float
    cy: float
    fs: float = 1.0

    def __post_init__(self):
        if not self.f > 0 or not self.fs > 0:
            raise ValueError("focal length and focal scale must be positive")

    @property
    def focal(self) -> float:
        return self.fs * self.f

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.focal, 0.0, self.cx], [0.0, self.focal, self.cy], [0.0, 0.0, 1.0]])

    def with_scale(self, fs: float) -> "Intrinsics":
        return replace(self, fs=float(fs))


def init_intrinsics(width: int, height: int, swap_principal_point: bool = False) -> Intrinsics:
    """Initial intrinsics from the image size: ``f = max(w, h)``, ``fs = 1``.

    By default ``cx = width / 2`` and ``cy = height / 2``; with
    ``swap_principal_point`` the literal height/width transposed assignment is
    used instead.
    """
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    cx, cy = (height / 2.0, width / 2.0) if swap_principal_point else (width / 2.0, height / 2.0)
    return Intrinsics(float(max(width, height)), cx, cy, 1.0)


@dataclass(frozen=True)
class Extrinsics:
    """Rigid transform ``x_cam = R(q) x + t``; ``q`` is a unit quaternion (w, x, y, z)."""

    q: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    t: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.q, dtype=np.float64))
        object.__setattr__(self, "q", tuple(float(x) for x in q))
        object.__setattr__(self, "t", tuple(float(x) for x in np.asarray(self.t, dtype=np.float64)))

    @classmethod
    def from_matrix(cls, r: np.ndarray, t: np.ndarray) -> "Extrinsics":
        return cls(tuple(quat_from_matrix(r)), tuple(t))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    @property
    def translation(self) -> np.ndarray:
        return np.array(self.t)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.rotation.T + self.translation

    def retract(self, dtheta: np.ndarray, dt: np.ndarray | None = None) -> "Extrinsics":
        """Compose a tangent rotation increment on the left and renormalize."""
        q = quat_normalize(quat_mul(quat_from_rotvec(dtheta), np.array(self.q)))
        t = self.translation if dt is None else self.translation + dt
        return Extrinsics(tuple(q), tuple(t))


def frontal_rotation() -> np.ndarray:
    """Rotation taking a y-up, +z-facing head into an OpenCV camera frame facing it."""
    return np.diag([1.0, -1.0, -1.0])


def project(points: np.ndarray, extr: Extrinsics, intr: Intrinsics) -> np.ndarray:
    """Pixel coordinates of world ``points`` (n, 3) or a single point (3,)."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    cam = extr.apply(np.atleast_2d(pts))
    if np.any(cam[:, 2] <= 0):
        raise BehindCameraError("point behind the camera (z <= 0)")
    uv = intr.focal * cam[:, :2] / cam[:, 2:3] + np.array([intr.cx, intr.cy])
    return uv[0] if single else uv


# ----------------------------------------------------------------- EPnP


def _kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cs, cd = src.mean(0), dst.mean(0)
    h = (dst - cd).T @ (src - cs)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    return r, cd - r @ cs


def _reproj_rmse(pw, xn, r, t):
    pc = pw @ r.T + t
    if np.any(pc[:, 2] <= 0):
        return np.inf
    return float(np.sqrt(np.mean(np.sum((pc[:, :2] / pc[:, 2:3] - xn) ** 2, axis=1))))


def epnp_pose(points3d: np.ndarray, points2d: np.ndarray, intr: Intrinsics,
              gauss_newton_iters: int = 10) -> Extrinsics:
    """Camera pose from 3D-2D correspondences with EPnP.

    Points are expressed as barycentric combinations of four control points
    (three when the scene is planar); the camera-frame control points lie in
    the null space of the projection constraints and their combination is
    recovered from inter-control-point distances, then refined by
    Gauss-Newton on the null-space coefficients.
    """
    pw = np.asarray(points3d, dtype=np.float64)
    uv = np.asarray(points2d, dtype=np.float64)
    n = len(pw)
    if n < 6 or uv.shape != (n, 2):
        raise DegenerateConfigurationError("EPnP needs at least 6 matching 3D/2D points")
    xn = (uv - [intr.cx, intr.cy]) / intr.focal

    c0 = pw.mean(0)
    lam, vec = np.linalg.eigh((pw - c0).T @ (pw - c0) / n)
    lam, vec = lam[::-1], vec[:, ::-1]
    if lam[1] <= 1e-10 * lam[0]:
        raise DegenerateConfigurationError("3D points are collinear")
    nc = 3 if lam[2] <= 1e-10 * lam[0] else 4
    cw = np.vstack([c0] + [c0 + np.sqrt(lam[k]) * vec[:, k] for k in range(nc - 1)])

    basis = (cw[1:] - c0).T  # columns
    coef = np.linalg.lstsq(basis, (pw - c0).T, rcond=None)[0].T
    alphas = np.column_stack([1.0 - coef.sum(1), coef])

    m = np.zeros((2 * n, 3 * nc))
    for j in range(nc):
        m[0::2, 3 * j] = alphas[:, j]
        m[0::2, 3 * j + 2] = -alphas[:, j] * xn[:, 0]
        m[1::2, 3 * j + 1] = alphas[:, j]
        m[1::2, 3 * j + 2] = -alphas[:, j] * xn[:, 1]
    _, evec = np.linalg.eigh(m.T @ m)
    nulls = [evec[:, k].reshape(nc, 3) for k in range(nc)]

    pairs = list(combinations(range(nc), 2))
    prods = [(k, l) for k in range(nc) for l in range(k, nc)]
    rho = np.array([np.sum((cw[a] - cw[b]) ** 2) for a, b in pairs])
    lmat = np.zeros((len(pairs), len(prods)))
    for p, (a, b) in enumerate(pairs):
        d = [v[a] - v[b] for v in nulls]
        for c, (k, l) in enumerate(prods):
            lmat[p, c] = d[k] @ d[l] if k == l else 2.0 * d[k] @ d[l]

    def solve_subset(subset):
        cols = [prods.index(s) for s in subset]
        return dict(zip(subset, np.linalg.lstsq(lmat[:, cols], rho, rcond=None)[0]))

    inits = []
    dv = np.array([nulls[0][a] - nulls[0][b] for a, b in pairs])
    dw = np.array([cw[a] - cw[b] for a, b in pairs])
    b1 = np.sum(np.linalg.norm(dv, axis=1) * np.linalg.norm(dw, axis=1)) / np.sum(dv * dv)
    inits.append(np.r_[b1, np.zeros(nc - 1)])
    sol = solve_subset([(0, k) for k in range(nc)])
    beta0 = np.sqrt(abs(sol[(0, 0)]))
    if beta0 > 0:
        inits.append(np.array([beta0] + [sol[(0, k)] / beta0 for k in range(1, nc)]))
    sol = solve_subset([(0, 0), (0, 1), (1, 1)])
    bb = np.zeros(nc)
    bb[0], bb[1] = np.sqrt(abs(sol[(0, 0)])), np.sqrt(abs(sol[(1, 1)])) * np.sign(sol[(0, 1)] or 1.0)
    inits.append(bb)
    if nc == 4:
        sol = solve_subset([(0, 0), (0, 1), (1, 1), (0, 2), (1, 2)])
        bb = np.zeros(nc)
        bb[0], bb[1] = np.sqrt(abs(sol[(0, 0)])), np.sqrt(abs(sol[(1, 1)])) * np.sign(sol[(0, 1)] or 1.0)
        bb[2] = sol[(0, 2)] / bb[0] if bb[0] > 0 else 0.0
        inits.append(bb)

    def residual(beta):
        prod = np.array([beta[k] * beta[l] for k, l in prods])
        return lmat @ prod - rho

    def jac(beta):
        j = np.zeros((len(pairs), nc))
        for c, (k, l) in enumerate(prods):
            j[:, k] += lmat[:, c] * beta[l]
            j[:, l] += lmat[:, c] * beta[k]
        return j

    best = None
    for beta in inits:
        beta = beta.astype(np.float64)
        for _ in range(gauss_newton_iters):
            step = np.linalg.lstsq(jac(beta), -residual(beta), rcond=None)[0]
            beta = beta + step
            if np.linalg.norm(step) <= 1e-14 * max(np.linalg.norm(beta), 1.0):
                break
        cc = sum(b * v for b, v in zip(beta, nulls))
        pc = alphas @ cc
        if np.mean(pc[:, 2]) < 0:
            pc = -pc
        r, t = _kabsch(pw, pc)
        err = _reproj_rmse(pw, xn, r, t)
        if best is None or err < best[0]:
            best = (err, r, t)
    if best is None or not np.isfinite(best[0]):
        raise DegenerateConfigurationError("EPnP failed to find a pose in front of the camera")
    return Extrinsics.from_matrix(best[1], best[2])


def reprojection_rmse(points3d, points2d, extr: Extrinsics, intr: Intrinsics) -> float:
    d = project(points3d, extr, intr) - np.asarray(points2d)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


# ----------------------------------------------------------------- files


def save_pose(path: str | Path, extr: Extrinsics, intr: Intrinsics) -> None:
    data = {
        "quaternion_wxyz": list(extr.q),
        "translation": list(extr.t),
        "f": intr.f,
        "fs": intr.fs,
        "principal_point": [intr.cx, intr.cy],
    }
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_pose(path: str | Path) -> tuple[Extrinsics, Intrinsics]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    intr = Intrinsics(d["f"], d["principal_point"][0], d["principal_point"][1], d["fs"])
    return Extrinsics(tuple(d["quaternion_wxyz"]), tuple(d["translation"])), intr
