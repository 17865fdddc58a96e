"""Parametric head template and test fixtures.

The head is a latitude/longitude ellipsoid (y up, face towards +z, mm) with a
nose bump, per-vertex UVs whose seam runs down the back of the head, 68
landmark anchors in the usual face-outline/brows/nose/eyes/mouth order, 17
contour strips and a handful of localized expression blendshapes. The default
resolution of 37 rings x 79 columns plus two poles gives 2925 vertices.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.transform import Rotation

from .camera import Extrinsics, Intrinsics, frontal_rotation, project
from .dr import rotation_exp
from .evaluation import TriangleBVH
from .mesh import Mesh
from .solver import BlendshapeBasis, FitParams, LandmarkSet, edge_face_map

RADII = (78.0, 105.0, 95.0)
NOSE_HEIGHT = 22.0
NOSE_THETA = np.radians(98.0)
EYE_OUTER = (36, 45)


def _direction(theta, phi):
    st = np.sin(theta)
    return np.stack([st * np.sin(phi), np.cos(theta), st * np.cos(phi)], -1)


def head_surface(theta, phi, nose: float = NOSE_HEIGHT) -> np.ndarray:
    """Point on the analytic head for polar angle ``theta`` (from +y) and azimuth ``phi`` (from +z)."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    d = _direction(theta, phi)
    a, b, c = RADII
    r = 1.0 / np.sqrt((d[..., 0] / a) ** 2 + (d[..., 1] / b) ** 2 + (d[..., 2] / c) ** 2)
    # flat-topped ridge with steep flanks so the nose can hide the cheek at moderate yaw
    r = r + nose * np.exp(-0.5 * ((np.abs(phi) / 0.14) ** 4 + ((theta - NOSE_THETA) / 0.22) ** 2))
    return d * r[..., None]


def grid_angles(n_rings: int, n_lon: int):
    theta = np.pi * np.arange(1, n_rings + 1) / (n_rings + 1)
    phi = -np.pi + 2.0 * np.pi * (np.arange(n_lon) + 0.5) / n_lon
    return theta, phi


def make_head(n_rings: int = 37, n_lon: int = 79, nose: float = NOSE_HEIGHT) -> Mesh:
    """Closed head mesh with ``n_rings * n_lon + 2`` vertices."""
    theta, phi = grid_angles(n_rings, n_lon)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    body = head_surface(tt, pp, nose).reshape(-1, 3)
    top = head_surface(0.0, 0.0, nose)
    bottom = head_surface(np.pi, 0.0, nose)
    verts = np.vstack([body, top, bottom])
    uv = np.column_stack([((pp + np.pi) / (2 * np.pi)).reshape(-1), (1.0 - tt / np.pi).reshape(-1)])
    uv = np.vstack([uv, [0.5, 1.0], [0.5, 0.0]])

    def vid(i, j):
        return i * n_lon + (j % n_lon)

    faces = []
    for i in range(n_rings - 1):
        for j in range(n_lon):
            a, b, c, d = vid(i, j), vid(i, j + 1), vid(i + 1, j), vid(i + 1, j + 1)
            faces += [(a, c, b), (b, c, d)]
    itop, ibot = n_rings * n_lon, n_rings * n_lon + 1
    for j in range(n_lon):
        faces.append((itop, vid(0, j), vid(0, j + 1)))
        faces.append((ibot, vid(n_rings - 1, j + 1), vid(n_rings - 1, j)))
    faces = np.array(faces)
    # outward orientation
    tri = verts[faces]
    nrm = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", nrm, tri.mean(1)) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    tip = int(np.argmax(verts[:, 2]))
    return Mesh(verts, faces, uv, {"nose_tip": [tip]})


def sphere_mesh(n: int, radius: float = 50.0) -> Mesh:
    """Near-uniform triangulated sphere on a Fibonacci lattice of ``n`` points."""
    i = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    az = np.pi * (1.0 + 5**0.5) * i
    v = np.column_stack([np.cos(az) * np.sin(polar), np.sin(az) * np.sin(polar), np.cos(polar)])
    f = ConvexHull(v).simplices
    tri = v[f]
    nrm = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", nrm, tri.mean(1)) < 0
    f[flip] = f[flip][:, [0, 2, 1]]
    return Mesh(radius * v, f)


def smooth_deformation(vertices: np.ndarray, rng: np.random.Generator, amplitude: float = 0.1,
                       n_waves: int = 3) -> np.ndarray:
    """Random smooth nonlinear displacement: a sum of low-frequency sinusoids plus a rotation."""
    v = np.asarray(vertices, dtype=np.float64)
    size = np.linalg.norm(v.max(0) - v.min(0))
    out = v.copy()
    for _ in range(n_waves):
        k = rng.normal(size=3)
        k *= rng.uniform(1.0, 3.0) * 2 * np.pi / (size * np.linalg.norm(k))
        direction = rng.normal(size=3)
        out += amplitude * size / n_waves * np.sin(v @ k + rng.uniform(0, 2 * np.pi))[:, None] * direction / 3
    axis = rng.normal(size=3)
    axis *= rng.uniform(0.1, 0.8) / np.linalg.norm(axis)
    return out @ rotation_exp(axis).T


# ---------------------------------------------------------------- landmarks


def _ellipse(center_theta, center_phi, half_w, half_h, n, start):
    ang = start + 2 * np.pi * np.arange(n) / n
    return center_theta - half_h * np.sin(ang), center_phi + half_w * np.cos(ang)


def landmark_angles() -> tuple[np.ndarray, np.ndarray]:
    """(theta, phi) of the 68 landmarks on the analytic head."""
    deg = np.radians
    th, ph = [], []
    t = np.linspace(-1.0, 1.0, 17)
    th += list(deg(100.0) + deg(45.0) * np.cos(np.pi * t / 2))
    ph += list(deg(75.0) * t)
    th += [deg(68.0)] * 10
    ph += list(deg(np.r_[np.linspace(-40, -10, 5), np.linspace(10, 40, 5)]))
    th += list(deg(np.linspace(78, 96, 4)))
    ph += [0.0] * 4
    th += [deg(108.0)] * 5
    ph += list(deg(np.linspace(-12, 12, 5)))
    # first eye runs outer -> upper -> inner -> lower, the second inner -> upper -> outer -> lower
    ang = np.radians([180, 120, 60, 0, -60, -120])
    for side in (-1, 1):
        cth, cph = deg(80.0), side * deg(22.0)
        th += list(cth - deg(3.0) * np.sin(ang))
        ph += list(cph + deg(10.0) * np.cos(ang))
    a, b = _ellipse(deg(122.0), 0.0, deg(18.0), deg(5.0), 12, np.pi)
    th += list(a)
    ph += list(b)
    a, b = _ellipse(deg(122.0), 0.0, deg(12.0), deg(2.5), 8, np.pi)
    th += list(a)
    ph += list(b)
    return np.array(th), np.array(ph)


def contour_strips(mesh: Mesh, n_rings: int, n_lon: int, theta: np.ndarray, phi: np.ndarray,
                   half_width: float = np.radians(45.0)) -> dict[int, np.ndarray]:
    """Horizontal vertex paths around each of the 17 outline landmarks."""
    ring_theta, ring_phi = grid_angles(n_rings, n_lon)
    strips = {}
    for k in range(17):
        i = int(np.argmin(np.abs(ring_theta - theta[k])))
        cols = np.flatnonzero(np.abs(ring_phi - phi[k]) <= half_width)
        cols = cols[np.argsort(ring_phi[cols])]
        strips[k] = i * n_lon + cols
    return strips


@dataclass
class HeadTemplate:
    """Template mesh with its landmark anchor table and expression basis."""

    mesh: Mesh
    anchors: LandmarkSet
    basis: BlendshapeBasis
    n_rings: int
    n_lon: int


def make_template(n_rings: int = 37, n_lon: int = 79, n_blend: int = 8) -> HeadTemplate:
    mesh = make_head(n_rings, n_lon)
    theta, phi = landmark_angles()
    target = head_surface(theta, phi)
    _, _, faces, bary = TriangleBVH(mesh.vertices, mesh.faces).closest(target)
    bary = np.clip(bary, 0.0, 1.0)
    bary /= bary.sum(1, keepdims=True)
    strips = contour_strips(mesh, n_rings, n_lon, theta, phi)
    edge_face = edge_face_map(mesh.faces)
    for k, strip in strips.items():
        # start each outline anchor on the strip vertex nearest its target
        s = int(np.argmin(np.linalg.norm(mesh.vertices[strip] - target[k], axis=1)))
        s = min(s, len(strip) - 2)
        a, b = int(strip[s]), int(strip[s + 1])
        fi = edge_face[(min(a, b), max(a, b))]
        w = (mesh.faces[fi] == a).astype(float)
        faces[k], bary[k] = fi, w
    contour = np.zeros(68, bool)
    contour[:17] = True
    anchors = LandmarkSet(_dummy_points(68), faces, bary, contour, EYE_OUTER, strips)
    return HeadTemplate(mesh, anchors, expression_basis(mesh, n_blend), n_rings, n_lon)


def _dummy_points(k: int) -> np.ndarray:
    pts = np.zeros((k, 2))
    pts[EYE_OUTER[1]] = (1.0, 0.0)
    return pts


def expression_basis(mesh: Mesh, n_blend: int = 8) -> BlendshapeBasis:
    """Localized smooth displacement fields over the face region."""
    v = mesh.vertices
    a, b, c = RADII
    d = v / np.array([a, b, c])
    theta = np.arccos(np.clip(d[:, 1] / np.linalg.norm(d, axis=1), -1, 1))
    phi = np.arctan2(v[:, 0], v[:, 2])
    radial = v / np.linalg.norm(v, axis=1, keepdims=True)
    deg = np.radians

    def win(t0, p0, st, sp):
        return np.exp(-0.5 * (((theta - deg(t0)) / deg(st)) ** 2 + ((phi - deg(p0)) / deg(sp)) ** 2))

    fields = [
        8.0 * (1 / (1 + np.exp(-(theta - deg(126.0)) / deg(4.0))) * np.exp(-0.5 * (phi / deg(40.0)) ** 2))[:, None]
        * np.array([0.0, -1.0, 0.2]),
        5.0 * (win(122, -18, 7, 7)[:, None] * [-0.5, 0.8, 0.2] + win(122, 18, 7, 7)[:, None] * [0.5, 0.8, 0.2]),
        5.0 * win(68, 0, 8, 30)[:, None] * np.array([0.0, 1.0, 0.0]),
        5.0 * (win(110, -35, 10, 10) + win(110, 35, 10, 10))[:, None] * radial,
        6.0 * win(122, 0, 8, 12)[:, None] * np.array([0.0, 0.0, 1.0]),
        3.0 * (win(78, -22, 5, 8) + win(78, 22, 5, 8))[:, None] * np.array([0.0, -1.0, 0.0]),
        5.0 * win(122, 0, 10, 20)[:, None] * np.array([1.0, 0.0, 0.0]),
        3.0 * win(92, 0, 6, 8)[:, None] * np.array([0.0, 1.0, 0.0]),
    ]
    fields = fields[:n_blend]
    return BlendshapeBasis(np.stack(fields), np.ones(len(fields)))


# ---------------------------------------------------------------- scenes


def frontal_extrinsics(yaw_deg: float = 0.0, pitch_deg: float = 0.0, roll_deg: float = 0.0,
                       translation=(0.0, 0.0, 550.0)) -> Extrinsics:
    """Camera pose looking at the face, rotated by yaw/pitch/roll in the head frame."""
    head = Rotation.from_euler("yxz", [yaw_deg, pitch_deg, roll_deg], degrees=True).as_matrix()
    return Extrinsics.from_matrix(frontal_rotation() @ head, np.asarray(translation, dtype=float))


def synthesize_landmarks(template: HeadTemplate, params: FitParams, intr: Intrinsics,
                         noise: float = 0.0, rng: np.random.Generator | None = None) -> LandmarkSet:
    """Project the template anchors under ``params``; optional Gaussian pixel noise."""
    anchors = template.anchors
    pf = params.face(template.mesh, template.basis)
    x = np.einsum("kj,kjd->kd", anchors.bary, pf[template.mesh.faces[anchors.faces]])
    pts = project(x, params.extrinsics, intr.with_scale(params.fs))
    if noise:
        rng = rng or np.random.default_rng(0)
        pts = pts + rng.normal(scale=noise, size=pts.shape)
    return anchors.with_points(pts)


def checker_image(width: int, height: int, cell: int = 16) -> np.ndarray:
    """RGB float image in [0, 1] with a colored checkerboard and smooth gradients."""
    yy, xx = np.mgrid[0:height, 0:width]
    chk = ((xx // cell + yy // cell) % 2).astype(float)
    return np.stack([0.2 + 0.6 * chk, 0.3 + 0.5 * xx / max(width - 1, 1), 0.3 + 0.5 * yy / max(height - 1, 1)], -1)
