"""Reconstruction error protocol: landmark alignment, ICP, radius crop, ARMSE."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .mesh import Mesh, save_mesh

log = logging.getLogger(__name__)

DEFAULT_RADII = (80.0, 90.0, 100.0, 110.0)
HEATMAP_TOLERANCE = 5.0


class DegenerateAlignmentError(ValueError):
    pass


class EmptyCropError(ValueError):
    pass


# ------------------------------------------------------------ point/triangle


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles ``(a, b, c)`` to points ``p`` (all (k, 3)).

    Returns ``(points, bary)`` using the Voronoi-region case analysis of
    Ericson's *Real-Time Collision Detection*.
    """
    ab, ac, ap = b - a, c - a, p - a
    bp, cp = p - b, p - c
    dot = lambda x, y: np.einsum("ij,ij->i", x, y)  # noqa: E731
    d1, d2 = dot(ab, ap), dot(ac, ap)
    d3, d4 = dot(ab, bp), dot(ac, bp)
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in, w_in = vb / denom, vc / denom
        bary = np.column_stack([1.0 - v_in - w_in, v_in, w_in])
        # edge bc
        m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        bary[m] = np.column_stack([np.zeros(m.sum()), 1.0 - w[m], w[m]])
        # edge ac
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        w = d2 / (d2 - d6)
        bary[m] = np.column_stack([1.0 - w[m], np.zeros(m.sum()), w[m]])
        # vertex c
        m = (d6 >= 0) & (d5 <= d6)
        bary[m] = [0.0, 0.0, 1.0]
        # edge ab
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        v = d1 / (d1 - d3)
        bary[m] = np.column_stack([1.0 - v[m], v[m], np.zeros(m.sum())])
        # vertex b
        m = (d3 >= 0) & (d4 <= d3)
        bary[m] = [0.0, 1.0, 0.0]
        # vertex a
        m = (d1 <= 0) & (d2 <= 0)
        bary[m] = [1.0, 0.0, 0.0]
    # zero-area triangles leave NaNs; fall back to the nearest corner
    bad = ~np.isfinite(bary).all(1)
    if bad.any():
        corners = np.stack([a[bad], b[bad], c[bad]], 1)
        k = np.argmin(np.sum((corners - p[bad][:, None]) ** 2, axis=2), axis=1)
        bary[bad] = np.eye(3)[k]
    pts = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return pts, bary


# ------------------------------------------------------------------- BVH


class TriangleBVH:
    """Axis-aligned bounding-box hierarchy over a triangle soup.

    Queries run breadth-first over the whole batch of points at once: every
    (point, node) pair whose box lower bound beats the point's current best
    distance is expanded, so the Python loop runs once per tree level.
    """

    def __init__(self, vertices: np.ndarray, faces: np.ndarray, leaf_size: int = 8):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64)
        if len(self.faces) == 0:
            raise ValueError("cannot build a BVH over an empty mesh")
        tri = self.vertices[self.faces]
        self._tri = tri
        lo_t, hi_t = tri.min(1), tri.max(1)
        cent = tri.mean(1)
        order = np.arange(len(self.faces))
        lo, hi, left, right, start, count = [], [], [], [], [], []
        stack = [(0, len(order), -1, False)]
        while stack:
            s, e, parent, is_right = stack.pop()
            node = len(lo)
            idx = order[s:e]
            lo.append(lo_t[idx].min(0))
            hi.append(hi_t[idx].max(0))
            left.append(-1)
            right.append(-1)
            start.append(s)
            count.append(e - s)
            if parent >= 0:
                (right if is_right else left)[parent] = node
            if e - s <= leaf_size:
                continue
            ext = cent[idx].max(0) - cent[idx].min(0)
            axis = int(np.argmax(ext))
            sub = idx[np.argsort(cent[idx, axis], kind="stable")]
            order[s:e] = sub
            mid = (s + e) // 2
            stack.append((mid, e, node, True))
            stack.append((s, mid, node, False))
        self.order = order
        self.lo, self.hi = np.array(lo), np.array(hi)
        self.left, self.right = np.array(left), np.array(right)
        self.start, self.count = np.array(start), np.array(count)
        used = np.unique(self.faces)
        self._kd = cKDTree(self.vertices[used])
        self._kd_vertex = used
        vf = np.full(len(self.vertices), -1)
        vf[self.faces[:, 0]] = np.arange(len(self.faces))
        vf[self.faces[:, 1]] = np.arange(len(self.faces))
        vf[self.faces[:, 2]] = np.arange(len(self.faces))
        self._vertex_face = vf

    def closest(self, points: np.ndarray):
        """Nearest surface points: returns ``(distance, point, face, bary)``."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        nq = len(p)
        # upper bound from the nearest vertex
        d0, k = self._kd.query(p)
        vid = self._kd_vertex[k]
        best = d0 * d0
        face = self._vertex_face[vid]
        bary = (self.faces[face] == vid[:, None]).astype(np.float64)
        point = self.vertices[vid].copy()

        qi = np.arange(nq)
        node = np.zeros(nq, dtype=np.int64)
        while len(qi):
            gap = np.maximum(self.lo[node] - p[qi], 0) + np.maximum(p[qi] - self.hi[node], 0)
            keep = np.sum(gap * gap, axis=1) <= best[qi]
            qi, node = qi[keep], node[keep]
            leaf = self.left[node] < 0
            if leaf.any():
                lq, ln = qi[leaf], node[leaf]
                cnt = self.count[ln]
                rep_q = np.repeat(lq, cnt)
                offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
                tri_id = self.order[np.repeat(self.start[ln], cnt) + offs]
                t = self._tri[tri_id]
                cp, bc = closest_point_on_triangles(p[rep_q], t[:, 0], t[:, 1], t[:, 2])
                d2 = np.sum((cp - p[rep_q]) ** 2, axis=1)
                o = np.lexsort((d2, rep_q))
                first = o[np.r_[True, rep_q[o][1:] != rep_q[o][:-1]]]
                better = d2[first] < best[rep_q[first]]
                sel = first[better]
                tq = rep_q[sel]
                best[tq] = d2[sel]
                face[tq] = tri_id[sel]
                bary[tq] = bc[sel]
                point[tq] = cp[sel]
            inner = ~leaf
            qi = np.concatenate([qi[inner], qi[inner]])
            node = np.concatenate([self.left[node[inner]], self.right[node[inner]]])
        return np.sqrt(best), point, face, bary

    def distance(self, points: np.ndarray) -> np.ndarray:
        return self.closest(points)[0]


def point_to_mesh_distance(points: np.ndarray, mesh: Mesh, bvh: TriangleBVH | None = None) -> np.ndarray:
    """Exact closest-point distance from each point to the triangles of ``mesh``."""
    bvh = bvh if bvh is not None else TriangleBVH(mesh.vertices, mesh.faces)
    d = bvh.distance(points)
    return d if np.ndim(points) > 1 else d[0]


# ------------------------------------------------------------- alignment


@dataclass(frozen=True)
class AlignmentResult:
    """Similarity transform ``x -> scale * R x + t`` and fit diagnostics."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0
    rmse_before: float = float("nan")
    rmse_after: float = float("nan")
    history: tuple[float, ...] = ()
    iterations: int = 0

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(x) @ self.rotation.T + self.translation

    def compose(self, other: "AlignmentResult") -> "AlignmentResult":
        """Transform applying ``other`` first, then ``self``."""
        r = self.rotation @ other.rotation
        t = self.scale * self.rotation @ other.translation + self.translation
        return AlignmentResult(r, t, self.scale * other.scale)


def identity_alignment() -> AlignmentResult:
    return AlignmentResult(np.eye(3), np.zeros(3), 1.0)


def _rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def procrustes_align(src: np.ndarray, dst: np.ndarray, allow_scale: bool = False,
                     weights: np.ndarray | None = None) -> AlignmentResult:
    """Least-squares rigid (or similarity) map from ``src`` onto ``dst`` points."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("src and dst must both be (k, 3) arrays")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    ms, md = w @ src, w @ dst
    xs, xd = src - ms, dst - md
    sv = np.linalg.svd(xs, compute_uv=False)
    if len(src) < 3 or sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateAlignmentError("alignment points are collinear or coincident")
    cov = (xd * w[:, None]).T @ xs
    u, s, vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(u @ vt) < 0:
        d[-1] = -1.0
    r = (u * d) @ vt
    scale = 1.0
    if allow_scale:
        scale = float(np.sum(s * d) / np.sum(w * np.sum(xs * xs, axis=1)))
    t = md - scale * r @ ms
    out = AlignmentResult(r, t, scale)
    return AlignmentResult(r, t, scale, _rmse(src, dst), _rmse(out.apply(src), dst))


def icp_refine(src: Mesh | np.ndarray, dst: Mesh | np.ndarray, init: AlignmentResult | None = None,
               max_iters: int = 30, tol: float = 1e-10, trim: float = 0.05,
               trim_after: int = 3, allow_scale: bool = False) -> AlignmentResult:
    """Point-to-point ICP of ``src`` vertices onto ``dst`` vertices.

    After ``trim_after`` iterations the worst ``trim`` fraction of matches is
    dropped before each Procrustes update. The recorded RMSE is over the
    matches actually used, so the history never increases; if an update would
    raise it the previous transform is returned.
    """
    ps = src.vertices if isinstance(src, Mesh) else np.asarray(src, dtype=np.float64)
    pd = dst.vertices if isinstance(dst, Mesh) else np.asarray(dst, dtype=np.float64)
    tree = cKDTree(pd)

    def matched_rmse(xf, trimmed):
        d, k = tree.query(xf.apply(ps))
        sel = np.arange(len(d))
        if trimmed:
            keep = max(3, int(math.ceil((1.0 - trim) * len(d))))
            sel = np.argsort(d, kind="stable")[:keep]
        return float(np.sqrt(np.mean(d[sel] ** 2))), sel, k

    best = init if init is not None else identity_alignment()
    history = [matched_rmse(best, False)[0]]
    it = 0
    for it in range(1, max_iters + 1):
        trimmed = it > trim_after and trim > 0
        prev, sel, k = matched_rmse(best, trimmed)
        step = procrustes_align(ps[sel], pd[k[sel]], allow_scale=allow_scale)
        new_rmse, _, _ = matched_rmse(step, trimmed)
        if new_rmse > prev:
            break
        best = step
        history.append(new_rmse)
        if prev - new_rmse < tol:
            break
    return AlignmentResult(best.rotation, best.translation, best.scale, history[0], history[-1],
                           tuple(history), it)


# ------------------------------------------------------------- cropping


def crop_indices(mesh: Mesh, center: np.ndarray, d: float) -> np.ndarray:
    if not d > 0:
        raise ValueError("crop radius must be positive")
    dist = np.linalg.norm(mesh.vertices - np.asarray(center, dtype=np.float64), axis=1)
    return np.flatnonzero(dist <= d)


def crop_by_radius(mesh: Mesh, center: np.ndarray, d: float) -> Mesh:
    """Keep vertices within ``d`` mm of ``center`` and faces whose corners all survive."""
    keep = crop_indices(mesh, center, d)
    if len(keep) == mesh.n_vertices:
        return mesh
    if len(keep) == 0:
        raise EmptyCropError(f"no vertex within {d} mm of the crop center")
    remap = np.full(mesh.n_vertices, -1)
    remap[keep] = np.arange(len(keep))
    f = remap[mesh.faces]
    f = f[(f >= 0).all(1)]
    uv = mesh.uv[keep] if mesh.uv is not None else None
    labels = {}
    for name, idx in mesh.labels.items():
        r = remap[idx]
        labels[name] = r[r >= 0]
    return Mesh(mesh.vertices[keep], f, uv, labels)


# ------------------------------------------------------------------ ARMSE


def directed_rmse(src: Mesh, dst: Mesh, bvh: TriangleBVH | None = None) -> float:
    d = point_to_mesh_distance(src.vertices, dst, bvh)
    return float(np.sqrt(np.mean(d * d)))


def armse(gt: Mesh, pred: Mesh) -> float:
    """Mean of the two directed vertex-to-mesh RMS distances."""
    if gt.n_faces == 0 or pred.n_faces == 0:
        raise ValueError("ARMSE needs two non-empty meshes")
    return 0.5 * (directed_rmse(gt, pred) + directed_rmse(pred, gt))


@dataclass
class ErrorReport:
    model_id: str
    d: float
    armse: float
    gt_kept: int
    gt_discarded: int
    pred_kept: int
    pred_discarded: int
    distances: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    def row(self) -> dict:
        return {
            "model_id": self.model_id,
            "d_mm": f"{self.d:.9g}",
            "armse_mm": f"{self.armse:.9g}",
            "gt_kept": self.gt_kept,
            "gt_discarded": self.gt_discarded,
            "pred_kept": self.pred_kept,
            "pred_discarded": self.pred_discarded,
        }


REPORT_FIELDS = ["model_id", "d_mm", "armse_mm", "gt_kept", "gt_discarded", "pred_kept", "pred_discarded"]


def evaluate_pair(gt: Mesh, pred: Mesh, gt_landmarks: Sequence[int], pred_landmarks: Sequence[int] | None = None,
                  radii: Sequence[float] = DEFAULT_RADII, model_id: str = "pred",
                  center: str = "nose_tip", nose_tip: int | None = None, allow_scale: bool = False,
                  icp_iters: int = 30, exclude: Sequence[int] = ()) -> tuple[list[ErrorReport], Mesh]:
    """Full protocol for one prediction; returns per-radius reports and the aligned prediction.

    ``center`` is ``"nose_tip"`` (ground-truth nose vertex) or ``"landmarks"``
    (mean of the alignment landmarks on the ground truth).
    """
    pred_landmarks = gt_landmarks if pred_landmarks is None else pred_landmarks
    if len(gt_landmarks) != 7 or len(pred_landmarks) != 7:
        raise ValueError("alignment needs exactly 7 landmark indices per mesh")
    rough = procrustes_align(pred.vertices[list(pred_landmarks)], gt.vertices[list(gt_landmarks)], allow_scale)
    fine = icp_refine(pred, gt, rough, max_iters=icp_iters, allow_scale=allow_scale)
    aligned = pred.with_vertices(fine.apply(pred.vertices))
    if exclude:
        keep = np.setdiff1d(np.arange(aligned.n_vertices), exclude)
        aligned = _subset(aligned, keep)
    if center == "landmarks":
        vt = gt.vertices[list(gt_landmarks)].mean(0)
    else:
        tip = nose_tip if nose_tip is not None else int(gt.labels["nose_tip"][0])
        vt = gt.vertices[tip]
    reports = []
    for d in radii:
        g = crop_by_radius(gt, vt, d) if np.isfinite(d) else gt
        p = crop_by_radius(aligned, vt, d) if np.isfinite(d) else aligned
        dist = point_to_mesh_distance(g.vertices, p)
        reports.append(ErrorReport(model_id, float(d), armse(g, p), g.n_vertices, gt.n_vertices - g.n_vertices,
                                   p.n_vertices, aligned.n_vertices - p.n_vertices, dist))
    return reports, aligned


def _subset(mesh: Mesh, keep: np.ndarray) -> Mesh:
    remap = np.full(mesh.n_vertices, -1)
    remap[keep] = np.arange(len(keep))
    f = remap[mesh.faces]
    f = f[(f >= 0).all(1)]
    return Mesh(mesh.vertices[keep], f, mesh.uv[keep] if mesh.uv is not None else None)


def write_report(reports: Sequence[ErrorReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and the 1.96 x standard-error half width."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(1.96 * v.std(ddof=1) / np.sqrt(len(v)))


# ---------------------------------------------------------------- heatmap


def heatmap_colors(distances: np.ndarray, tolerance: float = HEATMAP_TOLERANCE) -> np.ndarray:
    """Blue-to-red ramp over ``[0, tolerance]``; everything above is pure red."""
    t = np.clip(np.asarray(distances) / tolerance, 0.0, 1.0)
    rgb = np.column_stack([t, np.zeros_like(t), 1.0 - t])
    rgb[np.asarray(distances) > tolerance] = [1.0, 0.0, 0.0]
    return rgb


def heatmap_export(gt: Mesh, pred: Mesh, path: str | Path | None = None,
                   tolerance: float = HEATMAP_TOLERANCE) -> tuple[np.ndarray, np.ndarray]:
    """Per ground-truth vertex distance to ``pred`` and the matching colors.

    When ``path`` is given the ground truth is written as an OBJ with
    ``v x y z r g b`` records.
    """
    d = point_to_mesh_distance(gt.vertices, pred)
    rgb = heatmap_colors(d, tolerance)
    if path is not None:
        save_mesh(Mesh(gt.vertices, gt.faces), path, colors=rgb)
    return d, rgb
