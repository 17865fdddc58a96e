"""Deformation representation (DR) features: encode a mesh relative to a
reference as per-vertex rotation log + symmetric stretch, and decode back."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .mesh import Mesh, SparseWeights, cotangent_weights, laplacian_matrix

MAGIC = b"FTDRF001"
TIKHONOV = 1e-8
# index pairs of the 6 unique entries of a symmetric 3x3 matrix
SYM_IDX = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


class SingularMatrixError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DRFeature:
    """Per-vertex 9-vector: axis-angle ``theta*omega`` (3) then ``S - I`` (6).

    The six stretch entries are ordered xx, xy, xz, yy, yz, zz.
    """

    data: np.ndarray
    reference_id: str = ""

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim == 1:
            if d.size % 9:
                raise ValueError("flat DR feature length must be a multiple of 9")
            d = d.reshape(-1, 9)
        if d.ndim != 2 or d.shape[1] != 9:
            raise ValueError("DR feature must have shape (n, 9)")
        d = np.ascontiguousarray(d)
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def n_vertices(self) -> int:
        return len(self.data)

    @property
    def rotation(self) -> np.ndarray:
        return self.data[:, :3]

    @property
    def stretch(self) -> np.ndarray:
        """``S - I`` expanded to full (n, 3, 3) symmetric matrices."""
        s = np.zeros((self.n_vertices, 3, 3))
        for k, (a, b) in enumerate(SYM_IDX):
            s[:, a, b] = self.data[:, 3 + k]
            s[:, b, a] = self.data[:, 3 + k]
        return s

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def __add__(self, other: "DRFeature") -> "DRFeature":
        return DRFeature(self.data + other.data, self.reference_id)

    def __mul__(self, s: float) -> "DRFeature":
        return DRFeature(self.data * s, self.reference_id)

    __rmul__ = __mul__


def zero_feature(n: int, reference_id: str = "") -> DRFeature:
    return DRFeature(np.zeros((n, 9)), reference_id)


# ---------------------------------------------------------------- linear algebra


def skew(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -w[..., 2], w[..., 1]
    out[..., 1, 0], out[..., 1, 2] = w[..., 2], -w[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -w[..., 1], w[..., 0]
    return out


def rotation_exp(rotvec: np.ndarray) -> np.ndarray:
    """Rodrigues formula for one or many axis-angle vectors."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(rotvec, axis=-1)[..., None, None]
    k = skew(rotvec)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a * k + b * (k @ k)


def polar_decompose(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Factor ``T = R S`` with ``R`` a proper rotation and ``S`` symmetric.

    If ``det(T) < 0`` the reflection is carried by ``S`` along the smallest
    singular direction so that ``R`` stays in SO(3).
    """
    t = np.asarray(t, dtype=np.float64)
    u, s, vt = np.linalg.svd(t)
    if s[-1] <= 1e-12 * max(s[0], 1e-300):
        raise SingularMatrixError("cannot polar-decompose a singular matrix")
    d = np.ones(3)
    if np.linalg.det(u @ vt) < 0:
        d[-1] = -1.0
    r = (u * d) @ vt
    stretch = (vt.T * (d * s)) @ vt
    return r, 0.5 * (stretch + stretch.T)


def rotation_log(r: np.ndarray) -> tuple[np.ndarray, float]:
    """Axis and angle of a rotation matrix, ``theta`` in [0, pi].

    The identity returns the conventional axis (0, 0, 1) with zero angle.
    """
    r = np.asarray(r, dtype=np.float64)
    vee = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin_t = np.linalg.norm(vee)
    cos_t = 0.5 * (np.trace(r) - 1.0)
    theta = float(np.arctan2(sin_t, cos_t))
    if theta < 1e-12:
        return np.array([0.0, 0.0, 1.0]), 0.0
    if cos_t > -0.5:
        return vee / sin_t, theta
    # near pi the skew part vanishes; read the axis off the symmetric part
    sym = 0.5 * (r + r.T)
    outer = (sym - cos_t * np.eye(3)) / (1.0 - cos_t)
    k = int(np.argmax(np.diag(outer)))
    axis = outer[:, k] / np.sqrt(max(outer[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ vee < 0:
        axis = -axis
    return axis, theta


def rotation_to_rotvec(r: np.ndarray) -> np.ndarray:
    axis, theta = rotation_log(r)
    return axis * theta


# ------------------------------------------------------------------ encode


def local_deformation_gradients(
    deformed: Mesh | np.ndarray, reference: Mesh, weights: SparseWeights | None = None,
    return_flags: bool = False,
):
    """Per-vertex affine maps ``T_i`` fitting reference 1-ring edges to deformed ones.

    Each ``T_i`` solves the 3x3 normal equations of
    ``sum_j c_ij |(p_i - p_j) - T_i (r_i - r_j)|^2``. Neighbourhoods whose
    reference edges are (near) coplanar get a small Tikhonov pull towards the
    identity; those vertices are reported in the returned flag array when
    ``return_flags`` is true.
    """
    if weights is None:
        weights = cotangent_weights(reference)
    p = deformed.vertices if isinstance(deformed, Mesh) else np.asarray(deformed, dtype=np.float64)
    pr = reference.vertices
    if p.shape != pr.shape:
        raise ValueError("deformed and reference meshes differ in vertex count")
    n = len(pr)
    i, j, c = weights.edges()
    er = pr[i] - pr[j]
    ed = p[i] - p[j]
    a = np.zeros((n, 3, 3))
    b = np.zeros((n, 3, 3))
    np.add.at(a, i, c[:, None, None] * er[:, :, None] * er[:, None, :])
    np.add.at(b, i, c[:, None, None] * ed[:, :, None] * er[:, None, :])
    eig = np.linalg.eigvalsh(a)
    scale = np.maximum(eig[:, -1], 1e-300)
    flags = eig[:, 0] <= 1e-9 * scale
    if flags.any():
        reg = TIKHONOV * scale[flags][:, None, None] * np.eye(3)
        a[flags] += reg
        b[flags] += reg
    # T A = B  ->  A^T T^T = B^T, A symmetric
    t = np.linalg.solve(a, np.transpose(b, (0, 2, 1))).transpose(0, 2, 1)
    return (t, flags) if return_flags else t


def _batch_polar(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    u, s, vt = np.linalg.svd(t)
    if np.any(s[:, -1] <= 1e-12 * np.maximum(s[:, 0], 1e-300)):
        raise SingularMatrixError("singular deformation gradient")
    d = np.ones_like(s)
    d[np.linalg.det(u @ vt) < 0, -1] = -1.0
    r = (u * d[:, None, :]) @ vt
    v = np.transpose(vt, (0, 2, 1))
    stretch = (v * (d * s)[:, None, :]) @ vt
    return r, 0.5 * (stretch + np.transpose(stretch, (0, 2, 1)))


def _batch_rotvec(r: np.ndarray) -> np.ndarray:
    vee = 0.5 * np.stack([r[:, 2, 1] - r[:, 1, 2], r[:, 0, 2] - r[:, 2, 0], r[:, 1, 0] - r[:, 0, 1]], 1)
    sin_t = np.linalg.norm(vee, axis=1)
    cos_t = 0.5 * (np.trace(r, axis1=1, axis2=2) - 1.0)
    theta = np.arctan2(sin_t, cos_t)
    out = np.zeros_like(vee)
    ok = (theta >= 1e-12) & (cos_t > -0.5)
    out[ok] = vee[ok] * (theta[ok] / sin_t[ok])[:, None]
    for k in np.flatnonzero(cos_t <= -0.5):
        axis, th = rotation_log(r[k])
        out[k] = axis * th
    return out


def encode_dr(deformed: Mesh | np.ndarray, reference: Mesh, weights: SparseWeights | None = None,
              reference_id: str = "") -> DRFeature:
    """DR feature of ``deformed`` relative to ``reference``."""
    t = local_deformation_gradients(deformed, reference, weights)
    r, s = _batch_polar(t)
    out = np.zeros((len(t), 9))
    out[:, :3] = _batch_rotvec(r)
    s = s - np.eye(3)
    for k, (a, b) in enumerate(SYM_IDX):
        out[:, 3 + k] = s[:, a, b]
    return DRFeature(out, reference_id)


def feature_to_affine(feature: DRFeature) -> np.ndarray:
    """Reassemble ``T_i = exp(theta_i [omega_i]) S_i`` for every vertex."""
    return rotation_exp(feature.rotation) @ (feature.stretch + np.eye(3))


# ------------------------------------------------------------------ decode


class DRDecoder:
    """Reusable decoder for one reference mesh.

    Stationarity of ``E(P) = sum_i sum_j c_ij |(p_i - p_j) - T_i (r_i - r_j)|^2``
    with symmetric 1-ring neighbourhoods gives, per vertex,
    ``2 sum_j c_ij (p_i - p_j) = sum_j c_ij (T_i + T_j)(r_i - r_j)``.
    The anchored vertex is eliminated so the reduced system stays symmetric
    positive definite; the factorization is cached per anchor index.
    """

    def __init__(self, reference: Mesh, weights: SparseWeights | None = None):
        self.reference = reference
        self.weights = weights if weights is not None else cotangent_weights(reference)
        self.lap = laplacian_matrix(self.weights).tocsc()
        self._factor: dict[int, tuple] = {}

    def _factorized(self, anchor: int):
        if anchor not in self._factor:
            n = self.reference.n_vertices
            keep = np.setdiff1d(np.arange(n), [anchor])
            # connected components must each contain the anchor
            ncomp, comp = sparse.csgraph.connected_components(self.weights.matrix, directed=False)
            if ncomp > 1:
                raise np.linalg.LinAlgError(
                    f"mesh has {ncomp} connected components but a single anchor"
                )
            a = (2.0 * self.lap)[keep][:, keep].tocsc()
            col = (2.0 * self.lap)[keep][:, [anchor]].toarray()
            self._factor[anchor] = (keep, splinalg.factorized(a), col)
        return self._factor[anchor]

    def rhs(self, affine: np.ndarray) -> np.ndarray:
        i, j, c = self.weights.edges()
        pr = self.reference.vertices
        er = pr[i] - pr[j]
        contrib = c[:, None] * np.einsum("kab,kb->ka", affine[i] + affine[j], er)
        b = np.zeros_like(pr)
        np.add.at(b, i, contrib)
        return b

    def decode_affine(self, affine: np.ndarray, anchor_index: int = 0,
                      anchor_position: np.ndarray | None = None) -> np.ndarray:
        n = self.reference.n_vertices
        if affine.shape != (n, 3, 3):
            raise ValueError("affine field does not match the reference vertex count")
        if anchor_position is None:
            anchor_position = self.reference.vertices[anchor_index]
        anchor_position = np.asarray(anchor_position, dtype=np.float64)
        keep, solve, col = self._factorized(anchor_index)
        b = self.rhs(affine)[keep] - col * anchor_position[None, :]
        out = np.empty((n, 3))
        out[anchor_index] = anchor_position
        out[keep] = np.column_stack([solve(b[:, k]) for k in range(3)])
        return out

    def decode(self, feature: DRFeature, anchor_index: int = 0,
               anchor_position: np.ndarray | None = None) -> Mesh:
        if feature.n_vertices != self.reference.n_vertices:
            raise ValueError("feature does not match the reference vertex count")
        p = self.decode_affine(feature_to_affine(feature), anchor_index, anchor_position)
        return self.reference.with_vertices(p)


def decode_dr(feature: DRFeature, reference: Mesh, anchor: tuple[int, np.ndarray] | None = None,
              weights: SparseWeights | None = None) -> Mesh:
    """Mesh minimizing the DR reconstruction energy for ``feature``.

    ``anchor`` is ``(vertex index, position)``; by default vertex 0 is pinned
    at its reference position.
    """
    idx, pos = (0, None) if anchor is None else anchor
    return DRDecoder(reference, weights).decode(feature, idx, pos)


def reconstruction_energy(p: np.ndarray, affine: np.ndarray, reference: Mesh,
                          weights: SparseWeights) -> float:
    i, j, c = weights.edges()
    pr = reference.vertices
    r = (p[i] - p[j]) - np.einsum("kab,kb->ka", affine[i], pr[i] - pr[j])
    return float(np.sum(c * np.sum(r * r, axis=1)))


# ------------------------------------------------------------------ files


def save_feature(feature: DRFeature, path: str | Path, reference_name: str | None = None) -> None:
    """Binary little-endian float64 payload behind an 8-byte magic and a uint64 count.

    A JSON sidecar ``<path>.json`` names the reference mesh.
    """
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", feature.n_vertices))
        fh.write(feature.data.astype("<f8").tobytes())
    meta = {"reference": reference_name or feature.reference_id, "vertices": feature.n_vertices,
            "layout": "rotvec3,sym6(xx,xy,xz,yy,yz,zz)"}
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True, indent=1), encoding="utf-8")


def load_feature(path: str | Path) -> DRFeature:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a DR feature file")
    (n,) = struct.unpack("<Q", raw[8:16])
    data = np.frombuffer(raw[16:], dtype="<f8")
    if data.size != 9 * n:
        raise ValueError(f"{path}: payload length does not match header count {n}")
    ref = ""
    meta = Path(str(path) + ".json")
    if meta.exists():
        ref = json.loads(meta.read_text(encoding="utf-8")).get("reference", "")
    return DRFeature(data.astype(np.float64).reshape(n, 9), ref)
