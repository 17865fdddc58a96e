"""Triangle mesh container, OBJ I/O, cotangent weights and Laplacian coordinates."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

COT_MIN = 1e-6
COT_MAX = 1e6
FACIAL_AREA_RADIUS = 95.0


class MeshFormatError(ValueError):
    """Raised when a mesh file cannot be parsed."""


class NonManifoldError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh with optional per-vertex UVs and named vertex sets.

    Parameters
    ----------
    vertices : array_like, shape (n, 3)
        Vertex positions in millimetres.
    faces : array_like, shape (m, 3)
        Vertex indices of each triangle.
    uv : array_like, shape (n, 2), optional
        Texture coordinates in [0, 1]^2.
    labels : dict, optional
        Named vertex index sets, e.g. ``"nose_tip"``.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray | None = None
    labels: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("vertices must have shape (n, 3)")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError("faces must have shape (m, 3)")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("degenerate face (repeated vertex index)")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        if self.uv is not None:
            uv = np.asarray(self.uv, dtype=np.float64)
            if uv.shape != (len(v), 2):
                raise ValueError("uv must have shape (n, 2)")
            object.__setattr__(self, "uv", _frozen(uv))
        labels = {}
        for name, idx in dict(self.labels).items():
            idx = np.asarray(idx, dtype=np.int64).reshape(-1)
            if idx.size and (idx.min() < 0 or idx.max() >= len(v)):
                raise ValueError(f"label {name!r} has out-of-range vertex index")
            labels[name] = _frozen(idx)
        object.__setattr__(self, "labels", labels)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        """Copy of this mesh with new positions and the same topology."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise ValueError("vertex array shape does not match the mesh")
        return Mesh(vertices, self.faces, self.uv, self.labels)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def face_normals(self, vertices: np.ndarray | None = None) -> np.ndarray:
        """Unnormalized face normals (twice the triangle area in length)."""
        v = self.vertices if vertices is None else vertices
        a, b, c = (v[self.faces[:, k]] for k in range(3))
        return np.cross(b - a, c - a)


def facial_area(mesh: Mesh, radius: float = FACIAL_AREA_RADIUS) -> np.ndarray:
    """Indices of vertices within ``radius`` mm of the ``nose_tip`` vertex."""
    tip = mesh.vertices[mesh.labels["nose_tip"][0]]
    d = np.linalg.norm(mesh.vertices - tip, axis=1)
    return np.flatnonzero(d <= radius)


# --------------------------------------------------------------------- I/O


def _parse_index(token: str, count: int, lineno: int) -> int:
    try:
        i = int(token)
    except ValueError:
        raise MeshFormatError(f"line {lineno}: bad index {token!r}") from None
    if i > 0:
        return i - 1
    if i < 0:
        return count + i
    raise MeshFormatError(f"line {lineno}: index 0 is invalid in OBJ")


def read_obj(path: str | Path) -> tuple[Mesh, np.ndarray | None]:
    """Parse an OBJ file, returning the mesh and optional per-vertex colors."""
    verts, colors, tex, faces, face_tex = [], [], [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    if len(parts) not in (4, 7):
                        raise MeshFormatError(f"line {lineno}: vertex needs 3 or 6 numbers")
                    verts.append([float(x) for x in parts[1:4]])
                    if len(parts) == 7:
                        colors.append([float(x) for x in parts[4:7]])
                elif tag == "vt":
                    if len(parts) < 3:
                        raise MeshFormatError(f"line {lineno}: texture coordinate needs 2 numbers")
                    tex.append([float(parts[1]), float(parts[2])])
                elif tag == "f":
                    corners = parts[1:]
                    if len(corners) != 3:
                        raise MeshFormatError(
                            f"line {lineno}: non-triangular face with {len(corners)} corners"
                        )
                    vi, ti = [], []
                    for c in corners:
                        sub = c.split("/")
                        vi.append(_parse_index(sub[0], len(verts), lineno))
                        if len(sub) > 1 and sub[1]:
                            ti.append(_parse_index(sub[1], len(tex), lineno))
                    faces.append(vi)
                    face_tex.append(ti if len(ti) == 3 else None)
            except ValueError as exc:
                if isinstance(exc, MeshFormatError):
                    raise
                raise MeshFormatError(f"line {lineno}: {exc}") from None

    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    uv = None
    if tex and all(t is not None for t in face_tex) and face_tex:
        # per-vertex UV; the first corner referencing a vertex wins
        uv = np.full((len(v), 2), np.nan)
        t = np.array(tex)
        for vi, ti in zip(faces, face_tex):
            for a, b in zip(vi, ti):
                if np.isnan(uv[a, 0]):
                    uv[a] = t[b]
        if np.isnan(uv).any():
            uv = np.nan_to_num(uv)
    elif tex and len(tex) == len(v):
        uv = np.array(tex)
    if f.size and (f.max() >= len(v) or f.min() < 0):
        raise MeshFormatError("face index out of range")
    col = np.array(colors) if colors and len(colors) == len(v) else None
    return Mesh(v, f, uv), col


def _label_path(path: Path) -> Path:
    return path.with_name(path.name + ".labels.json")


def load_mesh(path: str | Path) -> Mesh:
    """Load an OBJ triangle mesh plus its optional ``<name>.labels.json`` sidecar.

    When the sidecar names a ``nose_tip`` vertex, a ``facial_area`` label is
    derived from it (vertices within 95 mm).
    """
    path = Path(path)
    mesh, _ = read_obj(path)
    side = _label_path(path)
    if side.exists():
        with open(side, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        labels = {k: np.asarray(v, dtype=np.int64) for k, v in raw.items()}
        mesh = Mesh(mesh.vertices, mesh.faces, mesh.uv, labels)
        if "nose_tip" in labels and "facial_area" not in labels:
            labels["facial_area"] = facial_area(mesh)
            mesh = Mesh(mesh.vertices, mesh.faces, mesh.uv, labels)
    return mesh


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def save_mesh(mesh: Mesh, path: str | Path, colors: np.ndarray | None = None) -> None:
    """Write ``mesh`` as OBJ with 9 significant digits; labels go to a sidecar."""
    path = Path(path)
    lines = ["# facetwin mesh"]
    for i, p in enumerate(mesh.vertices):
        rec = "v " + " ".join(_fmt(x) for x in p)
        if colors is not None:
            rec += " " + " ".join(_fmt(x) for x in colors[i])
        lines.append(rec)
    if mesh.uv is not None:
        lines.extend("vt " + " ".join(_fmt(x) for x in t) for t in mesh.uv)
        lines.extend(f"f {a + 1}/{a + 1} {b + 1}/{b + 1} {c + 1}/{c + 1}" for a, b, c in mesh.faces)
    else:
        lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    labels = {k: v.tolist() for k, v in mesh.labels.items() if k != "facial_area"}
    if labels:
        _label_path(path).write_text(json.dumps(labels, sort_keys=True), encoding="utf-8")


# ---------------------------------------------------------------- geometry


@dataclass(frozen=True, eq=False)
class SparseWeights:
    """Symmetric per-edge weights ``c_ij`` stored as a sparse matrix."""

    matrix: sparse.csr_matrix

    def __post_init__(self):
        object.__setattr__(self, "matrix", sparse.csr_matrix(self.matrix))

    @property
    def n_vertices(self) -> int:
        return self.matrix.shape[0]

    def __getitem__(self, ij: tuple[int, int]) -> float:
        i, j = ij
        return float(self.matrix[i, j])

    def neighbors(self, i: int) -> np.ndarray:
        m = self.matrix
        return m.indices[m.indptr[i]:m.indptr[i + 1]]

    def edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Directed edge list (i, j, c_ij), each undirected edge appearing twice."""
        coo = self.matrix.tocoo()
        return coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data


def edge_face_counts(faces: np.ndarray, n: int) -> sparse.csr_matrix:
    i = faces[:, [0, 1, 2]].reshape(-1)
    j = faces[:, [1, 2, 0]].reshape(-1)
    a = sparse.coo_matrix((np.ones(len(i)), (i, j)), shape=(n, n)).tocsr()
    return a + a.T


def cotangent_weights(mesh: Mesh) -> SparseWeights:
    """Cotangent edge weights ``c_ij = 1/2 * sum cot(opposite angle)``.

    Each per-angle cotangent is clamped to ``[1e-6, 1e6]``; boundary edges
    receive the single incident term.
    """
    n = mesh.n_vertices
    f = mesh.faces
    counts = edge_face_counts(f, n)
    if counts.nnz and counts.data.max() > 2:
        raise NonManifoldError("edge shared by more than two triangles")
    v = mesh.vertices
    rows, cols, vals = [], [], []
    for k in range(3):
        o, a, b = f[:, k], f[:, (k + 1) % 3], f[:, (k + 2) % 3]
        ea, eb = v[a] - v[o], v[b] - v[o]
        dot = np.einsum("ij,ij->i", ea, eb)
        cross = np.linalg.norm(np.cross(ea, eb), axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            cot = np.where(cross > 0, dot / cross, COT_MAX)
        cot = np.clip(cot, COT_MIN, COT_MAX)
        rows += [a, b]
        cols += [b, a]
        vals += [0.5 * cot, 0.5 * cot]
    c = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    c.sum_duplicates()
    # exact symmetry regardless of accumulation order
    c = 0.5 * (c + c.T)
    return SparseWeights(c)


def laplacian_matrix(weights: SparseWeights) -> sparse.csr_matrix:
    """Sparse ``L = diag(sum_j c_ij) - C`` so that ``(L P)_i = sum_j c_ij (p_i - p_j)``."""
    c = weights.matrix
    d = np.asarray(c.sum(axis=1)).ravel()
    return (sparse.diags(d) - c).tocsr()


def laplacian_coords(mesh: Mesh | np.ndarray, weights: SparseWeights) -> np.ndarray:
    """Per-vertex Laplacian coordinates ``sum_j c_ij (p_i - p_j)``."""
    p = mesh.vertices if isinstance(mesh, Mesh) else np.asarray(mesh, dtype=np.float64)
    if p.shape[0] != weights.n_vertices:
        raise ValueError("weights were built for a different vertex count")
    return laplacian_matrix(weights) @ p


# -------------------------------------------------------------- sampling


@dataclass(frozen=True)
class BarycentricAnchor:
    face: int
    bary: tuple[float, float, float]

    def __post_init__(self):
        b = tuple(float(x) for x in self.bary)
        if len(b) != 3:
            raise ValueError("barycentric triple required")
        if abs(sum(b) - 1.0) > 1e-9:
            raise ValueError(f"barycentric coordinates must sum to 1, got {sum(b)!r}")
        if min(b) < 0.0 or max(b) > 1.0:
            raise ValueError("barycentric coordinates must lie in [0, 1]")
        object.__setattr__(self, "bary", b)
        object.__setattr__(self, "face", int(self.face))


def sample_surface(mesh: Mesh | np.ndarray, anchor: BarycentricAnchor, faces: np.ndarray | None = None) -> np.ndarray:
    """Point at ``anchor`` on the surface: barycentric blend of the face corners."""
    if isinstance(mesh, Mesh):
        verts, faces = mesh.vertices, mesh.faces
    else:
        verts = np.asarray(mesh)
    if not 0 <= anchor.face < len(faces):
        raise IndexError(f"face index {anchor.face} out of range")
    tri = verts[faces[anchor.face]]
    b = anchor.bary
    return b[0] * tri[0] + b[1] * tri[1] + b[2] * tri[2]


def sample_surface_many(vertices: np.ndarray, faces: np.ndarray, face_idx: np.ndarray, bary: np.ndarray) -> np.ndarray:
    """Vectorized ``sample_surface`` for arrays of face indices and barycentrics."""
    tri = vertices[faces[face_idx]]
    return np.einsum("kj,kjd->kd", bary, tri)
