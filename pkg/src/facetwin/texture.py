"""Photo-to-UV texture projection and Poisson blending with a background texture.

Pixel and texel centers sit at integer coordinates: pixel ``(row, col)`` is
the image point ``(x=col, y=row)``, and texel ``(row, col)`` of a ``W x H``
texture covers ``u = (col + 0.5) / W``, ``v = 1 - (row + 0.5) / H``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.path import Path as PolygonPath
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .camera import Extrinsics, Intrinsics
from .dr import DRFeature
from .mesh import Mesh

BACKGROUND = 0
PROJECTED = 1
BOUNDARY = 2
DEPTH_EPS_FRACTION = 1e-3
CG_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class UVTexture:
    """RGB texel grid (float, nominal range [0, 1]) and a per-texel mask code."""

    pixels: np.ndarray
    mask: np.ndarray
    bit_depth: int = 8

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[..., None]
        mask = np.asarray(self.mask, dtype=np.uint8)
        if px.shape[:2] != mask.shape:
            raise ValueError(f"pixels {px.shape[:2]} and mask {mask.shape} differ in size")
        if self.bit_depth not in (8, 16):
            raise ValueError("bit depth must be 8 or 16")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @classmethod
    def full(cls, pixels: np.ndarray, bit_depth: int = 8) -> "UVTexture":
        """Texture whose every texel is valid (e.g. a background library entry)."""
        px = np.asarray(pixels, dtype=np.float64)
        return cls(px, np.full(px.shape[:2], PROJECTED, np.uint8), bit_depth)

    @property
    def projected(self) -> np.ndarray:
        return self.mask != BACKGROUND


# ---------------------------------------------------------------- rasterizing


def _triangle_pixels(tri: np.ndarray, width: int, height: int, tol: float = 1e-12):
    """Pixel centers inside a 2D triangle: (rows, cols, barycentrics (k, 3))."""
    lo = np.maximum(np.ceil(tri.min(0) - tol), 0).astype(int)
    hi = np.minimum(np.floor(tri.max(0) + tol), [width - 1, height - 1]).astype(int)
    if np.any(hi < lo):
        return None
    xs, ys = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1))
    xs, ys = xs.ravel(), ys.ravel()
    a, b, c = tri
    area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    if abs(area) < 1e-14:
        return None
    w0 = ((b[0] - xs) * (c[1] - ys) - (b[1] - ys) * (c[0] - xs)) / area
    w1 = ((c[0] - xs) * (a[1] - ys) - (c[1] - ys) * (a[0] - xs)) / area
    w2 = 1.0 - w0 - w1
    inside = (w0 >= -tol) & (w1 >= -tol) & (w2 >= -tol)
    if not inside.any():
        return None
    return ys[inside], xs[inside], np.column_stack([w0, w1, w2])[inside]


def camera_points(vertices: np.ndarray, extr: Extrinsics) -> np.ndarray:
    return extr.apply(np.asarray(vertices, dtype=np.float64))


def _screen(ycam: np.ndarray, intr: Intrinsics) -> np.ndarray:
    return intr.focal * ycam[:, :2] / ycam[:, 2:3] + [intr.cx, intr.cy]


def rasterize_depth(vertices: np.ndarray, faces: np.ndarray, extr: Extrinsics, intr: Intrinsics,
                    size: tuple[int, int], return_faces: bool = False):
    """Nearest camera-space depth per pixel (``+inf`` where empty).

    ``size`` is ``(width, height)``. Depth is interpolated perspective-correctly
    (``1/z`` is affine in screen space). Triangles with a vertex at or behind
    the camera plane are skipped.
    """
    width, height = size
    ycam = camera_points(vertices, extr)
    depth = np.full((height, width), np.inf)
    face_id = np.full((height, width), -1, dtype=np.int64)
    zs = ycam[:, 2]
    safe = np.where(zs > 0, zs, 1.0)
    scr = intr.focal * ycam[:, :2] / safe[:, None] + [intr.cx, intr.cy]
    for fi, tri in enumerate(np.asarray(faces)):
        if np.any(zs[tri] <= 0):
            continue
        hit = _triangle_pixels(scr[tri], width, height)
        if hit is None:
            continue
        rows, cols, w = hit
        z = 1.0 / (w @ (1.0 / zs[tri]))
        closer = z < depth[rows, cols]
        depth[rows[closer], cols[closer]] = z[closer]
        face_id[rows[closer], cols[closer]] = fi
    return (depth, face_id) if return_faces else depth


def cell_max_depth(depth: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Farthest depth among the four pixel centers around each point (``+inf`` if any is empty).

    A point is hidden only if the whole surrounding pixel cell sees something
    nearer; a bilinear or nearest-pixel lookup reports phantom occluders at
    grazing angles next to silhouettes.
    """
    h, w = depth.shape
    x = np.clip(xy[:, 0], 0, w - 1)
    y = np.clip(xy[:, 1], 0, h - 1)
    x0, y0 = np.floor(x).astype(int), np.floor(y).astype(int)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    return np.maximum.reduce([depth[y0, x0], depth[y0, x1], depth[y1, x0], depth[y1, x1]])


def bilinear_sample(image: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear color lookup with edge clamping."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    h, w = img.shape[:2]
    x = np.clip(xy[:, 0], 0, w - 1)
    y = np.clip(xy[:, 1], 0, h - 1)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    fx, fy = (x - x0)[:, None], (y - y0)[:, None]
    return ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x1]
            + (1 - fx) * fy * img[y1, x0] + fx * fy * img[y1, x1])


# ---------------------------------------------------------------- projection


@dataclass(frozen=True, eq=False)
class ProjectionContext:
    """Posed face, fitted camera and source photo; the depth buffer is built on demand."""

    mesh: Mesh  # template topology and UVs
    vertices: np.ndarray  # posed face P_F
    extrinsics: Extrinsics
    intrinsics: Intrinsics
    image: np.ndarray

    def depth_buffer(self) -> np.ndarray:
        h, w = self.image.shape[:2]
        return rasterize_depth(self.vertices, self.mesh.faces, self.extrinsics, self.intrinsics, (w, h))


def uv_texels(mesh: Mesh, resolution: tuple[int, int]):
    """Texels covered by the UV layout: (rows, cols, face index, barycentrics).

    Faces whose UV footprint spans more than half the map wrap around the
    seam and are skipped.
    """
    if mesh.uv is None:
        raise ValueError("mesh has no UV coordinates")
    width, height = resolution
    uv = mesh.uv
    pix = np.column_stack([uv[:, 0] * width - 0.5, (1.0 - uv[:, 1]) * height - 0.5])
    rows, cols, fids, bary = [], [], [], []
    owner = np.full((height, width), -1, dtype=np.int64)
    for fi, tri in enumerate(mesh.faces):
        span = np.ptp(uv[tri], axis=0)
        if span[0] > 0.5 or span[1] > 0.5:
            continue
        hit = _triangle_pixels(pix[tri], width, height, tol=1e-9)
        if hit is None:
            continue
        r, c, w = hit
        fresh = owner[r, c] < 0
        owner[r[fresh], c[fresh]] = fi
        rows.append(r[fresh])
        cols.append(c[fresh])
        fids.append(np.full(fresh.sum(), fi))
        bary.append(np.clip(w[fresh], 0.0, 1.0))
    if not rows:
        return (np.zeros(0, int),) * 3 + (np.zeros((0, 3)),)
    bary = np.vstack(bary)
    bary /= bary.sum(1, keepdims=True)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(fids), bary


def front_facing(vertices: np.ndarray, faces: np.ndarray, extr: Extrinsics) -> np.ndarray:
    """Per face: outward normal points towards the camera center."""
    y = camera_points(vertices, extr)
    tri = y[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return np.einsum("ij,ij->i", n, tri.mean(1)) < 0


def project_texture(ctx: ProjectionContext, resolution: tuple[int, int] = (2048, 2048),
                    eye_polygons: Sequence[np.ndarray] = (), depth: np.ndarray | None = None,
                    eps_fraction: float = DEPTH_EPS_FRACTION) -> UVTexture:
    """Sample the photo into UV space.

    A texel is marked projected when its surface point is front-facing,
    lands inside the image, is not inside any eye polygon (image pixels),
    and lies no more than ``eps_fraction`` times the scene depth range
    behind the depth buffer (see ``cell_max_depth``). Everything else is
    background.
    """
    width, height = resolution
    depth = ctx.depth_buffer() if depth is None else depth
    finite = depth[np.isfinite(depth)]
    eps = eps_fraction * (float(finite.max() - finite.min()) if finite.size else 0.0)
    rows, cols, fids, bary = uv_texels(ctx.mesh, resolution)
    ycam = camera_points(ctx.vertices, ctx.extrinsics)
    pts = np.einsum("kc,kcd->kd", bary, ycam[ctx.mesh.faces[fids]])
    facing = front_facing(ctx.vertices, ctx.mesh.faces, ctx.extrinsics)[fids] & (pts[:, 2] > 0)
    xy = np.full((len(pts), 2), -1.0)
    xy[facing] = _screen(pts[facing], ctx.intrinsics)
    h, w = depth.shape
    inside = facing & (xy[:, 0] >= -0.5) & (xy[:, 0] <= w - 0.5) & (xy[:, 1] >= -0.5) & (xy[:, 1] <= h - 0.5)
    visible = inside.copy()
    visible[inside] = pts[inside, 2] <= cell_max_depth(depth, xy[inside]) + eps
    for poly in eye_polygons:
        poly = np.asarray(poly, dtype=np.float64)
        if len(poly) >= 3 and visible.any():
            visible[visible] &= ~PolygonPath(poly).contains_points(xy[visible])

    img = np.asarray(ctx.image, dtype=np.float64)
    channels = 1 if img.ndim == 2 else img.shape[2]
    pixels = np.zeros((height, width, channels))
    mask = np.zeros((height, width), np.uint8)
    vr, vc = rows[visible], cols[visible]
    pixels[vr, vc] = bilinear_sample(img, xy[visible])
    mask[vr, vc] = PROJECTED
    return UVTexture(pixels, mark_boundary(mask))


def mark_boundary(mask: np.ndarray) -> np.ndarray:
    """Relabel projected texels with a 4-neighbor outside the projection as boundary."""
    proj = mask != BACKGROUND
    pad = np.pad(proj, 1, constant_values=False)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    out = np.where(proj, PROJECTED, BACKGROUND).astype(np.uint8)
    out[proj & ~interior] = BOUNDARY
    return out


# ---------------------------------------------------------------- blending


def blend_region(mask: np.ndarray) -> np.ndarray:
    """Unknown texels of the Poisson solve: projected and off the texture border."""
    region = mask != BACKGROUND
    region[0, :] = region[-1, :] = False
    region[:, 0] = region[:, -1] = False
    return region


_OFFSETS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def poisson_system(region: np.ndarray):
    """5-point Laplacian restricted to ``region`` and the neighbor index table."""
    h, w = region.shape
    idx = -np.ones((h, w), dtype=np.int64)
    rr, cc = np.nonzero(region)
    idx[rr, cc] = np.arange(len(rr))
    rows, cols, vals = [np.arange(len(rr))], [np.arange(len(rr))], [np.full(len(rr), 4.0)]
    for dr, dc in _OFFSETS:
        nb = idx[rr + dr, cc + dc]
        ok = nb >= 0
        rows.append(np.flatnonzero(ok))
        cols.append(nb[ok])
        vals.append(-np.ones(ok.sum()))
    a = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(len(rr), len(rr)))
    return a, rr, cc, idx


def poisson_blend(foreground: UVTexture, background: UVTexture, rtol: float = CG_RTOL) -> UVTexture:
    """Seamless clone of the projected foreground into the background.

    Guidance for a texel pair inside the region is the foreground difference;
    pairs crossing the region boundary use the background difference, so the
    solve is equivalent to a harmonic correction of ``fg - bg`` pinned to zero
    on the boundary. Texels outside the region are copied from the
    background bit for bit.
    """
    if foreground.shape != background.shape:
        raise ValueError("foreground and background resolutions differ")
    fg = foreground.pixels
    bg = background.pixels
    if fg.shape[2] != bg.shape[2]:
        raise ValueError("channel counts differ")
    out = bg.copy()
    region = blend_region(foreground.mask)
    if region.any():
        a, rr, cc, idx = poisson_system(region)
        diff = fg - bg
        for ch in range(fg.shape[2]):
            d = diff[..., ch]
            # sum over in-region neighbors of (fg_p - fg_q) - (bg_p - bg_q)
            rhs = np.zeros(len(rr))
            for dr, dc in _OFFSETS:
                ok = idx[rr + dr, cc + dc] >= 0
                rhs[ok] += d[rr[ok], cc[ok]] - d[rr[ok] + dr, cc[ok] + dc]
            if np.any(rhs):
                corr, info = splinalg.cg(a, rhs, rtol=rtol, atol=0.0, maxiter=20 * len(rr))
                if info != 0:
                    raise np.linalg.LinAlgError(f"Poisson CG did not converge (info={info})")
                out[rr, cc, ch] = bg[rr, cc, ch] + corr
    mask = np.where(region, foreground.mask, background.mask)
    return UVTexture(out, mask, max(foreground.bit_depth, background.bit_depth))


def guidance_divergence(foreground: np.ndarray, background: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Per region texel, the summed guidance ``sum_q v_pq`` (rows of the Poisson system)."""
    fg = np.asarray(foreground, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    rr, cc = np.nonzero(region)
    total = np.zeros((len(rr),) + fg.shape[2:])
    for dr, dc in _OFFSETS:
        inside = region[rr + dr, cc + dc]
        src = np.where(inside[(...,) + (None,) * (fg.ndim - 2)], fg[rr, cc] - fg[rr + dr, cc + dc],
                       bg[rr, cc] - bg[rr + dr, cc + dc])
        total += src
    return total


# ---------------------------------------------------------------- library


@dataclass(frozen=True, eq=False)
class LibraryTexture:
    texture_id: str
    texture: UVTexture
    feature: DRFeature


def choose_background_texture(library: Sequence[LibraryTexture], query: DRFeature | None = None,
                              texture_id: str | None = None) -> LibraryTexture:
    """Explicit id if given, else the member nearest ``query`` in L1 over DR features."""
    if not library:
        raise ValueError("background texture library is empty")
    if texture_id is not None:
        for item in library:
            if item.texture_id == texture_id:
                return item
        raise KeyError(f"no background texture with id {texture_id!r}")
    if query is None:
        raise ValueError("need a query feature or an explicit texture id")
    dist = [float(np.abs(item.feature.data - query.data).sum()) for item in library]
    return library[int(np.argmin(dist))]


# ---------------------------------------------------------------- files


def _read_header(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_pnm(path: str | Path) -> tuple[np.ndarray, int]:
    """Binary PPM (P6) or PGM (P5); returns raw integer samples and maxval."""
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _read_header(raw, 4)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported netpbm type {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    ch = 3 if magic == b"P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * ch
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=pos)
    shape = (h, w, 3) if ch == 3 else (h, w)
    return data.reshape(shape).astype(np.int64), maxval


def write_pnm(path: str | Path, samples: np.ndarray, maxval: int) -> None:
    s = np.asarray(samples)
    if s.ndim == 3 and s.shape[2] == 1:
        s = s[..., 0]
    magic = b"P6" if s.ndim == 3 else b"P5"
    h, w = s.shape[:2]
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(b"%s\n%d %d\n%d\n" % (magic, w, h, maxval))
        fh.write(np.ascontiguousarray(s, dtype=dtype).tobytes())


def read_image(path: str | Path) -> tuple[np.ndarray, int]:
    """Float image in [0, 1] and its bit depth."""
    samples, maxval = read_pnm(path)
    return samples / maxval, 16 if maxval > 255 else 8


def write_image(path: str | Path, image: np.ndarray, bit_depth: int = 8) -> None:
    maxval = 65535 if bit_depth == 16 else 255
    q = np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * maxval)
    write_pnm(path, q.astype(np.int64), maxval)


def save_texture(texture: UVTexture, path: str | Path, mask_path: str | Path | None = None) -> None:
    px = texture.pixels
    if px.shape[2] == 1:
        px = np.repeat(px, 3, axis=2)
    write_image(path, px, texture.bit_depth)
    if mask_path is not None:
        write_pnm(mask_path, texture.mask.astype(np.int64), 255)


def load_texture(path: str | Path, mask_path: str | Path | None = None) -> UVTexture:
    pixels, bits = read_image(path)
    if mask_path is None:
        return UVTexture.full(pixels, bits)
    mask, _ = read_pnm(mask_path)
    return UVTexture(pixels, mask.astype(np.uint8), bits)
