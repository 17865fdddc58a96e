"""Shape augmentation by interpolating DR features, plus PCA shape models.

New faces are drawn inside one demographic group: pick ``m`` members, draw
nonnegative weights on a hypersphere shell of radius ``r ~ U[0.6, 1.3]``,
blend their DR features and decode. Per-draw random streams are spawned
from one master seed so a batch is reproducible regardless of how draws
are scheduled.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .dr import DRDecoder, DRFeature, load_feature
from .mesh import Mesh, load_mesh

GENDERS = ("male", "female")
ETHNICITIES = ("white", "asian", "black")
ETHNICITY_ALIASES = {"caucasian": "white"}
ETHNICITY_RATIOS = {"asian": 0.65, "white": 0.30, "black": 0.05}
GENDER_RATIOS = {"male": 0.5, "female": 0.5}
RADIUS_RANGE = (0.6, 1.3)


class GroupError(ValueError):
    """Unknown group tag or too few members to sample from."""


# ---------------------------------------------------------------- weights


def hypersphere_to_cartesian(r: float, angles: np.ndarray) -> np.ndarray:
    """Hyperspherical ``(r, theta_1..theta_{m-1})`` to Cartesian ``a_1..a_m``."""
    angles = np.asarray(angles, dtype=np.float64).reshape(-1)
    m = len(angles) + 1
    a = np.empty(m)
    sin_prod = 1.0
    for k in range(m - 1):
        a[k] = r * np.cos(angles[k]) * sin_prod
        sin_prod *= np.sin(angles[k])
    a[m - 1] = r * sin_prod
    return a


def sample_hypersphere_weights(m: int, rng: np.random.Generator) -> np.ndarray:
    """Nonnegative weights with ``|a| ~ U[0.6, 1.3]`` and angles ``~ U[0, pi/2]``."""
    if m < 1:
        raise ValueError("need at least one weight")
    r = rng.uniform(*RADIUS_RANGE)
    angles = rng.uniform(0.0, np.pi / 2, size=m - 1)
    # cos/sin of angles in [0, pi/2] can round to -0.0 or 6e-17; clamp the sign
    return np.maximum(hypersphere_to_cartesian(r, angles), 0.0)


def interpolate_dr(features: Sequence[DRFeature], a: np.ndarray) -> DRFeature:
    """``sum_i a_i D_i``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if len(features) != len(a):
        raise ValueError(f"{len(features)} features but {len(a)} weights")
    if not features:
        raise ValueError("nothing to interpolate")
    n = features[0].n_vertices
    if any(f.n_vertices != n for f in features):
        raise ValueError("features differ in vertex count")
    data = np.tensordot(a, np.stack([f.data for f in features]), axes=1)
    return DRFeature(data, features[0].reference_id)


# ---------------------------------------------------------------- dataset


def parse_group(tag: str) -> tuple[str | None, str | None]:
    """``"asian_male"`` -> ``("male", "asian")``; either part may be omitted."""
    gender = ethnicity = None
    for part in tag.lower().replace("-", "_").split("_"):
        if not part:
            continue
        part = ETHNICITY_ALIASES.get(part, part)
        if part in GENDERS:
            gender = part
        elif part in ETHNICITIES:
            ethnicity = part
        else:
            raise GroupError(f"unknown group tag component {part!r}")
    return gender, ethnicity


def group_tag(gender: str, ethnicity: str) -> str:
    return f"{ethnicity}_{gender}"


@dataclass(frozen=True, eq=False)
class ShapeEntry:
    feature: DRFeature
    gender: str
    ethnicity: str
    texture_id: str | None = None
    name: str = ""

    def __post_init__(self):
        eth = ETHNICITY_ALIASES.get(self.ethnicity.lower(), self.ethnicity.lower())
        if self.gender.lower() not in GENDERS or eth not in ETHNICITIES:
            raise GroupError(f"tag ({self.gender}, {self.ethnicity}) outside the taxonomy")
        object.__setattr__(self, "gender", self.gender.lower())
        object.__setattr__(self, "ethnicity", eth)

    @property
    def tag(self) -> str:
        return group_tag(self.gender, self.ethnicity)


@dataclass(frozen=True, eq=False)
class ShapeDataset:
    """DR features of the scanned subjects, all relative to one reference mesh."""

    reference: Mesh
    entries: tuple[ShapeEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        n = self.reference.n_vertices
        for e in self.entries:
            if e.feature.n_vertices != n:
                raise ValueError(f"feature {e.name or '?'} has {e.feature.n_vertices} vertices, reference has {n}")

    def __len__(self) -> int:
        return len(self.entries)

    def group(self, tag: str) -> list[ShapeEntry]:
        gender, ethnicity = parse_group(tag)
        return [e for e in self.entries
                if (gender is None or e.gender == gender) and (ethnicity is None or e.ethnicity == ethnicity)]


@dataclass
class SampledFace:
    mesh: Mesh
    texture_id: str | None
    feature: DRFeature
    group: str
    members: list[str]
    weights: np.ndarray

    def record(self) -> dict:
        """Draw log entry."""
        return {"group": self.group, "members": self.members, "weights": [float(w) for w in self.weights],
                "radius": float(np.linalg.norm(self.weights)), "texture": self.texture_id}


def sample_face(dataset: ShapeDataset, group: str, m: int, rng: np.random.Generator,
                decoder: DRDecoder | None = None) -> SampledFace:
    """Blend ``m`` random members of ``group`` and decode the result."""
    members = dataset.group(group)
    if not members:
        raise GroupError(f"group {group!r} is empty")
    if len(members) < m:
        raise GroupError(f"group {group!r} has {len(members)} members, need {m}")
    pick = rng.choice(len(members), size=m, replace=False)
    chosen = [members[i] for i in pick]
    a = sample_hypersphere_weights(m, rng)
    feature = interpolate_dr([e.feature for e in chosen], a)
    decoder = decoder or DRDecoder(dataset.reference)
    mesh = decoder.decode(feature)
    dist = [np.linalg.norm(e.feature.data - feature.data) for e in members]
    nearest = members[int(np.argmin(dist))]
    texture = nearest.texture_id if nearest.texture_id is not None else nearest.name
    return SampledFace(mesh, texture, feature, group, [e.name for e in chosen], a)


def choose_group(rng: np.random.Generator, ethnicity_ratios: dict[str, float] | None = None,
                 gender_ratios: dict[str, float] | None = None) -> str:
    eth = ethnicity_ratios or ETHNICITY_RATIOS
    gen = gender_ratios or GENDER_RATIOS
    e_names = sorted(eth)
    g_names = sorted(gen)
    pe = np.array([eth[k] for k in e_names], dtype=float)
    pg = np.array([gen[k] for k in g_names], dtype=float)
    e = e_names[rng.choice(len(e_names), p=pe / pe.sum())]
    g = g_names[rng.choice(len(g_names), p=pg / pg.sum())]
    return group_tag(g, e)


def generate(dataset: ShapeDataset, count: int, seed: int, group: str | None = None, m: int = 5,
             ethnicity_ratios: dict[str, float] | None = None) -> Iterator[SampledFace]:
    """Draw ``count`` faces; draw ``k`` uses the k-th stream spawned from ``seed``."""
    decoder = DRDecoder(dataset.reference)
    for child in draw_streams(seed, count):
        yield draw_face(dataset, child, group, m, ethnicity_ratios, decoder)


def draw_streams(seed: int, count: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(count)


def draw_face(dataset: ShapeDataset, stream: np.random.SeedSequence, group: str | None = None, m: int = 5,
              ethnicity_ratios: dict[str, float] | None = None, decoder: DRDecoder | None = None) -> SampledFace:
    """One draw from its own stream; the group is drawn first unless fixed."""
    rng = np.random.default_rng(stream)
    tag = group or choose_group(rng, ethnicity_ratios)
    return sample_face(dataset, tag, m, rng, decoder)


# ---------------------------------------------------------------- manifest


def save_dataset_manifest(path: str | Path, reference: str, entries: Sequence[dict]) -> None:
    """``entries``: dicts with ``feature`` (path), ``gender``, ``ethnicity``, optional ``texture``."""
    data = {"reference": reference, "entries": list(entries)}
    Path(path).write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> ShapeDataset:
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    base = path.parent
    reference = load_mesh(base / data["reference"])
    entries = []
    for rec in data["entries"]:
        feat = load_feature(base / rec["feature"])
        entries.append(ShapeEntry(feat, rec["gender"], rec["ethnicity"], rec.get("texture"),
                                  rec.get("name", Path(rec["feature"]).stem)))
    return ShapeDataset(reference, tuple(entries))


# ---------------------------------------------------------------- PCA


@dataclass(frozen=True, eq=False)
class PCAModel:
    """Linear shape model over flattened vertex coordinates."""

    mean: np.ndarray
    components: np.ndarray  # (k, 3n), orthonormal rows
    std: np.ndarray
    explained_ratio: np.ndarray
    faces: np.ndarray
    group_stats: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @property
    def n_components(self) -> int:
        return len(self.components)

    def coefficients(self, vertices: np.ndarray) -> np.ndarray:
        return self.components @ (np.asarray(vertices).reshape(-1) - self.mean)

    def reconstruct(self, coeffs: np.ndarray) -> Mesh:
        flat = self.mean + np.asarray(coeffs, dtype=np.float64) @ self.components
        return Mesh(flat.reshape(-1, 3), self.faces)


def pca_fit(meshes: Sequence[Mesh], k: int, groups: Sequence[str] | None = None,
            rel_tol: float = 1e-12) -> PCAModel:
    """PCA of the stacked vertex arrays; components with no variance are dropped.

    ``groups`` (one tag per mesh) adds per-group coefficient mean and covariance.
    """
    if len(meshes) < 2:
        raise ValueError("PCA needs at least two meshes")
    faces = meshes[0].faces
    n = meshes[0].n_vertices
    if any(mm.n_vertices != n or not np.array_equal(mm.faces, faces) for mm in meshes):
        raise ValueError("meshes must share topology")
    x = np.stack([mm.vertices.reshape(-1) for mm in meshes])
    mean = x.mean(0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s**2 / (len(x) - 1)
    total = var.sum()
    rank = int(np.count_nonzero(var > rel_tol * max(total, np.finfo(float).tiny))) if total > 0 else 0
    if k > rank:
        warnings.warn(f"requested {k} components but data rank is {rank}; truncating", RuntimeWarning)
        k = rank
    comps = vt[:k]
    ratio = var[:k] / total if total > 0 else np.zeros(0)
    stats = {}
    if groups is not None:
        if len(groups) != len(meshes):
            raise ValueError("one group tag per mesh required")
        coeffs = xc @ comps.T
        for tag in sorted(set(groups)):
            sel = coeffs[[g == tag for g in groups]]
            cov = np.cov(sel, rowvar=False).reshape(k, k) if len(sel) > 1 else np.zeros((k, k))
            stats[tag] = (sel.mean(0), cov)
    return PCAModel(mean, comps, np.sqrt(var[:k]), ratio, faces, stats)


def pca_sample_group(model: PCAModel, group: str, rng: np.random.Generator) -> Mesh:
    """Reconstruct from coefficients drawn from the group's Gaussian."""
    if group not in model.group_stats:
        raise GroupError(f"no statistics for group {group!r}")
    mu, cov = model.group_stats[group]
    return model.reconstruct(sample_gaussian(mu, cov, rng))


def sample_gaussian(mu: np.ndarray, cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw from N(mu, cov) for a possibly singular PSD ``cov``."""
    w, v = np.linalg.eigh(np.asarray(cov, dtype=np.float64))
    z = rng.standard_normal(len(mu))
    return np.asarray(mu, dtype=np.float64) + v @ (np.sqrt(np.clip(w, 0.0, None)) * z)


def save_pca(model: PCAModel, path: str | Path) -> None:
    tags = sorted(model.group_stats)
    arrays = {"mean": model.mean, "components": model.components, "std": model.std,
              "explained_ratio": model.explained_ratio, "faces": model.faces,
              "group_tags": np.array(tags, dtype=str)}
    for i, t in enumerate(tags):
        arrays[f"group_mu_{i}"], arrays[f"group_cov_{i}"] = model.group_stats[t]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_pca(path: str | Path) -> PCAModel:
    with np.load(path) as z:
        tags = [str(t) for t in z["group_tags"]]
        stats = {t: (z[f"group_mu_{i}"], z[f"group_cov_{i}"]) for i, t in enumerate(tags)}
        return PCAModel(z["mean"], z["components"], z["std"], z["explained_ratio"], z["faces"], stats)
