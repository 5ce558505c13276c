"""Triangle-soup meshes: OBJ loading, normalization, sampling, ray queries
and bilateral symmetry detection."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import kernels

SYMMETRY_SAMPLES = 2000
SYMMETRY_THRESHOLD = 0.02
_SYMMETRY_SEED = 52


class MeshError(ValueError):
    pass


class MeshLoadError(MeshError):
    def __init__(self, path, line_no, msg):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.path = path
        self.line_no = line_no


@dataclass
class TriangleMesh:
    """Indexed triangle soup; vertex normals are area-weighted face-normal
    averages computed on demand."""

    vertices: np.ndarray          # (n, 3) float64
    triangles: np.ndarray         # (m, 3) int64
    vertex_normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if self.vertices.size and not np.all(np.isfinite(self.vertices)):
            raise MeshError("non-finite vertex coordinates")
        if self.triangles.size and self.triangles.max() >= len(self.vertices):
            raise MeshError("triangle index out of range")
        if self.vertex_normals is None and len(self.triangles):
            self.vertex_normals = self._compute_vertex_normals()

    def _compute_vertex_normals(self):
        fn = self.face_normals(normalized=False)
        vn = np.zeros_like(self.vertices)
        for c in range(3):
            np.add.at(vn, self.triangles[:, c], fn)
        norms = np.linalg.norm(vn, axis=1)
        norms[norms == 0] = 1.0
        return vn / norms[:, None]

    def face_normals(self, normalized=True):
        v = self.vertices
        t = self.triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        if normalized:
            lens = np.linalg.norm(n, axis=1)
            lens[lens == 0] = 1.0
            n = n / lens[:, None]
        return n

    def face_areas(self):
        v = self.vertices
        t = self.triangles
        return 0.5 * np.linalg.norm(
            np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]]), axis=1)

    def total_area(self):
        return float(self.face_areas().sum())

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def longest_extent(self):
        lo, hi = self.bounds()
        return float((hi - lo).max())


@dataclass
class SurfaceSample:
    position: np.ndarray
    normal: np.ndarray
    triangle_id: int


@dataclass
class SampleSet:
    """Columnar surface samples (one row per sample)."""

    positions: np.ndarray      # (n, 3)
    normals: np.ndarray        # (n, 3)
    triangle_ids: np.ndarray   # (n,)

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i) -> SurfaceSample:
        return SurfaceSample(self.positions[i], self.normals[i], int(self.triangle_ids[i]))


@dataclass
class SymmetryPlane:
    normal: np.ndarray
    offset: float

    def reflect(self, points):
        points = np.asarray(points, dtype=np.float64)
        d = points @ self.normal - self.offset
        return points - 2.0 * d[..., None] * self.normal


@dataclass
class NormalizeTransform:
    """Affine map from original to normalized coordinates: p' = scale*(p + pre) + post."""

    pre_translation: np.ndarray
    scale: float
    post_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return self.scale * (points + self.pre_translation) + self.post_translation


def load_mesh(path) -> TriangleMesh:
    """Load a Wavefront OBJ as a triangle soup.

    Polygons with more than 3 sides are fan-triangulated; duplicate faces
    are preserved.  Only ``v``, ``vn`` and ``f`` records are interpreted.
    """
    path = Path(path)
    verts = []
    normals = []
    faces = []
    with open(path) as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif tag == "vn":
                    normals.append([float(x) for x in parts[1:4]])
                elif tag == "f":
                    idx = []
                    for tok in parts[1:]:
                        vi = tok.split("/")[0]
                        i = int(vi)
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    if len(idx) < 3:
                        raise ValueError("face with fewer than 3 vertices")
                    for k in range(1, len(idx) - 1):
                        faces.append((idx[0], idx[k], idx[k + 1]))
            except (ValueError, IndexError) as exc:
                raise MeshLoadError(path, line_no, str(exc)) from exc
    if not verts or not faces:
        raise MeshLoadError(path, 0, "empty mesh (no vertices or faces)")
    vn = None
    if normals and len(normals) == len(verts):
        vn = np.asarray(normals, dtype=np.float64)
    return TriangleMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64), vn)


def save_mesh(mesh: TriangleMesh, path):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def normalize_mesh(mesh: TriangleMesh):
    """Ground on the x-z plane, center the x/z centroid at the origin and
    scale the longest axis-aligned extent to 1.

    Returns (normalized mesh, transform).
    """
    if len(mesh.vertices) == 0:
        raise MeshError("empty mesh")
    lo, hi = mesh.bounds()
    extent = float((hi - lo).max())
    if extent <= 0:
        raise MeshError("degenerate mesh: zero extent on all axes")
    centroid = mesh.vertices.mean(axis=0)
    pre = np.array([-centroid[0], -lo[1], -centroid[2]])
    scale = 1.0 / extent
    xform = NormalizeTransform(pre_translation=pre, scale=scale)
    new_verts = xform.apply(mesh.vertices)
    out = TriangleMesh(new_verts, mesh.triangles.copy(),
                       mesh.vertex_normals.copy() if mesh.vertex_normals is not None else None)
    return out, xform


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> SampleSet:
    """Area-uniform surface sampling, deterministic given the seed."""
    if n < 1:
        raise ValueError("need n >= 1")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise MeshError("zero total surface area")
    rng = np.random.Generator(np.random.PCG64(seed))
    # per-triangle counts proportional to area (largest-remainder rounding)
    quota = areas / total * n
    counts = np.floor(quota).astype(np.int64)
    short = n - counts.sum()
    if short > 0:
        order = np.argsort(-(quota - counts), kind="stable")
        counts[order[:short]] += 1
    tri_ids = np.repeat(np.arange(len(areas)), counts)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = mesh.vertices
    t = mesh.triangles[tri_ids]
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    pos = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    normals = mesh.face_normals()[tri_ids]
    return SampleSet(pos, normals, tri_ids)


def ray_mesh_intersect(mesh: TriangleMesh, origin, direction):
    """Nearest positive hit distance along a unit-length ray, or None.

    Grazing hits on shared edges resolve to the smallest triangle index.
    """
    eps = 1e-6 * mesh.longest_extent()
    t = batch_ray_mesh(mesh, np.asarray(origin, dtype=np.float64)[None, :],
                       np.asarray(direction, dtype=np.float64)[None, :], eps)[0]
    return float(t) if np.isfinite(t) else None


def batch_ray_mesh(mesh: TriangleMesh, origins, dirs, eps=None):
    """Nearest positive hit distances, one per ray; +inf on miss."""
    if eps is None:
        eps = 1e-6 * mesh.longest_extent()
    return kernels.ray_hits_first(
        np.ascontiguousarray(origins, dtype=np.float64),
        np.ascontiguousarray(dirs, dtype=np.float64),
        mesh.vertices, mesh.triangles, eps)


def average_edge_length(mesh: TriangleMesh) -> float:
    """Mean edge length with soup semantics: every triangle contributes its
    three edges, shared edges counted once per triangle."""
    if len(mesh.triangles) == 0:
        raise MeshError("mesh has no triangles")
    v = mesh.vertices
    t = mesh.triangles
    e = np.concatenate([
        np.linalg.norm(v[t[:, 1]] - v[t[:, 0]], axis=1),
        np.linalg.norm(v[t[:, 2]] - v[t[:, 1]], axis=1),
        np.linalg.norm(v[t[:, 0]] - v[t[:, 2]], axis=1),
    ])
    return float(e.mean())


def detect_bilateral_symmetry(mesh: TriangleMesh) -> SymmetryPlane | None:
    """Test the canonical plane x=0 on a normalized mesh.

    Reflects surface samples and compares with a symmetric Chamfer
    distance; inputs are consistently oriented so only x=0 is considered.
    """
    plane = SymmetryPlane(np.array([1.0, 0.0, 0.0]), 0.0)
    samples = sample_surface(mesh, SYMMETRY_SAMPLES, seed=_SYMMETRY_SEED).positions
    reflected = plane.reflect(samples)
    tree = cKDTree(samples)
    rtree = cKDTree(reflected)
    d_ab = tree.query(reflected)[0].mean()
    d_ba = rtree.query(samples)[0].mean()
    chamfer = 0.5 * (d_ab + d_ba) / mesh.longest_extent()
    if chamfer < SYMMETRY_THRESHOLD:
        return plane
    return None
