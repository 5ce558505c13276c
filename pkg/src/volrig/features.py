"""The 5-channel volumetric shape representation: SDF, principal
curvatures, local shape diameter and local vertex density."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .mesh import SampleSet, TriangleMesh, average_edge_length, batch_ray_mesh, sample_surface
from .sdf import compute_sdf
from .voxel import OccupancyMask, VoxelGrid, make_grid, voxelize

CHANNEL_NAMES = ("sdf", "k1", "k2", "lsd", "lvd")
CURVATURE_NEIGHBORS = 30
LSD_RAY_COUNT = 8
LSD_CONE_HALF_ANGLE = np.deg2rad(15.0)
LSD_INWARD_OFFSET = 1e-4
KDE_BANDWIDTH_EDGE_FACTOR = 10.0
DEFAULT_SAMPLE_COUNT = 10000


@dataclass
class ShapeChannels:
    grid: VoxelGrid
    data: np.ndarray     # (R, R, R, 5) float32, channel order = CHANNEL_NAMES

    def channel(self, name: str) -> np.ndarray:
        return self.data[..., CHANNEL_NAMES.index(name)]


def compute_curvatures(samples: SampleSet, k: int = CURVATURE_NEIGHBORS):
    """Principal curvatures per sample via quadric fitting.

    Fits h = a x^2 + b xy + c y^2 over the k nearest samples in a local
    frame whose height axis points opposite the surface normal, so convex
    regions (sphere with outward normals) come out positive.  Returns
    (k1, k2, degenerate_flags) with k1 >= k2.
    """
    pos = samples.positions
    nrm = samples.normals
    n = len(pos)
    if n < 8:
        raise ValueError("need at least 8 samples for curvature fitting")
    k = min(k, n)
    tree = cKDTree(pos)
    _, nbr = tree.query(pos, k=k)
    k1 = np.zeros(n)
    k2 = np.zeros(n)
    degenerate = np.zeros(n, dtype=bool)
    for i in range(n):
        z = -nrm[i]
        # any stable tangent basis
        a = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        x = np.cross(a, z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rel = pos[nbr[i]] - pos[i]
        u = rel @ x
        v = rel @ y
        h = rel @ z
        design = np.stack([u * u, u * v, v * v], axis=1)
        sol, _, rank, _ = np.linalg.lstsq(design, h, rcond=None)
        if rank < 3:
            degenerate[i] = True
            continue
        aa, bb, cc = sol
        shape_op = np.array([[2 * aa, bb], [bb, 2 * cc]])
        eig = np.linalg.eigvalsh(shape_op)
        k1[i] = eig[1]
        k2[i] = eig[0]
    return k1, k2, degenerate


def _cone_directions(axis, half_angle, count):
    """Deterministic ray fan inside a cone around `axis`: two rings of
    count/2 directions at half and full cone angle."""
    axis = axis / np.linalg.norm(axis)
    a = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(a, axis)
    x /= np.linalg.norm(x)
    y = np.cross(axis, x)
    dirs = []
    per_ring = count // 2
    for ring, ang in ((0, 0.5 * half_angle), (1, half_angle)):
        for m in range(per_ring):
            phi = 2 * np.pi * (m + 0.5 * ring) / per_ring
            d = (np.cos(ang) * axis
                 + np.sin(ang) * (np.cos(phi) * x + np.sin(phi) * y))
            dirs.append(d)
    return np.asarray(dirs)


def compute_local_shape_diameter(mesh: TriangleMesh, samples: SampleSet):
    """Median inward ray-hit distance per sample (8 rays, 30-degree cone).

    Samples whose rays all miss get LSD 0 and a raised flag.
    """
    n = len(samples)
    eps = 1e-6 * mesh.longest_extent()
    origins = np.empty((n * LSD_RAY_COUNT, 3))
    dirs = np.empty((n * LSD_RAY_COUNT, 3))
    for i in range(n):
        axis = -samples.normals[i]
        o = samples.positions[i] - LSD_INWARD_OFFSET * samples.normals[i]
        d = _cone_directions(axis, LSD_CONE_HALF_ANGLE, LSD_RAY_COUNT)
        origins[i * LSD_RAY_COUNT:(i + 1) * LSD_RAY_COUNT] = o
        dirs[i * LSD_RAY_COUNT:(i + 1) * LSD_RAY_COUNT] = d
    t = batch_ray_mesh(mesh, origins, dirs, eps).reshape(n, LSD_RAY_COUNT)
    lsd = np.zeros(n)
    all_missed = np.zeros(n, dtype=bool)
    for i in range(n):
        hits = t[i][np.isfinite(t[i])]
        if hits.size:
            lsd[i] = np.median(hits)
        else:
            all_missed[i] = True
    return lsd, all_missed


def splat_surface_features(grid: VoxelGrid, surface: np.ndarray,
                           samples: SampleSet, values: np.ndarray):
    """Average per-sample feature values into their surface voxels.

    `values` is (n_samples, n_features).  Surface voxels that receive no
    sample inherit the value of the nearest sample-bearing surface voxel;
    non-surface voxels stay 0.
    """
    r = grid.resolution
    nfeat = values.shape[1]
    sums = np.zeros((r, r, r, nfeat))
    counts = np.zeros((r, r, r))
    cells = grid.point_to_cell(samples.positions)
    np.clip(cells, 0, r - 1, out=cells)
    flat = (cells[:, 0] * r + cells[:, 1]) * r + cells[:, 2]
    np.add.at(counts.reshape(-1), flat, 1.0)
    for c in range(nfeat):
        np.add.at(sums[..., c].reshape(-1), flat, values[:, c])
    out = np.zeros((r, r, r, nfeat))
    has = counts > 0
    out[has] = sums[has] / counts[has][:, None]
    # keep only surface voxels; fill sample-less surface voxels from the
    # nearest bearing one
    out[~surface] = 0.0
    bearing = has & surface
    holes = surface & ~has
    if np.any(holes):
        if not np.any(bearing):
            raise ValueError("no surface voxel received any sample")
        src_idx = np.argwhere(bearing)
        dst_idx = np.argwhere(holes)
        tree = cKDTree(src_idx.astype(np.float64))
        nearest = tree.query(dst_idx.astype(np.float64))[1]
        out[holes[..., None].repeat(nfeat, axis=-1)] = out[tuple(src_idx[nearest].T)].ravel()
    return out


def compute_vertex_density(mesh: TriangleMesh, grid: VoxelGrid) -> np.ndarray:
    """Gaussian KDE of mesh vertices at every cell center, bandwidth
    10x the average edge length, kernel truncated at 3 bandwidths."""
    h = KDE_BANDWIDTH_EDGE_FACTOR * average_edge_length(mesh)
    out = np.zeros((grid.resolution,) * 3)
    kernels.kde_accumulate(out, mesh.vertices, grid.origin, grid.cell_size, h)
    return out


def assemble_channels(grid: VoxelGrid, sdf, k1_grid, k2_grid, lsd_grid, lvd,
                      surface: np.ndarray) -> ShapeChannels:
    if not np.any(surface):
        raise ValueError("empty surface voxel set")
    for arr in (sdf, k1_grid, k2_grid, lsd_grid, lvd):
        if arr.shape != (grid.resolution,) * 3:
            raise ValueError("channel grid mismatch")
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite channel values")
    data = np.stack([sdf, k1_grid, k2_grid, lsd_grid, lvd], axis=-1).astype(np.float32)
    return ShapeChannels(grid, data)


def featurize(mesh: TriangleMesh, resolution: int,
              n_samples: int = DEFAULT_SAMPLE_COUNT, seed: int = 0):
    """Full featurization of a normalized mesh.

    Returns (ShapeChannels, OccupancyMask, surface bool array).
    """
    grid = make_grid(mesh, resolution)
    surface, mask = voxelize(mesh, grid)
    sdf = compute_sdf(mesh, grid, surface, mask)
    samples = sample_surface(mesh, n_samples, seed=seed)
    k1, k2, _ = compute_curvatures(samples)
    lsd, _ = compute_local_shape_diameter(mesh, samples)
    surf_feats = splat_surface_features(grid, surface, samples,
                                        np.stack([k1, k2, lsd], axis=1))
    lvd = compute_vertex_density(mesh, grid)
    channels = assemble_channels(grid, sdf, surf_feats[..., 0], surf_feats[..., 1],
                                 surf_feats[..., 2], lvd, surface)
    return channels, mask, surface


# ---------------------------------------------------------------------------
# channel dump / inspection formats


def dump_channel(array: np.ndarray, grid: VoxelGrid, name: str, out_dir):
    """Raw little-endian float32, x-fastest order, with a JSON header."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = np.asarray(array, dtype="<f4").ravel(order="F")
    raw.tofile(out_dir / f"{name}.f32")
    header = {
        "name": name,
        "resolution": grid.resolution,
        "origin": [float(x) for x in grid.origin],
        "cell_size": float(grid.cell_size),
        "dtype": "<f4",
        "order": "x-fastest",
    }
    with open(out_dir / f"{name}.json", "w") as f:
        json.dump(header, f, indent=2)


def load_channel(out_dir, name: str):
    out_dir = Path(out_dir)
    with open(out_dir / f"{name}.json") as f:
        header = json.load(f)
    r = header["resolution"]
    raw = np.fromfile(out_dir / f"{name}.f32", dtype="<f4")
    grid = VoxelGrid(r, np.asarray(header["origin"]), header["cell_size"])
    return raw.reshape((r, r, r), order="F"), grid


def write_pgm_slice(array: np.ndarray, axis: int, index: int, path):
    """Cross-section of a volume as an 8-bit binary PGM image."""
    sl = np.take(array, index, axis=axis).astype(np.float64)
    lo, hi = sl.min(), sl.max()
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = ((sl - lo) * scale).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())
