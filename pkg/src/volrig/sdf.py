"""Signed distance channel: exact distances in a band around the surface,
fast marching of the eikonal equation everywhere else."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import kernels
from .mesh import TriangleMesh
from .voxel import OccupancyMask, VoxelGrid


def compute_sdf(mesh: TriangleMesh, grid: VoxelGrid, surface: np.ndarray,
                mask: OccupancyMask) -> np.ndarray:
    """SDF sampled at cell centers, negative inside the shape.

    The surface band (surface cells plus their 1-ring) is initialized with
    exact point-to-mesh distances; remaining cells are solved by
    first-order upwind fast marching.  Signs come from the flood-fill
    classification, except in the ambiguous surface band where the nearest
    face normal decides.
    """
    r = grid.resolution
    band = ndimage.binary_dilation(surface, structure=ndimage.generate_binary_structure(3, 1))
    idx = np.argwhere(band)
    centers = grid.origin + (idx + 0.5) * grid.cell_size
    dist_band, sign_dot = kernels.closest_point_mesh(
        np.ascontiguousarray(centers), mesh.vertices, mesh.triangles)

    dist = np.full((r, r, r), np.inf)
    dist[band] = dist_band
    kernels.fast_march(dist, band.astype(np.uint8), grid.cell_size)

    interior = mask.data & ~surface
    sign = np.ones((r, r, r))
    sign[interior] = -1.0
    # surface cells: geometric side test via the nearest face normal
    surf_in_band = surface[band]
    band_sign = np.where(sign_dot < 0, -1.0, 1.0)
    flat_sign = sign[band]
    flat_sign[surf_in_band] = band_sign[surf_in_band]
    sign[band] = flat_sign
    # band cells that are not surface keep their flood-fill sign, but the
    # dilated ring may include interior cells: those were already -1
    out = sign * dist
    return out
