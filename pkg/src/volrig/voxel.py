"""Regular voxel grid, surface/interior voxelization and the occupancy mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .mesh import TriangleMesh

GRID_PADDING_CELLS = 2


@dataclass
class VoxelGrid:
    resolution: int
    origin: np.ndarray     # (3,) min corner of the grid
    cell_size: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if self.resolution < 8:
            raise ValueError("resolution must be >= 8")

    def cell_center(self, idx):
        return self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.cell_size

    def cell_centers(self):
        """(R, R, R, 3) array of cell-center positions."""
        r = self.resolution
        ax = self.origin[0] + (np.arange(r) + 0.5) * self.cell_size
        ay = self.origin[1] + (np.arange(r) + 0.5) * self.cell_size
        az = self.origin[2] + (np.arange(r) + 0.5) * self.cell_size
        out = np.empty((r, r, r, 3))
        out[..., 0] = ax[:, None, None]
        out[..., 1] = ay[None, :, None]
        out[..., 2] = az[None, None, :]
        return out

    def point_to_cell(self, p):
        return np.floor((np.asarray(p) - self.origin) / self.cell_size).astype(np.int64)

    def point_to_continuous(self, p):
        """Continuous cell coordinates where integers sit at cell centers."""
        return (np.asarray(p) - self.origin) / self.cell_size - 0.5

    def contains_cell(self, idx):
        idx = np.asarray(idx)
        return bool(np.all(idx >= 0) and np.all(idx < self.resolution))

    def same_as(self, other) -> bool:
        return (self.resolution == other.resolution
                and np.allclose(self.origin, other.origin)
                and np.isclose(self.cell_size, other.cell_size))


@dataclass
class OccupancyMask:
    grid: VoxelGrid
    data: np.ndarray        # (R, R, R) bool: surface or interior

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def centroid(self):
        idx = np.argwhere(self.data)
        centers = self.grid.origin + (idx + 0.5) * self.grid.cell_size
        return centers.mean(axis=0)


def make_grid(mesh: TriangleMesh, resolution: int) -> VoxelGrid:
    """Bounding cube of the mesh with 2 cells of padding on every side."""
    lo, hi = mesh.bounds()
    extent = float((hi - lo).max())
    if extent <= 0:
        raise ValueError("degenerate mesh: zero extent")
    cell = extent / (resolution - 2 * GRID_PADDING_CELLS)
    center = 0.5 * (lo + hi)
    origin = center - 0.5 * resolution * cell
    return VoxelGrid(resolution, origin, cell)


def voxelize(mesh: TriangleMesh, grid: VoxelGrid):
    """Classify grid cells into surface / interior / exterior.

    Surface cells are those whose cube intersects a triangle (conservative
    SAT test); exterior is a 6-connected flood fill from the grid boundary
    through non-surface cells; interior is the complement.  Returns
    (surface bool array, OccupancyMask).
    """
    surf = kernels.voxelize_surface(mesh.vertices, mesh.triangles,
                                    grid.origin, grid.cell_size, grid.resolution)
    ext = kernels.flood_exterior(surf)
    surface = surf.astype(bool)
    exterior = ext.astype(bool)
    mask = OccupancyMask(grid, surface | ~(surface | exterior) )
    return surface, mask


def classify(surface: np.ndarray, mask: OccupancyMask):
    """(surface, interior, exterior) boolean partition of the grid."""
    interior = mask.data & ~surface
    exterior = ~mask.data
    return surface, interior, exterior
