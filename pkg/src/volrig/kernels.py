"""Public kernel entry points with backend dispatch."""

from __future__ import annotations

from . import _kernels_loops as _loops
from .backend import USE_NUMBA, maybe_njit

# loop kernels, JIT-compiled under the numba backend
_axis_test = maybe_njit(_loops._axis_test)
tri_box_overlap = maybe_njit(_loops.tri_box_overlap)
_closest_on_segment = maybe_njit(_loops._closest_on_segment)
_closest_on_triangle = maybe_njit(_loops._closest_on_triangle)
_heap_push = maybe_njit(_loops._heap_push)
_heap_pop = maybe_njit(_loops._heap_pop)
_eikonal_update = maybe_njit(_loops._eikonal_update)

if USE_NUMBA:
    # rebind helpers so the jitted outer kernels call jitted inner ones
    _loops._axis_test = _axis_test
    _loops.tri_box_overlap = tri_box_overlap
    _loops._closest_on_segment = _closest_on_segment
    _loops._closest_on_triangle = _closest_on_triangle
    _loops._heap_push = _heap_push
    _loops._heap_pop = _heap_pop
    _loops._eikonal_update = _eikonal_update

voxelize_surface = maybe_njit(_loops.voxelize_surface)
flood_exterior = maybe_njit(_loops.flood_exterior)
fast_march = maybe_njit(_loops.fast_march)
segment_cells = maybe_njit(_loops.segment_cells)

if USE_NUMBA:
    closest_point_mesh = maybe_njit(_loops.closest_point_mesh)
    ray_hits_first = maybe_njit(_loops.ray_hits_first)
    kde_accumulate = maybe_njit(_loops.kde_accumulate)
else:
    from ._kernels_numpy import closest_point_mesh, ray_hits_first, kde_accumulate  # noqa: F401
