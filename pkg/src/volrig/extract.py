"""From probability volumes to an animation skeleton: map symmetrization,
soft non-maximum suppression, bone-probability edge costs along voxel
traversals, Prim's minimum spanning tree and root selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .mesh import SymmetryPlane, TriangleMesh, detect_bilateral_symmetry, load_mesh, normalize_mesh
from .network import DEFAULT_GRANULARITY, StackedHourglass, load_checkpoint
from .rig import Skeleton
from .voxel import OccupancyMask, VoxelGrid

NMS_SIGMA = 4.5
NMS_THRESHOLD = 0.013
NMS_HARD_RADIUS = 4.0
NMS_REFERENCE_RESOLUTION = 88
EXTERIOR_EDGE_PENALTY = 1e5
PROB_FLOOR = 1e-7


def nms_config_for(resolution: int) -> "NMSConfig":
    """Default NMS tuned in voxel units at the reference grid resolution;
    the suppression radius scales with the grid so it stays constant in
    world units."""
    return NMSConfig(sigma=NMS_SIGMA * resolution / NMS_REFERENCE_RESOLUTION)


@dataclass
class NMSConfig:
    sigma: float = NMS_SIGMA
    threshold: float = NMS_THRESHOLD
    # voxels fully suppressed around a picked peak; matches the support
    # radius of the training heatmaps so one blob yields one joint even
    # when its center falls between cell centers
    hard_radius: float = NMS_HARD_RADIUS

    def __post_init__(self):
        if self.sigma <= 0 or not 0.0 < self.threshold < 1.0:
            raise ValueError("invalid NMS configuration")
        if self.hard_radius < 0:
            raise ValueError("invalid NMS configuration")


@dataclass
class JointCandidate:
    voxel: tuple
    position: np.ndarray
    probability: float     # map value at selection time


def trilinear_sample(volume: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample `volume` at continuous cell coordinates (integers sit at cell
    centers); coordinates are clamped to the grid."""
    r0, r1, r2 = volume.shape
    c = np.asarray(coords, dtype=np.float64)
    c0 = np.clip(c[..., 0], 0, r0 - 1)
    c1 = np.clip(c[..., 1], 0, r1 - 1)
    c2 = np.clip(c[..., 2], 0, r2 - 1)
    i0 = np.clip(np.floor(c0).astype(np.int64), 0, r0 - 2) if r0 > 1 else np.zeros_like(c0, dtype=np.int64)
    i1 = np.clip(np.floor(c1).astype(np.int64), 0, r1 - 2) if r1 > 1 else np.zeros_like(c1, dtype=np.int64)
    i2 = np.clip(np.floor(c2).astype(np.int64), 0, r2 - 2) if r2 > 1 else np.zeros_like(c2, dtype=np.int64)
    f0 = c0 - i0
    f1 = c1 - i1
    f2 = c2 - i2
    out = np.zeros(c.shape[:-1])
    for d0 in (0, 1):
        w0 = np.where(d0, f0, 1 - f0)
        for d1 in (0, 1):
            w1 = np.where(d1, f1, 1 - f1)
            for d2 in (0, 1):
                w2 = np.where(d2, f2, 1 - f2)
                out += w0 * w1 * w2 * volume[i0 + d0, i1 + d1, i2 + d2]
    return out


def symmetrize_map(prob: np.ndarray, grid: VoxelGrid, plane: SymmetryPlane) -> np.ndarray:
    """Average the map with its reflection across the plane (trilinear
    sampling at reflected cell centers)."""
    centers = grid.cell_centers()
    reflected = plane.reflect(centers.reshape(-1, 3)).reshape(centers.shape)
    coords = (reflected - grid.origin) / grid.cell_size - 0.5
    mirrored = trilinear_sample(prob, coords)
    return 0.5 * (prob + mirrored)


def soft_nms(prob: np.ndarray, mask: OccupancyMask, cfg: NMSConfig | None = None):
    """Iterative peak picking with Gaussian decay of the neighborhood.

    Only voxels that are local maxima of the masked input map (26-cell
    neighborhood, ties allowed) are eligible: a wide probability blob has
    a single ridge of maxima, so its skirt can never be emitted as extra
    joints no matter how far it spreads.  Repeatedly picks the
    highest-probability eligible voxel, emits it as a joint, zeroes
    everything within cfg.hard_radius voxels and subtracts a Gaussian
    (peak = picked value, std = cfg.sigma voxels, truncated at 3 sigma)
    beyond it, until no eligible voxel exceeds cfg.threshold.
    Lexicographic voxel order breaks ties.
    """
    from scipy.ndimage import maximum_filter

    cfg = cfg or NMSConfig()
    grid = mask.grid
    work = np.array(prob, dtype=np.float64)
    work[~mask.data] = -np.inf
    local_max = work >= maximum_filter(work, size=3, mode="constant", cval=-np.inf)
    work[~local_max] = -np.inf
    r = grid.resolution
    rad = int(np.ceil(max(3.0 * cfg.sigma, cfg.hard_radius)))
    joints = []
    while True:
        flat = np.argmax(work)   # first occurrence = lexicographic tie-break
        i, j, k = np.unravel_index(flat, work.shape)
        peak = work[i, j, k]
        if not np.isfinite(peak) or peak < cfg.threshold:
            break
        joints.append(JointCandidate((int(i), int(j), int(k)),
                                     grid.cell_center((i, j, k)), float(peak)))
        lo = np.maximum(0, np.array([i, j, k]) - rad)
        hi = np.minimum(r - 1, np.array([i, j, k]) + rad)
        ax = np.arange(lo[0], hi[0] + 1) - i
        ay = np.arange(lo[1], hi[1] + 1) - j
        az = np.arange(lo[2], hi[2] + 1) - k
        d2 = ax[:, None, None] ** 2 + ay[None, :, None] ** 2 + az[None, None, :] ** 2
        decay = peak * np.exp(-d2 / (2.0 * cfg.sigma ** 2))
        decay[d2 > (3.0 * cfg.sigma) ** 2] = 0.0
        decay[d2 <= cfg.hard_radius ** 2] = np.inf   # full suppression core
        region = work[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
        np.maximum(region - decay, np.where(np.isfinite(region), 0.0, -np.inf),
                   out=region)
    return joints


def edge_cost(prob_bones: np.ndarray, mask: OccupancyMask,
              a: JointCandidate, b: JointCandidate) -> float:
    """Sum of -log bone probability over the voxels traversed by the
    segment between the two joint voxels; voxels outside the shape
    contribute a large constant penalty."""
    va = np.asarray(a.voxel, dtype=np.int64)
    vb = np.asarray(b.voxel, dtype=np.int64)
    if tuple(va) == tuple(vb):
        raise ValueError("edge endpoints coincide")
    if tuple(va) > tuple(vb):
        va, vb = vb, va   # canonical order: cost is direction-independent
    cells = kernels.segment_cells(va, vb)
    total = 0.0
    for c in cells:
        i, j, k = c
        if not mask.data[i, j, k]:
            total += EXTERIOR_EDGE_PENALTY
        else:
            p = min(max(float(prob_bones[i, j, k]), PROB_FLOOR), 1.0)
            total += -np.log(p)
    return total


def _prim_mst(weights: np.ndarray):
    """Prim's algorithm on a dense weight matrix; ties break on the smaller
    (i, j) pair.  Returns the edge list."""
    n = weights.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    edges = []
    for _ in range(n - 1):
        best = (np.inf, n, n)
        for i in range(n):
            if not in_tree[i]:
                continue
            for j in range(n):
                if in_tree[j]:
                    continue
                a, b = (i, j) if i < j else (j, i)
                cand = (weights[i, j], a, b)
                if cand < best:
                    best = cand
        _, a, b = best
        new = b if in_tree[a] else a
        in_tree[new] = True
        edges.append((best[1], best[2]))
    return edges


def build_skeleton(joints, prob_bones: np.ndarray, mask: OccupancyMask) -> Skeleton:
    """Complete graph over the joint candidates with bone-probability edge
    costs, Prim MST, root at the joint nearest the occupied-voxel
    centroid, edges oriented away from the root."""
    if not joints:
        raise ValueError("no joints to connect")
    n = len(joints)
    names = [f"joint_{i}" for i in range(n)]
    positions = np.stack([j.position for j in joints])
    if n == 1:
        return Skeleton(names, positions, [], 0)
    weights = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            w = edge_cost(prob_bones, mask, joints[i], joints[j])
            weights[i, j] = weights[j, i] = w
    mst = _prim_mst(weights)
    centroid = mask.centroid()
    d = np.linalg.norm(positions - centroid, axis=1)
    root = int(np.argmin(d))   # argmin takes the lowest index on ties
    # orient edges away from the root
    adj = {i: [] for i in range(n)}
    for a, b in mst:
        adj[a].append(b)
        adj[b].append(a)
    edges = []
    seen = {root}
    queue = [root]
    while queue:
        cur = queue.pop(0)
        for nxt in adj[cur]:
            if nxt not in seen:
                seen.add(nxt)
                edges.append((cur, nxt))
                queue.append(nxt)
    return Skeleton(names, positions, edges, root)


@dataclass
class PredictResult:
    skeleton: Skeleton
    joints: list                  # JointCandidate
    joint_map: np.ndarray
    bone_map: np.ndarray
    grid: VoxelGrid
    mask: OccupancyMask
    symmetry: SymmetryPlane | None


def predict_from_maps(joint_map: np.ndarray, bone_map: np.ndarray,
                      mask: OccupancyMask, symmetry: SymmetryPlane | None,
                      nms: NMSConfig | None = None) -> PredictResult:
    grid = mask.grid
    if nms is None:
        nms = nms_config_for(grid.resolution)
    if symmetry is not None:
        joint_map = symmetrize_map(joint_map, grid, symmetry)
        bone_map = symmetrize_map(bone_map, grid, symmetry)
    joints = soft_nms(joint_map, mask, nms)
    if not joints:
        raise ValueError("no joints above the probability threshold")
    skeleton = build_skeleton(joints, bone_map, mask)
    return PredictResult(skeleton, joints, joint_map, bone_map, grid, mask, symmetry)


def predict(mesh: TriangleMesh, net: StackedHourglass,
            granularity: float = DEFAULT_GRANULARITY,
            nms: NMSConfig | None = None,
            sample_count: int = 10000) -> PredictResult:
    """Full inference pipeline on a normalized mesh: featurize, run the
    stack in eval mode, take the last module's maps, symmetrize when the
    shape is bilaterally symmetric, then soft-NMS + MST."""
    from .training import featurize_cached
    from .rig import RiggedCharacter
    channels, mask, _surface = featurize_cached(
        RiggedCharacter(mesh, _DUMMY_SKELETON, name="predict"),
        net.config.resolution, sample_count)
    outputs = net.forward(channels.data, granularity, train=False)
    joint_map = outputs.joint_maps[-1].data[..., 0].astype(np.float64)
    bone_map = outputs.bone_maps[-1].data[..., 0].astype(np.float64)
    symmetry = detect_bilateral_symmetry(mesh)
    return predict_from_maps(joint_map, bone_map, mask, symmetry, nms)


def predict_from_path(mesh_path, checkpoint_stem,
                      granularity: float = DEFAULT_GRANULARITY,
                      nms: NMSConfig | None = None) -> PredictResult:
    mesh, _ = normalize_mesh(load_mesh(mesh_path))
    net = load_checkpoint(checkpoint_stem)
    return predict(mesh, net, granularity, nms)


# placeholder skeleton for cache keying of plain meshes (cache key only
# involves the mesh, but featurize_cached takes a RiggedCharacter)
_DUMMY_SKELETON = Skeleton(["a", "b"], np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
                           [(0, 1)], 0)
