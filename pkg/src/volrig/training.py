"""Training: target heatmaps, granularity labels, augmentation, the masked
cross-entropy objective and the optimization loop."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T
from .features import compute_local_shape_diameter, featurize
from .mesh import TriangleMesh, detect_bilateral_symmetry, normalize_mesh, sample_surface
from .network import NetworkConfig, StackOutputs, StackedHourglass, save_checkpoint
from .rig import RiggedCharacter, Skeleton
from .voxel import OccupancyMask, VoxelGrid

HEATMAP_SIGMA_VOXELS = 1.0          # "unit variance" in grid units
HEATMAP_TRUNCATE_SIGMAS = 4.0
BONE_SAMPLE_SPACING_VOXELS = 0.5
GRANULARITY_PERCENTILE = 5.0
AUGMENT_SCALE_RANGE = (0.5, 1.5)
AUGMENT_ROT_RANGE_DEG = (30.0, 50.0)
PENETRATION_SAMPLE_FRACTION = 0.02
PENETRATION_RETRIES = 10


@dataclass
class TargetMaps:
    joints: np.ndarray    # (R, R, R) in [0, 1]
    bones: np.ndarray     # (R, R, R) in [0, 1]


@dataclass
class TrainConfig:
    iterations: int = 300
    seed: int = 0
    lr: float = 5e-3
    lr_final: float | None = None     # cosine decay to this value; None = constant
    resolution: int = 32
    num_modules: int = 2
    augment_count: int = 0            # up to 5 variants per character
    heatmap_sigma: float = HEATMAP_SIGMA_VOXELS
    bone_spacing: float = BONE_SAMPLE_SPACING_VOXELS
    sample_count: int = 10000
    threads: int = 1

    def __post_init__(self):
        if self.iterations < 0 or self.resolution < 8:
            raise ValueError("invalid training configuration")
        if self.heatmap_sigma <= 0 or self.bone_spacing <= 0:
            raise ValueError("heatmap variance and bone spacing must be positive")
        if not 0 <= self.augment_count <= 5:
            raise ValueError("augment_count must be in [0, 5]")
        if self.lr <= 0 or (self.lr_final is not None and self.lr_final <= 0):
            raise ValueError("learning rates must be positive")

    def to_dict(self):
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# target maps


def _splat_gaussian_max(out: np.ndarray, grid: VoxelGrid, points: np.ndarray,
                        sigma: float):
    """Voxelwise max of unnormalized peak-1 Gaussians centered at `points`
    (sigma in voxels), truncated at 4 sigma."""
    r = grid.resolution
    rad = HEATMAP_TRUNCATE_SIGMAS * sigma
    for p in np.atleast_2d(points):
        c = grid.point_to_continuous(p)   # integers at cell centers
        lo = np.maximum(0, np.ceil(c - rad).astype(np.int64))
        hi = np.minimum(r - 1, np.floor(c + rad).astype(np.int64))
        if np.any(lo > hi):
            continue
        ax = np.arange(lo[0], hi[0] + 1) - c[0]
        ay = np.arange(lo[1], hi[1] + 1) - c[1]
        az = np.arange(lo[2], hi[2] + 1) - c[2]
        d2 = ax[:, None, None] ** 2 + ay[None, :, None] ** 2 + az[None, None, :] ** 2
        g = np.where(d2 <= rad * rad, np.exp(-d2 / (2.0 * sigma * sigma)), 0.0)
        region = out[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
        np.maximum(region, g, out=region)


def make_target_maps(skeleton: Skeleton, grid: VoxelGrid,
                     sigma: float = HEATMAP_SIGMA_VOXELS,
                     bone_spacing: float = BONE_SAMPLE_SPACING_VOXELS) -> TargetMaps:
    """Joint map: max over per-joint Gaussians. Bone map: max over Gaussians
    at dense samples (every `bone_spacing` voxels) along each bone."""
    r = grid.resolution
    for p in skeleton.positions:
        idx = grid.point_to_cell(p)
        if not grid.contains_cell(idx):
            raise ValueError(f"joint at {p} falls outside the grid")
    joints = np.zeros((r, r, r))
    _splat_gaussian_max(joints, grid, skeleton.positions, sigma)
    bones = np.zeros((r, r, r))
    for a, b in skeleton.edges:
        pa, pb = skeleton.positions[a], skeleton.positions[b]
        length_vox = np.linalg.norm(pb - pa) / grid.cell_size
        n = max(2, int(np.ceil(length_vox / bone_spacing)) + 1)
        ts = np.linspace(0.0, 1.0, n)
        pts = pa[None, :] * (1 - ts)[:, None] + pb[None, :] * ts[:, None]
        _splat_gaussian_max(bones, grid, pts, sigma)
    return TargetMaps(joints, bones)


# ---------------------------------------------------------------------------
# granularity label


def point_segment_distances(points: np.ndarray, segments: np.ndarray):
    """Distance from each point to its nearest segment; segments is (m, 2, 3).
    Returns (distances, nearest segment index)."""
    pts = np.asarray(points, dtype=np.float64)
    best = np.full(len(pts), np.inf)
    best_seg = np.zeros(len(pts), dtype=np.int64)
    for s in range(segments.shape[0]):
        a, b = segments[s, 0], segments[s, 1]
        ab = b - a
        denom = float(ab @ ab)
        if denom > 0:
            t = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
            proj = a + t[:, None] * ab
        else:
            proj = np.broadcast_to(a, pts.shape)
        d = np.linalg.norm(pts - proj, axis=1)
        upd = d < best
        best[upd] = d[upd]
        best_seg[upd] = s
    return best, best_seg


def compute_granularity_label(character: RiggedCharacter, sample_count: int = 10000,
                              seed: int = 0) -> float:
    """Fifth percentile (nearest-rank) of the local shape diameter over the
    surface samples, clamped to [0, 1]."""
    samples = sample_surface(character.mesh, sample_count, seed=seed)
    lsd, _ = compute_local_shape_diameter(character.mesh, samples)
    vals = np.sort(lsd)
    if vals.size == 0:
        raise ValueError("no surface samples")
    # nearest-rank percentile
    rank = max(1, int(np.ceil(GRANULARITY_PERCENTILE / 100.0 * vals.size)))
    return float(np.clip(vals[rank - 1], 0.0, 1.0))


# ---------------------------------------------------------------------------
# augmentation


def _rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def _symmetric_pairs(skeleton: Skeleton, plane) -> dict:
    """Map joint index -> mirrored partner for joints paired across the plane."""
    pairs = {}
    if plane is None:
        return pairs
    mirrored = plane.reflect(skeleton.positions)
    tol = 0.03
    for i in range(skeleton.n_joints):
        if i in pairs:
            continue
        d = np.linalg.norm(skeleton.positions - mirrored[i], axis=1)
        j = int(np.argmin(d))
        if j != i and d[j] < tol and j not in pairs:
            pairs[i] = j
            pairs[j] = i
    return pairs


def _subtree_rotation(skel: Skeleton, positions, verts, pivot, rot):
    """Rigidly rotate the subtree below `pivot`; mesh vertices blend between
    rotated and rest by inverse-square distance to the moved bones vs the
    rest of the skeleton (rest-pose weights)."""
    sub = [s for s in skel.subtree(pivot) if s != pivot]
    pv = positions[pivot]
    new_pos = positions.copy()
    for s in sub:
        new_pos[s] = pv + rot @ (positions[s] - pv)
    moved_set = set(sub)
    segs = skel.bone_segments()
    moved_edges = [e for e, (a, b) in enumerate(skel.edges) if b in moved_set]
    rest_edges = [e for e in range(len(skel.edges)) if e not in moved_edges]
    if not moved_edges:
        return new_pos, verts
    d_moved, _ = point_segment_distances(verts, segs[moved_edges])
    if rest_edges:
        d_rest, _ = point_segment_distances(verts, segs[rest_edges])
    else:
        d_rest = np.full(len(verts), np.inf)
    eps = 1e-6
    inv_m = 1.0 / (d_moved + eps) ** 2
    inv_r = np.where(np.isfinite(d_rest), 1.0 / (d_rest + eps) ** 2, 0.0)
    w = inv_m / (inv_m + inv_r)
    rotated = pv + (verts - pv) @ rot.T
    return new_pos, w[:, None] * rotated + (1 - w)[:, None] * verts


def _pose_variant(character: RiggedCharacter, rng: np.random.Generator,
                  pairs: dict):
    """Rotate a random non-root subtree (mirrored twin included for
    symmetric joint pairs)."""
    skel = character.skeleton
    non_root = [i for i in range(skel.n_joints) if i != skel.root]
    pivot = int(rng.choice(non_root))
    angle = np.deg2rad(rng.uniform(*AUGMENT_ROT_RANGE_DEG))
    if rng.random() < 0.5:
        angle = -angle
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    rot = _rotation_matrix(axis, angle)
    new_pos, new_verts = _subtree_rotation(skel, skel.positions,
                                           character.mesh.vertices, pivot, rot)
    partner = pairs.get(pivot)
    if partner is not None and partner not in set(skel.subtree(pivot)):
        m_rot = _rotation_matrix(axis * np.array([-1.0, 1.0, 1.0]), -angle)
        new_pos, new_verts = _subtree_rotation(skel, new_pos, new_verts,
                                               partner, m_rot)
    mesh = TriangleMesh(new_verts, character.mesh.triangles.copy())
    skeleton = Skeleton(list(skel.names), new_pos, list(skel.edges), skel.root)
    return RiggedCharacter(mesh, skeleton, name=character.name)


def _scale_variant(character: RiggedCharacter, rng: np.random.Generator):
    scale = rng.uniform(AUGMENT_SCALE_RANGE[0], AUGMENT_SCALE_RANGE[1], size=3)
    mesh = TriangleMesh(character.mesh.vertices * scale, character.mesh.triangles.copy())
    skel = character.skeleton.transformed(lambda p: p * scale)
    return RiggedCharacter(mesh, skel, name=character.name)


def _penetration_fraction(character: RiggedCharacter, resolution: int = 32) -> float:
    """Fraction of surface samples whose outward offset lands strictly
    inside the shape (self-penetration proxy)."""
    from .voxel import make_grid, voxelize
    mesh = character.mesh
    try:
        grid = make_grid(mesh, resolution)
        surface, mask = voxelize(mesh, grid)
    except ValueError:
        return 1.0
    samples = sample_surface(mesh, 2000, seed=7)
    probe = samples.positions + 1.5 * grid.cell_size * samples.normals
    cells = grid.point_to_cell(probe)
    np.clip(cells, 0, grid.resolution - 1, out=cells)
    interior = mask.data & ~surface
    hits = interior[cells[:, 0], cells[:, 1], cells[:, 2]]
    return float(hits.mean())


def augment(character: RiggedCharacter, seed: int, count: int):
    """Up to `count` (<= 5) re-normalized scale/pose variants; variants with
    too much self-penetration are rejected and retried."""
    if count > 5:
        raise ValueError("at most 5 variants per character")
    rng = np.random.Generator(np.random.PCG64(seed))
    plane = detect_bilateral_symmetry(character.mesh)
    pairs = _symmetric_pairs(character.skeleton, plane)
    # meshes assembled from overlapping parts have interior surface even at
    # rest; only reject penetration a variant introduces on top of that
    budget = _penetration_fraction(character) + PENETRATION_SAMPLE_FRACTION
    out = []
    for _ in range(count):
        for _attempt in range(PENETRATION_RETRIES):
            if rng.random() < 0.5:
                variant = _scale_variant(character, rng)
            else:
                variant = _pose_variant(character, rng, pairs)
            if _penetration_fraction(variant) <= budget:
                mesh, xform = normalize_mesh(variant.mesh)
                skel = variant.skeleton.transformed(xform.apply)
                out.append(RiggedCharacter(mesh, skel, name=variant.name))
                break
    return out


# ---------------------------------------------------------------------------
# loss


def masked_loss(outputs: StackOutputs, targets: TargetMaps, mask: OccupancyMask):
    """Eq.-style masked soft cross-entropy, summed over all modules."""
    n_s = mask.count
    m = mask.data
    total = None
    for pj, pb in zip(outputs.joint_maps, outputs.bone_maps):
        lj = T.masked_bce(pj, targets.joints[..., None], m[..., None], n_s)
        lb = T.masked_bce(pb, targets.bones[..., None], m[..., None], n_s)
        part = T.add(lj, lb)
        total = part if total is None else T.add(total, part)
    return total


# ---------------------------------------------------------------------------
# feature cache


def _character_key(character: RiggedCharacter, resolution: int, sample_count: int) -> str:
    h = hashlib.sha256()
    h.update(character.mesh.vertices.tobytes())
    h.update(character.mesh.triangles.tobytes())
    h.update(f"{resolution}:{sample_count}".encode())
    return h.hexdigest()[:24]


def cache_dir():
    return Path(os.environ.get("VOLRIG_CACHE", Path.home() / ".cache" / "volrig"))


def featurize_cached(character: RiggedCharacter, resolution: int,
                     sample_count: int = 10000):
    """featurize() with an on-disk cache keyed by mesh content + grid config."""
    key = _character_key(character, resolution, sample_count)
    path = cache_dir() / f"{key}.npz"
    if path.exists():
        z = np.load(path)
        grid = VoxelGrid(int(z["resolution"]), z["origin"], float(z["cell_size"]))
        from .features import ShapeChannels
        channels = ShapeChannels(grid, z["data"])
        mask = OccupancyMask(grid, z["mask"])
        return channels, mask, z["surface"].astype(bool)
    channels, mask, surface = featurize(character.mesh, resolution,
                                        n_samples=sample_count)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    np.savez_compressed(tmp, data=channels.data, mask=mask.data, surface=surface,
                        resolution=channels.grid.resolution,
                        origin=channels.grid.origin,
                        cell_size=channels.grid.cell_size)
    tmp.replace(path)
    return channels, mask, surface


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    losses: list
    net: StackedHourglass
    granularities: list = field(default_factory=list)


def prepare_example(character: RiggedCharacter, config: TrainConfig):
    channels, mask, surface = featurize_cached(character, config.resolution,
                                               config.sample_count)
    targets = make_target_maps(character.skeleton, channels.grid,
                               sigma=config.heatmap_sigma,
                               bone_spacing=config.bone_spacing)
    gamma = compute_granularity_label(character, sample_count=config.sample_count)
    return channels, mask, targets, gamma


def train(dataset, config: TrainConfig, log_path=None, progress=None) -> TrainResult:
    """Adam training over the dataset, deterministic given the seed.

    `dataset` is a list of RiggedCharacter.  Returns the trained network
    and the per-iteration loss log.
    """
    if not dataset:
        raise ValueError("empty dataset")
    characters = list(dataset)
    if config.augment_count:
        for ch in list(characters):
            characters.extend(augment(ch, config.seed, config.augment_count))

    if config.threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=config.threads) as ex:
            examples = list(ex.map(lambda c: prepare_example(c, config), characters))
    else:
        examples = [prepare_example(c, config) for c in characters]

    net_config = NetworkConfig(resolution=config.resolution,
                               num_modules=config.num_modules)
    net = StackedHourglass(net_config, seed=config.seed)
    net.reset_rng(config.seed + 1)
    params = net.parameters()
    state = T.AdamState(lr=config.lr)
    rng = np.random.Generator(np.random.PCG64(config.seed + 2))

    losses = []
    order = []
    log_f = open(log_path, "w") if log_path else None
    try:
        for it in range(config.iterations):
            if config.lr_final is not None and config.iterations > 1:
                frac = it / (config.iterations - 1)
                state.lr = config.lr_final + 0.5 * (config.lr - config.lr_final) * (
                    1.0 + np.cos(np.pi * frac))
            if not order:
                order = list(rng.permutation(len(examples)))
            idx = order.pop(0)
            channels, mask, targets, gamma = examples[idx]
            outputs = net.forward(channels.data, gamma, train=True)
            loss = masked_loss(outputs, targets, mask)
            value = loss.item()
            if not np.isfinite(value):
                raise RuntimeError(f"non-finite loss at iteration {it}")
            T.zero_grad(params)
            loss.backward()
            T.adam_step(params, state)
            losses.append(value)
            if log_f:
                log_f.write(json.dumps({"iteration": it, "loss": value,
                                        "example": int(idx)}) + "\n")
            if progress and (it % 10 == 0 or it == config.iterations - 1):
                progress(it, value)
    finally:
        if log_f:
            log_f.close()
    return TrainResult(losses, net, [g for _, _, _, g in examples])
