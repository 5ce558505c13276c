"""Synthetic rigged characters built from unions of axis-aligned boxes:
a biped, a quadruped and a star.  Each generator returns a triangle mesh
with an embedded skeleton whose joints sit well inside the solid and well
apart from each other, so a coarse voxelization still separates them."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .mesh import TriangleMesh, normalize_mesh, save_mesh
from .rig import RiggedCharacter, Skeleton, save_rig

KINDS = ("biped", "quadruped", "star")

# 12 triangles of a unit box, outward-facing winding, as corner indices
_BOX_TRIS = np.array([
    (0, 2, 1), (0, 3, 2),   # z = lo
    (4, 5, 6), (4, 6, 7),   # z = hi
    (0, 1, 5), (0, 5, 4),   # y = lo
    (3, 6, 2), (3, 7, 6),   # y = hi
    (0, 4, 7), (0, 7, 3),   # x = lo
    (1, 2, 6), (1, 6, 5),   # x = hi
], dtype=np.int64)


def _box(lo, hi):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    x = (lo[0], hi[0])
    y = (lo[1], hi[1])
    z = (lo[2], hi[2])
    corners = np.array([
        (x[0], y[0], z[0]), (x[1], y[0], z[0]), (x[1], y[1], z[0]), (x[0], y[1], z[0]),
        (x[0], y[0], z[1]), (x[1], y[0], z[1]), (x[1], y[1], z[1]), (x[0], y[1], z[1]),
    ])
    return corners, _BOX_TRIS


def _union(boxes):
    verts = []
    tris = []
    offset = 0
    for lo, hi in boxes:
        v, t = _box(lo, hi)
        verts.append(v)
        tris.append(t + offset)
        offset += len(v)
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


def _mirror_x(boxes):
    out = list(boxes)
    for lo, hi in boxes:
        out.append(((-hi[0], lo[1], lo[2]), (-lo[0], hi[1], hi[2])))
    return out


def _biped():
    right = [
        (( 0.09, 0.58, -0.11), ( 0.40, 0.70,  0.11)),   # arm
        (( 0.06, 0.00, -0.11), ( 0.20, 0.42,  0.11)),   # leg
    ]
    boxes = _mirror_x(right) + [
        ((-0.13, 0.40, -0.13), ( 0.13, 0.75,  0.13)),   # torso
        ((-0.10, 0.73, -0.10), ( 0.10, 0.95,  0.10)),   # head
    ]
    names = ["pelvis", "chest", "head",
             "shoulder_r", "hand_r", "shoulder_l", "hand_l",
             "hip_r", "foot_r", "hip_l", "foot_l"]
    pos = np.array([
        (0.00, 0.45, 0.0), (0.00, 0.68, 0.0), (0.00, 0.85, 0.0),
        ( 0.14, 0.64, 0.0), ( 0.36, 0.64, 0.0),
        (-0.14, 0.64, 0.0), (-0.36, 0.64, 0.0),
        ( 0.14, 0.36, 0.0), ( 0.14, 0.05, 0.0),
        (-0.14, 0.36, 0.0), (-0.14, 0.05, 0.0),
    ])
    edges = [(0, 1), (1, 2), (1, 3), (3, 4), (1, 5), (5, 6),
             (0, 7), (7, 8), (0, 9), (9, 10)]
    return boxes, Skeleton(names, pos, edges, 0)


def _quadruped():
    right = [
        (( 0.02, 0.00,  0.19), ( 0.15, 0.32,  0.33)),   # front leg
        (( 0.02, 0.00, -0.33), ( 0.15, 0.32, -0.19)),   # hind leg
    ]
    boxes = _mirror_x(right) + [
        ((-0.14, 0.30, -0.35), ( 0.14, 0.55,  0.35)),   # body
        ((-0.11, 0.40,  0.33), ( 0.11, 0.62,  0.55)),   # head
    ]
    names = ["spine_mid", "spine_front", "spine_rear", "head",
             "leg_fr", "foot_fr", "leg_fl", "foot_fl",
             "leg_hr", "foot_hr", "leg_hl", "foot_hl"]
    pos = np.array([
        (0.00, 0.42,  0.00), (0.00, 0.42,  0.25), (0.00, 0.42, -0.25),
        (0.00, 0.50,  0.45),
        ( 0.08, 0.26,  0.26), ( 0.08, 0.05,  0.26),
        (-0.08, 0.26,  0.26), (-0.08, 0.05,  0.26),
        ( 0.08, 0.26, -0.26), ( 0.08, 0.05, -0.26),
        (-0.08, 0.26, -0.26), (-0.08, 0.05, -0.26),
    ])
    edges = [(0, 1), (0, 2), (1, 3),
             (1, 4), (4, 5), (1, 6), (6, 7),
             (2, 8), (8, 9), (2, 10), (10, 11)]
    return boxes, Skeleton(names, pos, edges, 0)


def _star():
    # arms are deliberately thin (cross-section well below any limb or
    # torso of the other synthetic characters) so the three kinds stay
    # locally distinguishable in a shared feature space
    boxes = [
        ((-0.13, -0.13, -0.13), (0.13, 0.13, 0.13)),    # hub
        (( 0.11, -0.07, -0.07), (0.45, 0.07, 0.07)),    # +x arm
        ((-0.45, -0.07, -0.07), (-0.11, 0.07, 0.07)),   # -x arm
        ((-0.07,  0.11, -0.07), (0.07, 0.45, 0.07)),    # +y arm
        ((-0.07, -0.07,  0.11), (0.07, 0.07, 0.45)),    # +z arm
    ]
    names = ["hub", "tip_px", "tip_nx", "tip_py", "tip_pz"]
    pos = np.array([
        (0.00, 0.0, 0.0),
        ( 0.38, 0.0, 0.0), (-0.38, 0.0, 0.0),
        (0.00, 0.38, 0.0), (0.00, 0.0, 0.38),
    ])
    edges = [(0, 1), (0, 2), (0, 3), (0, 4)]
    return boxes, Skeleton(names, pos, edges, 0)


_BUILDERS = {"biped": _biped, "quadruped": _quadruped, "star": _star}


def make_character(kind: str, seed: int = 0) -> RiggedCharacter:
    """Build a normalized rigged character.  The seed applies a mild
    per-axis scale jitter (symmetry-preserving) so different seeds give
    geometrically distinct shapes."""
    if kind not in _BUILDERS:
        raise ValueError(f"unknown character kind {kind!r}; pick one of {KINDS}")
    boxes, skel = _BUILDERS[kind]()
    rng = np.random.Generator(np.random.PCG64(seed))
    jitter = rng.uniform(0.9, 1.1, size=3)
    boxes = [(np.asarray(lo) * jitter, np.asarray(hi) * jitter) for lo, hi in boxes]
    mesh = _union(boxes)
    skel = skel.transformed(lambda p: p * jitter)
    mesh, xform = normalize_mesh(mesh)
    skel = skel.transformed(xform.apply)
    return RiggedCharacter(mesh, skel, name=f"{kind}_{seed}")


def write_character(out_dir, kind: str, seed: int = 0) -> Path:
    """Write `<kind>_<seed>.obj` and `<kind>_<seed>.rig` into out_dir;
    returns the rig path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    char = make_character(kind, seed)
    mesh_name = f"{char.name}.obj"
    save_mesh(char.mesh, out_dir / mesh_name)
    rig_path = out_dir / f"{char.name}.rig"
    save_rig(char.skeleton, rig_path, mesh_path=mesh_name)
    return rig_path
