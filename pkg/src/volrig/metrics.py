"""Similarity measures between predicted and reference skeletons:
joint-to-joint and joint-to-bone Chamfer distances and tolerance-based
matching rates, plus dataset-level reporting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import TriangleMesh, batch_ray_mesh
from .rig import Skeleton

MATCH_TOLERANCE = 0.5
DIAMETER_RAY_COUNT = 8


def _nearest_joint_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each point in a, distance to the nearest point in b."""
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    return d.min(axis=1)


def cd_joint(pred: Skeleton, ref: Skeleton, longest_axis: float) -> float:
    """Symmetrized mean nearest-neighbor distance between the two joint
    sets, as a fraction of the longest shape axis."""
    if pred.n_joints == 0 or ref.n_joints == 0:
        raise ValueError("empty skeleton")
    fwd = _nearest_joint_distances(pred.positions, ref.positions).mean()
    bwd = _nearest_joint_distances(ref.positions, pred.positions).mean()
    return 0.5 * (fwd + bwd) / longest_axis


def point_to_segments(points: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """For each point, distance to the nearest of the (m, 2, 3) segments."""
    a = segments[:, 0]
    ab = segments[:, 1] - a
    denom = np.einsum("md,md->m", ab, ab)
    ap = points[:, None, :] - a[None, :, :]            # (n, m, 3)
    t = np.einsum("nmd,md->nm", ap, ab) / np.where(denom > 0, denom, 1.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a[None, :, :] + t[..., None] * ab[None, :, :]
    d = np.linalg.norm(points[:, None, :] - closest, axis=2)
    return d.min(axis=1)


def cd_joint2bone(pred: Skeleton, ref: Skeleton, longest_axis: float) -> float:
    """Symmetrized mean distance from each skeleton's joints to the other
    skeleton's nearest bone segment, as a fraction of the longest axis."""
    if not pred.edges or not ref.edges:
        raise ValueError("skeleton has no bones")
    fwd = point_to_segments(pred.positions, ref.bone_segments()).mean()
    bwd = point_to_segments(ref.positions, pred.bone_segments()).mean()
    return 0.5 * (fwd + bwd) / longest_axis


def _incident_bone_direction(skel: Skeleton, i: int) -> np.ndarray:
    """Unit direction of the joint's first incident bone (child bones first,
    in edge order; otherwise the bone from its parent)."""
    for a, b in skel.edges:
        if a == i:
            v = skel.positions[b] - skel.positions[a]
            break
    else:
        p = skel.parent_of(i)
        if p is None:
            raise ValueError(f"joint {i} has no incident bone")
        v = skel.positions[i] - skel.positions[p]
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError(f"zero-length bone at joint {i}")
    return v / n


def local_shape_diameters(ref: Skeleton, mesh: TriangleMesh):
    """Per reference joint: mean over 8 ray directions perpendicular to its
    first incident bone of the through-thickness (hit distance along +d
    plus along -d, misses discarded).  Joints where every ray pair misses
    fall back to the global mean diameter and are flagged."""
    n = ref.n_joints
    diameters = np.full(n, np.nan)
    for i in range(n):
        axis = _incident_bone_direction(ref, i)
        helper = np.array([1.0, 0.0, 0.0])
        if abs(np.dot(helper, axis)) > 0.9:
            helper = np.array([0.0, 1.0, 0.0])
        u = np.cross(axis, helper)
        u /= np.linalg.norm(u)
        v = np.cross(axis, u)
        ang = 2.0 * np.pi * np.arange(DIAMETER_RAY_COUNT) / DIAMETER_RAY_COUNT
        dirs = np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * v
        origins = np.broadcast_to(ref.positions[i], dirs.shape)
        t_pos = batch_ray_mesh(mesh, origins, dirs)
        t_neg = batch_ray_mesh(mesh, origins, -dirs)
        hit = np.isfinite(t_pos) & np.isfinite(t_neg)
        if hit.any():
            diameters[i] = float((t_pos[hit] + t_neg[hit]).mean())
    fallback = np.isnan(diameters)
    if fallback.all():
        raise ValueError("no reference joint produced a surface diameter")
    diameters[fallback] = diameters[~fallback].mean()
    return diameters, fallback


def matching_rates(pred: Skeleton, ref: Skeleton, mesh: TriangleMesh,
                   tol: float = MATCH_TOLERANCE):
    """Percentages of predicted joints lying within tol x local shape
    diameter of some reference joint (mr_pred) and of reference joints so
    matched (mr_ref)."""
    diameters, fallback = local_shape_diameters(ref, mesh)
    d = np.linalg.norm(pred.positions[:, None, :] - ref.positions[None, :, :], axis=2)
    match = d < tol * diameters[None, :]       # (n_pred, n_ref)
    mr_pred = 100.0 * match.any(axis=1).mean()
    mr_ref = 100.0 * match.any(axis=0).mean()
    return float(mr_pred), float(mr_ref), bool(fallback.any())


@dataclass
class ShapeRow:
    name: str
    cd_joint: float | None = None
    cd_joint2bone: float | None = None
    mr_pred: float | None = None
    mr_ref: float | None = None
    flagged: bool = False
    error: str | None = None


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    tolerance: float = MATCH_TOLERANCE
    means: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "tolerance": self.tolerance,
            "shapes": [vars(r) for r in self.rows],
            "means": self.means,
        }

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def table(self) -> str:
        header = f"{'shape':<24}{'cd_joint':>12}{'cd_j2b':>12}{'mr_pred':>10}{'mr_ref':>10}  flags"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            if r.error is not None:
                lines.append(f"{r.name:<24}{'--':>12}{'--':>12}{'--':>10}{'--':>10}  ERROR: {r.error}")
            else:
                flag = "fallback-diameter" if r.flagged else ""
                lines.append(f"{r.name:<24}{r.cd_joint:>12.6f}{r.cd_joint2bone:>12.6f}"
                             f"{r.mr_pred:>10.2f}{r.mr_ref:>10.2f}  {flag}")
        if self.means:
            m = self.means
            lines.append("-" * len(header))
            lines.append(f"{'mean':<24}{m['cd_joint']:>12.6f}{m['cd_joint2bone']:>12.6f}"
                         f"{m['mr_pred']:>10.2f}{m['mr_ref']:>10.2f}")
        return "\n".join(lines)


def evaluate_pair(pred: Skeleton, ref: Skeleton, mesh: TriangleMesh,
                  tol: float = MATCH_TOLERANCE, name: str = "shape") -> ShapeRow:
    longest = mesh.longest_extent()
    cj = cd_joint(pred, ref, longest)
    cjb = cd_joint2bone(pred, ref, longest)
    mp, mr, flagged = matching_rates(pred, ref, mesh, tol)
    return ShapeRow(name, cj, cjb, mp, mr, flagged)


def evaluate_dataset(pairs, tol: float = MATCH_TOLERANCE) -> EvalReport:
    """pairs: iterable of (name, pred Skeleton, ref Skeleton, mesh).
    Per-shape failures become flagged rows excluded from the means."""
    report = EvalReport(tolerance=tol)
    for name, pred, ref, mesh in pairs:
        try:
            report.rows.append(evaluate_pair(pred, ref, mesh, tol, name))
        except (ValueError, RuntimeError) as exc:
            report.rows.append(ShapeRow(name, error=str(exc)))
    ok = [r for r in report.rows if r.error is None]
    if not ok:
        raise ValueError("no shape evaluated successfully")
    report.means = {
        "cd_joint": float(np.mean([r.cd_joint for r in ok])),
        "cd_joint2bone": float(np.mean([r.cd_joint2bone for r in ok])),
        "mr_pred": float(np.mean([r.mr_pred for r in ok])),
        "mr_ref": float(np.mean([r.mr_ref for r in ok])),
    }
    return report
