"""Vectorized numpy fallbacks for the throughput-critical kernels.

Used when ``VOLRIG_BACKEND=numpy``: the loop kernels in
``_kernels_loops`` would be too slow interpreted for dense point/ray
workloads, so these versions vectorize over the large axis instead.
"""

from __future__ import annotations

import numpy as np


def _point_segment_closest(p, a, b):
    # p: (n,3), a/b: (3,) -> closest points (n,3)
    ab = b - a
    denom = float(ab @ ab)
    if denom <= 0.0:
        return np.broadcast_to(a, p.shape)
    t = np.clip((p - a) @ ab / denom, 0.0, 1.0)
    return a + t[:, None] * ab


def closest_point_mesh(points, vertices, triangles):
    """Vectorized over points, looping over triangles.

    Same contract as the loop kernel: returns (dist, sign_dot).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    best = np.full(n, np.inf)
    best_dot = np.zeros(n)
    for t in range(triangles.shape[0]):
        v0 = vertices[triangles[t, 0]].astype(np.float64)
        v1 = vertices[triangles[t, 1]].astype(np.float64)
        v2 = vertices[triangles[t, 2]].astype(np.float64)
        e0 = v1 - v0
        e1 = v2 - v0
        nrm = np.cross(e0, e1)
        nn = float(nrm @ nrm)
        cand = np.empty_like(pts)
        if nn > 0.0:
            d = (pts - v0) @ nrm / nn
            q = pts - d[:, None] * nrm
            w = q - v0
            d00 = float(e0 @ e0)
            d01 = float(e0 @ e1)
            d11 = float(e1 @ e1)
            denom = d00 * d11 - d01 * d01
            if denom != 0.0:
                d20 = w @ e0
                d21 = w @ e1
                bv = (d11 * d20 - d01 * d21) / denom
                bw = (d00 * d21 - d01 * d20) / denom
                inside = (bv >= 0) & (bw >= 0) & (bv + bw <= 1)
            else:
                inside = np.zeros(n, dtype=bool)
            cand[inside] = q[inside]
        else:
            inside = np.zeros(n, dtype=bool)
        out = ~inside
        if np.any(out):
            po = pts[out]
            c0 = _point_segment_closest(po, v0, v1)
            c1 = _point_segment_closest(po, v1, v2)
            c2 = _point_segment_closest(po, v2, v0)
            d0 = np.einsum("ij,ij->i", po - c0, po - c0)
            d1 = np.einsum("ij,ij->i", po - c1, po - c1)
            d2 = np.einsum("ij,ij->i", po - c2, po - c2)
            stacked = np.stack([c0, c1, c2])
            pick = np.argmin(np.stack([d0, d1, d2]), axis=0)
            cand[out] = stacked[pick, np.arange(po.shape[0])]
        d2all = np.einsum("ij,ij->i", pts - cand, pts - cand)
        nl = np.sqrt(nn)
        dot = (pts - cand) @ nrm / nl if nl > 0 else np.zeros(n)
        better = d2all < best - 1e-18
        tie = (~better) & (d2all < best + 1e-18) & (np.abs(dot) > np.abs(best_dot))
        best = np.where(better, d2all, best)
        best_dot = np.where(better | tie, dot, best_dot)
    return np.sqrt(best), best_dot


def ray_hits_first(origins, dirs, vertices, triangles, eps):
    """Vectorized over rays, looping over triangles in index order."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    n = o.shape[0]
    best = np.full(n, np.inf)
    for t in range(triangles.shape[0]):
        v0 = vertices[triangles[t, 0]].astype(np.float64)
        v1 = vertices[triangles[t, 1]].astype(np.float64)
        v2 = vertices[triangles[t, 2]].astype(np.float64)
        e1 = v1 - v0
        e2 = v2 - v0
        p = np.cross(d, e2)
        det = p @ e1
        ok = np.abs(det) >= 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = o - v0
        u = np.einsum("ij,ij->i", s, p) * inv
        ok &= (u >= -1e-9) & (u <= 1.0 + 1e-9)
        q = np.cross(s, e1)
        v = np.einsum("ij,ij->i", d, q) * inv
        ok &= (v >= -1e-9) & (u + v <= 1.0 + 1e-9)
        tt = q @ e2 * inv
        ok &= (tt > eps) & (tt < best - 1e-12)
        best = np.where(ok, tt, best)
    return best


def kde_accumulate(out, verts, origin, cell, h):
    """Per-vertex truncated-Gaussian splat using local window slices."""
    res = np.array(out.shape)
    rad = 3.0 * h
    rad2 = rad * rad
    inv2h2 = 1.0 / (2.0 * h * h)
    for v in range(verts.shape[0]):
        p = verts[v]
        lo = np.maximum(0, np.ceil((p - rad - origin) / cell - 0.5).astype(np.int64))
        hi = np.minimum(res - 1, np.floor((p + rad - origin) / cell - 0.5).astype(np.int64))
        if np.any(lo > hi):
            continue
        ax = origin[0] + (np.arange(lo[0], hi[0] + 1) + 0.5) * cell - p[0]
        ay = origin[1] + (np.arange(lo[1], hi[1] + 1) + 0.5) * cell - p[1]
        az = origin[2] + (np.arange(lo[2], hi[2] + 1) + 0.5) * cell - p[2]
        r2 = ax[:, None, None] ** 2 + ay[None, :, None] ** 2 + az[None, None, :] ** 2
        contrib = np.where(r2 <= rad2, np.exp(-r2 * inv2h2), 0.0)
        out[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] += contrib
