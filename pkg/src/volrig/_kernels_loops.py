"""Loop-style geometry kernels.

Every function here is nopython-compatible: :mod:`volrig.kernels` compiles
them with numba when that backend is active and otherwise runs them
interpreted (or swaps in a vectorized numpy equivalent for the
throughput-critical ones).  Keep the code free of Python objects, dicts and
closures so both paths stay identical.
"""

from __future__ import annotations

import numpy as np

# ---------------------------------------------------------------------------
# triangle/box overlap (separating axis test, Akenine-Moller)


def _axis_test(a0, a1, a2, b0, b1, b2, c0, c1, c2, half):
    # project triangle verts and box onto axis (a0,a1,a2); box is centered
    # at the origin with half-extents `half`
    p0 = a0 * b0 + a1 * b1 + a2 * b2
    p1 = a0 * c0 + a1 * c1 + a2 * c2
    r = half * (abs(a0) + abs(a1) + abs(a2))
    lo = p0 if p0 < p1 else p1
    hi = p0 if p0 > p1 else p1
    return lo > r or hi < -r


def tri_box_overlap(v0, v1, v2, center, half):
    """Conservative (touch counts) triangle vs axis-aligned cube test."""
    # translate so the box is at the origin
    t0x = v0[0] - center[0]
    t0y = v0[1] - center[1]
    t0z = v0[2] - center[2]
    t1x = v1[0] - center[0]
    t1y = v1[1] - center[1]
    t1z = v1[2] - center[2]
    t2x = v2[0] - center[0]
    t2y = v2[1] - center[1]
    t2z = v2[2] - center[2]

    # box-axis tests
    for c in range(3):
        if c == 0:
            a, b, d = t0x, t1x, t2x
        elif c == 1:
            a, b, d = t0y, t1y, t2y
        else:
            a, b, d = t0z, t1z, t2z
        mn = min(a, min(b, d))
        mx = max(a, max(b, d))
        if mn > half or mx < -half:
            return False

    e0x, e0y, e0z = t1x - t0x, t1y - t0y, t1z - t0z
    e1x, e1y, e1z = t2x - t1x, t2y - t1y, t2z - t1z
    e2x, e2y, e2z = t0x - t2x, t0y - t2y, t0z - t2z

    # plane test
    nx = e0y * e1z - e0z * e1y
    ny = e0z * e1x - e0x * e1z
    nz = e0x * e1y - e0y * e1x
    d = nx * t0x + ny * t0y + nz * t0z
    r = half * (abs(nx) + abs(ny) + abs(nz))
    if abs(d) > r:
        return False

    # 9 cross-product axis tests; for edge e and box axis u, axis = u x e.
    # u=x -> (0,-ez,ey); u=y -> (ez,0,-ex); u=z -> (-ey,ex,0).
    # For each edge, project the two triangle verts not forming degenerate
    # pairs (projections of edge endpoints coincide, so any two distinct
    # vertices suffice).
    for e in range(3):
        if e == 0:
            ex, ey, ez = e0x, e0y, e0z
            bx, by, bz = t0x, t0y, t0z
            cx, cy, cz = t2x, t2y, t2z
        elif e == 1:
            ex, ey, ez = e1x, e1y, e1z
            bx, by, bz = t1x, t1y, t1z
            cx, cy, cz = t0x, t0y, t0z
        else:
            ex, ey, ez = e2x, e2y, e2z
            bx, by, bz = t2x, t2y, t2z
            cx, cy, cz = t1x, t1y, t1z
        if _axis_test(0.0, -ez, ey, bx, by, bz, cx, cy, cz, half):
            return False
        if _axis_test(ez, 0.0, -ex, bx, by, bz, cx, cy, cz, half):
            return False
        if _axis_test(-ey, ex, 0.0, bx, by, bz, cx, cy, cz, half):
            return False
    return True


def voxelize_surface(vertices, triangles, origin, cell, res):
    """Mark every grid cell whose cube intersects a triangle."""
    surf = np.zeros((res, res, res), dtype=np.uint8)
    # tiny inflation so triangles lying exactly in a cell-boundary plane
    # register on both sides instead of (by rounding) neither
    half = 0.5 * cell * (1.0 + 1e-9)
    center = np.empty(3, dtype=np.float64)
    for t in range(triangles.shape[0]):
        v0 = vertices[triangles[t, 0]]
        v1 = vertices[triangles[t, 1]]
        v2 = vertices[triangles[t, 2]]
        lo0 = min(v0[0], min(v1[0], v2[0]))
        lo1 = min(v0[1], min(v1[1], v2[1]))
        lo2 = min(v0[2], min(v1[2], v2[2]))
        hi0 = max(v0[0], max(v1[0], v2[0]))
        hi1 = max(v0[1], max(v1[1], v2[1]))
        hi2 = max(v0[2], max(v1[2], v2[2]))
        i0 = max(0, int(np.floor((lo0 - origin[0]) / cell)) - 1)
        j0 = max(0, int(np.floor((lo1 - origin[1]) / cell)) - 1)
        k0 = max(0, int(np.floor((lo2 - origin[2]) / cell)) - 1)
        i1 = min(res - 1, int(np.floor((hi0 - origin[0]) / cell)) + 1)
        j1 = min(res - 1, int(np.floor((hi1 - origin[1]) / cell)) + 1)
        k1 = min(res - 1, int(np.floor((hi2 - origin[2]) / cell)) + 1)
        for i in range(i0, i1 + 1):
            center[0] = origin[0] + (i + 0.5) * cell
            for j in range(j0, j1 + 1):
                center[1] = origin[1] + (j + 0.5) * cell
                for k in range(k0, k1 + 1):
                    if surf[i, j, k]:
                        continue
                    center[2] = origin[2] + (k + 0.5) * cell
                    if tri_box_overlap(v0, v1, v2, center, half):
                        surf[i, j, k] = 1
    return surf


def flood_exterior(surface):
    """6-connected flood fill from the grid boundary through non-surface cells."""
    r0, r1, r2 = surface.shape
    ext = np.zeros((r0, r1, r2), dtype=np.uint8)
    stack = np.empty((r0 * r1 * r2, 3), dtype=np.int64)
    n = 0
    for i in range(r0):
        for j in range(r1):
            for k in range(r2):
                if i == 0 or j == 0 or k == 0 or i == r0 - 1 or j == r1 - 1 or k == r2 - 1:
                    if surface[i, j, k] == 0 and ext[i, j, k] == 0:
                        ext[i, j, k] = 1
                        stack[n, 0] = i
                        stack[n, 1] = j
                        stack[n, 2] = k
                        n += 1
    while n > 0:
        n -= 1
        i = stack[n, 0]
        j = stack[n, 1]
        k = stack[n, 2]
        for a in range(6):
            ii, jj, kk = i, j, k
            if a == 0:
                ii -= 1
            elif a == 1:
                ii += 1
            elif a == 2:
                jj -= 1
            elif a == 3:
                jj += 1
            elif a == 4:
                kk -= 1
            else:
                kk += 1
            if ii < 0 or jj < 0 or kk < 0 or ii >= r0 or jj >= r1 or kk >= r2:
                continue
            if surface[ii, jj, kk] == 0 and ext[ii, jj, kk] == 0:
                ext[ii, jj, kk] = 1
                stack[n, 0] = ii
                stack[n, 1] = jj
                stack[n, 2] = kk
                n += 1
    return ext


# ---------------------------------------------------------------------------
# closest point on mesh


def _closest_on_segment(px, py, pz, ax, ay, az, bx, by, bz):
    abx, aby, abz = bx - ax, by - ay, bz - az
    denom = abx * abx + aby * aby + abz * abz
    if denom <= 0.0:
        return ax, ay, az
    t = ((px - ax) * abx + (py - ay) * aby + (pz - az) * abz) / denom
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    return ax + t * abx, ay + t * aby, az + t * abz


def _closest_on_triangle(px, py, pz, v0, v1, v2):
    # project onto the triangle plane; if the projection is inside, done,
    # otherwise the closest point lies on one of the three edges
    e0x, e0y, e0z = v1[0] - v0[0], v1[1] - v0[1], v1[2] - v0[2]
    e1x, e1y, e1z = v2[0] - v0[0], v2[1] - v0[1], v2[2] - v0[2]
    nx = e0y * e1z - e0z * e1y
    ny = e0z * e1x - e0x * e1z
    nz = e0x * e1y - e0y * e1x
    nn = nx * nx + ny * ny + nz * nz
    if nn > 0.0:
        dx, dy, dz = px - v0[0], py - v0[1], pz - v0[2]
        dist = (dx * nx + dy * ny + dz * nz) / nn
        qx, qy, qz = px - dist * nx, py - dist * ny, pz - dist * nz
        # barycentric test of q
        wx, wy, wz = qx - v0[0], qy - v0[1], qz - v0[2]
        d00 = e0x * e0x + e0y * e0y + e0z * e0z
        d01 = e0x * e1x + e0y * e1y + e0z * e1z
        d11 = e1x * e1x + e1y * e1y + e1z * e1z
        d20 = wx * e0x + wy * e0y + wz * e0z
        d21 = wx * e1x + wy * e1y + wz * e1z
        denom = d00 * d11 - d01 * d01
        if denom != 0.0:
            v = (d11 * d20 - d01 * d21) / denom
            w = (d00 * d21 - d01 * d20) / denom
            if v >= 0.0 and w >= 0.0 and v + w <= 1.0:
                return qx, qy, qz
    best = 1e300
    bx = by = bz = 0.0
    for e in range(3):
        if e == 0:
            a, b = v0, v1
        elif e == 1:
            a, b = v1, v2
        else:
            a, b = v2, v0
        cx, cy, cz = _closest_on_segment(px, py, pz, a[0], a[1], a[2], b[0], b[1], b[2])
        d2 = (px - cx) ** 2 + (py - cy) ** 2 + (pz - cz) ** 2
        if d2 < best:
            best = d2
            bx, by, bz = cx, cy, cz
    return bx, by, bz


def closest_point_mesh(points, vertices, triangles):
    """Distance to the mesh and a sign hint per query point.

    Returns (dist, sign_dot) where sign_dot is the dot product of
    (point - closest) with the face normal of the winning triangle; among
    near-equidistant triangles the one with the largest |dot| wins, which
    keeps the sign stable across shared edges.
    """
    n = points.shape[0]
    dist = np.empty(n, dtype=np.float64)
    sign_dot = np.empty(n, dtype=np.float64)
    for p in range(n):
        px, py, pz = points[p, 0], points[p, 1], points[p, 2]
        best = 1e300
        best_dot = 0.0
        for t in range(triangles.shape[0]):
            v0 = vertices[triangles[t, 0]]
            v1 = vertices[triangles[t, 1]]
            v2 = vertices[triangles[t, 2]]
            cx, cy, cz = _closest_on_triangle(px, py, pz, v0, v1, v2)
            d2 = (px - cx) ** 2 + (py - cy) ** 2 + (pz - cz) ** 2
            if d2 < best - 1e-18 or (d2 < best + 1e-18):
                e0x, e0y, e0z = v1[0] - v0[0], v1[1] - v0[1], v1[2] - v0[2]
                e1x, e1y, e1z = v2[0] - v0[0], v2[1] - v0[1], v2[2] - v0[2]
                nx = e0y * e1z - e0z * e1y
                ny = e0z * e1x - e0x * e1z
                nz = e0x * e1y - e0y * e1x
                nl = np.sqrt(nx * nx + ny * ny + nz * nz)
                if nl > 0.0:
                    dot = ((px - cx) * nx + (py - cy) * ny + (pz - cz) * nz) / nl
                else:
                    dot = 0.0
                if d2 < best - 1e-18:
                    best = d2
                    best_dot = dot
                elif abs(dot) > abs(best_dot):
                    best_dot = dot
        dist[p] = np.sqrt(best)
        sign_dot[p] = best_dot
    return dist, sign_dot


# ---------------------------------------------------------------------------
# ray casting (Moller-Trumbore); nearest positive hit, ties to the smallest
# triangle index


def ray_hits_first(origins, dirs, vertices, triangles, eps):
    n = origins.shape[0]
    out = np.empty(n, dtype=np.float64)
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        best = np.inf
        for t in range(triangles.shape[0]):
            v0 = vertices[triangles[t, 0]]
            v1 = vertices[triangles[t, 1]]
            v2 = vertices[triangles[t, 2]]
            e1x, e1y, e1z = v1[0] - v0[0], v1[1] - v0[1], v1[2] - v0[2]
            e2x, e2y, e2z = v2[0] - v0[0], v2[1] - v0[1], v2[2] - v0[2]
            px = dy * e2z - dz * e2y
            py = dz * e2x - dx * e2z
            pz = dx * e2y - dy * e2x
            det = e1x * px + e1y * py + e1z * pz
            if abs(det) < 1e-14:
                continue
            inv = 1.0 / det
            sx, sy, sz = ox - v0[0], oy - v0[1], oz - v0[2]
            u = (sx * px + sy * py + sz * pz) * inv
            if u < -1e-9 or u > 1.0 + 1e-9:
                continue
            qx = sy * e1z - sz * e1y
            qy = sz * e1x - sx * e1z
            qz = sx * e1y - sy * e1x
            v = (dx * qx + dy * qy + dz * qz) * inv
            if v < -1e-9 or u + v > 1.0 + 1e-9:
                continue
            tt = (e2x * qx + e2y * qy + e2z * qz) * inv
            if tt > eps and tt < best - 1e-12:
                best = tt
        out[r] = best
    return out


# ---------------------------------------------------------------------------
# first-order fast marching of |grad phi| = 1 from a frozen band

FAR = 0
NARROW = 1
FROZEN = 2


def _heap_push(heap_t, heap_i, size, t, idx):
    heap_t[size] = t
    heap_i[size] = idx
    c = size
    while c > 0:
        p = (c - 1) // 2
        if heap_t[p] <= heap_t[c]:
            break
        heap_t[p], heap_t[c] = heap_t[c], heap_t[p]
        heap_i[p], heap_i[c] = heap_i[c], heap_i[p]
        c = p
    return size + 1


def _heap_pop(heap_t, heap_i, size):
    t = heap_t[0]
    idx = heap_i[0]
    size -= 1
    heap_t[0] = heap_t[size]
    heap_i[0] = heap_i[size]
    p = 0
    while True:
        l = 2 * p + 1
        r = l + 1
        m = p
        if l < size and heap_t[l] < heap_t[m]:
            m = l
        if r < size and heap_t[r] < heap_t[m]:
            m = r
        if m == p:
            break
        heap_t[p], heap_t[m] = heap_t[m], heap_t[p]
        heap_i[p], heap_i[m] = heap_i[m], heap_i[p]
        p = m
    return t, idx, size


def _eikonal_update(dist, state, i, j, k, r0, r1, r2, h):
    m0 = np.inf
    m1 = np.inf
    m2 = np.inf
    idx = i * r1 * r2 + j * r2 + k
    for axis in range(3):
        best = np.inf
        for s in range(2):
            ii, jj, kk = i, j, k
            d = -1 if s == 0 else 1
            if axis == 0:
                ii += d
            elif axis == 1:
                jj += d
            else:
                kk += d
            if ii < 0 or jj < 0 or kk < 0 or ii >= r0 or jj >= r1 or kk >= r2:
                continue
            nid = ii * r1 * r2 + jj * r2 + kk
            if state[nid] == FROZEN and dist[nid] < best:
                best = dist[nid]
        if axis == 0:
            m0 = best
        elif axis == 1:
            m1 = best
        else:
            m2 = best
    # sort m0 <= m1 <= m2
    if m0 > m1:
        m0, m1 = m1, m0
    if m1 > m2:
        m1, m2 = m2, m1
    if m0 > m1:
        m0, m1 = m1, m0
    if m0 == np.inf:
        return np.inf
    phi = m0 + h
    if phi > m1:
        s = m0 + m1
        disc = 2.0 * h * h - (m0 - m1) ** 2
        if disc >= 0.0:
            phi = 0.5 * (s + np.sqrt(disc))
        if phi > m2:
            s = m0 + m1 + m2
            disc = s * s - 3.0 * (m0 * m0 + m1 * m1 + m2 * m2 - h * h)
            if disc >= 0.0:
                phi = (s + np.sqrt(disc)) / 3.0
    return phi


def fast_march(dist, frozen, h):
    """In-place unsigned fast marching.

    dist: float64 grid, exact values at frozen cells, +inf elsewhere.
    frozen: uint8 grid of the initial band.
    """
    r0, r1, r2 = dist.shape
    n = r0 * r1 * r2
    flat = dist.ravel()
    state = np.zeros(n, dtype=np.uint8)
    fr = frozen.ravel()
    for idx in range(n):
        if fr[idx]:
            state[idx] = FROZEN
    cap = 8 * n + 64
    heap_t = np.empty(cap, dtype=np.float64)
    heap_i = np.empty(cap, dtype=np.int64)
    size = 0

    # seed the narrow band from neighbors of frozen cells
    for i in range(r0):
        for j in range(r1):
            for k in range(r2):
                idx = i * r1 * r2 + j * r2 + k
                if state[idx] != FROZEN:
                    continue
                for a in range(6):
                    ii, jj, kk = i, j, k
                    if a == 0:
                        ii -= 1
                    elif a == 1:
                        ii += 1
                    elif a == 2:
                        jj -= 1
                    elif a == 3:
                        jj += 1
                    elif a == 4:
                        kk -= 1
                    else:
                        kk += 1
                    if ii < 0 or jj < 0 or kk < 0 or ii >= r0 or jj >= r1 or kk >= r2:
                        continue
                    nid = ii * r1 * r2 + jj * r2 + kk
                    if state[nid] == FROZEN:
                        continue
                    phi = _eikonal_update(flat, state, ii, jj, kk, r0, r1, r2, h)
                    if phi < flat[nid]:
                        flat[nid] = phi
                        state[nid] = NARROW
                        size = _heap_push(heap_t, heap_i, size, phi, nid)

    while size > 0:
        t, idx, size = _heap_pop(heap_t, heap_i, size)
        if state[idx] == FROZEN:
            continue  # stale heap entry
        if t > flat[idx]:
            continue
        state[idx] = FROZEN
        i = idx // (r1 * r2)
        j = (idx // r2) % r1
        k = idx % r2
        for a in range(6):
            ii, jj, kk = i, j, k
            if a == 0:
                ii -= 1
            elif a == 1:
                ii += 1
            elif a == 2:
                jj -= 1
            elif a == 3:
                jj += 1
            elif a == 4:
                kk -= 1
            else:
                kk += 1
            if ii < 0 or jj < 0 or kk < 0 or ii >= r0 or jj >= r1 or kk >= r2:
                continue
            nid = ii * r1 * r2 + jj * r2 + kk
            if state[nid] == FROZEN:
                continue
            phi = _eikonal_update(flat, state, ii, jj, kk, r0, r1, r2, h)
            if phi < flat[nid]:
                flat[nid] = phi
                state[nid] = NARROW
                if size < cap:
                    size = _heap_push(heap_t, heap_i, size, phi, nid)


# ---------------------------------------------------------------------------
# kernel density splat (truncated Gaussian)


def kde_accumulate(out, verts, origin, cell, h):
    res0, res1, res2 = out.shape
    rad = 3.0 * h
    rad2 = rad * rad
    inv2h2 = 1.0 / (2.0 * h * h)
    for v in range(verts.shape[0]):
        vx, vy, vz = verts[v, 0], verts[v, 1], verts[v, 2]
        i0 = max(0, int(np.ceil((vx - rad - origin[0]) / cell - 0.5)))
        j0 = max(0, int(np.ceil((vy - rad - origin[1]) / cell - 0.5)))
        k0 = max(0, int(np.ceil((vz - rad - origin[2]) / cell - 0.5)))
        i1 = min(res0 - 1, int(np.floor((vx + rad - origin[0]) / cell - 0.5)))
        j1 = min(res1 - 1, int(np.floor((vy + rad - origin[1]) / cell - 0.5)))
        k1 = min(res2 - 1, int(np.floor((vz + rad - origin[2]) / cell - 0.5)))
        for i in range(i0, i1 + 1):
            dx = origin[0] + (i + 0.5) * cell - vx
            for j in range(j0, j1 + 1):
                dy = origin[1] + (j + 0.5) * cell - vy
                for k in range(k0, k1 + 1):
                    dz = origin[2] + (k + 0.5) * cell - vz
                    r2 = dx * dx + dy * dy + dz * dz
                    if r2 <= rad2:
                        out[i, j, k] += np.exp(-r2 * inv2h2)


# ---------------------------------------------------------------------------
# amortized 3D grid traversal between two cell centers (Amanatides & Woo)


def segment_cells(a, b):
    """Cells intersected by the segment joining the centers of cells a, b.

    Both endpoint cells are included exactly once.  Returns an (n, 3) int64
    array in traversal order from a to b.
    """
    di = abs(b[0] - a[0]) + abs(b[1] - a[1]) + abs(b[2] - a[2])
    out = np.empty((di + 1, 3), dtype=np.int64)
    cur0, cur1, cur2 = a[0], a[1], a[2]
    out[0, 0] = cur0
    out[0, 1] = cur1
    out[0, 2] = cur2
    n = 1
    d0 = float(b[0] - a[0])
    d1 = float(b[1] - a[1])
    d2 = float(b[2] - a[2])
    step0 = 1 if d0 > 0 else -1
    step1 = 1 if d1 > 0 else -1
    step2 = 1 if d2 > 0 else -1
    tmax0 = 0.5 / abs(d0) if d0 != 0.0 else np.inf
    tmax1 = 0.5 / abs(d1) if d1 != 0.0 else np.inf
    tmax2 = 0.5 / abs(d2) if d2 != 0.0 else np.inf
    td0 = 1.0 / abs(d0) if d0 != 0.0 else np.inf
    td1 = 1.0 / abs(d1) if d1 != 0.0 else np.inf
    td2 = 1.0 / abs(d2) if d2 != 0.0 else np.inf
    while n <= di:
        if tmax0 <= tmax1 and tmax0 <= tmax2:
            cur0 += step0
            tmax0 += td0
        elif tmax1 <= tmax2:
            cur1 += step1
            tmax1 += td1
        else:
            cur2 += step2
            tmax2 += td2
        out[n, 0] = cur0
        out[n, 1] = cur1
        out[n, 2] = cur2
        n += 1
    return out
