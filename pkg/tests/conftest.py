import numpy as np
import pytest

from volrig.mesh import TriangleMesh


def icosphere(radius=1.0, subdivisions=3, center=(0.0, 0.0, 0.0)):
    """Geodesic sphere from a subdivided icosahedron."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(verts)
    cache = {}

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            m = 0.5 * (verts[i] + verts[j])
            m /= np.linalg.norm(m)
            cache[key] = len(verts)
            verts.append(m)
        return cache[key]

    for _ in range(subdivisions):
        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center)
    return TriangleMesh(v, np.array(faces, dtype=np.int64))


def cylinder(radius=1.0, height=4.0, segments=48, center=(0.0, 0.0, 0.0)):
    """Closed cylinder with its axis along y."""
    cx, cy, cz = center
    ang = 2 * np.pi * np.arange(segments) / segments
    lo = np.stack([cx + radius * np.cos(ang), np.full(segments, cy - height / 2),
                   cz + radius * np.sin(ang)], axis=1)
    hi = lo + np.array([0.0, height, 0.0])
    verts = [lo, hi, np.array([[cx, cy - height / 2, cz]]),
             np.array([[cx, cy + height / 2, cz]])]
    verts = np.concatenate(verts)
    n = segments
    tris = []
    for i in range(n):
        j = (i + 1) % n
        tris += [(i, n + i, j), (j, n + i, n + j)]          # side
        tris += [(2 * n, j, i), (2 * n + 1, n + i, n + j)]  # caps
    return TriangleMesh(verts, np.array(tris, dtype=np.int64))


@pytest.fixture(scope="session")
def sphere_mesh():
    return icosphere(radius=0.4, subdivisions=3, center=(0.0, 0.5, 0.0))


@pytest.fixture(autouse=True)
def _seeded():
    np.random.seed(0)
