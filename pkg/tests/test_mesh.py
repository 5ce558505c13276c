import numpy as np
import pytest

from conftest import icosphere
from volrig.mesh import (
    MeshLoadError,
    TriangleMesh,
    average_edge_length,
    detect_bilateral_symmetry,
    load_mesh,
    normalize_mesh,
    ray_mesh_intersect,
    sample_surface,
    save_mesh,
)


def write_obj(path, text):
    path.write_text(text)
    return path


def test_load_triangle(tmp_path):
    p = write_obj(tmp_path / "t.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    m = load_mesh(p)
    assert m.vertices.shape == (3, 3)
    assert m.triangles.shape == (1, 3)


def test_load_quad_fan_triangulation(tmp_path):
    p = write_obj(tmp_path / "q.obj",
                  "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    m = load_mesh(p)
    assert m.triangles.shape == (2, 3)
    assert m.triangles.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_load_negative_indices(tmp_path):
    p = write_obj(tmp_path / "n.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n")
    assert load_mesh(p).triangles.tolist() == [[0, 1, 2]]


def test_load_error_reports_line(tmp_path):
    p = write_obj(tmp_path / "bad.obj", "v 0 0 0\nv 1 0 0\nf 1 2 x\n")
    with pytest.raises(MeshLoadError) as exc:
        load_mesh(p)
    assert "3" in str(exc.value)


def test_load_empty_mesh_rejected(tmp_path):
    p = write_obj(tmp_path / "e.obj", "v 0 0 0\n")
    with pytest.raises(MeshLoadError):
        load_mesh(p)


def test_save_load_roundtrip(tmp_path, sphere_mesh):
    path = tmp_path / "s.obj"
    save_mesh(sphere_mesh, path)
    m = load_mesh(path)
    assert np.allclose(m.vertices, sphere_mesh.vertices)
    assert np.array_equal(m.triangles, sphere_mesh.triangles)


def test_normalize_frame(sphere_mesh):
    shifted = TriangleMesh(sphere_mesh.vertices * 3.0 + np.array([5.0, -2.0, 1.0]),
                           sphere_mesh.triangles)
    norm, xform = normalize_mesh(shifted)
    lo, hi = norm.bounds()
    assert abs(lo[1]) < 1e-12                       # feet on the ground plane
    assert np.isclose((hi - lo).max(), 1.0)         # unit longest extent
    c = norm.vertices.mean(axis=0)
    assert abs(c[0]) < 1e-9 and abs(c[2]) < 1e-9    # centered in x/z
    assert np.allclose(xform.apply(shifted.vertices), norm.vertices)


def test_normalize_idempotent(sphere_mesh):
    once, _ = normalize_mesh(sphere_mesh)
    twice, _ = normalize_mesh(once)
    assert np.allclose(once.vertices, twice.vertices, atol=1e-12)


def test_vertex_normals_sphere_point_outward(sphere_mesh):
    n = sphere_mesh.vertex_normals
    center = np.array([0.0, 0.5, 0.0])
    radial = sphere_mesh.vertices - center
    radial /= np.linalg.norm(radial, axis=1, keepdims=True)
    assert (np.einsum("ij,ij->i", n, radial) > 0.95).all()


def test_sample_surface_area_proportional(sphere_mesh):
    s = sample_surface(sphere_mesh, 5000, seed=1)
    assert len(s) == 5000
    center = np.array([0.0, 0.5, 0.0])
    r = np.linalg.norm(s.positions - center, axis=1)
    assert np.allclose(r, 0.4, atol=0.01)    # on the (faceted) sphere
    # roughly uniform: octant counts within a few sigma of n/8
    octant = ((s.positions - center) > 0) @ np.array([1, 2, 4])
    counts = np.bincount(octant, minlength=8)
    assert counts.min() > 400 and counts.max() < 900


def test_sample_surface_deterministic(sphere_mesh):
    a = sample_surface(sphere_mesh, 100, seed=7)
    b = sample_surface(sphere_mesh, 100, seed=7)
    assert np.array_equal(a.positions, b.positions)
    assert not np.array_equal(a.positions, sample_surface(sphere_mesh, 100, seed=8).positions)


def test_ray_intersect_sphere(sphere_mesh):
    t = ray_mesh_intersect(sphere_mesh, np.array([0.0, 0.5, 2.0]),
                           np.array([0.0, 0.0, -1.0]))
    assert t is not None and abs(t - 1.6) < 0.01
    assert ray_mesh_intersect(sphere_mesh, np.array([0.0, 5.0, 2.0]),
                              np.array([0.0, 0.0, -1.0])) is None


def test_average_edge_length_soup():
    # two triangles sharing an edge: 6 edge contributions
    m = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float),
                     np.array([[0, 1, 2], [1, 3, 2]]))
    expect = (1 + 1 + np.sqrt(2) + 1 + 1 + np.sqrt(2)) / 6
    assert np.isclose(average_edge_length(m), expect)


def test_detect_symmetry(sphere_mesh):
    norm, _ = normalize_mesh(sphere_mesh)
    plane = detect_bilateral_symmetry(norm)
    assert plane is not None
    p = np.array([[0.3, 0.2, 0.1]])
    assert np.allclose(plane.reflect(p), [[-0.3, 0.2, 0.1]])


def test_detect_asymmetry():
    # lopsided L-shape: clearly not mirror symmetric in x
    v = np.array([[0, 0, 0], [4, 0, 0], [4, 1, 0], [1, 1, 0], [1, 3, 0], [0, 3, 0]],
                 dtype=float)
    tris = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 5]])
    norm, _ = normalize_mesh(TriangleMesh(v, tris))
    assert detect_bilateral_symmetry(norm) is None
