"""Mesh construction, connectivity invariants and the ASCII format."""

import itertools
from collections import Counter

import numpy as np
import pytest

from baroflow.mesh import (Mesh, MeshConformityError, MeshFormatError,
                           build_box_mesh, cell_quadrature, face_quadrature,
                           read_mesh, write_mesh)


@pytest.fixture(scope="module")
def cube6():
    return build_box_mesh((1.0, 1.0, 1.0), (1, 1, 1))


def brute_force_face_counts(mesh):
    """Independent oracle: dedupe the 4*nc cell-face incidences by vertex triple."""
    faces = Counter()
    for cell in mesh.cells:
        for skip in range(4):
            tri = tuple(sorted(v for i, v in enumerate(cell) if i != skip))
            faces[tri] += 1
    mult = Counter(faces.values())
    return len(faces), mult[2], mult[1]


def test_unit_cube_counts(cube6):
    # frozen from the brute-force dedup oracle over the 24 incidences
    assert cube6.n_cells == 6
    assert cube6.n_faces == 18
    assert cube6.n_interior_faces == 6
    assert cube6.n_faces - cube6.n_interior_faces == 12
    assert brute_force_face_counts(cube6) == (18, 6, 12)


def test_unit_cube_volume(cube6):
    assert cube6.domain_volume == pytest.approx(1.0, abs=1e-14)
    assert np.all(cube6.cell_volumes > 0)


def test_cell_count_scales_with_n():
    for n in [(2, 2, 2), (3, 2, 1), (4, 4, 4)]:
        m = build_box_mesh((1.0, 1.0, 1.0), n)
        assert m.n_cells == 6 * n[0] * n[1] * n[2]
        counts = brute_force_face_counts(m)
        assert counts == (m.n_faces, m.n_interior_faces,
                          m.n_faces - m.n_interior_faces)


@pytest.mark.parametrize("n", [(1, 1, 1), (2, 2, 2), (3, 1, 2)])
def test_euler_type_face_consistency(n):
    m = build_box_mesh((1.0, 1.0, 1.0), n)
    n_ext = m.n_faces - m.n_interior_faces
    assert 4 * m.n_cells == 2 * m.n_interior_faces + n_ext


def test_face_partition_exact(cube6):
    kinds = {f.kind for f in cube6.faces}
    assert kinds == {"interior", "exterior"}
    assert sorted(np.concatenate([cube6.interior_faces, cube6.exterior_faces])) \
        == list(range(cube6.n_faces))


def test_normals_unit_and_oriented(cube6):
    norms = np.linalg.norm(cube6.face_normal, axis=1)
    assert np.abs(norms - 1.0).max() < 1e-14
    for f in cube6.faces:
        out = f.normal @ (f.centroid - cube6.cell_centroids[f.owner_cell])
        assert out > 0  # points away from the owner
        if f.neighbor_cell is not None:
            assert f.owner_cell < f.neighbor_cell
            into = f.normal @ (cube6.cell_centroids[f.neighbor_cell] - f.centroid)
            assert into > 0


def test_per_cell_divergence_of_constant():
    m = build_box_mesh((2.0, 1.0, 1.5), (2, 3, 2))
    for c in rng_cells(m):
        s = np.zeros(3)
        for l in range(4):
            f = m.cell_faces[c, l]
            s += m.face_area[f] * m.face_normal[f] * m.cell_face_sign[c, l]
        assert np.linalg.norm(s) < 1e-13


def rng_cells(mesh, k=40, seed=0):
    rng = np.random.default_rng(seed)
    return rng.choice(mesh.n_cells, size=min(k, mesh.n_cells), replace=False)


def test_refinement_halves_h():
    for n in (1, 2, 4):
        m1 = build_box_mesh((1.0, 1.0, 1.0), (n, n, n))
        m2 = build_box_mesh((1.0, 1.0, 1.0), (2 * n, 2 * n, 2 * n))
        assert m2.h / m1.h == pytest.approx(0.5, abs=1e-12)


def test_shape_regularity_uniform_in_n():
    conds = [build_box_mesh((1.0, 1.0, 1.0), (n, n, n)).max_condition_number
             for n in (1, 2, 4)]
    assert max(conds) <= 10.0
    assert max(conds) - min(conds) < 1e-12  # congruent cells across levels


def test_cell_volume_sum_matches_domain():
    m = build_box_mesh((2.0, 0.5, 1.25), (3, 2, 4))
    assert abs(m.cell_volumes.sum() - 2.0 * 0.5 * 1.25) < 1e-12 * 1.25


def test_degenerate_extents_rejected():
    with pytest.raises(ValueError):
        build_box_mesh((1.0, 0.0, 1.0), (2, 2, 2))
    with pytest.raises(ValueError):
        build_box_mesh((1.0, 1.0, 1.0), (0, 2, 2))


def test_affine_map_reproduces_cells(cube6):
    # x = h * A @ x_ref + a, columns of h*A are the edge vectors
    for c in range(cube6.n_cells):
        v = cube6.vertices[cube6.cells[c]]
        A = cube6.cell_affine_mats[c]
        a = cube6.cell_affine_offsets[c]
        ref = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
        mapped = (cube6.h * A @ ref.T).T + a
        assert np.abs(mapped - v).max() < 1e-12


# -- mesh file format ---------------------------------------------------------

def test_roundtrip(tmp_path, cube6):
    path = tmp_path / "cube.txt"
    write_mesh(cube6, path)
    m = read_mesh(path)
    assert m.n_cells == cube6.n_cells
    assert np.array_equal(m.cells, cube6.cells)
    assert np.allclose(m.vertices, cube6.vertices)
    # faces agree as sets of sorted vertex triples
    fs1 = {tuple(sorted(f)) for f in m.face_vertices}
    fs2 = {tuple(sorted(f)) for f in cube6.face_vertices}
    assert fs1 == fs2


def test_read_mesh_comments_and_whitespace(tmp_path):
    path = tmp_path / "m.txt"
    path.write_text(
        "tetmesh 1   # header\n\nvertices 4\n0 0 0\n1 0 0  # a vertex\n"
        "0 1 0\n0 0 1\ncells 1\n0 1 2 3\n")
    m = read_mesh(path)
    assert m.n_cells == 1 and m.n_faces == 4


def test_empty_file_is_parse_error(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("")
    with pytest.raises(MeshFormatError):
        read_mesh(path)


def test_parse_error_carries_line_number(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("tetmesh 1\nvertices 2\n0 0 zero\n1 0 0\ncells 0\n")
    with pytest.raises(MeshFormatError, match="line 3"):
        read_mesh(path)


def test_trailing_data_rejected(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("tetmesh 1\nvertices 4\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n"
                    "cells 1\n0 1 2 3\n99\n")
    with pytest.raises(MeshFormatError, match="trailing"):
        read_mesh(path)


def test_hanging_node_rejected(tmp_path):
    # vertex 4 lies inside face (1,2,3) of cell 0 without belonging to it
    path = tmp_path / "hang.txt"
    path.write_text(
        "tetmesh 1\nvertices 6\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n"
        "0.3333333333333333 0.3333333333333333 0.3333333333333333\n1 1 1\n"
        "cells 2\n0 1 2 3\n1 2 4 5\n")
    with pytest.raises(MeshConformityError, match="hanging|inside"):
        read_mesh(path)


def test_nonmanifold_face_rejected():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1],
                      [0, 0, -1], [0.3, 0.3, 1.0]], dtype=float)
    cells = np.array([[0, 1, 2, 3], [0, 1, 2, 4], [0, 1, 2, 5]])
    with pytest.raises(MeshConformityError, match="more than two"):
        Mesh(verts, cells)


def test_bad_vertex_index_rejected():
    verts = np.eye(3)
    with pytest.raises(MeshConformityError):
        Mesh(np.vstack([np.zeros(3), verts]), np.array([[0, 1, 2, 7]]))


# -- quadrature ---------------------------------------------------------------

def unit_right_triangle_face():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    m = Mesh(verts, np.array([[0, 1, 2, 3]]))
    for f in m.faces:
        if np.allclose(f.vertex_coords[:, 2], 0.0):
            return f
    raise AssertionError("no z=0 face found")


def test_face_quadrature_degree1_is_centroid():
    f = unit_right_triangle_face()
    rule = face_quadrature(f, degree=1)
    assert len(rule) == 1
    pt, w = rule[0]
    assert np.allclose(pt, f.centroid)
    assert w == pytest.approx(f.area)


def test_face_quadrature_degree2_midpoints():
    f = unit_right_triangle_face()
    rule = face_quadrature(f, degree=2)
    assert len(rule) == 3
    mids = {tuple(np.round(0.5 * (f.vertex_coords[i] + f.vertex_coords[j]), 12))
            for i, j in [(0, 1), (1, 2), (0, 2)]}
    assert {tuple(np.round(p, 12)) for p, _ in rule} == mids
    assert all(w == pytest.approx(f.area / 3) for _, w in rule)


def test_face_quadrature_linear_integral():
    # int over the unit right triangle of (x + y) = 1/3  (analytic)
    f = unit_right_triangle_face()
    val = sum(w * (p[0] + p[1]) for p, w in face_quadrature(f, degree=2))
    assert val == pytest.approx(1.0 / 3.0, abs=1e-14)
    val1 = sum(w * (p[0] + p[1]) for p, w in face_quadrature(f, degree=1))
    assert val1 == pytest.approx(1.0 / 3.0, abs=1e-14)  # affine: centroid exact


def test_face_quadrature_unsupported_degree():
    f = unit_right_triangle_face()
    with pytest.raises(ValueError):
        face_quadrature(f, degree=7)


@pytest.mark.parametrize("degree,mono,exact", [
    (1, 1, 1.0 / 2.0),   # int x over unit box = 1/2
    (2, 2, 1.0 / 3.0),
    (3, 3, 1.0 / 4.0),
])
def test_cell_quadrature_exactness(degree, mono, exact):
    m = build_box_mesh((1.0, 1.0, 1.0), (2, 2, 2))
    pts, w = cell_quadrature(m, degree)
    val = float(np.sum(w * pts[..., 0] ** mono))
    assert val == pytest.approx(exact, abs=1e-13)
    assert np.allclose(w.sum(axis=1), m.cell_volumes)


def test_mesh_arrays_immutable(cube6):
    with pytest.raises(ValueError):
        cube6.face_area[0] = 99.0
