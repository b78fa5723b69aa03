"""Tetrahedral meshes of polyhedral box domains.

A mesh is a conforming partition of a box into tetrahedra with full face
connectivity: every interior face knows its owner/neighbor pair and carries
a unit normal oriented owner -> neighbor (owner is always the cell with the
lower index).  All heavy data lives in read-only numpy arrays; `Face` is a
per-face record view for convenience and tests.

Built-in meshes subdivide each hexahedral grid cell into 6 tetrahedra
around the main diagonal (Kuhn subdivision), which keeps the whole family
shape regular under refinement: every cell is an affine image
``x = h * A @ x_ref + a`` of the unit reference tet with uniformly
conditioned ``A``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Mesh",
    "Face",
    "MeshError",
    "MeshFormatError",
    "MeshConformityError",
    "build_box_mesh",
    "read_mesh",
    "write_mesh",
    "cell_quadrature",
    "face_quadrature",
    "face_quadrature_all",
]

# Reference tetrahedron co{0, e1, e2, e3}: face l is opposite vertex l.
_TET_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])

DEFAULT_SHAPE_REGULARITY_CAP = 10.0


class MeshError(Exception):
    """Base class for mesh construction/ingestion failures."""


class MeshFormatError(MeshError):
    """Malformed mesh file (carries a line number when available)."""


class MeshConformityError(MeshError):
    """Mesh violates a conformity invariant (named in the message)."""


@dataclass(frozen=True)
class Face:
    """Record view of a single mesh face."""

    index: int
    vertex_ids: np.ndarray        # (3,) int
    vertex_coords: np.ndarray     # (3, 3)
    owner_cell: int
    neighbor_cell: int | None     # None on exterior faces
    normal: np.ndarray            # (3,) unit, owner -> neighbor
    area: float
    centroid: np.ndarray          # (3,)

    @property
    def kind(self) -> str:
        return "interior" if self.neighbor_cell is not None else "exterior"


class Mesh:
    """Immutable conforming tetrahedral mesh with face connectivity.

    Arrays (all read-only):
      vertices        (nv, 3)
      cells           (nc, 4)    vertex ids, positively oriented
      face_vertices   (nf, 3)
      face_owner      (nf,)      owner = lower adjacent cell index
      face_neighbor   (nf,)      -1 on exterior faces
      face_normal     (nf, 3)    unit, points owner -> neighbor (outward on
                                 exterior faces)
      face_area, face_centroid
      cell_faces      (nc, 4)    face id opposite local vertex l
      cell_face_sign  (nc, 4)    +1 where the cell owns the face
      cell_volumes, cell_centroids
      bary_grads      (nc, 4, 3) gradients of the 4 barycentric coordinates
      cell_affine_mats/offsets   A_E, a_E of x = h * A_E x_ref + a_E
    """

    def __init__(self, vertices, cells, *, shape_regularity_cap=DEFAULT_SHAPE_REGULARITY_CAP,
                 check_conformity=True):
        vertices = np.ascontiguousarray(vertices, dtype=float)
        cells = np.ascontiguousarray(cells, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError("vertices must be an (nv, 3) array")
        if cells.ndim != 2 or cells.shape[1] != 4:
            raise MeshError("cells must be an (nc, 4) array of vertex ids")
        if cells.size and (cells.min() < 0 or cells.max() >= len(vertices)):
            raise MeshConformityError("cell references a vertex id out of range")
        if len(cells) == 0:
            raise MeshError("mesh has no cells")

        self.vertices = vertices
        self.cells = self._orient_cells(vertices, cells)
        self.shape_regularity_cap = float(shape_regularity_cap)

        self._build_geometry()
        self._build_faces()
        if check_conformity:
            self._check_conformity()
        self._check_shape_regularity()
        self._freeze()

    # -- construction ------------------------------------------------------

    @staticmethod
    def _orient_cells(vertices, cells):
        v = vertices[cells]                       # (nc, 4, 3)
        vol6 = np.linalg.det(v[:, 1:] - v[:, :1])
        if np.any(np.abs(vol6) < 1e-14 * np.maximum(1.0, np.abs(vol6).max())):
            bad = int(np.argmin(np.abs(vol6)))
            raise MeshConformityError(f"cell {bad} is degenerate (zero volume)")
        cells = cells.copy()
        flip = vol6 < 0
        # swapping the last two vertices flips orientation, keeps the vertex set
        cells[flip, 2], cells[flip, 3] = cells[flip, 3], cells[flip, 2].copy()
        return cells

    def _build_geometry(self):
        v = self.vertices[self.cells]             # (nc, 4, 3)
        edges = v[:, 1:] - v[:, :1]               # (nc, 3, 3) rows are edge vectors
        vol6 = np.linalg.det(edges)
        self.cell_volumes = vol6 / 6.0
        self.cell_centroids = v.mean(axis=1)

        # diameters: max pairwise vertex distance
        ii, jj = np.triu_indices(4, k=1)
        d = np.linalg.norm(v[:, ii] - v[:, jj], axis=2)
        self.cell_diameters = d.max(axis=1)
        self.h = float(self.cell_diameters.max())

        # barycentric gradients: rows of inv(edge matrix) give grad(lambda_1..3)
        em = edges.transpose(0, 2, 1)             # columns = edge vectors
        inv = np.linalg.inv(em)                   # (nc, 3, 3)
        g123 = inv                                 # grad lambda_l = row l-1
        g0 = -g123.sum(axis=1, keepdims=True)
        self.bary_grads = np.concatenate([g0, g123], axis=1)  # (nc, 4, 3)

        # affine map to the reference tet, in the normalized form with h factored out
        self.cell_affine_mats = em / self.h
        self.cell_affine_offsets = v[:, 0].copy()

    def _build_faces(self):
        nc = len(self.cells)
        tris = self.cells[:, _TET_FACES]          # (nc, 4, 3)
        key = np.sort(tris.reshape(-1, 3), axis=1)
        order = np.lexsort((key[:, 2], key[:, 1], key[:, 0]))
        sk = key[order]
        new = np.ones(len(sk), dtype=bool)
        new[1:] = np.any(sk[1:] != sk[:-1], axis=1)
        group = np.cumsum(new) - 1                # face group per sorted incidence
        counts = np.bincount(group)
        if counts.max() > 2:
            raise MeshConformityError("a face is shared by more than two cells")

        incid_cell = order // 4                   # cell of each incidence
        incid_loc = order % 4

        nf = len(counts)
        face_owner = np.full(nf, -1, dtype=np.int64)
        face_neighbor = np.full(nf, -1, dtype=np.int64)
        face_loc_owner = np.zeros(nf, dtype=np.int64)
        face_loc_neighbor = np.zeros(nf, dtype=np.int64)

        first = new
        second = ~new
        face_owner[group[first]] = incid_cell[first]
        face_loc_owner[group[first]] = incid_loc[first]
        face_neighbor[group[second]] = incid_cell[second]
        face_loc_neighbor[group[second]] = incid_loc[second]

        # owner must be the lower cell index (spec'd orientation convention)
        swap = (face_neighbor >= 0) & (face_neighbor < face_owner)
        fo, fn = face_owner[swap], face_neighbor[swap]
        face_owner[swap], face_neighbor[swap] = fn, fo
        lo, ln = face_loc_owner[swap], face_loc_neighbor[swap]
        face_loc_owner[swap], face_loc_neighbor[swap] = ln, lo

        # deterministic face numbering: sorted by (owner, local face of owner)
        forder = np.lexsort((face_loc_owner, face_owner))
        rank = np.empty(nf, dtype=np.int64)
        rank[forder] = np.arange(nf)

        self.face_owner = face_owner[forder]
        self.face_neighbor = face_neighbor[forder]
        loc = face_loc_owner[forder]
        self.face_vertices = self.cells[self.face_owner[:, None], _TET_FACES[loc]]

        fv = self.vertices[self.face_vertices]    # (nf, 3, 3)
        avec = 0.5 * np.cross(fv[:, 1] - fv[:, 0], fv[:, 2] - fv[:, 0])
        area = np.linalg.norm(avec, axis=1)
        if np.any(area <= 0):
            raise MeshConformityError("degenerate face with zero area")
        normal = avec / area[:, None]
        self.face_centroid = fv.mean(axis=1)
        # orient away from the owner cell
        outward = np.einsum("ij,ij->i", normal,
                            self.face_centroid - self.cell_centroids[self.face_owner])
        normal[outward < 0] *= -1.0
        self.face_normal = normal
        self.face_area = area

        self.interior_mask = self.face_neighbor >= 0
        self.interior_faces = np.nonzero(self.interior_mask)[0]
        self.exterior_faces = np.nonzero(~self.interior_mask)[0]
        self.face_interior_id = np.full(nf, -1, dtype=np.int64)
        self.face_interior_id[self.interior_faces] = np.arange(len(self.interior_faces))

        # cell -> faces, in opposite-vertex order; sign +1 where cell is owner
        self.cell_faces = np.empty((nc, 4), dtype=np.int64)
        self.cell_face_sign = np.empty((nc, 4))
        self.cell_faces[face_owner, face_loc_owner] = rank
        self.cell_face_sign[face_owner, face_loc_owner] = 1.0
        intr = face_neighbor >= 0
        self.cell_faces[face_neighbor[intr], face_loc_neighbor[intr]] = rank[intr]
        self.cell_face_sign[face_neighbor[intr], face_loc_neighbor[intr]] = -1.0

    def _check_conformity(self):
        # watertight boundary: exterior area vectors must sum to zero
        ext = self.exterior_faces
        resid = (self.face_normal[ext] * self.face_area[ext, None]).sum(axis=0)
        scale = self.face_area[ext].sum()
        if np.linalg.norm(resid) > 1e-10 * max(scale, 1.0):
            raise MeshConformityError(
                "boundary is not closed (exterior area vectors do not cancel); "
                "mesh has cracks or overlapping cells")

        # hanging nodes: no vertex may lie inside or on a cell it is not part of
        self._check_hanging_nodes()

    def _check_hanging_nodes(self):
        verts = self.vertices
        cells = self.cells
        lo = verts[cells].min(axis=1) - 1e-12
        hi = verts[cells].max(axis=1) + 1e-12
        tol = 1e-10
        for vid in range(len(verts)):
            p = verts[vid]
            cand = np.nonzero(np.all((p >= lo) & (p <= hi), axis=1))[0]
            for c in cand:
                if vid in cells[c]:
                    continue
                # barycentric coordinates of p in cell c
                lam = 0.25 + self.bary_grads[c] @ (p - self.cell_centroids[c])
                if np.all(lam >= -tol):
                    raise MeshConformityError(
                        f"vertex {vid} lies on/inside cell {c} without being one of "
                        "its vertices (hanging node or overlap)")

    def _check_shape_regularity(self):
        cond = np.linalg.cond(self.cell_affine_mats)
        self.max_condition_number = float(cond.max())
        if self.max_condition_number > self.shape_regularity_cap:
            raise MeshConformityError(
                f"shape regularity violated: max condition number "
                f"{self.max_condition_number:.3g} exceeds cap {self.shape_regularity_cap:g}")

    def _freeze(self):
        for name, val in vars(self).items():
            if isinstance(val, np.ndarray):
                val.flags.writeable = False

    # -- queries -----------------------------------------------------------

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_faces(self):
        return len(self.face_owner)

    @property
    def n_interior_faces(self):
        return len(self.interior_faces)

    @property
    def domain_volume(self):
        return float(self.cell_volumes.sum())

    def face(self, i) -> Face:
        nb = int(self.face_neighbor[i])
        return Face(
            index=int(i),
            vertex_ids=self.face_vertices[i],
            vertex_coords=self.vertices[self.face_vertices[i]],
            owner_cell=int(self.face_owner[i]),
            neighbor_cell=None if nb < 0 else nb,
            normal=self.face_normal[i],
            area=float(self.face_area[i]),
            centroid=self.face_centroid[i],
        )

    @property
    def faces(self):
        return [self.face(i) for i in range(self.n_faces)]

    def __repr__(self):
        return (f"Mesh({self.n_vertices} vertices, {self.n_cells} cells, "
                f"{self.n_faces} faces of which {self.n_interior_faces} interior, "
                f"h={self.h:.4g})")


def build_box_mesh(extents, n, *, origin=(0.0, 0.0, 0.0),
                   shape_regularity_cap=DEFAULT_SHAPE_REGULARITY_CAP) -> Mesh:
    """Kuhn 6-tet mesh of the box ``origin + [0,extents]`` with n=(n1,n2,n3) cells per axis.

    Produces ``6*n1*n2*n3`` tetrahedra, all congruent up to reflection, so the
    shape-regularity cap is met with a constant independent of n.
    """
    n = tuple(int(k) for k in np.atleast_1d(n).ravel())
    if len(n) == 1:
        n = n * 3
    if len(n) != 3 or any(k < 1 for k in n):
        raise ValueError(f"cells-per-axis must be three integers >= 1, got {n}")
    extents = np.asarray(extents, dtype=float).ravel()
    if extents.size == 1:
        extents = np.repeat(extents, 3)
    if extents.size != 3 or np.any(extents <= 0) or not np.all(np.isfinite(extents)):
        raise ValueError(f"box extents must be three positive numbers, got {extents}")
    origin = np.asarray(origin, dtype=float)

    n1, n2, n3 = n
    xs = [origin[d] + extents[d] * np.arange(n[d] + 1) / n[d] for d in range(3)]
    X, Y, Z = np.meshgrid(xs[0], xs[1], xs[2], indexing="ij")
    vertices = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)

    def vid(i, j, k):
        return (i * (n2 + 1) + j) * (n3 + 1) + k

    # the six path tetrahedra of the unit cube, as corner offsets
    perms = list(itertools.permutations(range(3)))
    cube_tets = []
    for perm in perms:
        p = np.zeros(3, dtype=int)
        tet = [p.copy()]
        for ax in perm:
            p = p.copy()
            p[ax] += 1
            tet.append(p.copy())
        cube_tets.append(np.array(tet))

    cells = []
    for i in range(n1):
        for j in range(n2):
            for k in range(n3):
                base = np.array([i, j, k])
                for tet in cube_tets:
                    cells.append([vid(*(base + off)) for off in tet])
    cells = np.array(cells, dtype=np.int64)

    # built meshes are conforming by construction; skip the O(nv*nc) check
    return Mesh(vertices, cells, shape_regularity_cap=shape_regularity_cap,
                check_conformity=False)


def read_mesh(path, *, shape_regularity_cap=DEFAULT_SHAPE_REGULARITY_CAP) -> Mesh:
    """Read the ASCII tetmesh format.

    Format: header ``tetmesh 1``; then ``vertices N`` followed by N lines of
    ``x y z``; then ``cells M`` followed by M lines of 4 zero-based vertex
    indices.  Whitespace-delimited, ``#`` starts a comment.
    """
    tokens = []  # (line_number, token)
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0]
            tokens.extend((ln, tok) for tok in body.split())

    pos = 0

    def take(what, conv=str):
        nonlocal pos
        if pos >= len(tokens):
            ln = tokens[-1][0] if tokens else 0
            raise MeshFormatError(f"line {ln}: unexpected end of file, expected {what}")
        ln, tok = tokens[pos]
        pos += 1
        try:
            return conv(tok)
        except ValueError:
            raise MeshFormatError(f"line {ln}: expected {what}, got {tok!r}") from None

    magic = take("header 'tetmesh'")
    if magic != "tetmesh":
        ln = tokens[0][0]
        raise MeshFormatError(f"line {ln}: not a tetmesh file (header {magic!r})")
    version = take("format version", int)
    if version != 1:
        raise MeshFormatError(f"unsupported tetmesh version {version}")

    kw = take("'vertices'")
    if kw != "vertices":
        raise MeshFormatError(f"expected 'vertices' section, got {kw!r}")
    nv = take("vertex count", int)
    verts = np.empty((nv, 3))
    for i in range(nv):
        for d in range(3):
            verts[i, d] = take("vertex coordinate", float)

    kw = take("'cells'")
    if kw != "cells":
        raise MeshFormatError(f"expected 'cells' section, got {kw!r}")
    nc = take("cell count", int)
    cells = np.empty((nc, 4), dtype=np.int64)
    for i in range(nc):
        for d in range(4):
            cells[i, d] = take("vertex index", int)

    if pos != len(tokens):
        ln = tokens[pos][0]
        raise MeshFormatError(f"line {ln}: trailing data after cell list")

    return Mesh(verts, cells, shape_regularity_cap=shape_regularity_cap)


def write_mesh(mesh: Mesh, path):
    """Write a mesh in the ASCII tetmesh format (deterministic output)."""
    with open(path, "w") as fh:
        fh.write("tetmesh 1\n")
        fh.write(f"vertices {mesh.n_vertices}\n")
        for p in mesh.vertices:
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        fh.write(f"cells {mesh.n_cells}\n")
        for c in mesh.cells:
            fh.write(f"{c[0]} {c[1]} {c[2]} {c[3]}\n")


# -- quadrature -------------------------------------------------------------

# degree-2 rule on the reference tetrahedron: 4 symmetric points, weight 1/4
_TET_A = 0.5854101966249685
_TET_B = 0.1381966011250105
_TET_POINTS_D2 = np.array([
    [_TET_A, _TET_B, _TET_B, _TET_B],
    [_TET_B, _TET_A, _TET_B, _TET_B],
    [_TET_B, _TET_B, _TET_A, _TET_B],
    [_TET_B, _TET_B, _TET_B, _TET_A],
])
_TET_POINTS_D1 = np.array([[0.25, 0.25, 0.25, 0.25]])
# degree-3 Keast rule: centroid (negative weight) plus 4 symmetric points
_TET_POINTS_D3 = np.array([
    [0.25, 0.25, 0.25, 0.25],
    [0.5, 1 / 6, 1 / 6, 1 / 6],
    [1 / 6, 0.5, 1 / 6, 1 / 6],
    [1 / 6, 1 / 6, 0.5, 1 / 6],
    [1 / 6, 1 / 6, 1 / 6, 0.5],
])
_TET_WEIGHTS_D3 = np.array([-4 / 5, 9 / 20, 9 / 20, 9 / 20, 9 / 20])

# triangle rules in barycentric coordinates
_TRI_POINTS_D1 = np.array([[1 / 3, 1 / 3, 1 / 3]])
_TRI_POINTS_D2 = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
_TRI_POINTS_D3 = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [0.6, 0.2, 0.2], [0.2, 0.6, 0.2], [0.2, 0.2, 0.6],
])
_TRI_WEIGHTS_D3 = np.array([-27 / 48, 25 / 48, 25 / 48, 25 / 48])


def _tet_rule(degree):
    if degree == 1:
        return _TET_POINTS_D1, np.array([1.0])
    if degree == 2:
        return _TET_POINTS_D2, np.full(4, 0.25)
    if degree == 3:
        return _TET_POINTS_D3, _TET_WEIGHTS_D3
    raise ValueError(f"unsupported cell quadrature degree {degree}")


def _tri_rule(degree):
    if degree == 1:
        return _TRI_POINTS_D1, np.array([1.0])
    if degree == 2:
        return _TRI_POINTS_D2, np.full(3, 1 / 3)
    if degree == 3:
        return _TRI_POINTS_D3, _TRI_WEIGHTS_D3
    raise ValueError(f"unsupported face quadrature degree {degree}")


def cell_quadrature(mesh: Mesh, degree=2):
    """Quadrature on every cell: points (nc, nq, 3) and weights (nc, nq).

    Exact for polynomials up to ``degree`` in {1, 2, 3} on each tetrahedron;
    weights sum to the cell volume.
    """
    bary, wref = _tet_rule(degree)
    corners = mesh.vertices[mesh.cells]           # (nc, 4, 3)
    pts = np.einsum("qk,nkd->nqd", bary, corners)
    w = mesh.cell_volumes[:, None] * wref[None, :]
    return pts, w


def face_quadrature(face: Face, degree=2):
    """Quadrature rule on one face as a list of (point, weight) pairs.

    Degree 1 is the centroid rule; degree 2 uses the three edge midpoints with
    weight area/3 each (exact for quadratics on the triangle); degree 3 adds
    the classical 4-point cubic rule.
    """
    bary, wref = _tri_rule(degree)
    pts = bary @ face.vertex_coords
    return [(pts[q], face.area * wref[q]) for q in range(len(bary))]


def face_quadrature_all(mesh: Mesh, degree=2, faces=None):
    """Vectorized face quadrature: points (nf, nq, 3) and weights (nf, nq)."""
    bary, wref = _tri_rule(degree)
    idx = np.arange(mesh.n_faces) if faces is None else np.asarray(faces)
    corners = mesh.vertices[mesh.face_vertices[idx]]   # (nf, 3, 3)
    pts = np.einsum("qk,nkd->nqd", bary, corners)
    w = mesh.face_area[idx, None] * wref[None, :]
    return pts, w
