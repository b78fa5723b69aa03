"""Discrete fields on a tetrahedral mesh.

Two spaces:

* ``QField`` -- piecewise constants, one value (scalar or vector) per cell.
* ``CRField`` -- piecewise-affine vector fields whose single degree of
  freedom per face is the *face average*.  Storing face means makes the
  cross-face continuity constraint structural: in/out face averages agree
  because they are literally the same number.  Fields in the zero-trace
  subspace additionally carry zero DOFs on exterior faces.

The cell-affine representative of a CR field is reconstructed from its four
face means through the nonconforming P1 basis ``theta_l = 1 - 3 lambda_l``
(lambda_l the barycentric coordinate opposite face l), whose gradient on a
cell is ``area * outward_normal / volume``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh, cell_quadrature, face_quadrature_all, _tet_rule, _tri_rule

__all__ = [
    "QField",
    "CRField",
    "FaceTracePair",
    "project_Q",
    "project_V",
    "cell_average",
    "face_average_normal_velocity",
    "broken_grad",
    "broken_div",
    "traces",
    "jumps",
    "broken_norm",
    "jump_seminorm",
    "write_qfield",
    "read_qfield",
    "write_crfield",
    "read_crfield",
]


@dataclass
class QField:
    """Piecewise-constant field: one value per cell (any trailing shape)."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if len(self.values) != self.mesh.n_cells:
            raise ValueError("QField length does not match the number of cells")

    @property
    def is_scalar(self):
        return self.values.ndim == 1

    def copy(self):
        return QField(self.mesh, self.values.copy())

    def integral(self):
        """Exact integral over the domain."""
        vol = self.mesh.cell_volumes
        return np.tensordot(vol, self.values, axes=(0, 0))

    def __call__(self, points, cell_ids):
        """Evaluate at points (n, 3) lying in the given cells."""
        return self.values[cell_ids]


@dataclass
class CRField:
    """Crouzeix-Raviart vector field: one 3-vector face mean per face."""

    mesh: Mesh
    values: np.ndarray
    zero_boundary: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_faces, 3):
            raise ValueError("CRField values must have shape (n_faces, 3)")
        if self.zero_boundary:
            self.values[~self.mesh.interior_mask] = 0.0

    def copy(self):
        return CRField(self.mesh, self.values.copy(), self.zero_boundary)

    def cell_dofs(self):
        """Face DOFs per cell in opposite-vertex order: (nc, 4, 3)."""
        return self.values[self.mesh.cell_faces]

    def eval_in_cells(self, points, cell_ids):
        """Evaluate the cell-affine representative at points (n, 3) in given cells.

        Uses u(x) = sum_l U_l (1/4 - 3 grad(lambda_l) . (x - centroid)).
        """
        m = self.mesh
        d = np.asarray(points) - m.cell_centroids[cell_ids]          # (n, 3)
        g = m.bary_grads[cell_ids]                                   # (n, 4, 3)
        w = 0.25 - 3.0 * np.einsum("nld,nd->nl", g, d)               # (n, 4)
        dofs = self.values[m.cell_faces[cell_ids]]                   # (n, 4, 3)
        return np.einsum("nl,nli->ni", w, dofs)


def project_Q(f, mesh: Mesh, *, degree=2) -> QField:
    """Cell-average projection of a function onto piecewise constants.

    ``f`` maps an (n, 3) array of points to scalars (n,) or vectors (n, 3);
    cell averages are computed with the degree-2 cell quadrature.  Averaging
    uses the reference weights (which sum to one exactly), so projecting a
    field that is already piecewise constant returns it bit-identically.
    """
    pts, _ = cell_quadrature(mesh, degree)
    _, wref = _tet_rule(degree)
    nq = pts.shape[1]
    vals = np.asarray(f(pts.reshape(-1, 3)), dtype=float)
    vals = vals.reshape((mesh.n_cells, nq) + vals.shape[1:])
    avg = np.einsum("q,nq...->n...", wref, vals)
    return QField(mesh, avg)


def project_V(f, mesh: Mesh, *, zero_boundary=True, degree=2) -> CRField:
    """Face-mean projection onto the Crouzeix-Raviart space.

    Each face DOF is the face average of ``f`` (degree-2 face quadrature,
    i.e. edge midpoints, exact for quadratics).  With ``zero_boundary`` the
    exterior DOFs are zeroed to land in the zero-trace subspace.
    """
    pts, _ = face_quadrature_all(mesh, degree)
    _, wref = _tri_rule(degree)
    nq = pts.shape[1]
    vals = np.asarray(f(pts.reshape(-1, 3)), dtype=float).reshape(mesh.n_faces, nq, 3)
    means = np.einsum("q,nqi->ni", wref, vals)
    return CRField(mesh, means, zero_boundary=zero_boundary)


def cell_average(v: CRField) -> QField:
    """Cell-average of a CR field: mean of its four face DOFs (exact)."""
    return QField(v.mesh, v.cell_dofs().mean(axis=1))


def face_average_normal_velocity(v: CRField) -> np.ndarray:
    """Face average of v . n per face; exact for CR fields (the DOF itself)."""
    return np.einsum("fi,fi->f", v.values, v.mesh.face_normal)


def broken_grad(v: CRField) -> QField:
    """Elementwise gradient: constant 3x3 per cell, convention G[i, j] = d u_i / d x_j."""
    m = v.mesh
    g = -3.0 * m.bary_grads                       # (nc, 4, 3) CR basis gradients
    grad = np.einsum("nli,nlj->nij", v.cell_dofs(), g)
    return QField(m, grad)


def broken_div(v: CRField) -> QField:
    """Elementwise divergence: trace of the broken gradient."""
    m = v.mesh
    g = -3.0 * m.bary_grads
    div = np.einsum("nli,nli->n", v.cell_dofs(), g)
    return QField(m, div)


@dataclass
class FaceTracePair:
    """In/out traces of a field on one face, at face quadrature points.

    ``vin`` is the owner-side trace; ``vout`` the neighbor-side trace and is
    None on exterior faces, where jump and average are undefined.
    """

    face_index: int
    vin: np.ndarray
    _vout: np.ndarray | None

    @property
    def vout(self):
        if self._vout is None:
            raise ValueError(
                f"face {self.face_index} is exterior: only the 'in' trace exists")
        return self._vout

    @property
    def jump(self):
        return self.vout - self.vin

    @property
    def average(self):
        return 0.5 * (self.vout + self.vin)


def traces(v, face_index, *, degree=2) -> FaceTracePair:
    """Traces of a QField or CRField on one face at its quadrature points."""
    m = v.mesh
    own = int(m.face_owner[face_index])
    nb = int(m.face_neighbor[face_index])
    pts, _ = face_quadrature_all(m, degree, faces=[face_index])
    pts = pts[0]
    nq = len(pts)
    if isinstance(v, QField):
        vin = np.broadcast_to(v.values[own], (nq,) + np.shape(v.values[own])).copy()
        vout = None
        if nb >= 0:
            vout = np.broadcast_to(v.values[nb], vin.shape).copy()
    elif isinstance(v, CRField):
        vin = v.eval_in_cells(pts, np.full(nq, own))
        vout = v.eval_in_cells(pts, np.full(nq, nb)) if nb >= 0 else None
    else:
        raise TypeError(f"cannot take traces of {type(v).__name__}")
    return FaceTracePair(int(face_index), vin, vout)


def jumps(v: QField):
    """Jumps and averages of a QField across all interior faces.

    Returns (jump, avg) arrays over interior faces, ordered like
    ``mesh.interior_faces``; jump = out - in with the owner on the in side.
    """
    m = v.mesh
    own = m.face_owner[m.interior_faces]
    nb = m.face_neighbor[m.interior_faces]
    vi, vo = v.values[own], v.values[nb]
    return vo - vi, 0.5 * (vo + vi)


def _magnitude(vals):
    """Pointwise Frobenius magnitude over trailing axes."""
    if vals.ndim == 1:
        return np.abs(vals)
    return np.sqrt((vals ** 2).reshape(len(vals), -1).sum(axis=1))


def broken_norm(v, p=2, kind="Lp"):
    """Broken norms of discrete fields.

    kind="Lp":      L^p norm, p in {1, 2, gamma-like floats, 6, inf}.
                    Exact for QFields; degree-2 quadrature for CR fields.
    kind="broken_h1":  L^2 norm of the broken gradient (CR fields).
    kind="jump":    face-jump seminorm sqrt(sum_faces int [[v]]^2 / h).
    """
    if kind == "broken_h1":
        if not isinstance(v, CRField):
            raise TypeError("broken_h1 norm needs a CRField")
        g = broken_grad(v)
        return float(np.sqrt(np.sum(v.mesh.cell_volumes
                                    * np.einsum("nij,nij->n", g.values, g.values))))
    if kind == "jump":
        return jump_seminorm(v)
    if kind != "Lp":
        raise ValueError(f"unknown norm kind {kind!r}")

    m = v.mesh
    if isinstance(v, QField):
        mag = _magnitude(v.values)
        if np.isinf(p):
            return float(mag.max())
        return float(np.sum(m.cell_volumes * mag ** p) ** (1.0 / p))
    if isinstance(v, CRField):
        pts, w = cell_quadrature(m, 2)
        nq = pts.shape[1]
        cells = np.repeat(np.arange(m.n_cells), nq)
        vals = v.eval_in_cells(pts.reshape(-1, 3), cells)
        mag = _magnitude(vals).reshape(m.n_cells, nq)
        if np.isinf(p):
            # affine per cell: the max lives at the vertices
            vtx = m.vertices[m.cells].reshape(-1, 3)
            vv = v.eval_in_cells(vtx, np.repeat(np.arange(m.n_cells), 4))
            return float(_magnitude(vv).max())
        return float(np.sum(w * mag ** p) ** (1.0 / p))
    raise TypeError(f"cannot take norms of {type(v).__name__}")


def jump_seminorm(v) -> float:
    """sqrt( sum over interior faces of int_F |[[v]]|^2 / h )."""
    m = v.mesh
    if isinstance(v, QField):
        jmp, _ = jumps(v)
        mag2 = _magnitude(jmp) ** 2
        return float(np.sqrt(np.sum(m.face_area[m.interior_faces] * mag2) / m.h))
    if isinstance(v, CRField):
        pts, w = face_quadrature_all(m, 2, faces=m.interior_faces)
        nq = pts.shape[1]
        own = np.repeat(m.face_owner[m.interior_faces], nq)
        nb = np.repeat(m.face_neighbor[m.interior_faces], nq)
        flat = pts.reshape(-1, 3)
        jmp = v.eval_in_cells(flat, nb) - v.eval_in_cells(flat, own)
        mag2 = (_magnitude(jmp) ** 2).reshape(len(m.interior_faces), nq)
        return float(np.sqrt(np.sum(w * mag2) / m.h))
    raise TypeError(f"cannot take jump seminorm of {type(v).__name__}")


# -- snapshots ---------------------------------------------------------------

def write_qfield(field: QField, path):
    vals = field.values.reshape(field.mesh.n_cells, -1)
    with open(path, "w") as fh:
        fh.write(f"qfield {vals.shape[0]} {vals.shape[1]}\n")
        for row in vals:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def read_qfield(path, mesh: Mesh) -> QField:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "qfield":
            raise ValueError(f"{path}: not a qfield snapshot")
        n, width = int(header[1]), int(header[2])
        data = np.loadtxt(fh, ndmin=2)
    if data.shape != (n, width) or n != mesh.n_cells:
        raise ValueError(f"{path}: snapshot shape {data.shape} does not match mesh")
    return QField(mesh, data[:, 0] if width == 1 else data)


def write_crfield(field: CRField, path):
    with open(path, "w") as fh:
        fh.write(f"crfield {field.mesh.n_faces} 3\n")
        for row in field.values:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def read_crfield(path, mesh: Mesh) -> CRField:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "crfield":
            raise ValueError(f"{path}: not a crfield snapshot")
        n = int(header[1])
        data = np.loadtxt(fh, ndmin=2)
    if data.shape != (n, 3) or n != mesh.n_faces:
        raise ValueError(f"{path}: snapshot shape {data.shape} does not match mesh")
    return CRField(mesh, data, zero_boundary=False)
