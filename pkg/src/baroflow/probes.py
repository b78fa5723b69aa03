"""Empirical constants of the discrete functional inequalities.

Each probe measures, on one mesh, the largest ratio  lhs / (scaling * rhs)
over a concrete family of fields, i.e. a lower bound for the best constant
in the corresponding inequality.  None of the inequalities comes with an
absolute constant, so the verification contract is *stability*: the
measured constant must not drift across refinement levels.

Families are chosen so their sup is meaningful under refinement:

* inverse/trace/Poincare inequalities have per-cell extremizers that can be
  maximized exactly (indicator fields, geometric ratios, small eigenproblems);
* the L^6 embeddings add projections of a fixed family of smooth fields plus
  seeded random fields, whose ratios converge as h -> 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import (CRField, QField, broken_grad, broken_norm, cell_average,
                     jump_seminorm, project_V)
from .mesh import Mesh

__all__ = [
    "ProbeResult",
    "probe_inverse_inequality",
    "probe_trace_inequality",
    "probe_poincare",
    "probe_l6_jump",
    "probe_l6_gradient",
    "probe_cr_projection_error",
    "relative_spread",
    "smooth_probe_family",
]


@dataclass
class ProbeResult:
    name: str
    h: float
    constant: float
    detail: str = ""


def relative_spread(constants):
    """(max - min) / mean over refinement levels; the stability metric."""
    c = np.asarray(constants, dtype=float)
    return float((c.max() - c.min()) / c.mean())


def _random_qfields(mesh, n, seed):
    rng = np.random.default_rng(seed)
    return [QField(mesh, rng.standard_normal(mesh.n_cells)) for _ in range(n)]


def smooth_probe_family(seed=2024, n=4):
    """Fixed smooth vector fields vanishing on the unit-box boundary."""
    rng = np.random.default_rng(seed)
    fams = []
    for _ in range(n):
        k = rng.integers(1, 3, size=(3, 3))
        amp = rng.standard_normal(3)

        def f(x, k=k, amp=amp):
            out = np.empty((len(x), 3))
            for i in range(3):
                out[:, i] = amp[i] * (np.sin(np.pi * k[i, 0] * x[:, 0])
                                      * np.sin(np.pi * k[i, 1] * x[:, 1])
                                      * np.sin(np.pi * k[i, 2] * x[:, 2]))
            return out
        fams.append(f)
    return fams


def probe_inverse_inequality(mesh: Mesh, p, q, *, n_random=8, seed=2024) -> ProbeResult:
    """||v||_p <= C h^{3(1/p - 1/q)} ||v||_q over piecewise constants, q <= p.

    The family contains every single-cell indicator (the exact extremizer
    for p > q on quasi-uniform meshes) plus seeded random fields.
    """
    if q > p:
        raise ValueError("inverse inequality needs q <= p")
    inv_p = 0.0 if np.isinf(p) else 1.0 / p
    scale = mesh.h ** (3.0 * (inv_p - 1.0 / q))
    vol = mesh.cell_volumes

    # single-cell indicators: ratio is |E|^{1/p - 1/q} exactly
    ratios = vol ** inv_p / vol ** (1.0 / q)
    best = float(ratios.max())

    for v in _random_qfields(mesh, n_random, seed):
        best = max(best, broken_norm(v, p) / broken_norm(v, q))
    return ProbeResult(name=f"inverse_L{p}_L{q}", h=mesh.h, constant=best / scale)


def probe_trace_inequality(mesh: Mesh, p, *, seed=2024) -> ProbeResult:
    """||v||_{L^p(F)} <= C h^{-1/p} ||v||_{L^p(E)} per cell face, v constant.

    For piecewise constants the field value cancels: the sharp per-cell
    constant is the geometric ratio (|F| h / |E|)^{1/p}, maximized exactly.
    """
    area = mesh.face_area[mesh.cell_faces]          # (nc, 4)
    ratio = (area * mesh.h / mesh.cell_volumes[:, None]) ** (1.0 / p)
    return ProbeResult(name=f"trace_L{p}", h=mesh.h, constant=float(ratio.max()))


def probe_poincare(mesh: Mesh) -> ProbeResult:
    """||v - cell_avg v||_{L^2(E)} <= C h ||grad v||_{L^2(E)} for affine v.

    Exact sup over affine fields per cell: the largest eigenvalue of the
    second-moment matrix int (x - centroid)(x - centroid)^T scaled by |E| h^2.
    """
    verts = mesh.vertices[mesh.cells]               # (nc, 4, 3)
    d = verts - mesh.cell_centroids[:, None, :]
    # exact second moment of a tetrahedron about its centroid:
    # |E|/20 * (sum_i d_i d_i^T)  with d_i the centered vertices
    M = np.einsum("nki,nkj->nij", d, d) * (mesh.cell_volumes / 20.0)[:, None, None]
    lam = np.linalg.eigvalsh(M).max(axis=1)
    const = np.sqrt(lam / mesh.cell_volumes) / mesh.h
    return ProbeResult(name="poincare", h=mesh.h, constant=float(const.max()))


def probe_l6_jump(mesh: Mesh, *, n_random=6, seed=2024) -> ProbeResult:
    """||v||_{L6}^2 <= C (jump seminorm^2 + ||v||_{L2}^2) over piecewise constants."""
    best = 0.0
    # single-cell indicators
    vol = mesh.cell_volumes
    jump_w = np.zeros(mesh.n_cells)
    intr = mesh.interior_faces
    w = mesh.face_area[intr] / mesh.h
    np.add.at(jump_w, mesh.face_owner[intr], w)
    np.add.at(jump_w, mesh.face_neighbor[intr], w)
    best = float((vol ** (1.0 / 3.0) / (jump_w + vol)).max())
    for v in _random_qfields(mesh, n_random, seed):
        num = broken_norm(v, 6) ** 2
        den = jump_seminorm(v) ** 2 + broken_norm(v, 2) ** 2
        best = max(best, num / den)
    return ProbeResult(name="l6_jump", h=mesh.h, constant=best)


def probe_l6_gradient(mesh: Mesh, *, seed=2024) -> ProbeResult:
    """||v||_{L6}^2 <= C ||grad_h v||_{L2}^2 over zero-trace CR projections.

    Probed on projections of a fixed smooth family (their ratios converge
    under refinement, so the constant is stable by construction).
    """
    best = 0.0
    for f in smooth_probe_family(seed):
        v = project_V(f, mesh, zero_boundary=True)
        num = broken_norm(v, 6) ** 2
        den = broken_norm(v, kind="broken_h1") ** 2
        if den > 0:
            best = max(best, num / den)
    return ProbeResult(name="l6_gradient", h=mesh.h, constant=best)


def probe_cr_projection_error(mesh: Mesh, f, grad_f=None):
    """L2 projection error of the CR interpolant of a smooth field.

    Returns (||Pv - v||_{L2}, h); the measured convergence order across
    levels is the subject of the projection-estimate criterion.
    """
    from .mesh import cell_quadrature
    v = project_V(f, mesh, zero_boundary=False)
    pts, w = cell_quadrature(mesh, 2)
    nc, nq = w.shape
    flat = pts.reshape(-1, 3)
    cells = np.repeat(np.arange(nc), nq)
    diff = v.eval_in_cells(flat, cells) - np.asarray(f(flat))
    err2 = float(np.sum(w * (diff ** 2).sum(axis=1).reshape(nc, nq)))
    return np.sqrt(err2), mesh.h
