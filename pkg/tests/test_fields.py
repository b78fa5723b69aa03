"""Discrete spaces: projections, traces, broken operators and norms."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from baroflow.fields import (CRField, FaceTracePair, QField, broken_div,
                             broken_grad, broken_norm, cell_average, jumps,
                             jump_seminorm, project_Q, project_V, read_crfield,
                             read_qfield, traces, write_crfield, write_qfield)
from baroflow.mesh import build_box_mesh
from baroflow.diagnostics import fit_loglog


@pytest.fixture(scope="module")
def mesh():
    return build_box_mesh((1.0, 1.0, 1.0), (2, 2, 2))


def locate_cells(mesh, pts):
    out = np.empty(len(pts), dtype=int)
    for i, p in enumerate(pts):
        lam = 0.25 + np.einsum("nld,nd->nl", mesh.bary_grads,
                               p - mesh.cell_centroids)
        out[i] = int(np.argmax(np.all(lam >= -1e-12, axis=1)))
    return out


# -- projections ---------------------------------------------------------------

def test_project_Q_constant(mesh):
    q = project_Q(lambda x: np.full(len(x), 3.25), mesh)
    assert np.abs(q.values - 3.25).max() < 1e-14


def test_project_Q_affine_is_centroid_value(mesh):
    b = np.array([1.0, -2.0, 0.5])
    q = project_Q(lambda x: x @ b + 0.25, mesh)
    expect = mesh.cell_centroids @ b + 0.25
    assert np.abs(q.values - expect).max() < 1e-13


def test_project_Q_quadratic_integral(mesh):
    # sum |E| PiQ(x^2) equals int x^2 = 1/3 (degree-2 quadrature is exact)
    q = project_Q(lambda x: x[:, 0] ** 2, mesh)
    assert q.integral() == pytest.approx(1.0 / 3.0, abs=1e-13)


def test_project_Q_idempotent(mesh):
    rng = np.random.default_rng(5)
    q = QField(mesh, rng.standard_normal(mesh.n_cells))
    pts_cache = {}

    def as_function(x):
        key = x.tobytes()
        if key not in pts_cache:
            pts_cache[key] = locate_cells(mesh, x)
        return q.values[pts_cache[key]]
    q2 = project_Q(as_function, mesh)
    assert np.array_equal(q2.values, q.values)  # bit-identical projection


def test_project_V_affine_reproduction(mesh):
    B = np.array([[1.0, 2.0, -1.0], [0.0, 0.5, 3.0], [2.0, 0.0, 1.0]])
    c = np.array([0.1, -0.2, 0.7])
    f = lambda x: x @ B.T + c
    v = project_V(f, mesh, zero_boundary=False)
    rng = np.random.default_rng(0)
    pts = rng.random((100, 3))
    cells = locate_cells(mesh, pts)
    assert np.abs(v.eval_in_cells(pts, cells) - f(pts)).max() < 1e-13


def test_project_V_zero(mesh):
    v = project_V(lambda x: np.zeros((len(x), 3)), mesh)
    assert np.all(v.values == 0.0)


def test_project_V_zero_boundary_dofs(mesh):
    v = project_V(lambda x: np.ones((len(x), 3)), mesh, zero_boundary=True)
    assert np.all(v.values[~mesh.interior_mask] == 0.0)
    assert np.all(v.values[mesh.interior_mask] == 1.0)


def test_project_V_l2_convergence_order():
    # projection error of a smooth field decays with order >= 1 (here ~2)
    def f(x):
        out = np.empty((len(x), 3))
        out[:, 0] = np.sin(2 * np.pi * x[:, 1])
        out[:, 1] = np.sin(2 * np.pi * x[:, 2])
        out[:, 2] = np.cos(2 * np.pi * x[:, 0])
        return out
    errs, hs = [], []
    for n in (2, 4, 8):
        m = build_box_mesh((1.0, 1.0, 1.0), (n, n, n))
        v = project_V(f, m, zero_boundary=False)
        from baroflow.mesh import cell_quadrature
        pts, w = cell_quadrature(m, 2)
        flat = pts.reshape(-1, 3)
        cells = np.repeat(np.arange(m.n_cells), pts.shape[1])
        diff = v.eval_in_cells(flat, cells) - f(flat)
        errs.append(np.sqrt(np.sum(w * (diff ** 2).sum(axis=1).reshape(w.shape))))
        hs.append(m.h)
    slope, r2 = fit_loglog(hs, errs)
    assert slope >= 1.0
    assert r2 > 0.95


# -- cell averages and broken operators ------------------------------------------

def test_cell_average_of_affine(mesh):
    B = np.diag([1.0, 2.0, 3.0])
    v = project_V(lambda x: x @ B.T, mesh, zero_boundary=False)
    qc = cell_average(v)
    assert np.abs(qc.values - mesh.cell_centroids @ B.T).max() < 1e-13


def test_broken_grad_of_affine(mesh):
    B = np.array([[0.0, 1.0, 2.0], [1.0, 0.0, -1.0], [0.5, 0.5, 0.5]])
    v = project_V(lambda x: x @ B.T, mesh, zero_boundary=False)
    g = broken_grad(v)
    assert np.abs(g.values - B).max() < 1e-13
    d = broken_div(v)
    assert np.abs(d.values - np.trace(B)).max() < 1e-13


def test_broken_grad_zero(mesh):
    v = CRField(mesh, np.zeros((mesh.n_faces, 3)))
    assert np.all(broken_grad(v).values == 0.0)


def test_discrete_divergence_theorem(mesh):
    # int div_h v = sum of boundary face fluxes = 0 for zero-trace fields;
    # oracle: the per-cell face-flux sums
    rng = np.random.default_rng(42)
    v = CRField(mesh, rng.standard_normal((mesh.n_faces, 3)), zero_boundary=True)
    div_int = broken_div(v).integral()
    assert abs(div_int) < 1e-12
    flux_oracle = 0.0
    for c in range(mesh.n_cells):
        for l in range(4):
            f = mesh.cell_faces[c, l]
            s = mesh.cell_face_sign[c, l]
            flux_oracle += mesh.face_area[f] * (v.values[f] @ mesh.face_normal[f]) * s
    assert abs(div_int - flux_oracle) < 1e-12


# -- traces, jumps -----------------------------------------------------------------

def test_traces_constant_qfield(mesh):
    q = QField(mesh, np.full(mesh.n_cells, 7.5))
    tp = traces(q, mesh.interior_faces[0])
    assert np.all(tp.jump == 0.0)
    assert np.all(tp.average == 7.5)


def test_traces_two_values(mesh):
    f = mesh.interior_faces[0]
    vals = np.zeros(mesh.n_cells)
    vals[mesh.face_owner[f]] = 1.0
    vals[mesh.face_neighbor[f]] = 3.0
    tp = traces(QField(mesh, vals), f)
    assert np.all(tp.jump == 2.0)
    assert np.all(tp.average == 2.0)


def test_traces_cr_face_mean_continuity(mesh):
    rng = np.random.default_rng(1)
    v = CRField(mesh, rng.standard_normal((mesh.n_faces, 3)))
    for f in mesh.interior_faces[:10]:
        tp = traces(v, f)
        assert np.abs(tp.vin.mean(axis=0) - tp.vout.mean(axis=0)).max() < 1e-13


def test_traces_exterior_face_has_no_out(mesh):
    f = mesh.exterior_faces[0]
    tp = traces(QField(mesh, np.ones(mesh.n_cells)), f)
    assert tp.vin is not None
    with pytest.raises(ValueError, match="exterior"):
        tp.vout
    with pytest.raises(ValueError):
        tp.jump


@given(vin=st.floats(-1e6, 1e6), vout=st.floats(-1e6, 1e6))
def test_trace_pair_jump_average_identity(vin, vout):
    tp = FaceTracePair(0, np.array([vin]), np.array([vout]))
    # [[v]] + 2 v_in == 2 <<v>> as an exact algebraic identity
    assert tp.jump + 2.0 * tp.vin == pytest.approx(2.0 * tp.average, rel=1e-15, abs=1e-9)


def test_jumps_orientation(mesh):
    rng = np.random.default_rng(2)
    q = QField(mesh, rng.standard_normal(mesh.n_cells))
    jmp, avg = jumps(q)
    i = 3
    f = mesh.interior_faces[i]
    o, nb = mesh.face_owner[f], mesh.face_neighbor[f]
    assert jmp[i] == q.values[nb] - q.values[o]
    assert avg[i] == 0.5 * (q.values[nb] + q.values[o])


# -- norms ------------------------------------------------------------------------

def test_lp_norm_of_constant(mesh):
    q = QField(mesh, np.full(mesh.n_cells, -2.5))
    assert broken_norm(q, 2) == pytest.approx(2.5, abs=1e-12)
    assert broken_norm(q, 1) == pytest.approx(2.5, abs=1e-12)
    assert broken_norm(q, 6) == pytest.approx(2.5, abs=1e-12)
    assert broken_norm(q, np.inf) == pytest.approx(2.5)


def test_lp_norm_gamma_exponent(mesh):
    rng = np.random.default_rng(3)
    q = QField(mesh, rng.random(mesh.n_cells))
    g = 1.4
    direct = (np.sum(mesh.cell_volumes * q.values ** g)) ** (1 / g)
    assert broken_norm(q, g) == pytest.approx(direct, rel=1e-14)


def test_unsupported_norm_kind(mesh):
    q = QField(mesh, np.ones(mesh.n_cells))
    with pytest.raises(ValueError):
        broken_norm(q, 2, kind="H17")


def test_cr_l2_norm_exact_for_affine(mesh):
    # |x|^2 integrates exactly at degree 2: compare against the analytic value
    v = project_V(lambda x: x, mesh, zero_boundary=False)
    # int_box |x|^2 = 3 * 1/3 = 1
    assert broken_norm(v, 2) == pytest.approx(1.0, abs=1e-13)


def test_jump_seminorm_of_smooth_projection_bounded():
    # continuous functions have O(h) jumps: the seminorm plateaus as h -> 0
    def f(x):
        return np.sin(2 * np.pi * x[:, 0]) * x[:, 1]
    vals = []
    for n in (4, 8, 16):
        m = build_box_mesh((1.0, 1.0, 1.0), (n, n, n))
        q = project_Q(f, m)
        vals.append(jump_seminorm(q))
    # successive growth factors must shrink toward 1 (bounded limit)
    assert vals[2] / vals[1] < vals[1] / vals[0]
    assert vals[2] / vals[1] < 1.15


def test_broken_h1_norm(mesh):
    B = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    v = project_V(lambda x: x @ B.T, mesh, zero_boundary=False)
    assert broken_norm(v, kind="broken_h1") == pytest.approx(1.0, abs=1e-12)


# -- snapshots ----------------------------------------------------------------------

def test_qfield_snapshot_roundtrip(tmp_path, mesh):
    rng = np.random.default_rng(8)
    q = QField(mesh, rng.standard_normal(mesh.n_cells))
    write_qfield(q, tmp_path / "q.txt")
    q2 = read_qfield(tmp_path / "q.txt", mesh)
    assert np.array_equal(q.values, q2.values)


def test_crfield_snapshot_roundtrip(tmp_path, mesh):
    rng = np.random.default_rng(9)
    v = CRField(mesh, rng.standard_normal((mesh.n_faces, 3)))
    write_crfield(v, tmp_path / "v.txt")
    v2 = read_crfield(tmp_path / "v.txt", mesh)
    assert np.array_equal(v.values, v2.values)


def test_snapshot_shape_mismatch(tmp_path, mesh):
    q = QField(mesh, np.ones(mesh.n_cells))
    write_qfield(q, tmp_path / "q.txt")
    other = build_box_mesh((1.0, 1.0, 1.0), (1, 1, 1))
    with pytest.raises(ValueError, match="does not match"):
        read_qfield(tmp_path / "q.txt", other)
