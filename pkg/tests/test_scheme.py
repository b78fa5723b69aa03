"""The numerical scheme: flux, residuals, Jacobian, implicit solver."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from baroflow.fields import CRField, QField, cell_average, project_Q, project_V
from baroflow.mesh import Mesh, build_box_mesh
from baroflow.scheme import (PositivityError, SchemeParams, State, StepFailure,
                             Trajectory, _SystemAssembler, adapt_dt,
                             assemble_continuity_residual,
                             assemble_momentum_residual, chi, pressure,
                             pressure_derivative, pressure_potential,
                             pressure_potential_dd, run, solve_time_step,
                             total_energy, total_mass, upwind)


@pytest.fixture(scope="module")
def cube6():
    return build_box_mesh((1.0, 1.0, 1.0), (1, 1, 1))


@pytest.fixture(scope="module")
def params():
    return SchemeParams(a=1.0, gamma=1.4, mu=0.1, eta=0.0, alpha=0.4)


def random_state(mesh, seed, rho_base=1.0, rho_amp=0.3, u_amp=0.3, t=0.0, k=0):
    rng = np.random.default_rng(seed)
    rho = rho_base + rho_amp * rng.random(mesh.n_cells)
    U = np.zeros((mesh.n_faces, 3))
    U[mesh.interior_faces] = u_amp * rng.standard_normal((mesh.n_interior_faces, 3))
    return State(QField(mesh, rho), CRField(mesh, U), t=t, k=k)


# -- parameter validation -------------------------------------------------------

def test_params_defaults_admissible():
    p = SchemeParams()
    assert 1.0 < p.gamma < 2.0
    assert 0.0 < p.alpha < 2.0 * (p.gamma - 1.0)


@pytest.mark.parametrize("kw", [
    dict(gamma=1.0), dict(gamma=2.0), dict(gamma=2.5),
    dict(a=0.0), dict(a=-1.0), dict(mu=0.0), dict(eta=-0.1),
    dict(alpha=0.0), dict(gamma=1.2, alpha=0.41),
    dict(dt_rule="explicit"), dict(cfl=0.0), dict(cfl=1.5), dict(c_t=0.0),
])
def test_params_validation(kw):
    with pytest.raises(ValueError):
        SchemeParams(**kw)


# -- pressure law -----------------------------------------------------------------

def test_pressure_values(params):
    assert pressure(0.0, params) == 0.0
    p2 = SchemeParams(a=1.0, gamma=1.9, alpha=0.5)
    # direct power for an easy exponent
    assert pressure(3.0, SchemeParams(a=1.0, gamma=1.5, alpha=0.5)) \
        == pytest.approx(3.0 ** 1.5, rel=1e-15)
    # frozen high-precision oracle: 2^1.4
    assert pressure(2.0, params) == pytest.approx(2.639015821545788518748, rel=1e-15)
    with pytest.raises(ValueError):
        pressure(-1.0, params)


def test_pressure_potential_values():
    p = SchemeParams(a=1.0, gamma=1.5, alpha=0.5)
    # 1/(gamma-1) = 2
    assert pressure_potential(1.0, p) == pytest.approx(2.0, rel=1e-15)
    assert pressure_potential_dd(1.0, p) == pytest.approx(1.5, rel=1e-15)
    with pytest.raises(ValueError):
        pressure_potential(-0.5, p)
    with pytest.raises(ValueError, match="undefined"):
        pressure_potential_dd(0.0, p)


def test_pressure_potential_relation():
    # rho P'(rho) - P(rho) = p(rho) for the isentropic law
    p = SchemeParams(a=2.0, gamma=1.7, alpha=0.5)
    rho = np.linspace(0.1, 5.0, 50)
    g = p.gamma
    P = pressure_potential(rho, p)
    dP = p.a * g / (g - 1.0) * rho ** (g - 1.0)
    assert np.abs(rho * dP - P - pressure(rho, p)).max() < 1e-12


def test_chi_reference_points():
    assert chi(-2.0) == 0.0
    assert chi(0.0) == 1.0
    assert chi(0.5) == 0.5
    assert chi(-1.0) == 0.0
    assert chi(1.0) == 0.0
    assert chi(2.0) == 0.0


@given(z=st.floats(-1e3, 1e3))
def test_chi_piecewise_hat(z):
    v = chi(z)
    if z < -1.0 or z > 1.0:
        assert v == 0.0
    elif z <= 0.0:
        assert v == pytest.approx(z + 1.0)
    else:
        assert v == pytest.approx(1.0 - z)


@given(s=st.floats(-10.0, 10.0), ha=st.floats(1e-3, 2.0))
def test_chi_max_identity(s, ha):
    # h^a * chi(s / h^a) + |s| == max(h^a, |s|): the two flux forms hinge on this
    assert ha * chi(s / ha) + abs(s) == pytest.approx(max(ha, abs(s)), rel=1e-14)


# -- upwind flux --------------------------------------------------------------------

def test_upwind_no_jump_collapses(cube6, params):
    # continuous density: flux is plain transport c * s
    f = cube6.interior_faces[0]
    rho = QField(cube6, np.full(cube6.n_cells, 2.0))
    U = np.zeros((cube6.n_faces, 3))
    U[f] = 0.7 * cube6.face_normal[f]
    flux = upwind(rho, CRField(cube6, U), f, params)
    assert flux.form1 == pytest.approx(2.0 * 0.7, rel=1e-14)
    assert flux.form2 == pytest.approx(2.0 * 0.7, rel=1e-14)


def test_upwind_stagnant_pure_dissipation():
    # s = 0, h^alpha = 0.1, jump = 2  ->  flux = -1/2 * 0.1 * 2 = -0.1;
    # a small box realizes h^alpha = 0.1 with alpha inside the window
    mesh = build_box_mesh((0.05, 0.05, 0.05), (1, 1, 1))
    params = SchemeParams(alpha=np.log(0.1) / np.log(mesh.h), gamma=1.9)
    assert mesh.h ** params.alpha == pytest.approx(0.1, rel=1e-12)
    f = mesh.interior_faces[0]
    vals = np.zeros(mesh.n_cells)
    vals[mesh.face_owner[f]] = 1.0
    vals[mesh.face_neighbor[f]] = 3.0
    flux = upwind(QField(mesh, vals), CRField(mesh, np.zeros((mesh.n_faces, 3))),
                  f, params)
    assert flux.form2 == pytest.approx(-0.1, rel=1e-12)
    assert flux.convective == 0.0


def test_upwind_forms_agree_on_random_states(cube6, params):
    rng = np.random.default_rng(123)
    worst = 0.0
    halpha = cube6.h ** params.alpha
    for _ in range(1000):
        f = int(rng.choice(cube6.interior_faces))
        rho = QField(cube6, rng.random(cube6.n_cells) + 0.1)
        U = np.zeros((cube6.n_faces, 3))
        # straddle the kink: normal velocities on the scale of h^alpha
        U[f] = rng.standard_normal(3) * halpha * rng.choice([0.1, 0.9, 1.0, 1.1, 10.0])
        flux = upwind(rho, CRField(cube6, U), f, params)
        scale = max(1.0, abs(flux.form1))
        worst = max(worst, abs(flux.form1 - flux.form2) / scale)
    assert worst < 1e-13


def test_upwind_exterior_face_rejected(cube6, params):
    rho = QField(cube6, np.ones(cube6.n_cells))
    u = CRField(cube6, np.zeros((cube6.n_faces, 3)))
    with pytest.raises(ValueError, match="exterior"):
        upwind(rho, u, int(cube6.exterior_faces[0]), params)


def test_momentum_upwind_is_componentwise(cube6, params):
    # the vector flux applies the scalar formula to each momentum component
    f = cube6.interior_faces[0]
    rng = np.random.default_rng(5)
    mom = QField(cube6, rng.standard_normal((cube6.n_cells, 3)))
    U = np.zeros((cube6.n_faces, 3))
    U[f] = rng.standard_normal(3)
    u = CRField(cube6, U)
    vec = upwind(mom, u, f, params)
    for i in range(3):
        comp = upwind(QField(cube6, mom.values[:, i]), u, f, params)
        assert vec.form2[i] == pytest.approx(comp.form2, rel=1e-14, abs=1e-15)


# -- residuals ---------------------------------------------------------------------

def test_continuity_residual_stationary(cube6, params):
    s = State(QField(cube6, np.full(cube6.n_cells, 1.3)),
              CRField(cube6, np.zeros((cube6.n_faces, 3))))
    res = assemble_continuity_residual(s, s, params, dt=0.1)
    assert np.abs(res).max() == 0.0


def test_continuity_residual_two_cell_hand_computed():
    """Single interior face: every term of the mass balance done by hand."""
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]],
                     dtype=float)
    mesh = Mesh(verts, np.array([[0, 1, 2, 3], [1, 2, 3, 4]]))
    assert mesh.n_interior_faces == 1
    f = mesh.interior_faces[0]
    own, ngb = int(mesh.face_owner[f]), int(mesh.face_neighbor[f])
    assert (own, ngb) == (0, 1)

    params = SchemeParams(a=1.0, gamma=1.5, mu=0.1, alpha=0.5)
    dt = 0.25
    rho_old = np.array([1.0, 2.0])
    rho_new = np.array([1.5, 1.75])
    U = np.zeros((mesh.n_faces, 3))
    U[f] = np.array([0.3, -0.1, 0.2])
    s_old = State(QField(mesh, rho_old), CRField(mesh, U.copy()), t=0.0)
    s_new = State(QField(mesh, rho_new), CRField(mesh, U.copy()), t=dt, k=1)

    # hand evaluation: shared face is the triangle (1,0,0),(0,1,0),(0,0,1)
    area = np.sqrt(3.0) / 2.0
    n = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)   # owner (cell 0) -> neighbor
    assert mesh.face_area[f] == pytest.approx(area, rel=1e-14)
    assert np.allclose(mesh.face_normal[f], n)
    svel = U[f] @ n                                 # (0.3 - 0.1 + 0.2)/sqrt(3)
    assert svel == pytest.approx(0.4 / np.sqrt(3.0), rel=1e-14)
    halpha = mesh.h ** params.alpha
    mx = max(halpha, abs(svel))
    flux = 0.5 * (rho_new[0] + rho_new[1]) * svel - 0.5 * mx * (rho_new[1] - rho_new[0])
    vol = mesh.cell_volumes
    expect = np.array([vol[0] * (1.5 - 1.0) / dt + area * flux,
                       vol[1] * (1.75 - 2.0) / dt - area * flux])

    res = assemble_continuity_residual(s_new, s_old, params, dt=dt)
    assert np.abs(res - expect).max() < 1e-14


def test_flux_contributions_telescope(cube6, params):
    # total mass update is free of flux terms: sum_E (residual - time part) = 0
    mesh = build_box_mesh((1.0, 1.0, 1.0), (2, 2, 2))
    for seed in range(5):
        s_new = random_state(mesh, seed, t=0.1, k=1)
        s_old = random_state(mesh, seed + 100)
        res = assemble_continuity_residual(s_new, s_old, params, dt=0.1)
        time_part = mesh.cell_volumes * (s_new.rho.values - s_old.rho.values) / 0.1
        assert abs(np.sum(res - time_part)) < 1e-13 * np.abs(res).max()


def test_momentum_residual_zero_at_rest(cube6, params):
    s = State(QField(cube6, np.full(cube6.n_cells, 2.0)),
              CRField(cube6, np.zeros((cube6.n_faces, 3))))
    res = assemble_momentum_residual(s, s, params, dt=0.5)
    assert np.abs(res).max() == 0.0


def test_momentum_viscous_block_against_quadrature_oracle(params):
    """Cross-check the grad-grad/div-div action with an independent assembly.

    The solver computes CR basis gradients from face geometry
    (area * normal / volume); the oracle numerically integrates the actual
    basis functions cell by cell from barycentric coordinates.
    """
    mesh = build_box_mesh((1.0, 1.0, 1.0), (2, 2, 2))
    rng = np.random.default_rng(17)
    U = np.zeros((mesh.n_faces, 3))
    U[mesh.interior_faces] = rng.standard_normal((mesh.n_interior_faces, 3))
    u = CRField(mesh, U.copy())
    rho_u = QField(mesh, np.full(mesh.n_cells, 1.0))
    state = State(rho_u, u)
    res = assemble_momentum_residual(state, state, params, dt=1.0,
                                     include_convection=False,
                                     include_pressure=False)

    # oracle: mu int grad u : grad theta + (mu/3+eta) int div u div theta,
    # with all gradients rebuilt from scratch via barycentric differentiation
    verts = mesh.vertices[mesh.cells]
    edge = (verts[:, 1:] - verts[:, :1]).transpose(0, 2, 1)
    inv = np.linalg.inv(edge)
    grads = np.concatenate([-inv.sum(axis=1, keepdims=True), inv], axis=1)
    theta_grad = -3.0 * grads                                  # (nc, 4, 3)
    oracle = np.zeros((mesh.n_faces, 3))
    for c in range(mesh.n_cells):
        gu = np.zeros((3, 3))
        for l in range(4):
            gu += np.outer(U[mesh.cell_faces[c, l]], theta_grad[c, l])
        div_u = np.trace(gu)
        for l in range(4):
            frow = mesh.cell_faces[c, l]
            g = theta_grad[c, l]
            oracle[frow] += mesh.cell_volumes[c] * (
                params.mu * gu @ g + (params.mu / 3 + params.eta) * div_u * g)
    assert np.abs(res - oracle[mesh.interior_faces]).max() < 1e-12


def test_jacobian_matches_finite_differences(cube6, params):
    mesh = cube6
    s_old = random_state(mesh, 7)
    asm = _SystemAssembler(mesh, s_old, 0.1, params)
    st2 = random_state(mesh, 8, rho_base=1.1, u_amp=0.25)
    rho, U = st2.rho.values.copy(), st2.u.values.copy()
    nc, nfi = mesh.n_cells, mesh.n_interior_faces
    J = asm.jacobian(rho, U).toarray()

    def resvec(r, uu):
        C, M = asm.residual(r, uu)
        return np.concatenate([C, M.ravel()])

    eps = 1e-7
    ndof = nc + 3 * nfi
    Jfd = np.zeros((ndof, ndof))
    for j in range(ndof):
        rp, Up = rho.copy(), U.copy()
        rm, Um = rho.copy(), U.copy()
        if j < nc:
            rp[j] += eps
            rm[j] -= eps
        else:
            f = mesh.interior_faces[(j - nc) // 3]
            c = (j - nc) % 3
            Up[f, c] += eps
            Um[f, c] -= eps
        Jfd[:, j] = (resvec(rp, Up) - resvec(rm, Um)) / (2 * eps)
    rel = np.abs(J - Jfd).max() / np.abs(Jfd).max()
    assert rel < 1e-6


# -- inequality between pressure-potential curvature and gamma/2 powers -------------

@pytest.mark.parametrize("gamma", [1.1, 1.5, 1.9])
def test_density_jump_lower_bound_random(gamma):
    # P''(z) (r1 - r2)^2 >= a g (r1^{g/2} - r2^{g/2})^2 for z between r1, r2
    a = 1.0
    rng = np.random.default_rng(int(gamma * 1000))
    n = 10_000
    lo = rng.uniform(1e-3, 1e3, size=n)
    hi = lo * (1.0 + rng.uniform(0.0, 10.0, size=n))
    z = lo + (hi - lo) * rng.random(n)
    lhs = a * gamma * z ** (gamma - 2.0) * (lo - hi) ** 2
    rhs = a * gamma * (lo ** (gamma / 2) - hi ** (gamma / 2)) ** 2
    assert np.all(lhs >= rhs * (1.0 - 1e-12))
    assert int(np.sum(lhs < rhs * (1.0 - 1e-12))) == 0


@given(r1=st.floats(1e-3, 1e3), spread=st.floats(0.0, 50.0),
       frac=st.floats(0.0, 1.0), gamma=st.floats(1.01, 1.99))
@settings(max_examples=300)
def test_density_jump_lower_bound_property(r1, spread, frac, gamma):
    r2 = r1 * (1.0 + spread)
    z = r1 + (r2 - r1) * frac
    lhs = gamma * z ** (gamma - 2.0) * (r1 - r2) ** 2
    rhs = gamma * (r1 ** (gamma / 2) - r2 ** (gamma / 2)) ** 2
    assert lhs >= rhs * (1.0 - 1e-12)


# -- implicit solver ------------------------------------------------------------------

def test_constant_state_is_fixed_point(cube6, params):
    s = State(QField(cube6, np.ones(cube6.n_cells)),
              CRField(cube6, np.zeros((cube6.n_faces, 3))))
    s_new, rep = solve_time_step(s, params, 0.2)
    assert np.abs(s_new.rho.values - 1.0).max() < 1e-12
    assert np.abs(s_new.u.values).max() < 1e-12


def test_step_conserves_mass(params):
    mesh = build_box_mesh((1.0, 1.0, 1.0), (2, 2, 2))
    s = random_state(mesh, 11)
    s_new, rep = solve_time_step(s, params, 0.05)
    assert abs(total_mass(s_new) - total_mass(s)) <= 1e-10 * total_mass(s)


def test_step_energy_non_increase(params):
    mesh = build_box_mesh((1.0, 1.0, 1.0), (2, 2, 2))
    s = random_state(mesh, 13)
    s_new, rep = solve_time_step(s, params, 0.05)
    assert total_energy(s_new, params) \
        <= total_energy(s, params) + 10 * params.tol_nonlinear
    assert rep.energy_inequality_slack <= 10 * params.tol_nonlinear
    for key, val in rep.num_dissipation.items():
        assert val >= -10 * params.tol_nonlinear, key


def test_step_failure_carries_best_iterate(params):
    mesh = build_box_mesh((1.0, 1.0, 1.0), (2, 2, 2))
    s = random_state(mesh, 19, u_amp=0.5)
    from dataclasses import replace
    starved = replace(params, max_newton=1, tol_nonlinear=1e-14)
    with pytest.raises(StepFailure) as exc_info:
        solve_time_step(s, starved, 0.1)
    err = exc_info.value
    assert err.best_state is not None
    assert np.all(err.best_state.rho.values > 0)
    assert len(err.residual_history) >= 1
    assert not isinstance(err, PositivityError)


# -- time step control ----------------------------------------------------------------

def test_adapt_dt_formula(cube6):
    # u = 0, rho = 1, a = 1, gamma -> c = sqrt(a gamma); CFL 0.5, h = 0.25
    # is realized on a scaled mesh: dt = 0.5 * 0.25 / sqrt(2) (frozen oracle)
    mesh = build_box_mesh((0.25 / np.sqrt(3.0),) * 3, (1, 1, 1))
    assert mesh.h == pytest.approx(0.25, rel=1e-12)
    prm = SchemeParams(a=1.0, gamma=1.9999999, alpha=0.5, dt_rule="cfl", cfl=0.5)
    # gamma = 2 itself is outside the admissible window; approach it instead
    s = State(QField(mesh, np.ones(mesh.n_cells)),
              CRField(mesh, np.zeros((mesh.n_faces, 3))))
    assert adapt_dt(s, prm) == pytest.approx(0.08838834764831843, rel=1e-6)


def test_adapt_dt_linear_in_cfl():
    mesh = build_box_mesh((1.0, 1.0, 1.0), (2, 2, 2))
    s = State(QField(mesh, np.full(mesh.n_cells, 1.7)),
              CRField(mesh, np.zeros((mesh.n_faces, 3))))
    p1 = SchemeParams(dt_rule="cfl", cfl=0.25)
    p2 = SchemeParams(dt_rule="cfl", cfl=0.5)
    assert adapt_dt(s, p2) == pytest.approx(2.0 * adapt_dt(s, p1), rel=1e-14)


def test_adapt_dt_sound_speed_scaling():
    # scaling rho by 4^{1/(gamma-1)} doubles the sound speed and halves dt
    mesh = build_box_mesh((1.0, 1.0, 1.0), (2, 2, 2))
    gamma = 1.5
    prm = SchemeParams(gamma=gamma, alpha=0.4, dt_rule="cfl", cfl=0.5)
    u0 = CRField(mesh, np.zeros((mesh.n_faces, 3)))
    s1 = State(QField(mesh, np.ones(mesh.n_cells)), u0.copy())
    scale = 4.0 ** (1.0 / (gamma - 1.0))
    s2 = State(QField(mesh, np.full(mesh.n_cells, scale)), u0.copy())
    assert adapt_dt(s2, prm) == pytest.approx(0.5 * adapt_dt(s1, prm), rel=1e-12)


# -- run loop -----------------------------------------------------------------------

def test_run_constant_data_two_identical_states(cube6, params):
    traj = run(lambda x: np.ones(len(x)), lambda x: np.zeros((len(x), 3)),
               params, cube6, n_steps=1)
    assert len(traj.states) == 2
    assert np.array_equal(traj.states[0].rho.values, traj.states[1].rho.values)
    assert np.array_equal(traj.states[0].u.values, traj.states[1].u.values)


def test_run_gaussian_bump_energy_monotone(params):
    mesh = build_box_mesh((1.0, 1.0, 1.0), (4, 4, 4))

    def rho0(x):
        r2 = ((x - 0.5) ** 2).sum(axis=1)
        return 1.0 + 0.5 * np.exp(-r2 / 0.05)

    traj = run(rho0, lambda x: np.zeros((len(x), 3)), params, mesh, n_steps=10)
    assert traj.failure is None
    energies = [total_energy(s, params) for s in traj.states]
    tol = 10 * params.tol_nonlinear
    assert all(e2 <= e1 + tol for e1, e2 in zip(energies, energies[1:]))
    assert all(s.rho.values.min() > 0 for s in traj.states)
    drift = [r.mass_drift for r in traj.reports]
    assert max(drift) <= 1e-10


def test_run_rejects_nonpositive_initial_density(cube6, params):
    with pytest.raises(ValueError, match="positive"):
        run(lambda x: np.zeros(len(x)), lambda x: np.zeros((len(x), 3)),
            params, cube6, n_steps=1)


def test_run_t_end_clips_last_step(cube6):
    prm = SchemeParams(t_end=1.0, c_t=0.45)   # dt = 0.45*h does not divide 1.0
    traj = run(lambda x: np.ones(len(x)), lambda x: np.zeros((len(x), 3)),
               prm, cube6)
    assert traj.final.t == pytest.approx(1.0, abs=1e-12)


def test_trajectory_time_interpolant(cube6, params):
    traj = run(lambda x: np.ones(len(x)), lambda x: np.zeros((len(x), 3)),
               params, cube6, n_steps=3)
    times = traj.times
    # state k is active on [t_k, t_{k+1})
    assert traj.state_at(0.0).k == 0
    mid = 0.5 * (times[1] + times[2])
    assert traj.state_at(mid).k == 1
    assert traj.state_at(times[1]).k == 1
    assert traj.state_at(1e9).k == traj.final.k
