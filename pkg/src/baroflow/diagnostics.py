"""Conservation, energy-dissipation and consistency diagnostics.

`step_ledger` evaluates, for one accepted step, the discrete energy budget:
the kinetic+potential energy increment, the viscous dissipation, and five
numerical-dissipation terms in their gamma/2-power lower-bound form.  For an
exact discrete solution the sum of all of these (the *slack*) is bounded by
zero up to solver tolerance, and every dissipation entry is nonnegative.
All entries are integrals of piecewise constants, evaluated exactly.

`upwind_identity_check` verifies the algebraic identity that rewrites the
volume transport integral of a piecewise-constant quantity against a smooth
test function as the upwind face sum plus four correction terms; it must
vanish to quadrature/roundoff precision.

`consistency_residuals` measures the weak-form residuals of a trajectory
against smooth space-time test functions and fits the decay order across
mesh levels; `discrete_residual_functional` evaluates the same functional
with all corrections included exactly, isolating pure solver error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import CRField, QField, broken_div, broken_grad, cell_average, project_Q, project_V
from .mesh import Mesh, cell_quadrature, face_quadrature_all
from .scheme import (SchemeParams, State, Trajectory, chi, pressure,
                     pressure_potential, total_energy, total_mass,
                     assemble_continuity_residual, assemble_momentum_residual)

__all__ = [
    "StepReport",
    "DISSIPATION_KEYS",
    "step_ledger",
    "upwind_identity_check",
    "ConsistencyLevel",
    "ConsistencyReport",
    "consistency_residuals",
    "continuity_residual_functional",
    "momentum_residual_functional",
    "discrete_residual_functional",
    "ErrorLevel",
    "ErrorReport",
    "error_vs_reference",
    "fit_loglog",
]

DISSIPATION_KEYS = (
    "time_density",      # (a g / 2) int (rho_new^{g/2} - rho_old^{g/2})^2
    "time_velocity",     # 1/2 int rho_old |avg_u_new - avg_u_old|^2
    "chi_density",       # dt (a g h^alpha / 2) sum_F |F| [[rho^{g/2}]]^2 chi(s/h^alpha)
    "flux_density",      # dt (a g / 2) sum_F |F| [[rho^{g/2}]]^2 |s|
    "velocity_jump",     # dt sum_F |F| (h^a/2 avg(rho) chi + upwind density) [[avg u]]^2
)


@dataclass
class StepReport:
    """Per-step conservation/energy/dissipation ledger."""

    k: int
    t: float
    dt: float
    mass: float
    mass_drift: float
    energy: float
    energy_old: float
    viscous_dissipation: float
    num_dissipation: dict
    energy_inequality_slack: float
    newton_iterations: int = 0
    residual_norm: float = 0.0

    @property
    def total_num_dissipation(self):
        return sum(self.num_dissipation.values())


def _face_state(mesh: Mesh, state: State):
    """Per-interior-face quantities of a state: in/out density, s, jumps."""
    intf = mesh.interior_faces
    own = mesh.face_owner[intf]
    ngb = mesh.face_neighbor[intf]
    rho_in = state.rho.values[own]
    rho_out = state.rho.values[ngb]
    s = np.einsum("fi,fi->f", state.u.values[intf], mesh.face_normal[intf])
    uc = cell_average(state.u).values
    du = uc[ngb] - uc[own]
    return own, ngb, rho_in, rho_out, s, du


def step_ledger(state_old: State, state_new: State, params: SchemeParams,
                dt=None, mass0=None) -> StepReport:
    """Evaluate the discrete energy budget of one step (exact integrals)."""
    mesh = state_new.mesh
    if state_old.mesh is not mesh:
        raise ValueError("states live on different meshes")
    dt = float(dt if dt is not None else state_new.t - state_old.t)
    if dt <= 0:
        raise ValueError("nonpositive time step between the states")

    a, g = params.a, params.gamma
    vol = mesh.cell_volumes
    area = mesh.face_area[mesh.interior_faces]
    halpha = mesh.h ** params.alpha

    rho_n, rho_o = state_new.rho.values, state_old.rho.values
    uc_n = cell_average(state_new.u).values
    uc_o = cell_average(state_old.u).values

    d = {}
    pow_jump = rho_n ** (g / 2.0) - rho_o ** (g / 2.0)
    d["time_density"] = 0.5 * a * g * float(np.sum(vol * pow_jump ** 2))
    dv = uc_n - uc_o
    d["time_velocity"] = 0.5 * float(np.sum(vol * rho_o * np.einsum("ni,ni->n", dv, dv)))

    own, ngb, rin, rout, s, du = _face_state(mesh, state_new)
    jpow = rout ** (g / 2.0) - rin ** (g / 2.0)
    chi_s = chi(s / halpha)
    d["chi_density"] = dt * 0.5 * a * g * halpha * float(np.sum(area * jpow ** 2 * chi_s))
    d["flux_density"] = dt * 0.5 * a * g * float(np.sum(area * jpow ** 2 * np.abs(s)))
    du2 = np.einsum("fi,fi->f", du, du)
    upw_density = rin * np.maximum(s, 0.0) - rout * np.minimum(s, 0.0)
    d["velocity_jump"] = dt * float(np.sum(
        area * (0.5 * halpha * 0.5 * (rin + rout) * chi_s + 0.5 * upw_density) * du2))

    gr = broken_grad(state_new.u).values
    dv_n = broken_div(state_new.u).values
    visc = dt * float(np.sum(vol * (params.mu * np.einsum("nij,nij->n", gr, gr)
                                    + (params.mu / 3.0 + params.eta) * dv_n ** 2)))

    e_new = total_energy(state_new, params)
    e_old = total_energy(state_old, params)
    slack = (e_new - e_old) + visc + sum(d.values())

    mass = total_mass(state_new)
    drift = 0.0 if mass0 is None else abs(mass - mass0) / abs(mass0)
    return StepReport(
        k=state_new.k, t=state_new.t, dt=dt,
        mass=mass, mass_drift=drift,
        energy=e_new, energy_old=e_old,
        viscous_dissipation=visc,
        num_dissipation=d,
        energy_inequality_slack=slack,
    )


# -- upwind consistency identity ----------------------------------------------

def upwind_identity_check(r: QField, F: QField, u: CRField, phi, mesh: Mesh,
                          params: SchemeParams, *, degree=2) -> float:
    """Residual of the exact transport identity.

    Evaluates  int r u . grad(phi)  minus the sum of: the upwind face sum
    against [[F]], the chi-weighted jump correction, the two per-cell-face
    corrections (donor-side jump term and face-average removal of the normal
    velocity), and the volumetric div_h correction.  Identically zero up to
    quadrature exactness (exact for affine phi already at degree 2).
    """
    halpha = mesh.h ** params.alpha
    rv = r.values
    Fv = F.values
    intf = mesh.interior_faces
    own = mesh.face_owner[intf]
    ngb = mesh.face_neighbor[intf]
    area = mesh.face_area[intf]
    s = np.einsum("fi,fi->f", u.values[intf], mesh.face_normal[intf])

    # volume side
    pts, w = cell_quadrature(mesh, degree)
    nc, nq = w.shape
    flat = pts.reshape(-1, 3)
    cells = np.repeat(np.arange(nc), nq)
    uvals = u.eval_in_cells(flat, cells).reshape(nc, nq, 3)
    gphi = np.asarray(phi.gradient(flat)).reshape(nc, nq, 3)
    lhs = float(np.sum(w * rv[:, None] * np.einsum("nqi,nqi->nq", uvals, gphi)))

    # T1 + T2: upwind sum and the chi correction
    jump_r = rv[ngb] - rv[own]
    jump_F = Fv[ngb] - Fv[own]
    flux = (0.5 * (rv[own] + rv[ngb]) * s
            - 0.5 * np.maximum(halpha, np.abs(s)) * jump_r)
    t1 = float(np.sum(area * flux * jump_F))
    t2 = float(np.sum(area * 0.5 * halpha * jump_r * jump_F * chi(s / halpha)))

    # T3: donor-side correction, both sides of every interior face
    fpts, fw = face_quadrature_all(mesh, degree, faces=intf)
    nfq = fpts.shape[1]
    phi_face = np.asarray(phi.value(fpts.reshape(-1, 3))).reshape(len(intf), nfq)
    int_phi = (fw * phi_face).sum(axis=1)                     # int over face of phi
    int_F_own = Fv[own] * area
    int_F_ngb = Fv[ngb] * area
    t3 = float(np.sum(np.minimum(s, 0.0) * jump_r * (int_F_own - int_phi)))
    t3 += float(np.sum(np.minimum(-s, 0.0) * (-jump_r) * (int_F_ngb - int_phi)))

    # T4: face-average removal, all (cell, face) incidences incl. exterior
    t4 = 0.0
    flatf = fpts.reshape(-1, 3)
    own_rep = np.repeat(own, nfq)
    ngb_rep = np.repeat(ngb, nfq)
    n_int = mesh.face_normal[intf]
    u_in = u.eval_in_cells(flatf, own_rep).reshape(len(intf), nfq, 3)
    u_out = u.eval_in_cells(flatf, ngb_rep).reshape(len(intf), nfq, 3)
    un_in = np.einsum("fqi,fi->fq", u_in, n_int)
    un_out = np.einsum("fqi,fi->fq", u_out, n_int)
    t4 += float(np.sum(fw * phi_face * rv[own][:, None] * (un_in - s[:, None])))
    t4 += float(np.sum(fw * phi_face * rv[ngb][:, None] * (-(un_out - s[:, None]))))
    ext = mesh.exterior_faces
    if len(ext):
        epts, ew = face_quadrature_all(mesh, degree, faces=ext)
        eflat = epts.reshape(-1, 3)
        eown = np.repeat(mesh.face_owner[ext], nfq)
        phi_e = np.asarray(phi.value(eflat)).reshape(len(ext), nfq)
        u_e = u.eval_in_cells(eflat, eown).reshape(len(ext), nfq, 3)
        un_e = np.einsum("fqi,fi->fq", u_e, mesh.face_normal[ext])
        # exterior face average of u . n vanishes in the zero-trace space
        t4 += float(np.sum(ew * phi_e * rv[mesh.face_owner[ext]][:, None] * un_e))

    # T5: volumetric correction
    divu = broken_div(u).values
    phi_cell = np.asarray(phi.value(flat)).reshape(nc, nq)
    t5 = float(np.sum(w * rv[:, None] * (Fv[:, None] - phi_cell) * divu[:, None]))

    return lhs - (t1 + t2 + t3 + t4 + t5)


# -- consistency residuals ------------------------------------------------------

def _time_gauss(t0, t1, npts=6):
    x, w = np.polynomial.legendre.leggauss(npts)
    mid, half = 0.5 * (t0 + t1), 0.5 * (t1 - t0)
    return mid + half * x, half * w


def _separable(phi):
    return hasattr(phi, "time") and hasattr(phi, "space")


def _psi_integral(time_profile, t0, t1, npts=20):
    tq, tw = _time_gauss(t0, t1, npts)
    return float(tw @ np.asarray(time_profile.value(tq)))


def continuity_residual_functional(traj: Trajectory, phi, *, time_quad=6) -> float:
    """Signed residual of the weak mass balance for one test function.

    The time derivative is paired by exact stepwise increments.  For
    separable test functions the convective time integral factors into
    (integral of the time profile) x (a single space integral per step),
    which removes time-quadrature error from the measured residual.
    """
    mesh = traj.mesh
    pts, w = cell_quadrature(mesh, 2)
    nc, nq = w.shape
    flat = pts.reshape(-1, 3)
    cells = np.repeat(np.arange(nc), nq)
    times = traj.times

    def cell_integrals(vals_flat):
        return (w * vals_flat.reshape(nc, nq)).sum(axis=1)

    phi_at = {t: cell_integrals(np.asarray(phi.value(t, flat))) for t in times}
    gspace = np.asarray(phi.space.gradient(flat)) if _separable(phi) else None

    total = 0.0
    for k in range(len(traj.states) - 1):
        st = traj.states[k]
        rho = st.rho.values
        # exact stepwise time sum of rho * d_t phi
        total += float(np.sum(rho * (phi_at[times[k + 1]] - phi_at[times[k]])))
        uvals = st.u.eval_in_cells(flat, cells)
        if gspace is not None:
            conv = np.einsum("ni,ni->n", uvals, gspace).reshape(nc, nq)
            space_int = float(np.sum(rho * (w * conv).sum(axis=1)))
            total += _psi_integral(phi.time, times[k], times[k + 1]) * space_int
        else:
            tq, tw = _time_gauss(times[k], times[k + 1], time_quad)
            for t_g, w_g in zip(tq, tw):
                gphi = np.asarray(phi.gradient(t_g, flat))
                conv = np.einsum("ni,ni->n", uvals, gphi).reshape(nc, nq)
                total += w_g * float(np.sum(rho * (w * conv).sum(axis=1)))
    rho0 = traj.states[0].rho.values
    total += float(np.sum(rho0 * phi_at[times[0]]))
    return total


def momentum_residual_functional(traj: Trajectory, phi, *, time_quad=6) -> float:
    """Signed residual of the weak momentum balance for one test function."""
    mesh = traj.mesh
    prm = traj.params
    pts, w = cell_quadrature(mesh, 2)
    nc, nq = w.shape
    flat = pts.reshape(-1, 3)
    cells = np.repeat(np.arange(nc), nq)
    times = traj.times

    def cell_integrals_vec(vals_flat):
        return (w[:, :, None] * vals_flat.reshape(nc, nq, 3)).sum(axis=1)

    phi_at = {t: cell_integrals_vec(np.asarray(phi.value(t, flat))) for t in times}
    if _separable(phi):
        gspace = np.asarray(phi.space.gradient(flat)).reshape(nc, nq, 3, 3)
        dspace = np.asarray(phi.space.div(flat)).reshape(nc, nq)
    else:
        gspace = dspace = None

    def space_terms(st, gphi, dphi):
        """Convective + pressure - viscous pairings for fixed-time weights."""
        rho = st.rho.values
        ucell = cell_average(st.u).values
        uv = st.u.eval_in_cells(flat, cells).reshape(nc, nq, 3)
        conv = np.einsum("ni,nqj,nqij->nq", ucell, uv, gphi)
        term = float(np.sum(rho * (w * conv).sum(axis=1)))
        term += float(np.sum(pressure(rho, prm) * (w * dphi).sum(axis=1)))
        grad_u = broken_grad(st.u).values
        div_u = broken_div(st.u).values
        term -= prm.mu * float(np.sum(np.einsum("nij,nqij->nq", grad_u, gphi) * w))
        term -= (prm.mu / 3.0 + prm.eta) * float(np.sum(div_u[:, None] * dphi * w))
        return term

    total = 0.0
    for k in range(len(traj.states) - 1):
        st = traj.states[k]
        m = st.momentum().values
        total += float(np.sum(m * (phi_at[times[k + 1]] - phi_at[times[k]])))
        if gspace is not None:
            total += _psi_integral(phi.time, times[k], times[k + 1]) \
                * space_terms(st, gspace, dspace)
        else:
            tq, tw = _time_gauss(times[k], times[k + 1], time_quad)
            for t_g, w_g in zip(tq, tw):
                gphi = np.asarray(phi.gradient(t_g, flat)).reshape(nc, nq, 3, 3)
                dphi = np.asarray(phi.div(t_g, flat)).reshape(nc, nq)
                total += w_g * space_terms(st, gphi, dphi)
    m0 = traj.states[0].momentum().values
    total += float(np.sum(m0 * phi_at[times[0]]))
    return total


def discrete_residual_functional(traj: Trajectory, phi, which="continuity") -> float:
    """The same weak functional with every correction included exactly.

    Pairs the assembled per-step residual vectors with the projected test
    function, time-summed with the step weights.  For an exactly solved
    trajectory this is pure accumulated solver error, which separates
    discretization consistency from solver convergence.
    """
    mesh = traj.mesh
    total = 0.0
    for k in range(1, len(traj.states)):
        new, old = traj.states[k], traj.states[k - 1]
        dt = new.t - old.t
        t_k = new.t
        if which == "continuity":
            res = assemble_continuity_residual(new, old, traj.params, dt=dt)
            proj = project_Q(lambda x: phi.value(t_k, x), mesh).values
            total += dt * float(np.sum(res * proj))
        elif which == "momentum":
            res = assemble_momentum_residual(new, old, traj.params, dt=dt,
                                             forcing_time=t_k)
            proj = project_V(lambda x: phi.value(t_k, x), mesh).values
            total += dt * float(np.sum(res * proj[mesh.interior_faces]))
        else:
            raise ValueError(f"unknown equation {which!r}")
    return total


@dataclass
class ConsistencyLevel:
    h: float
    n_cells: int
    R_c: np.ndarray            # residual magnitude per continuity test function
    R_m: np.ndarray            # residual magnitude per momentum test function


@dataclass
class ConsistencyReport:
    levels: list = field(default_factory=list)
    beta_c: float = np.nan
    beta_m: float = np.nan
    r2_c: float = np.nan
    r2_m: float = np.nan

    def fit(self):
        if len(self.levels) < 3:
            raise ValueError("consistency order fits need at least 3 mesh levels")
        hs = np.array([lv.h for lv in self.levels])
        rc = np.array([np.sqrt(np.mean(lv.R_c ** 2)) for lv in self.levels])
        rm = np.array([np.sqrt(np.mean(lv.R_m ** 2)) for lv in self.levels])
        self.beta_c, self.r2_c = fit_loglog(hs, rc)
        self.beta_m, self.r2_m = fit_loglog(hs, rm)
        return self


def consistency_residuals(trajectories, continuity_tfs, momentum_tfs) -> ConsistencyReport:
    """Weak residuals across mesh levels with fitted decay exponents."""
    report = ConsistencyReport()
    for traj in trajectories:
        rc = np.array([abs(continuity_residual_functional(traj, phi))
                       for phi in continuity_tfs])
        rm = np.array([abs(momentum_residual_functional(traj, phi))
                       for phi in momentum_tfs])
        if not (np.all(np.isfinite(rc)) and np.all(np.isfinite(rm))):
            raise ValueError("consistency residual is not finite")
        report.levels.append(ConsistencyLevel(
            h=traj.mesh.h, n_cells=traj.mesh.n_cells, R_c=rc, R_m=rm))
    return report.fit()


# -- errors against a reference solution ----------------------------------------

@dataclass
class ErrorLevel:
    h: float
    n_cells: int
    rho_error: float           # L^gamma((0,T) x K)
    u_error: float             # L^2((0,T) x K)


@dataclass
class ErrorReport:
    gamma: float
    levels: list = field(default_factory=list)

    def orders(self):
        hs = np.array([lv.h for lv in self.levels])
        er = np.array([lv.rho_error for lv in self.levels])
        eu = np.array([lv.u_error for lv in self.levels])
        return fit_loglog(hs, er), fit_loglog(hs, eu)


def error_vs_reference(traj: Trajectory, rho_star, u_star, K,
                       *, time_quad=4) -> ErrorLevel:
    """Space-time errors against reference fields on the sub-box K = (lo, hi).

    rho in L^gamma((0,T) x K), u in L^2((0,T) x K); the sub-box is resolved
    as the union of cells entirely contained in it (monotone in K).
    """
    mesh = traj.mesh
    lo = np.asarray(K[0], dtype=float)
    hi = np.asarray(K[1], dtype=float)
    dom_lo = mesh.vertices.min(axis=0)
    dom_hi = mesh.vertices.max(axis=0)
    if np.any(lo < dom_lo - 1e-12) or np.any(hi > dom_hi + 1e-12) or np.any(lo >= hi):
        raise ValueError("sub-box K must lie inside the domain")

    cv = mesh.vertices[mesh.cells]                    # (nc, 4, 3)
    inside = np.all((cv >= lo - 1e-12) & (cv <= hi + 1e-12), axis=(1, 2))
    sel = np.nonzero(inside)[0]
    if len(sel) == 0:
        raise ValueError("sub-box K contains no whole cell at this resolution")

    pts, w = cell_quadrature(mesh, 2)
    pts, w = pts[sel], w[sel]
    nq = pts.shape[1]
    flat = pts.reshape(-1, 3)
    cells_rep = np.repeat(sel, nq)
    g = traj.params.gamma

    times = traj.times
    acc_rho, acc_u = 0.0, 0.0
    for k in range(len(traj.states) - 1):
        st = traj.states[k]
        rho_cells = st.rho.values[sel]
        uvals = st.u.eval_in_cells(flat, cells_rep).reshape(len(sel), nq, 3)
        tq, tw = _time_gauss(times[k], times[k + 1], time_quad)
        for t_g, w_g in zip(tq, tw):
            r_ref = np.asarray(rho_star(t_g, flat)).reshape(len(sel), nq)
            u_ref = np.asarray(u_star(t_g, flat)).reshape(len(sel), nq, 3)
            acc_rho += w_g * float(np.sum(w * np.abs(rho_cells[:, None] - r_ref) ** g))
            diff = uvals - u_ref
            acc_u += w_g * float(np.sum(w * np.einsum("nqi,nqi->nq", diff, diff)))
    return ErrorLevel(h=mesh.h, n_cells=mesh.n_cells,
                      rho_error=acc_rho ** (1.0 / g), u_error=np.sqrt(acc_u))


def fit_loglog(hs, errs):
    """Least-squares slope of log(err) vs log(h) with its R^2."""
    hs = np.asarray(hs, dtype=float)
    errs = np.asarray(errs, dtype=float)
    if np.any(errs <= 0):
        return np.nan, 0.0
    x, y = np.log(hs), np.log(errs)
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    yhat = A @ coef
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), r2
