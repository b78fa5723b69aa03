"""The implicit finite-element/finite-volume scheme.

Per time step the scheme finds piecewise-constant density rho and a
Crouzeix-Raviart velocity u such that

* mass balance holds cellwise with the dissipative upwind face flux
    Up[r, u] = avg(r) * s - 1/2 * max(h^alpha, |s|) * jump(r)
             = r_out * min(s, 0) + r_in * max(s, 0)
               - h^alpha / 2 * jump(r) * chi(s / h^alpha),
  where s is the (exact) face average of u . n and chi is a piecewise-linear
  hat cutting the extra diffusion off when |s| > h^alpha;
* the momentum balance holds against every interior-face CR basis function,
  with the convected quantity being the cell momentum rho * cell_avg(u),
  the isentropic pressure p = a rho^gamma, and the constant-viscosity
  bilinear form  mu grad_h : grad_h + (mu/3 + eta) div_h div_h.

The coupled nonlinear system is solved by damped Newton with an analytic
Jacobian (one-sided derivatives at the max/chi kinks) and a positivity
safeguard in the line search; after three failed line searches the solver
falls back to Picard iteration (freeze the transport velocity, alternate a
linear continuity solve with a linear momentum solve).  Linear systems use
a sparse direct factorization up to ~50k unknowns; beyond that, GMRES with
a block preconditioner (direct on the small continuity block, algebraic
multigrid on the momentum block) converged to relative residual 1e-12.
The initial Newton guess is always the previous time level, which fixes a
deterministic solution branch.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .fields import CRField, QField, cell_average, project_Q, project_V
from .mesh import Mesh, cell_quadrature

__all__ = [
    "SchemeParams",
    "State",
    "UpwindFlux",
    "Trajectory",
    "StepFailure",
    "PositivityError",
    "pressure",
    "pressure_derivative",
    "pressure_potential",
    "pressure_potential_dd",
    "chi",
    "upwind",
    "sound_speed",
    "total_mass",
    "total_energy",
    "assemble_continuity_residual",
    "assemble_momentum_residual",
    "solve_time_step",
    "adapt_dt",
    "run",
]


# direct sparse LU below this many unknowns; preconditioned GMRES above
DIRECT_SOLVE_MAX_DOF = 50_000
ITERATIVE_RTOL = 1e-12


class StepFailure(RuntimeError):
    """Nonlinear solver did not converge; carries the best iterate found."""

    def __init__(self, message, best_state=None, residual_history=None):
        super().__init__(message)
        self.best_state = best_state
        self.residual_history = residual_history or []


class PositivityError(StepFailure):
    """Line search could not keep all cell densities positive."""


@dataclass
class SchemeParams:
    """Physical and numerical parameters.

    Admissibility window: 1 < gamma < 2 and 0 < alpha < 2 (gamma - 1); the
    time step tracks the mesh size, dt = c_t * h, unless set explicitly or
    adapted by the CFL rule.
    """

    a: float = 1.0
    gamma: float = 1.4
    mu: float = 0.1
    eta: float = 0.0
    alpha: float | None = None          # default: min(0.5, gamma - 1)
    dt: float | None = None             # explicit time step; overrides c_t * h
    c_t: float = 0.5
    t_end: float = 0.5
    dt_rule: str = "fixed"              # "fixed" | "cfl"
    cfl: float = 0.5
    forcing: object = None              # momentum source f(t, points) -> (n, 3)
    tol_nonlinear: float = 1e-10
    max_newton: int = 50
    max_picard: int = 200
    reproducible: bool = True
    seed: int = 2024

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = min(0.5, self.gamma - 1.0)
        if not self.a > 0:
            raise ValueError(f"pressure coefficient a must be positive, got {self.a}")
        if not 1.0 < self.gamma < 2.0:
            raise ValueError(f"adiabatic exponent must satisfy 1 < gamma < 2, got {self.gamma}")
        if not self.mu > 0:
            raise ValueError(f"shear viscosity must be positive, got {self.mu}")
        if self.eta < 0:
            raise ValueError(f"bulk parameter must be nonnegative, got {self.eta}")
        if not 0.0 < self.alpha < 2.0 * (self.gamma - 1.0):
            raise ValueError(
                f"upwind exponent alpha={self.alpha} outside (0, 2(gamma-1)) "
                f"= (0, {2 * (self.gamma - 1):g})")
        if self.dt_rule not in ("fixed", "cfl"):
            raise ValueError(f"dt_rule must be 'fixed' or 'cfl', got {self.dt_rule!r}")
        if not 0.0 < self.cfl <= 1.0:
            raise ValueError(f"CFL number must lie in (0, 1], got {self.cfl}")
        if self.c_t <= 0:
            raise ValueError("c_t must be positive")


@dataclass
class State:
    """One time level: density, velocity, time and step index."""

    rho: QField
    u: CRField
    t: float = 0.0
    k: int = 0

    def __post_init__(self):
        if self.rho.values.ndim != 1:
            raise ValueError("density must be a scalar QField")
        if np.any(self.rho.values <= 0):
            raise ValueError("cell densities must be positive")

    @property
    def mesh(self):
        return self.rho.mesh

    def momentum(self) -> QField:
        """Cell momenta rho * cell_avg(u)."""
        return QField(self.mesh, self.rho.values[:, None] * cell_average(self.u).values)


# -- pressure law -------------------------------------------------------------

def _check_nonneg(rho):
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise ValueError("density must be nonnegative")
    return rho


def pressure(rho, params: SchemeParams):
    """Isentropic pressure p(rho) = a rho^gamma."""
    return params.a * _check_nonneg(rho) ** params.gamma


def pressure_derivative(rho, params: SchemeParams):
    """p'(rho) = a gamma rho^(gamma-1)."""
    return params.a * params.gamma * _check_nonneg(rho) ** (params.gamma - 1.0)


def pressure_potential(rho, params: SchemeParams):
    """Pressure potential P(rho) = a rho^gamma / (gamma - 1)."""
    return params.a / (params.gamma - 1.0) * _check_nonneg(rho) ** params.gamma


def pressure_potential_dd(rho, params: SchemeParams):
    """P''(rho) = a gamma rho^(gamma-2); diverges at rho = 0 for gamma < 2."""
    rho = _check_nonneg(rho)
    if np.any(rho == 0) and params.gamma < 2.0:
        raise ValueError("P'' is undefined at rho = 0 for gamma < 2")
    return params.a * params.gamma * rho ** (params.gamma - 2.0)


def chi(z):
    """Piecewise-linear hat: 0 outside [-1, 1], z+1 on [-1, 0], 1-z on (0, 1]."""
    z = np.asarray(z, dtype=float)
    out = np.where(z <= 0.0, z + 1.0, 1.0 - z)
    return np.maximum(out, 0.0) if out.ndim else float(max(out, 0.0))


def sound_speed(rho, params: SchemeParams):
    """c(rho) = sqrt(p'(rho))."""
    return np.sqrt(pressure_derivative(rho, params))


# -- upwind flux --------------------------------------------------------------

@dataclass
class UpwindFlux:
    """Dissipative upwind flux on one interior face, both algebraic forms.

    form1 = avg * s - 1/2 max(h^alpha, |s|) * jump
    form2 = standard_upwind - h^alpha/2 * jump * chi(s / h^alpha)
    The two coincide identically; ``value`` is form2.
    """

    s: float                      # face average of u . n
    jump: np.ndarray | float
    avg: np.ndarray | float
    convective: np.ndarray | float
    dissipative: np.ndarray | float
    standard_upwind: np.ndarray | float
    extra_dissipation: np.ndarray | float
    form1: np.ndarray | float
    form2: np.ndarray | float

    @property
    def value(self):
        return self.form2


def upwind(r: QField, u: CRField, face_index: int, params: SchemeParams) -> UpwindFlux:
    """Evaluate Up[r, u] on one interior face.

    ``r`` may be scalar or vector valued; the face average of u . n is the
    face DOF dotted with the normal (exact, no quadrature).
    """
    m = r.mesh
    nb = int(m.face_neighbor[face_index])
    if nb < 0:
        raise ValueError(f"face {face_index} is exterior; upwind flux needs two sides")
    own = int(m.face_owner[face_index])
    rin, rout = r.values[own], r.values[nb]
    s = float(u.values[face_index] @ m.face_normal[face_index])
    halpha = m.h ** params.alpha

    jump = rout - rin
    avg = 0.5 * (rout + rin)
    mx = max(halpha, abs(s))
    convective = avg * s
    dissipative = -0.5 * mx * jump
    standard = rout * min(s, 0.0) + rin * max(s, 0.0)
    extra = -0.5 * halpha * jump * chi(s / halpha)
    return UpwindFlux(
        s=s, jump=jump, avg=avg,
        convective=convective, dissipative=dissipative,
        standard_upwind=standard, extra_dissipation=extra,
        form1=convective + dissipative, form2=standard + extra,
    )


def _upwind_values(q_in, q_out, s, halpha):
    """Vectorized first form of the flux; q_* may be (nfi,) or (nfi, 3)."""
    mx = np.maximum(halpha, np.abs(s))
    if q_in.ndim == 2:
        s = s[:, None]
        mx = mx[:, None]
    return 0.5 * (q_in + q_out) * s - 0.5 * mx * (q_out - q_in)


# -- cached mesh operators ----------------------------------------------------

_mesh_ops_cache: "weakref.WeakKeyDictionary[Mesh, _MeshOps]" = weakref.WeakKeyDictionary()


class _MeshOps:
    """Per-mesh constant data for assembly: CR geometry and viscous matrices."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        m = mesh
        self.nfi = m.n_interior_faces
        self.own = m.face_owner[m.interior_faces]
        self.ngb = m.face_neighbor[m.interior_faces]
        self.area = m.face_area[m.interior_faces]
        self.normal = m.face_normal[m.interior_faces]
        self.g = -3.0 * m.bary_grads                    # (nc, 4, 3) CR basis gradients
        self.iid = m.face_interior_id                   # (nf,), -1 on boundary
        self.cf = m.cell_faces                          # (nc, 4)
        self.cf_iid = self.iid[self.cf]                 # (nc, 4), -1 where boundary
        # CR row weight: measure of the basis support, sum |E|/4
        w = np.zeros(m.n_faces)
        np.add.at(w, self.cf.ravel(), np.repeat(m.cell_volumes / 4.0, 4))
        self.row_weight = w[m.interior_faces]
        self.K_grad, self.K_div = self._build_viscous()

    def _build_viscous(self):
        m = self.mesh
        nfi = self.nfi
        rows_g, cols_g, vals_g = [], [], []
        rows_d, cols_d, vals_d = [], [], []
        vol = m.cell_volumes
        for l_r in range(4):
            fr = self.cf_iid[:, l_r]
            for l_c in range(4):
                fc = self.cf_iid[:, l_c]
                ok = (fr >= 0) & (fc >= 0)
                if not ok.any():
                    continue
                gg = vol[ok] * np.einsum("nd,nd->n", self.g[ok, l_r], self.g[ok, l_c])
                base_r, base_c = 3 * fr[ok], 3 * fc[ok]
                for i in range(3):
                    rows_g.append(base_r + i)
                    cols_g.append(base_c + i)
                    vals_g.append(gg)
                # div-div couples components: value vol * g_r[i] * g_c[c]
                gr = self.g[ok, l_r]
                gc = self.g[ok, l_c]
                for i in range(3):
                    for c in range(3):
                        rows_d.append(base_r + i)
                        cols_d.append(base_c + c)
                        vals_d.append(vol[ok] * gr[:, i] * gc[:, c])
        shape = (3 * nfi, 3 * nfi)
        K_grad = sp.coo_matrix(
            (np.concatenate(vals_g), (np.concatenate(rows_g), np.concatenate(cols_g))),
            shape=shape).tocsr()
        K_div = sp.coo_matrix(
            (np.concatenate(vals_d), (np.concatenate(rows_d), np.concatenate(cols_d))),
            shape=shape).tocsr()
        return K_grad, K_div


def _mesh_ops(mesh: Mesh) -> _MeshOps:
    ops = _mesh_ops_cache.get(mesh)
    if ops is None:
        ops = _MeshOps(mesh)
        _mesh_ops_cache[mesh] = ops
    return ops


# -- residual and Jacobian assembly -------------------------------------------

def _cell_avg_u(mesh, U):
    return U[mesh.cell_faces].mean(axis=1)          # (nc, 3)


def _forcing_cellface(mesh: Mesh, forcing, t):
    """Per (cell, local face) integrals of f(t) . theta_l: (nc, 4, 3)."""
    pts, w = cell_quadrature(mesh, 2)
    nc, nq = w.shape
    fvals = np.asarray(forcing(t, pts.reshape(-1, 3)), dtype=float).reshape(nc, nq, 3)
    d = pts - mesh.cell_centroids[:, None, :]
    # theta_l at the quadrature points
    theta = 0.25 - 3.0 * np.einsum("nld,nqd->nlq", mesh.bary_grads, d)
    return np.einsum("nq,nlq,nqi->nli", w, theta, fvals)


class _SystemAssembler:
    """Residuals and Jacobian of the coupled (rho, u) system at one time level."""

    def __init__(self, mesh, state_old: State, dt, params: SchemeParams, *,
                 include_time=True, include_convection=True, include_pressure=True,
                 forcing_time=None):
        self.mesh = mesh
        self.ops = _mesh_ops(mesh)
        self.params = params
        self.dt = float(dt)
        self.halpha = mesh.h ** params.alpha
        self.rho_old = state_old.rho.values
        self.m_old = state_old.rho.values[:, None] * _cell_avg_u(mesh, state_old.u.values)
        self.include_time = include_time
        self.include_convection = include_convection
        self.include_pressure = include_pressure
        self.K_visc = (params.mu * self.ops.K_grad
                       + (params.mu / 3.0 + params.eta) * self.ops.K_div)
        if params.forcing is not None and forcing_time is not None:
            self.f_cellface = _forcing_cellface(mesh, params.forcing, forcing_time)
        else:
            self.f_cellface = None

    # residuals ---------------------------------------------------------

    def continuity(self, rho, U):
        m, ops = self.mesh, self.ops
        C = np.zeros(m.n_cells)
        if self.include_time:
            C += m.cell_volumes * (rho - self.rho_old) / self.dt
        s = np.einsum("fi,fi->f", U[m.interior_faces], ops.normal)
        flux = ops.area * _upwind_values(rho[ops.own], rho[ops.ngb], s, self.halpha)
        np.add.at(C, ops.own, flux)
        np.add.at(C, ops.ngb, -flux)
        return C

    def momentum(self, rho, U):
        m, ops = self.mesh, self.ops
        nfi = ops.nfi
        res_full = np.zeros((m.n_faces, 3))
        ucell = _cell_avg_u(m, U)

        if self.include_time:
            dm = (rho[:, None] * ucell - self.m_old) * (m.cell_volumes / 4.0 / self.dt)[:, None]
            for l in range(4):
                np.add.at(res_full, m.cell_faces[:, l], dm)

        if self.include_convection:
            s = np.einsum("fi,fi->f", U[m.interior_faces], ops.normal)
            mom = rho[:, None] * ucell
            G = ops.area[:, None] * _upwind_values(mom[ops.own], mom[ops.ngb], s, self.halpha)
            for l in range(4):
                np.add.at(res_full, m.cell_faces[ops.own, l], 0.25 * G)
                np.add.at(res_full, m.cell_faces[ops.ngb, l], -0.25 * G)

        if self.include_pressure:
            p = pressure(rho, self.params)
            dp = p[ops.own] - p[ops.ngb]
            res_full[m.interior_faces] += -(ops.area * dp)[:, None] * ops.normal

        res = res_full[m.interior_faces]
        res += (self.K_visc @ U[m.interior_faces].ravel()).reshape(nfi, 3)

        if self.f_cellface is not None:
            fres = np.zeros((m.n_faces, 3))
            for l in range(4):
                np.add.at(fres, m.cell_faces[:, l], self.f_cellface[:, l])
            res -= fres[m.interior_faces]
        return res

    def residual(self, rho, U):
        return self.continuity(rho, U), self.momentum(rho, U)

    def residual_norm(self, C, Mres):
        """Scaled sup norm: residual densities per unit measure of support."""
        rc = np.abs(C / self.mesh.cell_volumes).max()
        rm = np.abs(Mres / self.ops.row_weight[:, None]).max() if len(Mres) else 0.0
        return max(rc, rm)

    # Jacobian -----------------------------------------------------------

    def jacobian(self, rho, U, *, freeze_transport=False):
        """Analytic Jacobian; with ``freeze_transport`` the dependence of the
        upwind fluxes on the face-normal velocity is dropped, which makes the
        momentum block the exact matrix of the Picard (frozen transport)
        linearization."""
        m, ops, prm = self.mesh, self.ops, self.params
        nc, nfi = m.n_cells, ops.nfi
        ndof = nc + 3 * nfi
        Iρ = np.arange(nc)

        rows, cols, vals = [], [], []

        def add(r, c, v):
            rows.append(np.asarray(r, dtype=np.int64).ravel())
            cols.append(np.asarray(c, dtype=np.int64).ravel())
            vals.append(np.asarray(v, dtype=float).ravel())

        s = np.einsum("fi,fi->f", U[m.interior_faces], ops.normal)
        mx = np.maximum(self.halpha, np.abs(s))
        # one-sided derivative of max(h^alpha, |s|): flat branch at the kink
        dmx = np.where(np.abs(s) > self.halpha, np.sign(s), 0.0)
        A = ops.area
        own, ngb = ops.own, ops.ngb
        ucell = _cell_avg_u(m, U)
        ucol = nc + 3 * np.arange(nfi)              # base column of U_j

        # continuity: time
        if self.include_time:
            add(Iρ, Iρ, m.cell_volumes / self.dt)

        # continuity: flux
        dUp_o = 0.5 * (s + mx)
        dUp_n = 0.5 * (s - mx)
        add(own, own, A * dUp_o)
        add(own, ngb, A * dUp_n)
        add(ngb, own, -A * dUp_o)
        add(ngb, ngb, -A * dUp_n)
        if not freeze_transport:
            dUp_s = 0.5 * (rho[own] + rho[ngb]) - 0.5 * dmx * (rho[ngb] - rho[own])
            for c in range(3):
                v = A * dUp_s * ops.normal[:, c]
                add(own, ucol + c, v)
                add(ngb, ucol + c, -v)

        # momentum rows: base index of the row block per interior face
        mrow = nc + 3 * ops.cf_iid                  # (nc, 4); negative -> boundary
        rowmask = ops.cf_iid >= 0

        if self.include_time:
            coef_u = (m.cell_volumes / 4.0) * rho / 4.0 / self.dt      # (nc,)
            coef_r = (m.cell_volumes / 4.0)[:, None] * ucell / self.dt  # (nc, 3)
            for l_r in range(4):
                okr = rowmask[:, l_r]
                base_r = mrow[okr, l_r]
                for i in range(3):
                    add(base_r + i, Iρ[okr], coef_r[okr, i])
                for l_c in range(4):
                    ok = okr & rowmask[:, l_c]
                    base_r2 = mrow[ok, l_r]
                    base_c = nc + 3 * ops.cf_iid[ok, l_c]
                    for i in range(3):
                        add(base_r2 + i, base_c + i, coef_u[ok])

        if self.include_convection:
            mom = rho[:, None] * ucell
            m_o, m_n = mom[own], mom[ngb]
            davg = 0.5 * (s + mx)                   # multiplies owner-side quantity
            davgn = 0.5 * (s - mx)                  # neighbor side
            dF_rho_o = davg[:, None] * ucell[own]   # (nfi, 3) per component i
            dF_rho_n = davgn[:, None] * ucell[ngb]
            dF_s = 0.5 * (m_o + m_n) - 0.5 * dmx[:, None] * (m_n - m_o)  # (nfi, 3)

            # scatter rows: 4 faces of the owner (+A/4) then 4 of the neighbor (-A/4)
            rfaces = np.concatenate([ops.cf_iid[own], ops.cf_iid[ngb]], axis=1)  # (nfi, 8)
            rw = np.concatenate([np.repeat((0.25 * A)[:, None], 4, axis=1),
                                 np.repeat((-0.25 * A)[:, None], 4, axis=1)], axis=1)
            cfaces = rfaces                          # same 8 faces carry the u-columns
            cw_o = davg[:, None] * rho[own, None] * 0.25   # broadcast over 4 owner faces
            cw_n = davgn[:, None] * rho[ngb, None] * 0.25
            cweights = np.concatenate([np.repeat(cw_o, 4, axis=1),
                                       np.repeat(cw_n, 4, axis=1)], axis=1)  # (nfi, 8)

            okr8 = rfaces >= 0
            for r8 in range(8):
                okr = okr8[:, r8]
                if not okr.any():
                    continue
                base_r = nc + 3 * rfaces[okr, r8]
                w_r = rw[okr, r8]
                for i in range(3):
                    # d/d rho
                    add(base_r + i, own[okr], w_r * dF_rho_o[okr, i])
                    add(base_r + i, ngb[okr], w_r * dF_rho_n[okr, i])
                    # d/d s (all components of U_j)
                    if not freeze_transport:
                        for c in range(3):
                            add(base_r + i, ucol[okr] + c,
                                w_r * dF_s[okr, i] * ops.normal[okr, c])
                # d/d U through the two cell averages (same component only)
                for c8 in range(8):
                    ok = okr & okr8[:, c8]
                    if not ok.any():
                        continue
                    base_r2 = nc + 3 * rfaces[ok, r8]
                    base_c = nc + 3 * cfaces[ok, c8]
                    v = rw[ok, r8] * cweights[ok, c8]
                    for i in range(3):
                        add(base_r2 + i, base_c + i, v)

        if self.include_pressure:
            dp = pressure_derivative(rho, prm)
            base_r = nc + 3 * np.arange(nfi)
            for i in range(3):
                add(base_r + i, own, -A * ops.normal[:, i] * dp[own])
                add(base_r + i, ngb, A * ops.normal[:, i] * dp[ngb])

        J = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(ndof, ndof)).tocsc()
        # viscous block is constant: embed into the full matrix
        KV = self.K_visc.tocoo()
        J += sp.coo_matrix((KV.data, (nc + KV.row, nc + KV.col)), shape=(ndof, ndof)).tocsc()
        return J


def assemble_continuity_residual(state_new: State, state_old: State,
                                 params: SchemeParams, dt=None):
    """Residual of the discrete mass balance tested with each cell indicator."""
    if state_new.mesh is not state_old.mesh:
        raise ValueError("states live on different meshes")
    dt = float(dt if dt is not None else state_new.t - state_old.t)
    if dt <= 0:
        raise ValueError("time step must be positive (pass dt= for detached states)")
    asm = _SystemAssembler(state_new.mesh, state_old, dt, params)
    return asm.continuity(state_new.rho.values, state_new.u.values)


def assemble_momentum_residual(state_new: State, state_old: State,
                               params: SchemeParams, dt=None, *,
                               include_time=True, include_convection=True,
                               include_pressure=True, forcing_time=None):
    """Residual of the discrete momentum balance against every interior CR basis.

    The switch-off flags support isolating individual blocks (e.g. the pure
    viscous action) for verification.
    """
    if state_new.mesh is not state_old.mesh:
        raise ValueError("states live on different meshes")
    dt = float(dt if dt is not None else state_new.t - state_old.t)
    if dt <= 0:
        dt = 1.0  # irrelevant when include_time is False
        if include_time:
            raise ValueError("time step must be positive (pass dt= for detached states)")
    if forcing_time is None and params.forcing is not None:
        forcing_time = state_new.t
    asm = _SystemAssembler(state_new.mesh, state_old, dt, params,
                           include_time=include_time,
                           include_convection=include_convection,
                           include_pressure=include_pressure,
                           forcing_time=forcing_time)
    return asm.momentum(state_new.rho.values, state_new.u.values)


# -- nonlinear solve ----------------------------------------------------------

class _LinearSolveError(RuntimeError):
    pass


def _solve_linear(J, rhs, nc):
    """Solve J x = rhs: sparse LU when small, preconditioned GMRES when large.

    The GMRES preconditioner is block lower-triangular: exact LU on the
    (small) continuity block, a smoothed-aggregation AMG V-cycle on the
    momentum block.
    """
    ndof = J.shape[0]
    if ndof <= DIRECT_SOLVE_MAX_DOF:
        return splu(J.tocsc()).solve(rhs)

    import pyamg
    from scipy.sparse.linalg import LinearOperator, gmres

    Jcsr = J.tocsr()
    lu_c = splu(Jcsr[:nc, :nc].tocsc())
    Juc = Jcsr[nc:, :nc].tocsr()
    ml = pyamg.smoothed_aggregation_solver(Jcsr[nc:, nc:].tocsr(), max_coarse=500)
    Muu = ml.aspreconditioner(cycle="V")

    def apply_prec(x):
        zc = lu_c.solve(x[:nc])
        zm = Muu @ (x[nc:] - Juc @ zc)
        return np.concatenate([zc, zm])

    P = LinearOperator(J.shape, matvec=apply_prec)
    x, info = gmres(Jcsr, rhs, M=P, rtol=ITERATIVE_RTOL, atol=0.0,
                    restart=100, maxiter=600)
    if info != 0:
        raise _LinearSolveError(f"GMRES did not reach rtol {ITERATIVE_RTOL} (info={info})")
    return x


def _solve_linear_momentum(Juu, rhs):
    """Momentum-block solve for the Picard fallback."""
    if Juu.shape[0] <= DIRECT_SOLVE_MAX_DOF:
        return splu(Juu.tocsc()).solve(rhs)
    import pyamg
    from scipy.sparse.linalg import gmres
    ml = pyamg.smoothed_aggregation_solver(Juu.tocsr(), max_coarse=500)
    x, info = gmres(Juu.tocsr(), rhs, M=ml.aspreconditioner(cycle="V"),
                    rtol=ITERATIVE_RTOL, atol=0.0, restart=100, maxiter=600)
    if info != 0:
        raise _LinearSolveError(f"GMRES did not reach rtol {ITERATIVE_RTOL} (info={info})")
    return x


def solve_time_step(state_old: State, params: SchemeParams, dt=None, *,
                    rho_floor=None):
    """Advance one implicit step; returns (state_new, StepReport).

    Converges both residuals below ``tol_nonlinear`` in the scaled sup norm.
    Raises StepFailure (with the best iterate and the residual history) on
    divergence and PositivityError when densities cannot be kept positive.
    """
    mesh = state_old.mesh
    if dt is None:
        dt = effective_dt(state_old, params)
    dt = float(dt)
    if rho_floor is None:
        rho_floor = 1e-12 * float(state_old.rho.values.min())

    t_new = state_old.t + dt
    asm = _SystemAssembler(mesh, state_old, dt, params, forcing_time=t_new)
    nc = mesh.n_cells
    rho = state_old.rho.values.copy()
    U = state_old.u.values.copy()
    intf = mesh.interior_faces

    history = []
    tol = params.tol_nonlinear

    def norm_of(rho_v, U_v):
        C, Mres = asm.residual(rho_v, U_v)
        return asm.residual_norm(C, Mres), C, Mres

    nrm, C, Mres = norm_of(rho, U)
    history.append(nrm)
    failed_ls = 0
    it = 0

    while nrm > tol and it < params.max_newton:
        J = asm.jacobian(rho, U)
        rhs = -np.concatenate([C, Mres.ravel()])
        try:
            dx = _solve_linear(J, rhs, nc)
        except (RuntimeError, _LinearSolveError) as exc:
            raise StepFailure(f"linear solver failed: {exc}",
                              best_state=_make_state(mesh, rho, U, t_new, state_old.k + 1),
                              residual_history=history) from exc
        drho = dx[:nc]
        dU = dx[nc:].reshape(-1, 3)

        lam, accepted, any_positive = 1.0, False, False
        while lam >= 2.0 ** -30:
            rho_t = rho + lam * drho
            if rho_t.min() < rho_floor:
                lam *= 0.5
                continue
            any_positive = True
            U_t = U.copy()
            U_t[intf] += lam * dU
            nrm_t, C_t, M_t = norm_of(rho_t, U_t)
            if nrm_t <= (1.0 - 1e-4 * lam) * nrm or nrm_t <= tol:
                rho, U, nrm, C, Mres = rho_t, U_t, nrm_t, C_t, M_t
                accepted = True
                break
            lam *= 0.5
        it += 1
        if accepted:
            history.append(nrm)
            continue

        if not any_positive:
            raise PositivityError(
                "line search cannot repair positivity loss",
                best_state=_make_state(mesh, np.maximum(rho, rho_floor), U, t_new,
                                       state_old.k + 1),
                residual_history=history)
        failed_ls += 1
        if failed_ls >= 3:
            rho, U, nrm, history = _picard(asm, rho, U, state_old, dt, params,
                                           rho_floor, history)
            break
        history.append(nrm)

    if nrm > tol:
        raise StepFailure(
            f"nonlinear solver stalled at residual {nrm:.3e} after {it} Newton iterations",
            best_state=_make_state(mesh, rho, U, t_new, state_old.k + 1),
            residual_history=history)

    state_new = _make_state(mesh, rho, U, t_new, state_old.k + 1)
    from .diagnostics import step_ledger  # deferred: diagnostics imports this module
    report = step_ledger(state_old, state_new, params, dt=dt)
    report.newton_iterations = it
    report.residual_norm = nrm
    return state_new, report


def _make_state(mesh, rho, U, t, k):
    return State(QField(mesh, rho.copy()), CRField(mesh, U.copy()), t=t, k=k)


def _picard(asm: _SystemAssembler, rho, U, state_old, dt, params, rho_floor, history):
    """Fallback: freeze the transport velocity, alternate two linear solves."""
    mesh = asm.mesh
    ops = asm.ops
    nc = mesh.n_cells
    nfi = ops.nfi
    intf = mesh.interior_faces
    tol = params.tol_nonlinear

    for _ in range(params.max_picard):
        # continuity is linear in rho for frozen u
        s = np.einsum("fi,fi->f", U[intf], ops.normal)
        mx = np.maximum(asm.halpha, np.abs(s))
        A = ops.area
        r_, c_, v_ = [], [], []
        dUp_o, dUp_n = 0.5 * (s + mx), 0.5 * (s - mx)
        Iρ = np.arange(nc)
        r_.extend([Iρ, ops.own, ops.own, ops.ngb, ops.ngb])
        c_.extend([Iρ, ops.own, ops.ngb, ops.own, ops.ngb])
        v_.extend([mesh.cell_volumes / dt, A * dUp_o, A * dUp_n, -A * dUp_o, -A * dUp_n])
        Ac = sp.coo_matrix((np.concatenate(v_),
                            (np.concatenate(r_), np.concatenate(c_))),
                           shape=(nc, nc)).tocsc()
        rho = splu(Ac).solve(mesh.cell_volumes * asm.rho_old / dt)
        if rho.min() < rho_floor:
            raise PositivityError("Picard continuity solve lost positivity",
                                  best_state=_make_state(mesh, np.maximum(rho, rho_floor),
                                                         U, state_old.t + dt,
                                                         state_old.k + 1),
                                  residual_history=history)

        # momentum is linear in U for frozen rho and transport velocity: one
        # solve with the frozen-transport matrix hits that linear solution
        J = asm.jacobian(rho, U, freeze_transport=True)
        M0 = asm.momentum(rho, U)
        dU = _solve_linear_momentum(J.tocsr()[nc:, nc:], -M0.ravel()).reshape(nfi, 3)
        U = U.copy()
        U[intf] += dU

        C, Mres = asm.residual(rho, U)
        nrm = asm.residual_norm(C, Mres)
        history.append(nrm)
        if nrm <= tol:
            return rho, U, nrm, history
    return rho, U, history[-1], history


def adapt_dt(state: State, params: SchemeParams):
    """CFL-type step: dt = CFL * h / max_cells(|cell_avg(u)| + sqrt(p'(rho)))."""
    mesh = state.mesh
    speed = np.linalg.norm(cell_average(state.u).values, axis=1) \
        + sound_speed(state.rho.values, params)
    wave = float(speed.max())
    if wave <= 0.0:
        return params.c_t * mesh.h
    return params.cfl * mesh.h / wave


def effective_dt(state: State, params: SchemeParams):
    if params.dt_rule == "cfl":
        return adapt_dt(state, params)
    if params.dt is not None:
        return params.dt
    return params.c_t * state.mesh.h


# -- integrals ----------------------------------------------------------------

def total_mass(state: State):
    return float(state.rho.integral())


def total_energy(state: State, params: SchemeParams):
    """Kinetic + potential energy: int( rho |cell_avg u|^2 / 2 + P(rho) )."""
    rho = state.rho.values
    uc = cell_average(state.u).values
    e = 0.5 * rho * np.einsum("ni,ni->n", uc, uc) + pressure_potential(rho, params)
    return float(np.sum(state.mesh.cell_volumes * e))


# -- time loop ----------------------------------------------------------------

@dataclass
class Trajectory:
    """Accepted states with per-step reports; piecewise constant in time."""

    mesh: Mesh
    params: SchemeParams
    states: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    failure: StepFailure | None = None

    @property
    def times(self):
        return np.array([s.t for s in self.states])

    @property
    def final(self) -> State:
        return self.states[-1]

    def state_at(self, t) -> State:
        """The state active at time t: state k on [t_k, t_{k+1})."""
        times = self.times
        k = int(np.searchsorted(times, t, side="right") - 1)
        return self.states[max(0, min(k, len(self.states) - 1))]


def run(rho0, u0, params: SchemeParams, mesh: Mesh, *, n_steps=None,
        save_callback=None) -> Trajectory:
    """Run the scheme from initial data up to t_end (or for n_steps steps).

    ``rho0`` and ``u0`` may be callables (projected onto the discrete spaces)
    or ready-made fields.  A step failure aborts and returns the partial
    trajectory with ``failure`` set.
    """
    rho_h = rho0 if isinstance(rho0, QField) else project_Q(rho0, mesh)
    u_h = u0 if isinstance(u0, CRField) else project_V(u0, mesh, zero_boundary=True)
    if np.any(rho_h.values <= 0):
        raise ValueError("projected initial density must be positive everywhere")

    state = State(rho_h, u_h, t=0.0, k=0)
    traj = Trajectory(mesh, params, states=[state])
    rho_floor = 1e-12 * float(rho_h.values.min())
    mass0 = total_mass(state)
    if save_callback is not None:
        save_callback(state, None)

    k = 0
    while True:
        if n_steps is not None:
            if k >= n_steps:
                break
            dt = effective_dt(state, params)
        else:
            remaining = params.t_end - state.t
            if remaining <= 1e-12 * max(params.t_end, 1.0):
                break
            dt = min(effective_dt(state, params), remaining)
        try:
            state, report = solve_time_step(state, params, dt, rho_floor=rho_floor)
        except StepFailure as exc:
            traj.failure = exc
            break
        report.mass_drift = abs(report.mass - mass0) / abs(mass0)
        traj.states.append(state)
        traj.reports.append(report)
        if save_callback is not None:
            save_callback(state, report)
        k += 1
    return traj
