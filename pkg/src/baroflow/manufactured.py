"""Closed-form flow fields with the momentum forcing that makes them exact.

The mass balance carries no source in the scheme, so a usable manufactured
pair must satisfy it identically.  All built-in cases use the same device:
a scalar potential ``H(x)`` vanishing (with its gradient) on the unit-box
boundary, the solenoidal swirl  u = psi(t) (dH/dy, -dH/dx, 0), and a
density rho = F(H) constant along streamlines.  Then both div u = 0 and
u . grad rho = 0 hold exactly, and only the momentum equation needs a
source, which is derived symbolically and turned into fast numpy callables.

Built-ins (all with rho bounded away from zero and u = 0 on the boundary):

* ``acoustic``    near-constant density, +-10 percent ripple;
* ``rotating-bump``  density bump carried around the swirl;
* ``polynomial``  boundary-compatible polynomial fields (quadrature-exact).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import sympy as sym

from .scheme import SchemeParams

__all__ = ["ManufacturedCase", "build_case", "CASE_NAMES"]

CASE_NAMES = ("acoustic", "rotating-bump", "polynomial")

_T, _X, _Y, _Z = sym.symbols("t x y z", real=True)


@dataclass
class ManufacturedCase:
    """Reference fields, their forcing, and analytic derivative pieces."""

    name: str
    rho_min: float
    rho: object                       # rho(t, pts) -> (n,)
    u: object                         # u(t, pts) -> (n, 3)
    forcing: object                   # f(t, pts) -> (n, 3)
    pieces: dict = field(repr=False, default_factory=dict)

    def rho0(self, pts):
        return self.rho(0.0, pts)

    def u0(self, pts):
        return self.u(0.0, pts)

    def continuity_residual(self, t, pts):
        """d_t rho + div(rho u) from the analytic derivative pieces."""
        return self.pieces["drho_dt"](t, pts) + self.pieces["div_rho_u"](t, pts)

    def momentum_residual(self, t, pts, params: SchemeParams):
        """Momentum PDE residual from the analytic pieces minus the forcing.

        Zero up to roundoff; params must match the ones the case was built
        with (the pressure and viscosity enter the forcing).
        """
        pc = self.pieces
        visc = params.mu * pc["lap_u"](t, pts) \
            + (params.mu / 3.0 + params.eta) * pc["grad_div_u"](t, pts)
        return (pc["d_rhou_dt"](t, pts) + pc["div_rho_uu"](t, pts)
                + pc["grad_p"](t, pts) - visc - self.forcing(t, pts))


def _vectorized(expr, shape_like="scalar"):
    """Lambdify an expression of (t, x, y, z) into f(t, pts)."""
    fn = sym.lambdify((_T, _X, _Y, _Z), expr, modules="numpy")

    def call(t, pts):
        pts = np.asarray(pts, dtype=float)
        out = fn(t, pts[:, 0], pts[:, 1], pts[:, 2])
        if np.ndim(out) == 0:
            out = np.full(len(pts), float(out))
        return np.asarray(out, dtype=float)
    return call


def _vectorized_vec(exprs):
    calls = [_vectorized(e) for e in exprs]

    def call(t, pts):
        return np.stack([c(t, pts) for c in calls], axis=1)
    return call


def _vectorized_mat(exprs):
    """exprs[i][j] -> G(t, pts) with shape (n, 3, 3)."""
    calls = [[_vectorized(e) for e in row] for row in exprs]

    def call(t, pts):
        return np.stack([np.stack([c(t, pts) for c in row], axis=1)
                         for row in calls], axis=1)
    return call


def _case_symbols(name):
    """Potential H, time factor psi, and density profile F for each case."""
    x, y, z, t = _X, _Y, _Z, _T
    if name == "acoustic":
        H = (sym.sin(sym.pi * x) * sym.sin(sym.pi * y) * sym.sin(sym.pi * z)) ** 2
        psi = sym.Rational(1, 4) * (1 + sym.sin(2 * sym.pi * t) / 2)
        rho = 1 + sym.sin(2 * sym.pi * H) / 10
        rho_min = 0.9
    elif name == "rotating-bump":
        H = (sym.sin(sym.pi * x) * sym.sin(sym.pi * y) * sym.sin(sym.pi * z)) ** 2
        psi = sym.Rational(2, 5) * (1 + sym.cos(2 * sym.pi * t) / 3)
        rho = 1 + H ** 3 / 2
        rho_min = 1.0
    elif name == "polynomial":
        H = 4096 * (x * (1 - x) * y * (1 - y) * z * (1 - z)) ** 2
        psi = sym.Rational(3, 10) * (1 + t / 2)
        rho = 1 + H / 5
        rho_min = 1.0
    else:
        raise ValueError(f"unknown manufactured case {name!r}; "
                         f"choose one of {CASE_NAMES}")
    u = [psi * sym.diff(H, y), -psi * sym.diff(H, x), sym.Integer(0)]
    return rho, u, rho_min


_case_cache = {}


def build_case(name, params: SchemeParams) -> ManufacturedCase:
    """Build a manufactured case for the given physical parameters."""
    key = (name, params.a, params.gamma, params.mu, params.eta)
    if key in _case_cache:
        return _case_cache[key]

    rho, u, rho_min = _case_symbols(name)
    t, xyz = _T, (_X, _Y, _Z)

    # mass balance must hold identically (no source in the scheme)
    cont = sym.diff(rho, t) + sum(sym.diff(rho * u[j], xyz[j]) for j in range(3))
    if sym.simplify(cont) != 0:
        raise AssertionError(f"case {name}: manufactured pair violates mass balance")

    p = params.a * rho ** sym.Float(params.gamma)
    d_rhou_dt = [sym.diff(rho * u[i], t) for i in range(3)]
    div_rho_uu = [sum(sym.diff(rho * u[i] * u[j], xyz[j]) for j in range(3))
                  for i in range(3)]
    grad_p = [sym.diff(p, xyz[i]) for i in range(3)]
    lap_u = [sum(sym.diff(u[i], xyz[j], 2) for j in range(3)) for i in range(3)]
    div_u = sum(sym.diff(u[j], xyz[j]) for j in range(3))
    grad_div_u = [sym.diff(div_u, xyz[i]) for i in range(3)]

    # keep the factored forms: expanding the high-degree polynomials destroys
    # both build time and numerical stability of the lambdified evaluation
    forcing = [d_rhou_dt[i] + div_rho_uu[i] + grad_p[i]
               - params.mu * lap_u[i]
               - (params.mu / 3 + params.eta) * grad_div_u[i]
               for i in range(3)]

    pieces = {
        "drho_dt": _vectorized(sym.diff(rho, t)),
        "grad_rho": _vectorized_vec([sym.diff(rho, c) for c in xyz]),
        "div_rho_u": _vectorized(sum(sym.diff(rho * u[j], xyz[j]) for j in range(3))),
        "du_dt": _vectorized_vec([sym.diff(u[i], t) for i in range(3)]),
        "grad_u": _vectorized_mat([[sym.diff(u[i], c) for c in xyz] for i in range(3)]),
        "d_rhou_dt": _vectorized_vec(d_rhou_dt),
        "div_rho_uu": _vectorized_vec(div_rho_uu),
        "grad_p": _vectorized_vec(grad_p),
        "lap_u": _vectorized_vec(lap_u),
        "grad_div_u": _vectorized_vec(grad_div_u),
    }

    case = ManufacturedCase(
        name=name, rho_min=rho_min,
        rho=_vectorized(rho),
        u=_vectorized_vec(u),
        forcing=_vectorized_vec(forcing),
        pieces=pieces,
    )
    _case_cache[key] = case
    return case
