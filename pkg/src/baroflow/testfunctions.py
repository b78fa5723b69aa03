"""Smooth test functions with analytic derivatives.

Consistency checks pair discrete trajectories with smooth space-time test
functions; the residual decay is only meaningful when the derivatives of
the test functions are exact, so everything here carries hand-written
gradients (verified against finite differences in the test suite).

Scalar space profiles expose ``value(x)`` and ``gradient(x)``; vector
profiles additionally ``div(x)``.  Space-time functions are separable
products of a smooth time profile and a space profile.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "AffineScalar",
    "TrigScalar",
    "ConstantScalar",
    "CompactBump",
    "ProductScalar",
    "VectorFromScalars",
    "TimePlateau",
    "TimeBump",
    "SeparableScalar",
    "SeparableVector",
    "continuity_test_functions",
    "momentum_test_functions",
]


# -- scalar space profiles ----------------------------------------------------

@dataclass
class AffineScalar:
    """phi(x) = b . x + c."""

    b: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)

    def value(self, x):
        return np.asarray(x) @ self.b + self.c

    def gradient(self, x):
        return np.broadcast_to(self.b, (len(x), 3)).copy()


@dataclass
class ConstantScalar:
    c: float = 1.0

    def value(self, x):
        return np.full(len(x), self.c)

    def gradient(self, x):
        return np.zeros((len(x), 3))


@dataclass
class TrigScalar:
    """phi(x) = amp * cos(k . x + phase)."""

    k: np.ndarray
    phase: float = 0.0
    amp: float = 1.0

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=float)

    def value(self, x):
        return self.amp * np.cos(np.asarray(x) @ self.k + self.phase)

    def gradient(self, x):
        s = -self.amp * np.sin(np.asarray(x) @ self.k + self.phase)
        return s[:, None] * self.k


def _bump(s):
    """exp(-1/(s(1-s))) on (0,1), zero elsewhere; C^inf with compact support."""
    s = np.asarray(s, dtype=float)
    inside = (s > 0.0) & (s < 1.0)
    out = np.zeros_like(s)
    ss = s[inside]
    out[inside] = np.exp(-1.0 / (ss * (1.0 - ss)))
    return out


def _bump_d(s):
    """Derivative of _bump."""
    s = np.asarray(s, dtype=float)
    inside = (s > 0.0) & (s < 1.0)
    out = np.zeros_like(s)
    ss = s[inside]
    g = ss * (1.0 - ss)
    out[inside] = np.exp(-1.0 / g) * (1.0 - 2.0 * ss) / g ** 2
    return out


@dataclass
class CompactBump:
    """Product bump supported in the open box (lo, hi)."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        self.width = self.hi - self.lo

    def _s(self, x):
        return (np.asarray(x) - self.lo) / self.width

    def value(self, x):
        s = self._s(x)
        return _bump(s[:, 0]) * _bump(s[:, 1]) * _bump(s[:, 2])

    def gradient(self, x):
        s = self._s(x)
        b = np.stack([_bump(s[:, d]) for d in range(3)], axis=1)
        db = np.stack([_bump_d(s[:, d]) / self.width[d] for d in range(3)], axis=1)
        g = np.empty_like(b)
        g[:, 0] = db[:, 0] * b[:, 1] * b[:, 2]
        g[:, 1] = b[:, 0] * db[:, 1] * b[:, 2]
        g[:, 2] = b[:, 0] * b[:, 1] * db[:, 2]
        return g


@dataclass
class ProductScalar:
    f: object
    g: object

    def value(self, x):
        return self.f.value(x) * self.g.value(x)

    def gradient(self, x):
        return (self.f.gradient(x) * self.g.value(x)[:, None]
                + self.f.value(x)[:, None] * self.g.gradient(x))


@dataclass
class VectorFromScalars:
    """Vector field with independent scalar components."""

    components: tuple

    def value(self, x):
        return np.stack([c.value(x) for c in self.components], axis=1)

    def gradient(self, x):
        """(n, 3, 3) with G[i, j] = d phi_i / d x_j."""
        return np.stack([c.gradient(x) for c in self.components], axis=1)

    def div(self, x):
        g = self.gradient(x)
        return g[:, 0, 0] + g[:, 1, 1] + g[:, 2, 2]


# -- time profiles --------------------------------------------------------------

def _exp_side(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    pos = s > 0
    out[pos] = np.exp(-1.0 / s[pos])
    return out


def _exp_side_d(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    pos = s > 0
    out[pos] = np.exp(-1.0 / s[pos]) / s[pos] ** 2
    return out


@dataclass
class TimePlateau:
    """Smooth cutoff: 1 up to t1, 0 from t2 on; nonzero at t = 0."""

    t1: float
    t2: float

    def value(self, t):
        s = np.asarray((np.asarray(t, dtype=float) - self.t1) / (self.t2 - self.t1))
        a, b = _exp_side(1.0 - s), _exp_side(s)
        with np.errstate(invalid="ignore"):
            w = np.where(s <= 0.0, 1.0, np.where(s >= 1.0, 0.0, a / (a + b)))
        return w if w.ndim else float(w)

    def derivative(self, t):
        s = np.asarray((np.asarray(t, dtype=float) - self.t1) / (self.t2 - self.t1))
        a, b = _exp_side(1.0 - s), _exp_side(s)
        da, db = -_exp_side_d(1.0 - s), _exp_side_d(s)
        with np.errstate(invalid="ignore", divide="ignore"):
            w = np.where((s <= 0.0) | (s >= 1.0), 0.0,
                         (da * b - a * db) / (a + b) ** 2 / (self.t2 - self.t1))
        return w if w.ndim else float(w)


@dataclass
class TimeBump:
    """C_c^inf bump on (t1, t2); vanishes with all derivatives at both ends."""

    t1: float
    t2: float

    def value(self, t):
        s = (np.asarray(t, dtype=float) - self.t1) / (self.t2 - self.t1)
        w = _bump(s)
        return w if w.ndim else float(w)

    def derivative(self, t):
        s = (np.asarray(t, dtype=float) - self.t1) / (self.t2 - self.t1)
        w = _bump_d(s) / (self.t2 - self.t1)
        return w if w.ndim else float(w)


# -- separable space-time test functions ---------------------------------------

@dataclass
class SeparableScalar:
    """phi(t, x) = psi(t) * Phi(x), scalar valued."""

    time: object
    space: object
    name: str = ""

    def value(self, t, x):
        return self.time.value(t) * self.space.value(x)

    def dt(self, t, x):
        return self.time.derivative(t) * self.space.value(x)

    def gradient(self, t, x):
        return self.time.value(t) * self.space.gradient(x)


@dataclass
class SeparableVector:
    """phi(t, x) = psi(t) * Phi(x), vector valued."""

    time: object
    space: object
    name: str = ""

    def value(self, t, x):
        return self.time.value(t) * self.space.value(x)

    def dt(self, t, x):
        return self.time.derivative(t) * self.space.value(x)

    def gradient(self, t, x):
        return self.time.value(t) * self.space.gradient(x)

    def div(self, t, x):
        return self.time.value(t) * self.space.div(x)


def continuity_test_functions(t_end, box=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))):
    """Library for mass-balance consistency: smooth up to the spatial boundary."""
    T1, T2 = 0.4 * t_end, 0.85 * t_end
    lo, hi = np.asarray(box[0]), np.asarray(box[1])
    L = hi - lo
    k1 = 2.0 * np.pi / L
    plateau = TimePlateau(T1, T2)
    bump = TimeBump(0.05 * t_end, 0.9 * t_end)
    return [
        SeparableScalar(plateau, ConstantScalar(1.0), name="plateau*const"),
        SeparableScalar(plateau, TrigScalar(k1 * np.array([1, 0, 0])), name="plateau*cos_x"),
        SeparableScalar(plateau, TrigScalar(k1 * np.array([0, 1, 1]), phase=0.3),
                        name="plateau*cos_yz"),
        SeparableScalar(bump, TrigScalar(k1 * np.array([1, 1, 0]), phase=-0.7),
                        name="bump*cos_xy"),
        SeparableScalar(plateau, AffineScalar(np.array([0.5, -1.0, 0.25]), 0.2),
                        name="plateau*affine"),
        SeparableScalar(bump, TrigScalar(k1 * np.array([0, 0, 2])), name="bump*cos_2z"),
    ]


def momentum_test_functions(t_end, box=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))):
    """Library for momentum consistency: compactly supported inside the box."""
    T1, T2 = 0.4 * t_end, 0.85 * t_end
    lo, hi = np.asarray(box[0]), np.asarray(box[1])
    L = hi - lo
    inner = CompactBump(lo + 0.08 * L, hi - 0.08 * L)
    k1 = 2.0 * np.pi / L
    zero = ConstantScalar(0.0)
    plateau = TimePlateau(T1, T2)
    bump = TimeBump(0.05 * t_end, 0.9 * t_end)

    def vec(*comps, name=""):
        return comps, name

    fields = [
        (VectorFromScalars((inner, zero, zero)), "bump_x"),
        (VectorFromScalars((zero, inner, zero)), "bump_y"),
        (VectorFromScalars((zero, zero, inner)), "bump_z"),
        (VectorFromScalars((ProductScalar(inner, TrigScalar(k1 * np.array([0, 1, 0]))),
                            zero, zero)), "bump_cos_x"),
        (VectorFromScalars((zero,
                            ProductScalar(inner, TrigScalar(k1 * np.array([1, 0, 1]),
                                                            phase=0.4)),
                            zero)), "bump_cos_y"),
    ]
    out = [SeparableVector(plateau, f, name=f"plateau*{nm}") for f, nm in fields]
    out.append(SeparableVector(bump, fields[0][0], name="bump_t*bump_x"))
    return out
