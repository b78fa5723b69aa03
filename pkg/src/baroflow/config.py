"""Run and study configuration: plain ``key = value`` text files.

Unknown keys are rejected by name; values are validated on conversion with
the offending key in the message.  ``#`` starts a comment.  See the README
for the full key reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import Mesh, build_box_mesh, read_mesh
from .scheme import SchemeParams

__all__ = ["ConfigError", "RunConfig", "StudyConfig", "parse_kv_file"]


class ConfigError(ValueError):
    pass


def parse_kv_file(path) -> dict:
    """Parse ``key = value`` lines into a string dict."""
    out = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value', got {raw!r}")
            key, val = line.split("=", 1)
            key, val = key.strip(), val.strip()
            if not key:
                raise ConfigError(f"{path}:{ln}: empty key")
            if key in out:
                raise ConfigError(f"{path}:{ln}: duplicate key {key!r}")
            out[key] = val
    return out


def _get(raw, key, conv, default):
    if key not in raw:
        if default is _REQUIRED:
            raise ConfigError(f"missing required config key {key!r}")
        return default
    val = raw.pop(key)
    try:
        return conv(val)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from None


def _floats(val):
    return tuple(float(tok) for tok in val.split())


def _ints(val):
    return tuple(int(tok) for tok in val.split())


def _bool(val):
    low = val.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {val!r}")


_REQUIRED = object()

INIT_CHOICES = ("constant", "gaussian-bump")


@dataclass
class RunConfig:
    """One solver run: mesh source, initial data, scheme parameters, outputs."""

    mesh_n: tuple | None = None
    mesh_extents: tuple = (1.0, 1.0, 1.0)
    mesh_path: str | None = None
    init: str = "gaussian-bump"
    a: float = 1.0
    gamma: float = 1.4
    mu: float = 0.1
    eta: float = 0.0
    alpha: float | None = None
    c_t: float = 0.5
    dt: float | None = None
    dt_rule: str = "fixed"
    cfl: float = 0.5
    t_end: float = 0.5
    n_steps: int | None = None
    tol_nonlinear: float = 1e-10
    output_dir: str = "out"
    output_every: int = 1
    output_vtk: bool = False
    reproducible: bool = True
    seed: int = 2024

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_raw(parse_kv_file(path))

    @classmethod
    def from_raw(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        cfg = cls(
            mesh_n=_get(raw, "mesh.n", _ints, None),
            mesh_extents=_get(raw, "mesh.extents", _floats, (1.0, 1.0, 1.0)),
            mesh_path=_get(raw, "mesh.path", str, None),
            init=_get(raw, "init", str, "gaussian-bump"),
            a=_get(raw, "a", float, 1.0),
            gamma=_get(raw, "gamma", float, 1.4),
            mu=_get(raw, "mu", float, 0.1),
            eta=_get(raw, "eta", float, 0.0),
            alpha=_get(raw, "alpha", float, None),
            c_t=_get(raw, "c_t", float, 0.5),
            dt=_get(raw, "dt", float, None),
            dt_rule=_get(raw, "dt_rule", str, "fixed"),
            cfl=_get(raw, "cfl", float, 0.5),
            t_end=_get(raw, "t_end", float, 0.5),
            n_steps=_get(raw, "n_steps", int, None),
            tol_nonlinear=_get(raw, "tol_nonlinear", float, 1e-10),
            output_dir=_get(raw, "output.dir", str, "out"),
            output_every=_get(raw, "output.every", int, 1),
            output_vtk=_get(raw, "output.vtk", _bool, False),
            reproducible=_get(raw, "reproducible", _bool, True),
            seed=_get(raw, "seed", int, 2024),
        )
        if raw:
            raise ConfigError(f"unknown config keys: {sorted(raw)}")
        if cfg.mesh_n is None and cfg.mesh_path is None:
            raise ConfigError("either mesh.n or mesh.path is required")
        if not (cfg.init in INIT_CHOICES or cfg.init.startswith("mms:")):
            raise ConfigError(
                f"init must be one of {INIT_CHOICES} or 'mms:<case>', got {cfg.init!r}")
        return cfg

    def make_mesh(self) -> Mesh:
        if self.mesh_path is not None:
            return read_mesh(self.mesh_path)
        return build_box_mesh(self.mesh_extents, self.mesh_n)

    def make_params(self, forcing=None) -> SchemeParams:
        return SchemeParams(
            a=self.a, gamma=self.gamma, mu=self.mu, eta=self.eta, alpha=self.alpha,
            dt=self.dt, c_t=self.c_t, t_end=self.t_end, dt_rule=self.dt_rule,
            cfl=self.cfl, forcing=forcing, tol_nonlinear=self.tol_nonlinear,
            reproducible=self.reproducible, seed=self.seed)

    def make_initial(self, mesh_extents=None):
        """Initial-data callables (rho0, u0) and the forcing (or None)."""
        extents = np.asarray(mesh_extents if mesh_extents is not None
                             else self.mesh_extents, dtype=float)
        if self.init == "constant":
            return (lambda x: np.ones(len(x)),
                    lambda x: np.zeros((len(x), 3)), None)
        if self.init == "gaussian-bump":
            center = extents / 2.0
            width = 0.05 * float(extents.min()) ** 2

            def rho0(x):
                r2 = ((np.asarray(x) - center) ** 2).sum(axis=1)
                return 1.0 + 0.5 * np.exp(-r2 / width)
            return rho0, lambda x: np.zeros((len(x), 3)), None
        if self.init.startswith("mms:"):
            from .manufactured import build_case
            case = build_case(self.init[4:], self.make_params())
            return case.rho0, case.u0, case.forcing
        raise ConfigError(f"unknown init {self.init!r}")

    def resolved_lines(self):
        """Deterministic config echo written next to run outputs."""
        pairs = [
            ("mesh.n", " ".join(map(str, self.mesh_n)) if self.mesh_n else None),
            ("mesh.extents", " ".join(repr(v) for v in self.mesh_extents)),
            ("mesh.path", self.mesh_path),
            ("init", self.init),
            ("a", repr(self.a)), ("gamma", repr(self.gamma)),
            ("mu", repr(self.mu)), ("eta", repr(self.eta)),
            ("alpha", repr(self.alpha) if self.alpha is not None else None),
            ("c_t", repr(self.c_t)),
            ("dt", repr(self.dt) if self.dt is not None else None),
            ("dt_rule", self.dt_rule), ("cfl", repr(self.cfl)),
            ("t_end", repr(self.t_end)),
            ("n_steps", str(self.n_steps) if self.n_steps is not None else None),
            ("tol_nonlinear", repr(self.tol_nonlinear)),
            ("output.dir", self.output_dir),
            ("output.every", str(self.output_every)),
            ("output.vtk", str(self.output_vtk).lower()),
            ("reproducible", str(self.reproducible).lower()),
            ("seed", str(self.seed)),
        ]
        return [f"{k} = {v}" for k, v in pairs if v is not None]


STUDY_KINDS = ("energy", "consistency", "mms-convergence")


@dataclass
class StudyConfig:
    """A refinement study: base run settings plus levels and the study kind."""

    kind: str
    levels: tuple
    base: RunConfig
    case: str = "acoustic"
    gammas: tuple = (1.2, 1.4, 1.6, 1.8)
    sub_box: tuple = ((0.25, 0.25, 0.25), (0.75, 0.75, 0.75))
    output_dir: str = "study-out"

    @classmethod
    def from_file(cls, path) -> "StudyConfig":
        raw = parse_kv_file(path)
        kind = _get(raw, "study.kind", str, _REQUIRED)
        if kind not in STUDY_KINDS:
            raise ConfigError(f"study.kind must be one of {STUDY_KINDS}, got {kind!r}")
        levels = _get(raw, "study.levels", _ints, _REQUIRED)
        if list(levels) != sorted(set(levels)):
            raise ConfigError("study.levels must be strictly increasing")
        if kind != "energy" and len(levels) < 3:
            raise ConfigError("fitted studies need at least 3 levels")
        case = _get(raw, "study.case", str, "acoustic")
        gammas = _get(raw, "study.gammas", _floats, (1.2, 1.4, 1.6, 1.8))
        kbox = _get(raw, "study.K", _floats, (0.25, 0.25, 0.25, 0.75, 0.75, 0.75))
        if len(kbox) != 6:
            raise ConfigError("study.K needs six numbers: lo_x lo_y lo_z hi_x hi_y hi_z")
        outdir = _get(raw, "study.output.dir", str, None)
        base = RunConfig.from_raw({"mesh.n": "4 4 4", **raw})
        return cls(kind=kind, levels=levels, base=base, case=case, gammas=gammas,
                   sub_box=(kbox[:3], kbox[3:]),
                   output_dir=outdir if outdir is not None else base.output_dir)
