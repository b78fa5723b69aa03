"""Run and study drivers: trajectories to CSV ledgers and fitted orders.

Every CSV value is reproducible by calling the library directly; the
drivers only orchestrate runs and serialize results (float cells are
written with shortest round-trip repr, so identical runs give identical
bytes).

Outputs:
  steps.csv        one row per accepted step (ledger columns, see README)
  trajectory.csv   snapshot index: step, time, field files
  consistency.csv  one row per (level, test function, equation)
  errors.csv       one row per (level, error norm)
  energy.csv       one row per (gamma, step) in the energy sweep
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, StudyConfig
from .diagnostics import (DISSIPATION_KEYS, ConsistencyReport, ErrorLevel,
                          ErrorReport, StepReport, consistency_residuals,
                          error_vs_reference, fit_loglog, step_ledger)
from .fields import cell_average, read_crfield, read_qfield, write_crfield, write_qfield
from .manufactured import build_case
from .mesh import read_mesh, write_mesh
from .scheme import run, total_mass
from .testfunctions import continuity_test_functions, momentum_test_functions

__all__ = [
    "STEP_COLUMNS",
    "run_from_config",
    "recompute_ledger",
    "energy_study",
    "consistency_study",
    "mms_study",
    "write_vtk",
]

STEP_COLUMNS = (
    "k", "t", "dt", "mass", "mass_drift", "energy", "viscous_dissipation",
    "diss_time_density", "diss_time_velocity", "diss_chi_density",
    "diss_flux_density", "diss_velocity_jump", "energy_slack",
    "newton_iterations", "residual_norm",
)


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _report_row(r: StepReport):
    return [r.k, r.t, r.dt, r.mass, r.mass_drift, r.energy, r.viscous_dissipation,
            *[r.num_dissipation[k] for k in DISSIPATION_KEYS],
            r.energy_inequality_slack, r.newton_iterations, r.residual_norm]


def write_steps_csv(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STEP_COLUMNS)
        for r in reports:
            w.writerow([_fmt(v) for v in _report_row(r)])


def run_from_config(cfg: RunConfig, outdir=None):
    """Execute one configured run, writing steps.csv and snapshots.

    Returns the trajectory.  Raises the recorded step failure after saving
    partial outputs, so a nonzero CLI exit still leaves evidence on disk.
    """
    outdir = Path(outdir if outdir is not None else cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    mesh = cfg.make_mesh()
    extents = mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)
    rho0, u0, forcing = cfg.make_initial(mesh_extents=extents)
    params = cfg.make_params(forcing=forcing)

    write_mesh(mesh, outdir / "mesh.txt")
    (outdir / "config.txt").write_text("\n".join(cfg.resolved_lines()) + "\n")

    index = []

    def save(state, report):
        if cfg.output_every <= 0 or state.k % cfg.output_every:
            return
        rf = f"state_{state.k:06d}_rho.txt"
        uf = f"state_{state.k:06d}_u.txt"
        write_qfield(state.rho, outdir / rf)
        write_crfield(state.u, outdir / uf)
        index.append((state.k, state.t, report.dt if report else "", rf, uf))
        if cfg.output_vtk:
            write_vtk(state, outdir / f"state_{state.k:06d}.vtk")

    traj = run(rho0, u0, params, mesh, n_steps=cfg.n_steps, save_callback=save)

    write_steps_csv(traj.reports, outdir / "steps.csv")
    with open(outdir / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "t", "dt", "rho_file", "u_file"])
        for k, t, dt, rf, uf in index:
            w.writerow([k, _fmt(t), _fmt(dt) if dt != "" else "", rf, uf])
    if traj.failure is not None:
        raise traj.failure
    return traj


def recompute_ledger(rundir, out_path=None):
    """Rebuild the step ledger from saved snapshots (the ``ledger`` command).

    Reports are recomputed for consecutive *saved* states; with snapshot
    cadence 1 this reproduces steps.csv exactly.
    """
    rundir = Path(rundir)
    mesh = read_mesh(rundir / "mesh.txt")
    cfg = RunConfig.from_file(rundir / "config.txt")
    extents = mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)
    forcing = cfg.make_initial(mesh_extents=extents)[2]
    params = cfg.make_params(forcing=forcing)

    rows = []
    with open(rundir / "trajectory.csv") as fh:
        rd = csv.DictReader(fh)
        for row in rd:
            rows.append((int(row["k"]), float(row["t"]),
                         float(row["dt"]) if row["dt"] else None,
                         row["rho_file"], row["u_file"]))
    if len(rows) < 2:
        raise ValueError(f"{rundir}: need at least two snapshots to recompute a ledger")

    from .scheme import State
    states = []
    for k, t, dt, rf, uf in rows:
        rho = read_qfield(rundir / rf, mesh)
        u = read_crfield(rundir / uf, mesh)
        states.append(State(rho, u, t=t, k=k))

    mass0 = total_mass(states[0])
    reports = []
    for (_, _, dt_new, _, _), old, new in zip(rows[1:], states, states[1:]):
        rep = step_ledger(old, new, params,
                          dt=dt_new if new.k == old.k + 1 else None, mass0=mass0)
        reports.append(rep)
    out_path = Path(out_path if out_path is not None else rundir / "ledger.csv")
    write_steps_csv(reports, out_path)
    return reports


# -- studies ------------------------------------------------------------------

def _level_config(cfg: RunConfig, n, init=None):
    from dataclasses import replace
    return replace(cfg, mesh_n=(n, n, n), mesh_path=None,
                   **({"init": init} if init else {}))


@dataclass
class EnergySummary:
    gammas: tuple
    max_slack: float
    min_dissipation: float
    rows: list


def energy_study(study: StudyConfig, outdir=None) -> EnergySummary:
    """Gamma sweep on the coarsest level: per-step slack and dissipation signs."""
    outdir = Path(outdir if outdir is not None else study.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    n = study.levels[0]
    rows = []
    max_slack = -np.inf
    min_diss = np.inf
    for gamma in study.gammas:
        from dataclasses import replace
        cfg = replace(_level_config(study.base, n), gamma=gamma,
                      alpha=min(0.5, 0.9 * 2.0 * (gamma - 1.0)))
        mesh = cfg.make_mesh()
        rho0, u0, forcing = cfg.make_initial()
        params = cfg.make_params(forcing=forcing)
        traj = run(rho0, u0, params, mesh, n_steps=cfg.n_steps)
        if traj.failure is not None:
            raise traj.failure
        for rep in traj.reports:
            rows.append([gamma, rep.k, rep.t, rep.energy_inequality_slack,
                         min(rep.num_dissipation.values()), rep.mass_drift])
            max_slack = max(max_slack, rep.energy_inequality_slack)
            min_diss = min(min_diss, min(rep.num_dissipation.values()))
    with open(outdir / "energy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma", "k", "t", "energy_slack", "min_dissipation", "mass_drift"])
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return EnergySummary(gammas=study.gammas, max_slack=max_slack,
                         min_dissipation=min_diss, rows=rows)


def consistency_study(study: StudyConfig, outdir=None) -> ConsistencyReport:
    """Weak-residual decay across levels for an unforced run."""
    outdir = Path(outdir if outdir is not None else study.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    trajectories = []
    for n in study.levels:
        cfg = _level_config(study.base, n)
        mesh = cfg.make_mesh()
        rho0, u0, forcing = cfg.make_initial()
        if forcing is not None:
            raise ValueError("consistency studies must run without forcing")
        params = cfg.make_params()
        traj = run(rho0, u0, params, mesh, n_steps=cfg.n_steps)
        if traj.failure is not None:
            raise traj.failure
        trajectories.append(traj)

    t_end = min(tr.final.t for tr in trajectories)
    box = (np.zeros(3), np.asarray(study.base.mesh_extents, dtype=float))
    ctfs = continuity_test_functions(t_end, box)
    mtfs = momentum_test_functions(t_end, box)
    report = consistency_residuals(trajectories, ctfs, mtfs)

    with open(outdir / "consistency.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "h", "equation", "test_function", "residual"])
        for n, lv in zip(study.levels, report.levels):
            for phi, rc in zip(ctfs, lv.R_c):
                w.writerow([n, _fmt(lv.h), "continuity", phi.name, _fmt(rc)])
            for phi, rm in zip(mtfs, lv.R_m):
                w.writerow([n, _fmt(lv.h), "momentum", phi.name, _fmt(rm)])
        w.writerow([])
        w.writerow(["# beta_c", _fmt(report.beta_c), "r2_c", _fmt(report.r2_c)])
        w.writerow(["# beta_m", _fmt(report.beta_m), "r2_m", _fmt(report.r2_m)])
    return report


def mms_study(study: StudyConfig, outdir=None) -> ErrorReport:
    """Manufactured-solution convergence in L^gamma (density) and L^2 (velocity)."""
    outdir = Path(outdir if outdir is not None else study.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    report = ErrorReport(gamma=study.base.gamma)
    case = None
    for n in study.levels:
        cfg = _level_config(study.base, n, init=f"mms:{study.case}")
        mesh = cfg.make_mesh()
        rho0, u0, forcing = cfg.make_initial()
        params = cfg.make_params(forcing=forcing)
        case = build_case(study.case, params)
        traj = run(rho0, u0, params, mesh, n_steps=cfg.n_steps)
        if traj.failure is not None:
            raise traj.failure
        report.levels.append(error_vs_reference(traj, case.rho, case.u, study.sub_box))

    (rho_order, rho_r2), (u_order, u_r2) = report.orders()
    with open(outdir / "errors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "h", "rho_error_Lgamma", "u_error_L2"])
        for n, lv in zip(study.levels, report.levels):
            w.writerow([n, _fmt(lv.h), _fmt(lv.rho_error), _fmt(lv.u_error)])
        w.writerow([])
        w.writerow(["# rho_order", _fmt(rho_order), "r2", _fmt(rho_r2)])
        w.writerow(["# u_order", _fmt(u_order), "r2", _fmt(u_r2)])
    return report


# -- legacy-VTK dump ------------------------------------------------------------

def write_vtk(state, path):
    """ASCII legacy-VTK unstructured dump: density and cell-mean velocity."""
    mesh = state.mesh
    uc = cell_average(state.u).values
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nbaroflow state\nASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_vertices} double\n")
        for p in mesh.vertices:
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        fh.write(f"CELLS {mesh.n_cells} {5 * mesh.n_cells}\n")
        for c in mesh.cells:
            fh.write(f"4 {c[0]} {c[1]} {c[2]} {c[3]}\n")
        fh.write(f"CELL_TYPES {mesh.n_cells}\n")
        fh.write("10\n" * mesh.n_cells)
        fh.write(f"CELL_DATA {mesh.n_cells}\n")
        fh.write("SCALARS density double 1\nLOOKUP_TABLE default\n")
        for v in state.rho.values:
            fh.write(f"{float(v)!r}\n")
        fh.write("VECTORS velocity double\n")
        for v in uc:
            fh.write(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
