"""Command-line interface: mesh-gen, run, study, ledger."""

from __future__ import annotations

import argparse
import sys

from . import __version__


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="baroflow",
        description="Implicit FE/FV solver for isentropic compressible flow "
                    "on tetrahedral meshes, with conservation and energy diagnostics.")
    parser.add_argument("--version", action="version", version=f"baroflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh-gen", help="generate a box mesh file")
    p.add_argument("--n", type=int, nargs=3, required=True, metavar=("N1", "N2", "N3"),
                   help="cells per axis")
    p.add_argument("--box", type=float, nargs=3, default=(1.0, 1.0, 1.0),
                   metavar=("LX", "LY", "LZ"), help="box extents")
    p.add_argument("-o", "--output", default="mesh.txt", help="output mesh file")
    p.set_defaults(func=cmd_mesh_gen)

    p = sub.add_parser("run", help="run the solver from a config file")
    p.add_argument("config", help="run configuration (key = value text)")
    p.add_argument("-o", "--output", default=None, help="override output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("study", help="run a refinement study from a study config")
    p.add_argument("config", help="study configuration (key = value text)")
    p.add_argument("-o", "--output", default=None, help="override output directory")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("ledger", help="recompute diagnostics from saved snapshots")
    p.add_argument("rundir", help="output directory of a previous run")
    p.add_argument("-o", "--output", default=None, help="ledger CSV path")
    p.set_defaults(func=cmd_ledger)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except Exception as exc:  # config/mesh/solver errors with readable messages
        print(f"error: {exc}", file=sys.stderr)
        return 1


def cmd_mesh_gen(args):
    from .mesh import build_box_mesh, write_mesh
    if any(k < 1 for k in args.n):
        print("error: --n components must be >= 1", file=sys.stderr)
        return 2
    mesh = build_box_mesh(args.box, args.n)
    write_mesh(mesh, args.output)
    print(f"wrote {args.output}: {mesh.n_cells} cells, {mesh.n_faces} faces "
          f"({mesh.n_interior_faces} interior), h = {mesh.h:.6g}")
    return 0


def cmd_run(args):
    from .config import RunConfig
    from .scheme import StepFailure
    from .study import run_from_config
    cfg = RunConfig.from_file(args.config)
    try:
        traj = run_from_config(cfg, outdir=args.output)
    except StepFailure as exc:
        print(f"step failure: {exc}", file=sys.stderr)
        print(f"partial trajectory saved to {args.output or cfg.output_dir}",
              file=sys.stderr)
        return 3
    last = traj.reports[-1] if traj.reports else None
    print(f"completed {len(traj.reports)} steps to t = {traj.final.t:.6g}")
    if last is not None:
        print(f"mass drift {last.mass_drift:.3e}, "
              f"max |slack| {max(abs(r.energy_inequality_slack) for r in traj.reports):.3e}")
    return 0


def cmd_study(args):
    from .config import StudyConfig
    from .study import consistency_study, energy_study, mms_study
    study = StudyConfig.from_file(args.config)
    outdir = args.output if args.output is not None else study.output_dir
    if study.kind == "energy":
        summary = energy_study(study, outdir)
        print(f"energy study over gamma in {summary.gammas}: "
              f"max slack {summary.max_slack:.3e}, "
              f"min dissipation entry {summary.min_dissipation:.3e}")
    elif study.kind == "consistency":
        rep = consistency_study(study, outdir)
        print(f"consistency orders: beta_c = {rep.beta_c:.3f} (R2 {rep.r2_c:.3f}), "
              f"beta_m = {rep.beta_m:.3f} (R2 {rep.r2_m:.3f})")
    else:
        rep = mms_study(study, outdir)
        (ro, rr2), (uo, ur2) = rep.orders()
        errs_r = [lv.rho_error for lv in rep.levels]
        errs_u = [lv.u_error for lv in rep.levels]
        print(f"mms errors rho: {errs_r}")
        print(f"mms errors u:   {errs_u}")
        print(f"fitted orders: rho {ro:.3f} (R2 {rr2:.3f}), u {uo:.3f} (R2 {ur2:.3f})")
    print(f"study outputs in {outdir}")
    return 0


def cmd_ledger(args):
    from .study import recompute_ledger
    reports = recompute_ledger(args.rundir, out_path=args.output)
    print(f"recomputed {len(reports)} ledger rows")
    return 0


if __name__ == "__main__":
    sys.exit(main())
