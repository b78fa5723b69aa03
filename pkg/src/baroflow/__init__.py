"""baroflow: implicit FE/FV solver for isentropic compressible Navier-Stokes
on tetrahedral meshes, with conservation/energy/consistency diagnostics."""

from .mesh import (Mesh, Face, MeshError, MeshFormatError, MeshConformityError,
                   build_box_mesh, read_mesh, write_mesh, cell_quadrature,
                   face_quadrature)
from .fields import (QField, CRField, FaceTracePair, project_Q, project_V,
                     cell_average, broken_grad, broken_div, traces, jumps,
                     broken_norm, jump_seminorm)
from .scheme import (SchemeParams, State, Trajectory, StepFailure, PositivityError,
                     UpwindFlux, pressure, pressure_derivative, pressure_potential,
                     pressure_potential_dd, chi, upwind, sound_speed, total_mass,
                     total_energy, assemble_continuity_residual,
                     assemble_momentum_residual, solve_time_step, adapt_dt, run)
from .diagnostics import (StepReport, step_ledger, upwind_identity_check,
                          ConsistencyReport, consistency_residuals,
                          ErrorReport, error_vs_reference, fit_loglog)

__version__ = "0.1.0"
