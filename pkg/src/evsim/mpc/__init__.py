from .program import (ChargingProgram, ObjectiveTerm, ProgramContext, ProgramSession,
                      build_program, constraint_rows, demand_charge, energy_cost, equal_share,
                      linearize_magnitude, load_flatten, quick_charge, solve, total_energy)
from .solver import InfeasibleProgram, QuadraticProgram, Solution, solve_qp
from .controller import (MPCAlgorithm, OfflineResult, default_terms, mpc_schedule,
                         offline_optimal, repair_column)
