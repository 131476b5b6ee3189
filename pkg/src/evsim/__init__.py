"""Discrete-event simulator for managed EV charging facilities."""

from .algorithms import (ALGORITHM_NAMES, RoundRobin, SortedSchedulingAlgo, UncontrolledCharging,
                         laxity, make_algorithm, round_robin, sorted_schedule, uncontrolled)
from .engine import AlgoView, SimConfig, SimRecord, Simulator, SimulationError, run, simulate, step
from .events import Event, EventQueue, PluginEvent, RecomputeEvent, UnplugEvent, enqueue, pop_due
from .hardware import (Battery, PilotModel, SessionEV, TwoStageBattery, amp_periods_to_kwh,
                       battery_step, clamp_pilot, kwh_to_amp_periods, make_battery, remaining_demand)
from .metrics import MetricsReport, capacity_sweep, compute_metrics, export_load_profile, run_scenario
from .network import (EvseNode, Network, NetworkError, PhasorConstraint, build_auto_network,
                      constraint_currents, is_feasible, max_feasible_rate, stochastic_assign)
from .scenario_io import (BatterySpec, MixtureSpec, Scenario, ScenarioError, load_scenario,
                          sample_events, sessions_to_events)
from .signals import Tariff, TimeSeriesSignal, billing_cost, builtin_tariff, price_at, signal_at

__version__ = "0.1.0"
