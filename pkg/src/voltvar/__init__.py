"""Volt-var control studies for unbalanced four-wire LV feeders."""

__version__ = "0.1.0"

from .netmodel import (
    Bus,
    CapabilityMode,
    CapabilitySpec,
    ContingencyId,
    Inverter,
    Line,
    Load,
    NetworkModel,
    SlackSource,
    ValidationReport,
    ZIPLoad,
    apply_contingency,
    feasible_q_interval,
    load_network,
    network_checksum,
    save_network,
    validate_network,
)
from .powerflow import (
    LoadState,
    PowerFlowDivergence,
    PowerFlowSolution,
    ScenarioPoint,
    SolveOptions,
    check_limits,
    line_losses,
    mean_bus_vuf,
    solve_power_flow,
    thevenin_impedance,
    vuf,
    zip_demand,
)
from .scenarios import (
    ScenarioSet,
    TimeSeries,
    build_scenarios,
    reduce_scenarios,
    scenario_distance,
)
from .opf import (
    Objective,
    OptimalVoltages,
    StageTwoResult,
    objective_value,
    stage1_optimal_voltages,
    stage2_optimal_dq,
)
from .vvc import (
    VVC,
    VVCSet,
    clamp_q,
    evaluate_vvc,
    extract_vvc_set,
    stage3_base_voltages,
    stage4_fit_vvc,
    vvc_quality,
)
from .resilience import (
    PRBSConfig,
    TheveninCircuit,
    VVCBank,
    build_vvc_bank,
    classify_configuration,
    estimate_impedance_prbs,
    prbs_sequence,
    select_vvc,
)
from .simulate import (
    AvailabilitySchedule,
    FixedPF,
    NoControl,
    ResilientVVC,
    SimulationReport,
    StaticVVC,
    compare_reports,
    run_timeseries,
    step,
)
