"""Statistical economies of scale for a battery shared by stochastic sources."""

__version__ = "0.1.0"

from battshare.errors import (
    AlignmentError,
    BattShareError,
    CadenceError,
    CapacityError,
    DomainError,
    NumericalError,
    ParseError,
    StructuralError,
    ValidationError,
)
from battshare.markov_core import (
    JointModel,
    UserModel,
    ValidationReport,
    drift,
    load_chain,
    product_chain,
    save_chain,
    stationary_distribution,
    time_reverse,
    validate,
)
from battshare.large_deviations import (
    CgfCurve,
    DecayBound,
    DecayResult,
    cgf_curve,
    decay_rate,
    decay_rate_bound,
    scaled_cgf,
    spectral_radius,
    tilted_matrix,
)
from battshare.battery import (
    BatteryDist,
    SimStats,
    TraceRun,
    exact_stationary,
    reverse_system,
    simulate_chain,
    simulate_trace,
    step,
)
from battshare.ingest import (
    FitReport,
    TraceSeries,
    aggregate,
    autonomy_hours,
    fit_dtmc,
    load_trace,
    net_generation,
    resample,
    save_trace,
    to_energy,
    to_power,
)
from battshare.sizing import (
    SizingResult,
    StudyRow,
    StudyTable,
    decay_slope,
    min_battery_chain,
    min_battery_trace,
    scaling_study,
)
