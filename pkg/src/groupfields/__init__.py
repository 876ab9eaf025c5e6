"""groupfields: behavioral-field analytics for interacting groups.

Converts per-agent kinematic micro-signals into a directed interaction
matrix, nine behavioral fields, a phase-space state vector, spectral
stability and early-warning statistics, a criticality index with
time-to-threshold, and ranked what-if intervention forecasts.
"""

from .core import (
    AgentMicroState,
    CalibrationProfile,
    FrameRejected,
    MicroStateFrame,
    NormalizedState,
    Scene,
    ValidatedFrame,
    frame_from_json,
    frame_to_json,
    normalize_agent,
    normalize_frame,
    validate_frame,
)
from .criticality import (
    CriticalityReport,
    DangerSpec,
    ForecastPath,
    TauEstimate,
    classify_zone,
    criticality_g,
    criticality_index,
    evaluate_criticality,
    time_to_threshold,
)
from .fields import (
    FieldFrame,
    Grid,
    StateVector,
    alignment_dispersion,
    assemble_state_vector,
    attention_field,
    boundary_field,
    compute_instant_fields,
    influence_field,
    kuramoto_synchrony,
    momentum,
    noise_level,
    phase_extract,
    smooth_to_scene,
    tension_field,
)
from .interaction import (
    GraphSummary,
    InteractionMatrix,
    bearing_gap,
    build_interaction_matrix,
    graph_summaries,
    kernel_eval,
)
from .pipeline import (
    FrameReport,
    ParsedStream,
    Pipeline,
    PipelineOptions,
    RunSummary,
    StreamAborted,
    parse_stream,
    replay,
    run_pipeline,
)
from .profiles import NEGOTIATION, VERTICALS, danger_for, profile_for
from .scenario import (
    CausalChain,
    EffectSpec,
    EnsembleInvalid,
    EnsembleStats,
    InterventionSpec,
    ScenarioResult,
    SurrogateParams,
    Trajectory,
    causal_chain,
    cost_J,
    no_op,
    run_ensemble,
    select_intervention,
    simulate_trajectory,
)
from .spectral import EwsReport, SpectralReport, power_iteration, relaxation_time, rolling_ews
from .synthetic import (
    PRESETS,
    RegimePhase,
    ScenePreset,
    generate_stream,
    golden_fixture,
    golden_interventions,
    golden_scene,
    scheduled_crossing_time,
)

__version__ = "0.1.0"
