"""Probabilistic forecasting for graph-connected resource-usage series.

The package splits into data handling (panel_io, graph_build), the numeric
core (autodiff, spectral, recurrent_cells), the model and its training
(graphdf_model, training, baseline), evaluation (evaluation), and the
opportunistic-scheduling simulator (scheduler_sim). `cli_harness` exposes
the whole pipeline as the `graphdf` command.
"""

from .errors import (
    DataError,
    DegenerateDenominator,
    DegenerateGraphWarning,
    GraphDFError,
    InvalidValue,
    IrregularGrid,
    MissingObservation,
    NoLag,
    NumericError,
    NumericOverflow,
    OracleBudgetExceeded,
    ShapeError,
    TrainingDiverged,
)
from .panel_io import (
    SynthConfig,
    TimeSeriesPanel,
    load_panel,
    load_trace,
    make_time_covariates,
    save_panel,
    synth_panel,
)
from .graph_build import (
    Graph,
    LaplacianBundle,
    Threshold,
    TopK,
    build_rbf_graph,
    laplacian_bundle,
    node_neighborhood,
    power_iteration,
)
from .spectral import (
    ChebCoeffs,
    GraphSignal,
    chebyshev_filter,
    diffusion_filter,
    exact_spectral_filter,
    graph_conv_layer,
)
from .recurrent_cells import (
    CellState,
    DcgruParams,
    DenseLstmParams,
    GcrnLstmParams,
    dcgru_step,
    gcrn_lstm_step,
    lstm_step,
)
from .graphdf_model import (
    GraphDFModel,
    GraphDFParams,
    VariantConfig,
    fixed_effect,
    global_factors,
    load_model,
    local_input_signal,
    local_sigma,
    predict_step,
    save_model,
)
from .training import (
    TrainConfig,
    TrainReport,
    adam_step,
    finite_diff_check,
    gaussian_nll,
    train,
)
from .evaluation import (
    ForecastDistribution,
    forecast_samples,
    normalized_quantile_loss,
    point_forecast,
    quantile_loss,
    rho_quantile,
)
from .baseline import LocalOnlyLstm
from .scheduler_sim import (
    GraphDFForecaster,
    OracleForecaster,
    ScheduleReport,
    SchedulerConfig,
    run_schedule_sim,
    schedule_metrics,
)

__version__ = "0.1.0"
