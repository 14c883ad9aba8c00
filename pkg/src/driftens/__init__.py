"""Online ensemble forecasting for multivariate streams under concept drift."""

from .numerics import OptimConfig, ParamSet, finite_diff_check, make_rng, matmul, optim_step
from .forecasters import ForecasterSpec, NormStats, SeriesWindow, build_forecaster, mse_loss
from .ensemble import (
    CombinerSpec,
    EnsembleState,
    bias_forward,
    build_combiner,
    combine,
    egd_update,
    kstep_update,
    normalize_combined,
    train_bias,
)
from .regret import (
    LossLedger,
    RegretReport,
    external_bound,
    external_regret,
    internal_bound,
    internal_regret,
    interval_regret,
)
from .stream import MetricsAccumulator, RunReport, StreamConfig, run_online, run_online_delayed, split_and_normalize
from .data import Dataset, SynthSpec, gen_piecewise_ar, gen_sine_regime, gen_switch, load_csv

__version__ = "0.1.0"
