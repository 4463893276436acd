"""Time-series imputation by refining expert priors with a tractable Schrodinger bridge."""

from ._accel import HAS_NUMBA, backend, set_backend
from .bridge import (
    SamplerConfig, bridge_loss, marginal_params, sample_imputation, sample_marginal, transition_sample,
)
from .composition import PriorStack, fuse_output, replicate_target, stack_priors
from .data import (
    Dataset, NormalizationStats, ObservationMask, TimeSeriesWindow, gen_mask, load_csv, make_rng,
    make_windows, split_and_normalize, synthetic_sinusoids,
)
from .errors import BridgeTSError, ConfigError, DataError, NumericalError
from .experts import ConvExpert, ExternalPrior, LinearExpert, PriorEstimate, impute_linear, pretrain_expert
from .model import DenoiserModel, OptimizerState, adam_step
from .report import ExperimentMatrix, ResultTable, emit_report, run_matrix
from .schedule import BridgeSchedule, coefficients
from .trainer import BridgeTS, TrainConfig, TrainReport, evaluate_checkpoint, train

__version__ = "0.1.0"
