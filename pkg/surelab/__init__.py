from surelab.acceptance import (
    CheckResult,
    TheorySuite,
    check_gradient,
    gradient_check_model,
    run_theory_suite,
    summary_checks,
    theory_checks,
)
from surelab.autodiff import (
    GradCheckReport,
    GradTape,
    Tensor,
    backward,
    check_gradients,
    forward,
)
from surelab.buffer import (
    AnyBufferPolicy,
    AnyBufferTiming,
    BufferEntry,
    BufferPolicy,
    BufferTiming,
    QuotaUpdate,
    ReplayBatch,
    ReplayMemory,
    get_buffer_policy,
    get_buffer_timing,
)
from surelab.config import (
    AnyOrder,
    BufferConfig,
    Cell,
    ExperimentConfig,
    GridConfig,
    RunSection,
    StreamConfig,
    apply_overrides,
    config_hash,
    parse_config,
    resolve_order,
)
from surelab.errors import (
    CheckpointError,
    ConfigError,
    ConfigMismatchError,
    CorruptCheckpointError,
    EmptyDataError,
    IncompleteMatrixError,
    InvalidSequenceError,
    NonFiniteError,
    PolicyError,
    ShapeError,
    SurelabError,
    TapeError,
)
from surelab.experiment import (
    CellResult,
    ExperimentResult,
    resume_experiment,
    run_cell,
    run_experiment,
    run_experiment_async,
)
from surelab.io.checkpoint import load_checkpoint, save_checkpoint
from surelab.io.configfile import ConfigFile
from surelab.io.steplog import StepLog
from surelab.metrics import (
    AccuracyMatrix,
    MetricSummary,
    average_forgetting,
    average_performance,
    backward_transfer,
    final_performance,
    forgetting,
    summarize,
)
from surelab.model import (
    AdapterMode,
    AnyAdapterMode,
    DualAdapterModel,
    LoraAdapter,
    ModelConfig,
    forward_logits,
    get_adapter_mode,
    greedy_decode,
    init_model,
    sequence_nll,
)
from surelab.optim import SgdConfig, SgdStats, sgd_step
from surelab.report import ReportResult, emit_report
from surelab.rng import make_rng, split_rng
from surelab.surprise import (
    AnySurpriseVariant,
    SurpriseScore,
    SurpriseVariant,
    get_surprise_variant,
    rank_top_k,
    score,
    score_batch,
)
from surelab.tasks import (
    Example,
    SyntheticTaskSpec,
    TaskData,
    TaskStream,
    bayes_accuracy,
    generate_stream,
)
from surelab.theory import (
    ComplementarityRow,
    CorrelationReport,
    EmaRow,
    MmdEstimate,
    NoiseRow,
    QuadraticTaskFamily,
    RbfKernel,
    complementarity_experiment,
    ema_noise_experiment,
    ema_quadratic_experiment,
    mmd_unbiased,
    rank_correlation,
    surprise_gradient_correlation,
)
from surelab.trainer import (
    AnyMethod,
    Decoding,
    LossSpan,
    Method,
    RunConfig,
    RunState,
    StepRecord,
    TrainSchedule,
    ema_update,
    ema_weights,
    evaluate_all_tasks,
    get_method,
    init_run_state,
    run_task_sequence,
    train_on_task,
)

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix",
    "AdapterMode",
    "AnyAdapterMode",
    "AnyBufferPolicy",
    "AnyBufferTiming",
    "AnyMethod",
    "AnyOrder",
    "AnySurpriseVariant",
    "BufferConfig",
    "BufferEntry",
    "BufferPolicy",
    "BufferTiming",
    "Cell",
    "CellResult",
    "CheckResult",
    "CheckpointError",
    "ComplementarityRow",
    "ConfigError",
    "ConfigFile",
    "ConfigMismatchError",
    "CorrelationReport",
    "CorruptCheckpointError",
    "Decoding",
    "DualAdapterModel",
    "EmaRow",
    "EmptyDataError",
    "Example",
    "ExperimentConfig",
    "ExperimentResult",
    "GradCheckReport",
    "GradTape",
    "GridConfig",
    "IncompleteMatrixError",
    "InvalidSequenceError",
    "LoraAdapter",
    "LossSpan",
    "Method",
    "MetricSummary",
    "MmdEstimate",
    "ModelConfig",
    "NoiseRow",
    "NonFiniteError",
    "PolicyError",
    "QuadraticTaskFamily",
    "QuotaUpdate",
    "RbfKernel",
    "ReplayBatch",
    "ReplayMemory",
    "ReportResult",
    "RunConfig",
    "RunSection",
    "RunState",
    "SgdConfig",
    "SgdStats",
    "ShapeError",
    "StepLog",
    "StepRecord",
    "StreamConfig",
    "SurelabError",
    "SurpriseScore",
    "SurpriseVariant",
    "SyntheticTaskSpec",
    "TapeError",
    "TaskData",
    "TaskStream",
    "Tensor",
    "TheorySuite",
    "TrainSchedule",
    "__version__",
    "apply_overrides",
    "average_forgetting",
    "average_performance",
    "backward",
    "backward_transfer",
    "bayes_accuracy",
    "check_gradient",
    "check_gradients",
    "complementarity_experiment",
    "config_hash",
    "ema_noise_experiment",
    "ema_quadratic_experiment",
    "ema_update",
    "ema_weights",
    "emit_report",
    "evaluate_all_tasks",
    "final_performance",
    "forgetting",
    "forward",
    "forward_logits",
    "generate_stream",
    "get_adapter_mode",
    "get_buffer_policy",
    "get_buffer_timing",
    "get_method",
    "get_surprise_variant",
    "gradient_check_model",
    "greedy_decode",
    "init_model",
    "init_run_state",
    "load_checkpoint",
    "make_rng",
    "mmd_unbiased",
    "parse_config",
    "rank_correlation",
    "rank_top_k",
    "resolve_order",
    "resume_experiment",
    "run_cell",
    "run_experiment",
    "run_experiment_async",
    "run_task_sequence",
    "run_theory_suite",
    "save_checkpoint",
    "score",
    "score_batch",
    "sequence_nll",
    "sgd_step",
    "split_rng",
    "summarize",
    "summary_checks",
    "surprise_gradient_correlation",
    "theory_checks",
    "train_on_task",
]
