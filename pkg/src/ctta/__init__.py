"""Continual test-time adaptation with a parameter-selective mean teacher.

The package splits into five layers: ``network`` (flat-vector MLP with
hand-written gradients), ``fisher`` (diagonal importance scores, quantile
masks, quadratic anchor), ``adapt`` (the selective mean teacher and
baselines), ``stream`` (synthetic drifting-domain data), and ``harness``
(experiment runner, protocols, exports).
"""

__version__ = "0.1.0"

from .adapt import (
    AdapterConfig,
    MeanTeacherState,
    StepDiagnostics,
    bn_adapt_step,
    init_adaptation_state,
    plain_mt_step,
    pretrain_source,
    psmt_step,
    source_only_step,
    state_fingerprint,
    teacher_pseudolabel,
)
from .errors import ConfigError, CsvFormatError, NumericError
from .fisher import FisherDiag, MaskVector, compute_mask, estimate_fisher_diag, student_regularizer
from .harness import (
    FisherSnapshot,
    MetricsRecord,
    RunConfig,
    RunResult,
    ScheduleConfig,
    config_from_dict,
    export_fisher_report,
    load_config,
    run_ablation,
    run_experiment,
    run_sweep,
    summarize,
    topk_retention,
    validate_config,
)
from .network import (
    Batch,
    Layout,
    LayoutEntry,
    NetworkSpec,
    ParamVector,
    build_layout,
    commit_norm_stats,
    forward,
    init_network,
    loss_and_grad,
    per_sample_logprob_grads,
)
from .stream import (
    CORRUPTION_KINDS,
    SEVERITY_TABLE,
    CorruptionSpec,
    DomainSchedule,
    SourceConfig,
    build_schedule,
    corrupt,
    make_source,
    stream_batches,
)
