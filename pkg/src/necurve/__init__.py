"""Ranking of partially observed normalized-entropy learning curves."""

from necurve.act import (
    MASK_LITERAL,
    MASK_STRICT,
    ActLayer,
    SoftIndicator,
    WindowVariables,
    export_indicator,
    hard_index_select,
    hard_indicator,
    soft_indicator,
    window_transform,
)
from necurve.curves import (
    CurveTooShortError,
    DegenerateCtrError,
    GreedyPrediction,
    LearningCurve,
    LossStream,
    WindowSpec,
    greedy_rank,
    lne_curve,
    log_loss,
    normalized_entropy,
    observed_count,
    resample_curve,
    wne_direct,
    wne_from_lne,
)
from necurve.harness import (
    Checkpoint,
    EvalReport,
    EvalSlice,
    EvaluationError,
    FoldMetrics,
    TrainConfig,
    TrainingError,
    accuracy,
    consistency_analysis,
    cross_validate,
    evaluate,
    evaluate_greedy,
    load_checkpoint_file,
    roc_auc,
    save_checkpoint_file,
    train,
    write_metrics_csv,
    write_plot_data,
    write_report_json,
)
from necurve.rankers import (
    PairBatch,
    RankerConfig,
    build_ranker,
    ce_loss,
    pairwise_probability,
    total_loss,
)
from necurve.synth import (
    CurvePair,
    CurveParams,
    DatasetSplit,
    GenerationError,
    GeneratorConfig,
    LabelingError,
    ModelRecord,
    SplitError,
    generate_dataset,
    generate_stream,
    grouped_kfold,
    measure_inconsistency,
    pair_and_label,
    full_scale,
    read_records,
    write_records,
    write_split_manifest,
)

__all__ = [
    "ActLayer",
    "Checkpoint",
    "CurvePair",
    "CurveParams",
    "CurveTooShortError",
    "DatasetSplit",
    "DegenerateCtrError",
    "EvalReport",
    "EvalSlice",
    "EvaluationError",
    "FoldMetrics",
    "GenerationError",
    "GeneratorConfig",
    "GreedyPrediction",
    "LabelingError",
    "LearningCurve",
    "LossStream",
    "MASK_LITERAL",
    "MASK_STRICT",
    "ModelRecord",
    "PairBatch",
    "RankerConfig",
    "SoftIndicator",
    "SplitError",
    "TrainConfig",
    "TrainingError",
    "WindowSpec",
    "WindowVariables",
    "accuracy",
    "build_ranker",
    "ce_loss",
    "consistency_analysis",
    "cross_validate",
    "evaluate",
    "evaluate_greedy",
    "export_indicator",
    "generate_dataset",
    "generate_stream",
    "greedy_rank",
    "grouped_kfold",
    "hard_index_select",
    "hard_indicator",
    "lne_curve",
    "load_checkpoint_file",
    "log_loss",
    "measure_inconsistency",
    "normalized_entropy",
    "observed_count",
    "pair_and_label",
    "pairwise_probability",
    "full_scale",
    "read_records",
    "resample_curve",
    "roc_auc",
    "save_checkpoint_file",
    "soft_indicator",
    "total_loss",
    "train",
    "window_transform",
    "wne_direct",
    "wne_from_lne",
    "write_metrics_csv",
    "write_plot_data",
    "write_records",
    "write_report_json",
    "write_split_manifest",
]

__version__ = "0.1.0"
