"""Fixed-classifier feature learning with sequential training-set upgrades.

The package trains MLP feature extractors against never-trained
regular-polytope classifiers, persists per-step feature galleries, and
measures whether each upgraded extractor can query galleries indexed by its
predecessors without re-indexing them.
"""

from ._version import __version__
from .data import (
    LabeledSet,
    Method,
    TimelineMode,
    UpgradeTimeline,
    VerificationPairs,
    build_timeline,
    classes_disjoint,
    gen_blobs,
    load_idx,
    make_verification_pairs,
    pair_space_sizes,
    split_eval_classes,
)
from .errors import (
    CapacityExceededError,
    CoresError,
    FormatError,
    InsufficientDataError,
    IntegrityError,
    InvalidLabelError,
    InvalidParameterError,
    MissingArgumentError,
    MissingArtifactError,
    RunExistsError,
    UndefinedDistanceError,
    UndefinedGainError,
    UndefinedMetricError,
    UnknownPresetError,
)
from .gallery import (
    FeatureGallery,
    read_gallery,
    read_manifest,
    sha256_file,
    write_gallery,
)
from .metrics import (
    METRIC_MAP,
    METRIC_VERIFICATION,
    CompatibilityMatrix,
    CompatibilityReport,
    CriterionAudit,
    avg_multi_accuracy,
    avg_multi_compat,
    best_threshold_accuracy,
    build_compatibility_matrix,
    build_report,
    cosine_distance,
    cosine_distance_matrix,
    ecc_check,
    pairwise_criterion_audit,
    render_matrix_table,
    report_to_json_dict,
    retrieval_map,
    select_compatible_epoch,
    update_gain,
    verification_accuracy,
)
from .netcore import (
    FeatureModel,
    InitMode,
    TrainConfig,
    cores_loss_and_grad,
    init_model,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    train_epochs,
)
from .polytope import (
    FixedClassifier,
    GeometryReport,
    PolytopeKind,
    allocate_classes,
    dsimplex_prototypes,
    pairwise_geometry_report,
    polygon_prototypes,
)
from .report import (
    BUILTIN_PRESETS,
    AggregateRow,
    ExperimentPreset,
    PresetResult,
    RunRecord,
    emit_feature_dump_2d,
    execute_run,
    get_preset,
    preset_datasets,
    run_preset,
)
from .timeline import (
    DriftReport,
    EvalProtocol,
    ModelRegistry,
    RunResult,
    build_eval_protocol,
    centroid_drift,
    derive_seed,
    extract_gallery,
    run_timeline,
    train_ift,
    train_itm,
    train_l2_baseline,
)

__all__ = [name for name in dir() if not name.startswith("_")]
