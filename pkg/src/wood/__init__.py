"""Weakly-supervised multi-modal out-of-distribution detection.

Two complementary detectors share one model: a hinge-margin contrastive
alignment score that catches mismatched image-text pairs, and a
sparsity-gated binary classifier trained with a small labeled-OOD budget
that catches whole-domain shifts the alignment score is blind to. Their
fused score is p_ood = 1 - p_bc * p_cl, thresholded against a calibrated
delta.
"""

from .config import ExperimentConfig, OUTPUT_DIR_ENV, desk_config
from .core import SimilarityMatrix, cosine_similarity, l2_normalize, similarity_matrix
from .detect import (
    DetectionScores,
    GroupMetrics,
    MetricsReport,
    ThresholdCalibration,
    auroc,
    build_metrics_report,
    calibrate_threshold,
    confusion_metrics,
    decide,
    score_histograms,
    unified_score,
)
from .harness import (
    Checkpoint,
    CheckpointError,
    TrainingDiverged,
    ablation_sweep,
    evaluate,
    load_checkpoint,
    prepare_data,
    save_checkpoint,
    train,
)
from .losses import (
    LossBreakdown,
    batch_loss,
    bce,
    classifier_loss,
    contrastive_loss,
    hinge_id_loss,
    hinge_ood_loss,
    joint_objective,
    naive_contrastive_loss,
)
from .model import (
    ClassifierHead,
    EncoderBackend,
    ForwardPass,
    GateProjection,
    WoodModel,
    build_backend,
    fuse,
    pair_score_cl,
    register_backend,
)
from .scenarios import (
    PairedDataset,
    PairedSample,
    SyntheticCorpusSpec,
    TrainingBatch,
    assemble_training_batches,
    generate_synthetic_corpus,
    make_scenario1,
    make_scenario2,
    make_scenario3,
    make_test_split,
)

__version__ = "0.1.0"
