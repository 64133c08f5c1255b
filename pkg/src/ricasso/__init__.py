"""Joint long-tailed classification and OOD detection with mixed samples as pseudo-outliers."""

from .data import (
    AntiLongTailSampler,
    ClassProfile,
    MixedSample,
    TrainBatch,
    anti_longtail_sampler,
    build_training_batch,
    compute_prior,
    cutmix,
    make_longtail_profile,
    mixup,
)
from .losses import (
    LossBreakdown,
    LossConfig,
    aala_factor,
    adjusted_softmax,
    cbcl_loss,
    cls_loss,
    dec_distance,
    dual_entropy_weight,
    energy_score,
    nod_loss,
    rcl_loss,
    recalibrated_margins,
    total_loss,
    vbl_distance,
)
from .metrics import OODReport, ScoreSet, auroc, fpr_at_tpr, group_accuracy, msp_score, odin_score
from .model import (
    ClassCenters,
    ExpertAssignment,
    ExpertEnsembleOutput,
    MoEClassifier,
    assign_experts,
    expert_prior,
    update_centers,
)

__version__ = "0.1.0"
