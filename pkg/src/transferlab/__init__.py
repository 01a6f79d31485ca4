"""Desk-scale laboratory for black-box adversarial transferability studies
on small differentiable embedding classifiers."""

from .augment import AugmentedDataset, AugTuple, PoiPair, augment_dataset, interpolate
from .data import (
    Dataset,
    LevelSpec,
    LEVELS,
    gen_level,
    gen_synthetic,
    load_dataset,
    pick_attack_sets,
    save_dataset,
    split_counts,
    split_disjoint,
)
from .linearity import (
    FinetuneConfig,
    LinearityCurve,
    curve_deviation,
    fit_beta,
    fit_sharpness,
    finetune,
    ideal_pair_output,
    measure_linearity_curve,
    soft_assignment_loss,
    triplet_linearity_loss,
)
from .models import (
    EmbeddingModel,
    ModelConfig,
    TrainConfig,
    accuracy,
    cosine,
    cosine_input_gradient,
    load_model,
    save_model,
    train_softmax,
)
from .attack import (
    AttackConfig,
    AttackResult,
    assemble_gradients,
    cw_attack,
    cw_hinge,
    distance_constrained_attack,
    region_restricted_attack,
    search_adversarial,
)
from .evaluate import (
    SuccessCriteria,
    TransferReport,
    calibrate_eer,
    cosine_loss,
    dodge_success,
    fit_loss_curves,
    impersonate_success,
    predict_transferability,
    transferability,
    verifier_score,
    verify_success,
)

__version__ = "0.1.0"
