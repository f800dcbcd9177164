"""Weakly supervised instance labeling with attention MIL, bag-level
consistency regularization and teacher-student distillation."""
from .distill import bernoulli_kl, soften, student_loss
from .losses import conditional_entropy
from .metrics import MetricReport, accuracy, auroc, f1_score
from .model import (
    BREAST, COLON, LENET5, FeatureExtractorSpec, MilModel, aggregate, attention_weights,
    build_model, extract_features, load_checkpoint, predict_bag, predict_instance,
    predict_instances, save_checkpoint,
)
from .training import train_student, train_teacher
from .types import (
    BREAST_VAT, COLON_VAT, AttentionParams, Bag, ConfigError, DistillConfig, FeatureBag,
    PredictionOutput, TrainConfig, VatConfig, WeakBag, weak_view,
)
from .vat import drop_instances, inject_noise_instances, jitter_instances, perturb_bag, vat_loss

__version__ = "0.1.0"
