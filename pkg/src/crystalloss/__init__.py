"""L2-constrained softmax (crystal) loss with exact analytic gradients,
quality-aware template pooling, and a verification/identification
evaluation harness.
"""

from . import exceptions
from .data import FeatureDataset, FeatureRecord
from .estimator import CrystalEmbeddingClassifier
from .heads import (
    CrystalHead,
    LossBatchResult,
    SoftmaxHead,
    alpha_lower_bound,
    avg_class_probability,
    crystal_backward,
    crystal_forward,
    head_backward,
    head_forward,
    head_logits,
    softmax_head_forward_backward,
)
from .linalg import (
    cosine_similarity,
    l2_normalize,
    l2_normalize_backward,
    scale,
    softmax_cross_entropy,
)
from .metrics import (
    EvalReport,
    IdentProtocol,
    PairProtocol,
    RocCurve,
    ScoredPair,
    closed_set_identify,
    norm_bin_analysis,
    open_set_identify,
    roc,
    score_pairs,
    tar_at_far,
    tpir_at_fpir,
)
from .network import (
    MlpModel,
    TrainConfig,
    TrainHistory,
    angular_spread,
    build_head,
    extract_features,
    grad_check_model,
    train,
)
from .pooling import (
    MediaItem,
    Template,
    detection_logit,
    media_average_pool,
    quality_attenuate,
    quality_pool,
    template_lomax,
)
from .vmf import LogDensity, VmfDistribution, make_synthetic_dataset, map_loss

__version__ = "0.1.0"

__all__ = [
    "exceptions",
    "FeatureDataset",
    "FeatureRecord",
    "CrystalEmbeddingClassifier",
    "CrystalHead",
    "SoftmaxHead",
    "LossBatchResult",
    "alpha_lower_bound",
    "avg_class_probability",
    "crystal_backward",
    "crystal_forward",
    "head_backward",
    "head_forward",
    "head_logits",
    "softmax_head_forward_backward",
    "cosine_similarity",
    "l2_normalize",
    "l2_normalize_backward",
    "scale",
    "softmax_cross_entropy",
    "EvalReport",
    "IdentProtocol",
    "PairProtocol",
    "RocCurve",
    "ScoredPair",
    "closed_set_identify",
    "norm_bin_analysis",
    "open_set_identify",
    "roc",
    "score_pairs",
    "tar_at_far",
    "tpir_at_fpir",
    "MlpModel",
    "TrainConfig",
    "TrainHistory",
    "angular_spread",
    "build_head",
    "extract_features",
    "grad_check_model",
    "train",
    "MediaItem",
    "Template",
    "detection_logit",
    "media_average_pool",
    "quality_attenuate",
    "quality_pool",
    "template_lomax",
    "LogDensity",
    "VmfDistribution",
    "make_synthetic_dataset",
    "map_loss",
]
