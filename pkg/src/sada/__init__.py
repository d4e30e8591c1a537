"""Stain-based augmentation and contrastive training for cell images.

Stain separation and clustering drive restaining, which produces
domain-transformed copies of each image. Contrastive losses over those
copies train a toy encoder that is compared against plain cross-entropy
training under leave-one-domain-out evaluation.
"""

from .augmentation import (
    StainAugmenter,
    generate_batch_transforms,
    normalize_density,
    restain,
    row_percentile99,
)
from .imaging import RgbImage, from_optical_density, load_ppm, save_ppm, to_optical_density
from .losses import (
    cross_entropy,
    disc_loss,
    finite_diff_check,
    local_align_loss,
    rep_loss,
    softmax,
)
from .metrics import confusion_matrix, f1_scores
from .stain_clustering import ClusterModel, StainKMeans, assign, kmeans_fit
from .stain_separation import SnmfConfig, StainDecomposition, StainSeparator, fit_snmf
from .toy_train import (
    ERMClassifier,
    SADAClassifier,
    TrainConfig,
    loo_experiment,
    toy_config,
    toy_erm_config,
)

__version__ = "0.1.0"

__all__ = [
    "RgbImage",
    "to_optical_density",
    "from_optical_density",
    "load_ppm",
    "save_ppm",
    "SnmfConfig",
    "StainDecomposition",
    "StainSeparator",
    "fit_snmf",
    "ClusterModel",
    "StainKMeans",
    "kmeans_fit",
    "assign",
    "StainAugmenter",
    "generate_batch_transforms",
    "normalize_density",
    "restain",
    "row_percentile99",
    "local_align_loss",
    "disc_loss",
    "softmax",
    "cross_entropy",
    "rep_loss",
    "finite_diff_check",
    "confusion_matrix",
    "f1_scores",
    "TrainConfig",
    "toy_config",
    "toy_erm_config",
    "loo_experiment",
    "SADAClassifier",
    "ERMClassifier",
]
