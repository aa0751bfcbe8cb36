"""Weakly-supervised FCD lesion detection pipeline.

Turns per-view 2D box annotations into ellipsoid ground truth, trains
multi-view patch classifiers with autoencoder pretraining and
localization-specific ensembling, and evaluates detection with a Top-k
score under leave-one-out validation. Fully testable on synthetic
phantom volumes.
"""

__version__ = "0.1.0"

from .annotation import (
    Annotation,
    LesionMask,
    Parallelepiped,
    ViewBox2D,
    inscribe_ellipsoid,
    intersect_boxes,
    rectangular_mask,
)
from .evaluation import AblationConfig, SubjectScores, TopKReport, run_ablation, run_loo, top_k_score, top_k_success
from .intensity_norm import HistogramStandard, apply_histogram_standard, fit_histogram_standard, z_normalize
from .models import (
    AutoencoderModel,
    ClassifierModel,
    EncoderConfig,
    LocalizationEnsemble,
    TrainConfig,
    build_encoder,
    ensemble_predict,
    predict,
    pretrain_autoencoder,
    train_classifier,
    train_localization_ensemble,
)
from .patching import (
    LabeledPatch,
    PatchParams,
    PatchSpec,
    build_dataset,
    extract_stack,
    generate_patch_grid,
    hard_label,
    patch_overlap,
    soft_label,
)
from .phantom import PhantomParams, generate_cohort, generate_phantom
from .volume_io import BrainMask, Volume, compute_brain_mask, load_volume, mirror_x, save_volume
