"""Weakly supervised coarse segmentation: patch classifiers trained from image-level labels."""

__version__ = "0.1.0"

from .dataset_io import (  # noqa: E402
    AugConfig,
    ClassMask,
    GridSpec,
    LabeledImage,
    Patch,
    augment,
    color_correct,
    load_dataset,
    random_crop,
    reassemble_mask,
    tile_image,
)
from .ensemble import EnsembleConfig, ensemble_predict, normalize_logits, predict_mask  # noqa: E402
from .losses import nt_xent, softmax, weighted_ce  # noqa: E402
from .metrics import ConfusionMatrix, MetricReport, collapse_binary, overall_f1, per_class_metrics  # noqa: E402
from .model_core import Classifier, init_params  # noqa: E402
from .optimizer import AdamState, adam_step  # noqa: E402
from .seaclip import builtin_prompt_groups, generate_pseudolabels, mock_scorer, zero_shot_group  # noqa: E402
from .seafeats import TemplateBank, assign_pseudolabel, compute_templates, cosine_sim, train_seafeats  # noqa: E402
