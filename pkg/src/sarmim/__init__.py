"""Self-supervised masked pretraining on speckled amplitude imagery.

Local token windows of a small transformer predict multi-scale log-ratio
gradient features of masked patches; downstream quality is measured by
few-shot linear probing on synthetic shape-classification scenes.
"""

from .errors import DivergenceError, SarMimError, ValidationError
from .evaluation import (FewShotSplit, ProbeConfig, attention_distance,
                         encode_image_features, evaluate_few_shot,
                         make_few_shot_split, probe)
from .features import (GradientField, RoaKernelBank, gr_single_scale,
                       hog_target, lpf_target, multi_scale_target,
                       patch_targets, roa_ratios)
from .imagery import (AugConfig, SceneSpec, apply_speckle, augment,
                      generate_scene, scene_reflectivity)
from .masking import (MaskPlan, PatchGrid, global_mask_plan, mask_plan,
                      sample_local_windows)
from .model import (MaskedPredictor, ModelConfig, build_model, load_checkpoint,
                    mim_loss, save_checkpoint)
from .trainer import PretrainConfig, RunLog, collapse_diagnostic, lr_at, pretrain

__version__ = "0.1.0"

__all__ = [
    "AugConfig", "DivergenceError", "FewShotSplit", "GradientField",
    "MaskPlan", "MaskedPredictor", "ModelConfig", "PatchGrid",
    "PretrainConfig", "ProbeConfig", "RoaKernelBank", "RunLog",
    "SarMimError", "SceneSpec", "ValidationError", "apply_speckle",
    "attention_distance", "augment", "build_model", "collapse_diagnostic",
    "encode_image_features", "evaluate_few_shot", "generate_scene",
    "global_mask_plan", "gr_single_scale", "hog_target", "load_checkpoint",
    "lpf_target", "lr_at", "make_few_shot_split", "mask_plan", "mim_loss",
    "multi_scale_target", "patch_targets", "pretrain", "probe",
    "roa_ratios", "sample_local_windows", "save_checkpoint",
    "scene_reflectivity",
]
