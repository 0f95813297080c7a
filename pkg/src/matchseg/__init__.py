"""matchseg: semi-supervised segmentation with match-based consistency
training and prompt-guided pseudo-label refinement.

A labeled/unlabeled teacher-student loop (weak/strong augmentation,
confidence-gated pseudo-labels, EMA teacher) whose unlabeled supervision can
be refined by a promptable segmenter driven by automatically extracted point
or box prompts, trained in a warm-up phase followed by an interactive phase.
"""

from .core import (
    ImageSample,
    LabelMask,
    PseudoLabel,
    SoftPrediction,
    one_hot,
    prediction_from_label,
    pseudo_from_label,
    validate_prediction,
)
from .augment import (
    GeometricTransform,
    IntensityPerturbation,
    apply_strong,
    apply_weak,
    identity_transform,
    sample_intensity_perturbation,
    sample_weak_transform,
    transform_mask,
)
from .match_engine import (
    FeaturePerturb,
    LossBreakdown,
    MatchStrategy,
    TeacherStudent,
    ce_loss,
    dice_loss,
    ema_update,
    forward,
    generate_pseudo_label,
    lambda_schedule,
    make_teacher_student,
    supervised_loss,
    total_loss,
    unsup_step,
    unsupervised_loss,
)
from .unet import UNet, UNetSpec
from .prompting import (
    BoxPrompt,
    ClassPromptSet,
    PointPrompt,
    PromptBundle,
    bundle_from_prediction,
    connected_components,
    extract_box_prompt,
    extract_point_prompts,
    prompts_from_label,
)
from .segmenter import (
    OracleSegmenter,
    PromptableSegmenter,
    ToyPromptSegmenter,
    finetune_step,
    load_external_segmenter,
    refine_pseudo_label,
    segment,
)
from .metrics import (
    CaseMetrics,
    aggregate,
    dice,
    evaluate_case,
    hd95,
    wilcoxon_signed_rank,
)
from .data import (
    SplitManifest,
    SynthConfig,
    build_manifest,
    load_manifest,
    load_slices,
    load_split,
    save_manifest,
    synth_generate,
)
from .trainer import (
    RunConfig,
    TrainState,
    checkpoint_load,
    checkpoint_save,
    config_from_dict,
    interactive_step,
    make_batch,
    poly_lr,
    run,
    warmup_step,
)

__version__ = "0.1.0"
