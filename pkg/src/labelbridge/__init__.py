"""labelbridge: a Brownian-bridge diffusion classifier.

Inputs are translated onto a codebook of mutually orthogonal image labels by
a small pinned diffusion process; classification is nearest-label search, and
the whole pipeline stays differentiable for white-box robustness evaluation.
"""

__version__ = "0.1.0"

from .codebook import (
    LabelCodebook,
    generate_codebook,
    label_distances,
    load_codebook,
    nearest_label,
    save_codebook,
)
from .bridge import (
    BridgeSchedule,
    build_schedule,
    classification_loss,
    classification_loss_terms,
    confusing_class,
    forward_marginal,
    forward_transition,
    inter_target,
    intra_target,
    predict_y0_onestep,
    reverse_step,
    sample_label,
    true_posterior_mean,
)
from .predictor import (
    OraclePredictor,
    PredictorConfig,
    UNetPredictor,
    build_predictor,
    param_count,
    predict_eps,
)
from .classifier import (
    ClassifierBundle,
    classify,
    classify_eot,
    classify_votes,
    label_scores,
    margin_statistic,
    predict_batch,
    soft_logits,
)
from .attacks import (
    AttackConfig,
    EvalReport,
    craft_adversarial,
    estimate_gradient,
    evaluate_robustness,
)
from .data import DataConfig, Dataset, load_dataset
from .training import (
    Checkpoint,
    TrainConfig,
    bundle_from_checkpoint,
    config_hash,
    load_checkpoint,
    save_checkpoint,
    train,
)
