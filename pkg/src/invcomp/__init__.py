"""invcomp: iterative foreground/background color and alpha refinement for matting."""

from .compositing import (
    CANONICAL,
    NETWORK,
    GradientVariant,
    LikelihoodGradient,
    MattingState,
    TRIMAP_BACKGROUND,
    TRIMAP_FOREGROUND,
    TRIMAP_UNKNOWN,
    composite,
    init_state,
    likelihood_gradient,
    log_likelihood,
    residual,
)
from .datagen import AugmentConfig, MattingSample, gen_foreground, gen_trimap, make_sample
from .pipeline import (
    ColorMetrics,
    TilePlan,
    benchmark,
    build_tile_plan,
    color_metrics,
    infer_tiled,
    receptive_field_probe,
)
from .rim import (
    HiddenState,
    IterationConfig,
    RimNet,
    Trajectory,
    rim_step,
    run_inference,
    to_canonical_space,
    to_network_space,
    zero_hidden,
)
from .training import (
    LossReport,
    TrainConfig,
    load_checkpoint,
    reconstruction_loss,
    save_checkpoint,
    total_loss,
    train_loop,
    train_step,
)

__version__ = "0.1.0"
