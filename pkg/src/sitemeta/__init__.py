"""Site-agnostic meta-learning toolkit for heterogeneous multi-site data."""

__version__ = "0.1.0"

from .tensor import (  # noqa: F401
    CongruenceError,
    NonFiniteError,
    NotScalarError,
    ParamSet,
    ShapeError,
    Tensor,
    finite_diff_grad,
    grad,
)
from .models import Batch, ModelSpec, SpecError, forward, init_params  # noqa: F401
from .data import (  # noqa: F401
    ConstantInputError,
    Episode,
    EpisodeError,
    SiteDataset,
    SiteTable,
    mosaic_preprocess,
    sample_episode,
    synth_generate,
    zscore,
)
from .meta import (  # noqa: F401
    AdaptationTrace,
    CheckpointEntry,
    CheckpointRing,
    LearnableLRTable,
    MetaConfig,
    episode_loss,
    inner_adapt,
    meta_step,
    meta_train,
    msl_weights,
)
from .evaluation import (  # noqa: F401
    DegenerateLabelsError,
    EvalReport,
    SearchExhaustedError,
    SearchSpace,
    balanced_accuracy,
    finetune_few_shot,
    random_search,
    roc_auc,
    scratch_baseline,
    transfer_baseline,
    zero_shot_eval,
)
