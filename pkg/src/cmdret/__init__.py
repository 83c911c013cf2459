"""Speech-image retrieval trainer with a cross-modal denoising auxiliary task.

Contrastive alignment between speech and image global features, an
in-batch patch-noise denoising objective over a small fusion stage, full
reverse-mode gradients verified against finite differences, and
bidirectional Recall@K evaluation, all on precomputed or synthetic
feature sequences.
"""

from .autodiff import Tape, Tensor, backward
from .encoders import (
    FeatureSequence,
    ModelConfig,
    MultiLayerSpeechFeatures,
    ParamStore,
    aggregate_layers,
    build_param_store,
    encode_speech,
    image_passthrough,
)
from .errors import (
    BatchSizeError,
    CmdretError,
    ConfigError,
    ContractError,
    DataError,
    DeterminismError,
    DivergenceError,
    FormatError,
    ShapeError,
    StateError,
)
from .fusion import NoiseSpec, NoisyImageBatch, cross_attend, fuse_project, inject_patch_noise
from .gradcheck import GradCheckReport, finite_diff_check
from .objectives import (
    build_targets,
    cmd_loss_graph,
    contrastive_loss,
    contrastive_loss_graph,
    cross_entropy,
    similarity_probs,
    total_loss,
)
from .retrieval import RetrievalReport, evaluate_bidirectional, recall_at_k, score_all_pairs
from .trainer import (
    OptimState,
    TrainConfig,
    adam_step,
    load_checkpoint,
    lr_at_step,
    run_training,
    save_checkpoint,
    train_step,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
