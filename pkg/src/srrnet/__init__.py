"""Video camouflaged-object segmentation with score-driven reference memory."""

__version__ = "0.1.0"

from .attention import ATTENTION_MODES, AttentionConfig, BranchTokens, RMABlock
from .backbone import FrameTriplet, PyramidFeatures, RMABackbone, StageConfig
from .decoder import DecoderConfig, DualPurposeDecoder, PredictionPair
from .model import SRRNet, build_model, desk_config, full_config, preset_config
from .nn import AdamW, Module, Parameter, count_parameters, load_checkpoint, save_checkpoint
from .pipeline import (
    InferenceSession,
    LossConfig,
    MemoryState,
    REFERENCE_MODES,
    TrainSchedule,
    compute_loss,
    infer_sequence,
    init_session,
    sample_static_triplet,
    sample_training_triplet,
    train,
)
from .tensor import Tensor, backward, no_grad
