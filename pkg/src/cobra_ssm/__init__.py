"""Linear-time multimodal state-space language model, in numpy.

Vision features from two patch encoders are projected into the embedding
space of a stack of selective state-space (mamba) blocks, which decode text
with constant memory per token.
"""

from .backbone import (
    BackboneConfig,
    BackboneWeights,
    GenerationSession,
    MultimodalSequence,
    SamplingConfig,
    forward_logits,
    fuse_sequence,
    generate,
    init_backbone,
    next_token_loss,
)
from .bench import ThroughputReport, measure_throughput, scaling_sweep
from .container import ContainerFormatError
from .errors import (
    CobraError,
    ConfigurationError,
    InvalidInputError,
    InvalidParameterError,
    PreconditionError,
    ShapeError,
    StateError,
    UnsupportedModeError,
)
from .model import CobraConfig, CobraModel, init_cobra, load_checkpoint, save_checkpoint
from .prompting import Conversation, detokenize, render, tokenize
from .ssm import (
    LtiSsmParams,
    build_kernel,
    discretize_zoh,
    init_mamba_block,
    lti_forward_convolutional,
    lti_scan_recurrent,
    mamba_block_forward,
    selective_scan,
)
from .training import TrainConfig, lr_at, train_toy
from .vision import ImageInput, VisualFeatures, patchify, project

__version__ = "0.1.0"
