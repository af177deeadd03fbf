from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .config import Arch, ModelConfig
from .network import (
    ActivationTrace,
    LengthExceeded,
    Patch,
    PatchOutOfBounds,
    RumourTransformer,
    argmax_label,
    forward,
    forward_with_patch,
    input_gradients,
    predict,
)
from .tokens import EmptyInput, TokenizedEvent, mask_threads, tokenize
from .train import Divergence, EpochLog, OptConfig, TrainResult, train

__all__ = [
    "ActivationTrace",
    "Arch",
    "Divergence",
    "EmptyInput",
    "EpochLog",
    "LengthExceeded",
    "ModelConfig",
    "OptConfig",
    "Patch",
    "PatchOutOfBounds",
    "RumourTransformer",
    "TokenizedEvent",
    "TrainResult",
    "argmax_label",
    "forward",
    "forward_with_patch",
    "input_gradients",
    "load_checkpoint",
    "mask_threads",
    "predict",
    "read_header",
    "save_checkpoint",
    "tokenize",
    "train",
]
