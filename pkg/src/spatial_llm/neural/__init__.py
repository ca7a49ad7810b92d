"""Toy aligner + decoder model with hand-written backpropagation."""

from .checkpoint import load_checkpoint, save_checkpoint
from .model import (
    AlignerConfig,
    DecoderConfig,
    Example,
    ModelConfig,
    ModelState,
    backward,
    decoder_forward,
    expand_vocab,
    forward,
    fuse_after,
    fuse_before,
    generate,
    init_state,
    interpolate_iv,
    qformer,
    surrogate_encode,
)
from .optim import AdamState, adam_step, clip_grad_norm
from .tokenizer import Tokenizer

__all__ = [
    "AdamState",
    "AlignerConfig",
    "DecoderConfig",
    "Example",
    "ModelConfig",
    "ModelState",
    "Tokenizer",
    "adam_step",
    "backward",
    "clip_grad_norm",
    "decoder_forward",
    "expand_vocab",
    "forward",
    "fuse_after",
    "fuse_before",
    "generate",
    "init_state",
    "interpolate_iv",
    "load_checkpoint",
    "qformer",
    "save_checkpoint",
    "surrogate_encode",
]
