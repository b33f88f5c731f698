"""Adaptive mixed-bit activation quantization toolkit.

Training-time activation compression with learnable per-channel bit-widths,
fixed-bit and delta-compression baselines, and a client/server split-learning
harness that exchanges bit-packed activations and gradients over TCP.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, custom_op, tape_reset
from .quant import (
    AqsgdCache,
    FakeQuantResult,
    GatingParams,
    amaq_fake_quant,
    aqsgd_fake_quant,
    bits_loss,
    effective_bits,
    fake_quant,
    init_gating,
    mean_bits,
)

__all__ = [
    "Tensor",
    "backward",
    "custom_op",
    "tape_reset",
    "AqsgdCache",
    "FakeQuantResult",
    "GatingParams",
    "amaq_fake_quant",
    "aqsgd_fake_quant",
    "bits_loss",
    "effective_bits",
    "fake_quant",
    "init_gating",
    "mean_bits",
]
