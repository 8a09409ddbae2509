"""Learned attribute codec: networks, entropy coding and the bitstream."""

from .bitstream import Bitstream, geometry_digest
from .entropy import LaplaceModel, range_decode, range_encode
from .losses import FocalLossConfig, LossBreakdown, LossWeights, adversarial_loss, focal_loss, total_loss
from .networks import CodecConfig, Geometry, discriminator_forward, encoder_forward, generator_forward
from .pipeline import CodecModel, decode, encode, quantize, rate_estimate

__all__ = [
    "Bitstream", "CodecConfig", "CodecModel", "FocalLossConfig", "Geometry", "LaplaceModel",
    "LossBreakdown", "LossWeights", "adversarial_loss", "decode", "discriminator_forward",
    "encode", "encoder_forward", "focal_loss", "generator_forward", "geometry_digest",
    "quantize", "range_decode", "range_encode", "rate_estimate", "total_loss",
]
