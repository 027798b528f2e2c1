"""Domain adaptation for a frozen learned image codec with gated decoder adapters."""

from .adapters import AdapterBank, blend, init_bank
from .bitstream import decode_stream, encode_stream
from .codec import Backbone, CodecConfig, Image
from .errors import (
    CodecError,
    CompatibilityError,
    ConfigurationError,
    DataError,
    FramingError,
    LicError,
)
from .gate import GateConfig, GateNetwork
from .metrics import bd_psnr, bd_rate, psnr
from .model import AdaptedCodec, load_checkpoint, save_checkpoint
from .policy import PolicyKind, apply_policy

__version__ = "0.1.0"

__all__ = [
    "AdaptedCodec", "AdapterBank", "Backbone", "CodecConfig", "CodecError", "CompatibilityError",
    "ConfigurationError", "DataError", "FramingError", "GateConfig", "GateNetwork", "Image", "LicError",
    "PolicyKind", "apply_policy", "bd_psnr", "bd_rate", "blend", "decode_stream", "encode_stream",
    "init_bank", "load_checkpoint", "psnr", "save_checkpoint",
]
