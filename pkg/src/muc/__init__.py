"""Low-bitrate music codec built on numpy: features, quantizer, bitstream and generator."""
from __future__ import annotations

__version__ = "0.1.0"
