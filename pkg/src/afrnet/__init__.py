"""Fingerprint recognition with global CNN/attention embeddings and local-embedding realignment."""

from .geometry import AffineTransform, TransformLimits, RansacParams
from .matcher import MatchParams, AFRNetExtractor, match, verify, enroll, search
from .model import AFRNet, ModelConfig

__version__ = "0.1.0"

__all__ = ["AFRNet", "AFRNetExtractor", "AffineTransform", "MatchParams", "ModelConfig",
           "RansacParams", "TransformLimits", "enroll", "match", "search", "verify"]
