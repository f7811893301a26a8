"""Average-feature content encoders trained on synthetic frame-aligned parallel speech."""

from .sequence import AVENET, AVERAGE, RAW, FeatureSequence

__version__ = "0.1.0"

__all__ = ["FeatureSequence", "RAW", "AVENET", "AVERAGE", "__version__"]
