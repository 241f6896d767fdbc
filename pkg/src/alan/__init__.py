"""Echocardiogram parcelization pipeline on precomputed patch-feature tensors.

The package trains a small projection head over frozen backbone features,
turns its per-patch class assignments (parcels) into anatomical segments
with a rule-based post-processing chain, and classifies echo views with a
weighted kNN over per-frame descriptors.
"""

from alan.errors import AlanError, ConfigError, DataError, NumericError

__version__ = "0.1.0"

__all__ = ["AlanError", "ConfigError", "DataError", "NumericError", "__version__"]
