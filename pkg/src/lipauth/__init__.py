"""Lip-based biometric authentication: a siamese 3D-conv/GRU embedding trained
with a batch hard-negative triplet loss, plus data preparation, evaluation and
one-shot enrollment tools.  Everything runs on numpy.
"""

from .errors import LipAuthError

__version__ = "0.1.0"

__all__ = ["LipAuthError", "__version__"]
