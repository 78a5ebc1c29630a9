"""Temporally coherent feed-forward video stylization.

A fixed encoder/decoder stylization network is augmented with a flow
network and a mask network that warp and blend intermediate features
across frames, trained with a three-term coherence loss and evaluated
with a warped-difference stability metric.
"""

from .tensor import NonFiniteError, ShapeError, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "no_grad", "ShapeError", "NonFiniteError"]
