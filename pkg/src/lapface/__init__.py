"""Unsupervised 3D face modeling from photo collections.

Canonical albedo/depth are aggregated across a photo set of one identity,
rendered back through predicted light and pose with a weak symmetry
constraint, and optionally refined toward a single target image.
"""

__version__ = "0.1.0"

from .tensor import Tape, Tensor, backward

__all__ = ["Tape", "Tensor", "backward", "__version__"]
