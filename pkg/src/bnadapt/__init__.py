"""Source-free adaptation of a pretrained segmenter from batch-norm statistics."""

from .tensor import Tensor, backward, finite_diff_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "finite_diff_grad"]
