"""Differentiable byte-to-block segmentation and a small seq2seq harness."""

from byteblocks.autodiff import Tensor, finite_difference_grad, forward_backward, no_grad

__all__ = [
    "Tensor",
    "finite_difference_grad",
    "forward_backward",
    "no_grad",
]
