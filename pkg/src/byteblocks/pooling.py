"""Block pooling: weighted depthwise convolution, coordinatewise max, projection.

A block embedding is built from the soft assignment P and byte embeddings e as

    block_k = max_i  sum_j  P[k, i+j-c] * (kernel[j] * e[i+j-c])

with the max taken per feature over byte positions and c the kernel center
(zero padding at the edges). ``weighted_conv_pool`` computes this the cheap
way: the products kernel[j] * e are formed once per tap and shifted, so the
(blocks x bytes x features) weighted map is never materialized.
``naive_weighted_conv_pool`` builds that map and convolves it, and exists as
the reference the cached route is verified against.
"""

from __future__ import annotations

import numpy as np

from byteblocks import autodiff as ad
from byteblocks.autodiff import Tensor


def _check_pool_args(P: Tensor, embeddings: Tensor, kernel: Tensor) -> int:
    if kernel.ndim != 2 or kernel.shape[0] % 2 != 1:
        raise ValueError("kernel must be (K, H) with odd K")
    if P.shape[-1] != embeddings.shape[-2]:
        raise ValueError(f"byte counts differ: map {P.shape[-1]} vs embeddings {embeddings.shape[-2]}")
    if embeddings.shape[-1] != kernel.shape[1]:
        raise ValueError(f"channel counts differ: embeddings {embeddings.shape[-1]} vs kernel {kernel.shape[1]}")
    if P.shape[:-2] != embeddings.shape[:-2]:
        raise ValueError("map and embeddings disagree on batch shape")
    return kernel.shape[0]


def weighted_conv_pool(P: Tensor, embeddings: Tensor, kernel: Tensor) -> Tensor:
    """Pooled block embeddings (..., blocks, H) via the cached-tap route.

    Storage per tap is O(L * H), independent of the block count.
    """
    k = _check_pool_args(P, embeddings, kernel)
    c = k // 2
    lead = P.shape[:-2]
    blocks, length = P.shape[-2], P.shape[-1]
    h = embeddings.shape[-1]

    total: Tensor | None = None
    for j in range(k):
        tap = ad.gather(kernel, np.array([j]))          # (1, H)
        cached = embeddings * tap                       # kernel[j] * e, cached once
        p_s = ad.shift(P, j - c, axis=-1)
        m_s = ad.shift(cached, j - c, axis=-2)
        term = ad.reshape(p_s, lead + (blocks, length, 1)) * ad.reshape(m_s, lead + (1, length, h))
        total = term if total is None else total + term
    return ad.max_along(total, axis=-2)


def naive_weighted_conv_pool(P: Tensor, embeddings: Tensor, kernel: Tensor) -> Tensor:
    """Reference route: materialize the weighted map, convolve, then max."""
    _check_pool_args(P, embeddings, kernel)
    lead = P.shape[:-2]
    blocks, length = P.shape[-2], P.shape[-1]
    h = embeddings.shape[-1]
    weighted = ad.reshape(P, lead + (blocks, length, 1)) * ad.reshape(embeddings, lead + (1, length, h))
    conv = ad.depthwise_conv1d(weighted, kernel)
    return ad.max_along(conv, axis=-2)


def project_blocks(blocks: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Linear map from pooled byte features into the sequence-model width."""
    if weight.ndim != 2 or blocks.shape[-1] != weight.shape[0]:
        raise ValueError(f"projection shapes differ: {blocks.shape[-1]} vs {weight.shape}")
    return blocks @ weight + bias


def block_limit(byte_len: int, factor: int = 4) -> int:
    """Hard cap on the block count: max(1, byte_len // factor)."""
    if byte_len < 1:
        raise ValueError("byte length must be positive")
    if factor < 1:
        raise ValueError("truncation factor must be at least 1")
    return max(1, byte_len // factor)


def truncate_blocks(blocks: Tensor, byte_len: int, factor: int = 4) -> Tensor:
    """Keep the first min(rows, max(1, byte_len // factor)) block rows."""
    keep = min(blocks.shape[-2], block_limit(byte_len, factor))
    return ad.narrow(blocks, -2, 0, keep)
