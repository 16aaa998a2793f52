"""Byte-to-block assignment from frontier probabilities.

Each byte i carries a probability p_i of ending a block. The index of the
block containing byte i is then 1 + (number of frontiers strictly before i),
a Poisson-Binomial count whose mean and variance are plain cumulative sums:

    mu_i = sum_{k<=i} p_k        var_i = sum_{k<=i} p_k (1 - p_k)

The differentiable assignment map replaces the exact Poisson-Binomial with a
Gaussian of matching moments, sampled at integer block indices k in
[1, L_B] and normalized per byte. ``poisson_binomial_pmf`` computes the exact
distribution and serves as the reference the Gaussian is checked against.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from byteblocks import autodiff as ad
from byteblocks.autodiff import Tensor

DEFAULT_SIGMA_FLOOR = 1e-3


@dataclass
class Moments:
    """Cumulative mean / variance of the block index, one entry per byte."""

    mu: Tensor
    var: Tensor
    sigma: Tensor


@dataclass
class AssignmentMap:
    """Soft byte-to-block map P with rows = blocks, columns = bytes."""

    P: Tensor
    block_counts: np.ndarray  # scalar or one count per batch row

    def as_array(self) -> np.ndarray:
        return self.P.data


def cumulative_moments(p) -> Moments:
    """Running block-index moments along the last axis of ``p``.

    ``p`` holds frontier probabilities in [0, 1]; padding positions must
    already be zero so they contribute nothing to either sum.
    """
    if not isinstance(p, Tensor):
        p = Tensor(p)
    d = p.data
    if ((d < 0) | (d > 1)).any():
        raise ValueError("frontier probabilities must lie in [0, 1]")
    mu = ad.cumsum(p, axis=-1)
    var = ad.cumsum(p * (1.0 - p), axis=-1)
    return Moments(mu=mu, var=var, sigma=ad.sqrt(var))


def plausible_block_count(moments: Moments, length: int) -> int:
    """Upper block count L_B = min(L, ceil(mu_L + 3 sigma_L)), at least 1.

    ``length`` is the true (unpadded) byte count; the moments at index
    length-1 are the full-sequence ones.
    """
    if length < 1:
        raise ValueError("sequence length must be positive")
    mu = float(moments.mu.data[..., length - 1])
    sigma = float(moments.sigma.data[..., length - 1])
    return max(1, min(length, int(np.ceil(mu + 3.0 * sigma))))


def plausible_block_counts(moments: Moments, lengths) -> np.ndarray:
    """Batched plausible_block_count, one length per leading row."""
    lengths = np.asarray(lengths)
    if (lengths < 1).any():
        raise ValueError("sequence lengths must be positive")
    idx = lengths - 1
    rows = np.arange(lengths.shape[0])
    mu = moments.mu.data[rows, idx]
    sigma = moments.sigma.data[rows, idx]
    counts = np.ceil(mu + 3.0 * sigma).astype(np.int64)
    return np.maximum(1, np.minimum(lengths, counts))


def build_assignment_map(moments: Moments, block_counts,
                         sigma_floor: float = DEFAULT_SIGMA_FLOOR) -> AssignmentMap:
    """Soft assignment P[..., k, i] of every byte i to block k+1.

    Columns are unit-normalized truncated Gaussians: proportional to
    G(k; mu_i, max(sigma_i, sigma_floor)) over k in [1, block_count]. The
    column max exponent is subtracted before exponentiation, which leaves the
    normalized result unchanged but keeps sharp columns from underflowing.

    ``block_counts`` is an int, or an int array with one count per batch row
    (rows beyond a row's count get zero mass).
    """
    if sigma_floor <= 0:
        raise ValueError("sigma_floor must be positive")
    counts = np.asarray(block_counts, dtype=np.int64)
    if (counts < 1).any():
        raise ValueError("block counts must be at least 1")
    kmax = int(counts.max())

    mu = moments.mu
    lead = mu.shape[:-1]
    length = mu.shape[-1]
    if counts.ndim not in (0, 1) or (counts.ndim == 1 and counts.shape != lead[:1]):
        raise ValueError("block_counts must be scalar or one per batch row")

    mu_r = ad.reshape(mu, lead + (1, length))
    sig_r = ad.reshape(ad.clamp_min(moments.sigma, sigma_floor), lead + (1, length))
    k_col = Tensor(np.arange(1, kmax + 1, dtype=mu.data.dtype).reshape(kmax, 1))

    d = k_col - mu_r
    q = (d * d) / ((sig_r * sig_r) * 2.0)  # positive exponent of the Gaussian

    if counts.ndim == 1:
        support = (np.arange(1, kmax + 1)[None, :] <= counts[:, None])  # (B, K)
        support = support.reshape(counts.shape[0], *([1] * (len(lead) - 1)), kmax, 1)
        q_eff = np.where(support, q.data, np.inf)
    else:
        support = None
        q_eff = q.data
    q_min = q_eff.min(axis=-2, keepdims=True)

    g = ad.exp(Tensor(q_min) - q)
    if support is not None:
        g = g * Tensor(support.astype(mu.data.dtype))
    z = ad.sum_along(g, axis=-2, keepdims=True)
    return AssignmentMap(P=g / z, block_counts=counts)


def poisson_binomial_pmf(p) -> np.ndarray:
    """Exact PMF of a sum of independent Bernoullis, by convolution.

    Returns probabilities for counts 0..len(p) in float64. This is the
    reference distribution for the Gaussian surrogate.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if ((p < 0) | (p > 1)).any():
        raise ValueError("probabilities must lie in [0, 1]")
    pmf = np.zeros(p.size + 1)
    pmf[0] = 1.0
    for q in p:
        pmf[1:] = pmf[1:] * (1.0 - q) + pmf[:-1] * q
        pmf[0] *= 1.0 - q
    return pmf


def _map_array(P) -> np.ndarray:
    if isinstance(P, AssignmentMap):
        return P.P.data
    if isinstance(P, Tensor):
        return P.data
    return np.asarray(P, dtype=np.float64)


def expected_block_index(P) -> np.ndarray:
    """Column-wise mean block index sum_k k P[k, i], tolerant of unnormalized P."""
    arr = _map_array(P)
    k = np.arange(1, arr.shape[-2] + 1, dtype=np.float64)
    den = arr.sum(axis=-2)
    if (den <= 0).any():
        raise ValueError("every column must carry positive mass")
    num = (arr * k.reshape(-1, 1)).sum(axis=-2)
    return num / den


def hard_segmentation(P) -> np.ndarray:
    """Round each byte's expected block index to an integer block id.

    Exact half values round down, so a byte torn evenly between two blocks
    joins the earlier one. Invariant under positive rescaling of columns.
    """
    e = expected_block_index(P)
    return np.ceil(e - 0.5).astype(np.int64)


def sharpness(p) -> float:
    """Mean distance-from-certainty of frontier probabilities: mean min(p, 1-p).

    Zero means fully committed (all p at 0 or 1); 0.5 is maximally undecided.
    """
    arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("sharpness of an empty vector is undefined")
    if ((arr < 0) | (arr > 1)).any():
        raise ValueError("frontier probabilities must lie in [0, 1]")
    return float(np.minimum(arr, 1.0 - arr).mean())


def mean_column_entropy(P) -> float:
    """Average Shannon entropy (nats) of the per-byte block distributions.

    Each column is renormalized first; a map committed to one block per byte
    scores 0, a uniform smear scores log(block count).
    """
    arr = _map_array(P)
    den = arr.sum(axis=-2, keepdims=True)
    if (den <= 0).any():
        raise ValueError("every column must carry positive mass")
    q = arr / den
    ent = -np.where(q > 0, q * np.log(np.maximum(q, 1e-300)), 0.0).sum(axis=-2)
    return float(ent.mean())


# -- exports -------------------------------------------------------------------


def assignment_to_csv(P, path: str | Path) -> None:
    """Write a 2-D map as RFC-4180 CSV: header row, then one row per block."""
    arr = _map_array(P)
    if arr.ndim != 2:
        raise ValueError("CSV export expects a single (blocks, bytes) map")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"b{i}" for i in range(arr.shape[1])])
        for row in arr:
            writer.writerow([f"{v:.6g}" for v in row])


def assignment_to_pgm(P, path: str | Path) -> None:
    """Write a 2-D map as binary PGM (P5), map maximum scaled to gray 255."""
    arr = _map_array(P)
    if arr.ndim != 2:
        raise ValueError("PGM export expects a single (blocks, bytes) map")
    peak = arr.max()
    scale = 255.0 / peak if peak > 0 else 0.0
    img = np.rint(arr * scale).astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())
