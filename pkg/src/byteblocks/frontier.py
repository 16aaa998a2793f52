"""Frontier prediction: a small byte-level Transformer with windowed attention.

Each byte gets a probability of being a block frontier (the last byte of its
block). The encoder is a pre-norm Transformer stack whose attention is banded:
position i attends to j only when |i - j| <= radius, which keeps cost linear
in sequence length. Scores carry a learned bias per relative offset.

The banded path gathers the (2r+1)-wide neighborhood of keys and values per
query, so nothing quadratic in L is ever built. ``dense_reference`` computes
the same stack with ordinary L x L attention and is used to verify the banded
arithmetic and the exact zeros outside the window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from byteblocks import autodiff as ad
from byteblocks.autodiff import Tensor


@dataclass
class FrontierConfig:
    embed_dim: int = 64        # H_b, byte embedding width
    layers: int = 1
    heads: int = 8
    window: int = 16
    window_mode: str = "radius"  # "radius": attend iff |i-j| <= window; "total": half per side
    ffn_dim: int | None = None   # defaults to 4 * embed_dim

    def __post_init__(self):
        if self.embed_dim < 1 or self.layers < 1 or self.heads < 1:
            raise ValueError("embed_dim, layers and heads must be positive")
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if self.window_mode not in ("radius", "total"):
            raise ValueError(f"unknown window_mode {self.window_mode!r}")
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.embed_dim

    @property
    def radius(self) -> int:
        if self.window_mode == "radius":
            return self.window
        return max(1, self.window // 2)


def normal_param(rng: np.random.Generator, shape, scale: float = 0.02,
                 dtype=np.float32) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape).astype(dtype), requires_grad=True)


def const_param(value: np.ndarray, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=True)


def init_frontier_params(config: FrontierConfig, rng: np.random.Generator,
                         vocab_size: int, dtype=np.float32,
                         prefix: str = "frontier.") -> dict[str, Tensor]:
    """Fresh parameter dictionary for the frontier stack, flat names."""
    h, f = config.embed_dim, config.ffn_dim
    width = 2 * config.radius + 1
    p: dict[str, Tensor] = {}
    p[prefix + "byte_embed"] = normal_param(rng, (vocab_size, h), dtype=dtype)
    for i in range(config.layers):
        lp = f"{prefix}l{i}."
        p[lp + "ln1_g"] = const_param(np.ones(h), dtype)
        p[lp + "ln1_b"] = const_param(np.zeros(h), dtype)
        for name in ("wq", "wk", "wv", "wo"):
            p[lp + name] = normal_param(rng, (h, h), dtype=dtype)
        for name in ("bq", "bk", "bv", "bo"):
            p[lp + name] = const_param(np.zeros(h), dtype)
        p[lp + "rel_bias"] = const_param(np.zeros((config.heads, width)), dtype)
        p[lp + "ln2_g"] = const_param(np.ones(h), dtype)
        p[lp + "ln2_b"] = const_param(np.zeros(h), dtype)
        p[lp + "w1"] = normal_param(rng, (h, f), dtype=dtype)
        p[lp + "b1"] = const_param(np.zeros(f), dtype)
        p[lp + "w2"] = normal_param(rng, (f, h), dtype=dtype)
        p[lp + "b2"] = const_param(np.zeros(h), dtype)
    p[prefix + "lnf_g"] = const_param(np.ones(h), dtype)
    p[prefix + "lnf_b"] = const_param(np.zeros(h), dtype)
    p[prefix + "head_w"] = normal_param(rng, (h, 1), dtype=dtype)
    p[prefix + "head_b"] = const_param(np.zeros(1), dtype)
    return p


def embed_bytes(table: Tensor, ids) -> Tensor:
    """Look up byte/sentinel embeddings; pad rows ride along, masked later."""
    return ad.gather(table, np.asarray(ids))


def _silu(x: Tensor) -> Tensor:
    return x * ad.sigmoid(x)


def _band_indices(length: int, radius: int) -> tuple[np.ndarray, np.ndarray]:
    """Clipped neighbor positions (L, 2r+1) and their in-range validity."""
    offs = np.arange(-radius, radius + 1)
    raw = np.arange(length)[:, None] + offs[None, :]
    valid = (raw >= 0) & (raw < length)
    return np.clip(raw, 0, length - 1), valid


def _banded_attention(x: Tensor, params: dict[str, Tensor], lp: str,
                      config: FrontierConfig, nonpad: np.ndarray) -> Tensor:
    b, length, h = x.shape
    nh = config.heads
    dh = h // nh
    r = config.radius
    width = 2 * r + 1

    q = x @ params[lp + "wq"] + params[lp + "bq"]
    k = x @ params[lp + "wk"] + params[lp + "bk"]
    v = x @ params[lp + "wv"] + params[lp + "bv"]

    def heads_first(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (b, length, nh, dh)), (0, 2, 1, 3))

    pos, valid = _band_indices(length, r)
    flat_base = (np.arange(b * nh) * length).reshape(b, nh, 1, 1)
    flat_idx = flat_base + pos[None, None]  # (B, nh, L, width)

    k_g = ad.gather(ad.reshape(heads_first(k), (b * nh * length, dh)), flat_idx)
    v_g = ad.gather(ad.reshape(heads_first(v), (b * nh * length, dh)), flat_idx)
    q_r = ad.reshape(heads_first(q), (b, nh, length, 1, dh))

    scores = q_r @ ad.transpose(k_g, (0, 1, 2, 4, 3))
    scores = scores * (1.0 / np.sqrt(dh))
    scores = scores + ad.reshape(params[lp + "rel_bias"], (1, nh, 1, 1, width))

    key_ok = np.take_along_axis(np.broadcast_to(nonpad[:, None, :], (b, length, length)),
                                pos[None], axis=2)  # (B, L, width)
    allowed = (key_ok & valid[None]).reshape(b, 1, length, 1, width)

    attn = ad.masked_softmax(scores, allowed)
    ctx = attn @ v_g  # (B, nh, L, 1, dh)
    ctx = ad.reshape(ctx, (b, nh, length, dh))
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, length, h))
    return ctx @ params[lp + "wo"] + params[lp + "bo"]


def sliding_window_encode(params: dict[str, Tensor], config: FrontierConfig,
                          x: Tensor, nonpad: np.ndarray,
                          prefix: str = "frontier.") -> Tensor:
    """Run the pre-norm banded Transformer stack over byte embeddings.

    ``nonpad`` (B, L) marks real bytes; padded keys are never attended to.
    """
    if x.ndim != 3:
        raise ValueError("expected (batch, length, embed) input")
    nonpad = np.asarray(nonpad, dtype=bool)
    for i in range(config.layers):
        lp = f"{prefix}l{i}."
        normed = ad.layer_norm(x, params[lp + "ln1_g"], params[lp + "ln1_b"])
        x = x + _banded_attention(normed, params, lp, config, nonpad)
        normed = ad.layer_norm(x, params[lp + "ln2_g"], params[lp + "ln2_b"])
        ffn = _silu(normed @ params[lp + "w1"] + params[lp + "b1"]) @ params[lp + "w2"] + params[lp + "b2"]
        x = x + ffn
    return ad.layer_norm(x, params[prefix + "lnf_g"], params[prefix + "lnf_b"])


def predict_frontier_probs(params: dict[str, Tensor], hidden: Tensor,
                           nonpad: np.ndarray, prefix: str = "frontier.") -> Tensor:
    """Per-byte frontier probabilities, sigmoid of a linear head; pads zeroed."""
    b, length, _ = hidden.shape
    logits = ad.reshape(hidden @ params[prefix + "head_w"] + params[prefix + "head_b"],
                        (b, length))
    probs = ad.sigmoid(logits)
    return probs * Tensor(np.asarray(nonpad, dtype=hidden.dtype))


def frontier_probs(params: dict[str, Tensor], config: FrontierConfig, ids,
                   lengths=None, prefix: str = "frontier.") -> Tensor:
    """Embed ids, encode, and squash to frontier probabilities.

    Accepts a single (L,) sequence or a padded (B, L) batch with ``lengths``.
    """
    ids = np.asarray(ids)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
    b, length = ids.shape
    if lengths is None:
        lengths = np.full(b, length)
    nonpad = np.arange(length)[None, :] < np.asarray(lengths)[:, None]
    e = embed_bytes(params[prefix + "byte_embed"], ids)
    hidden = sliding_window_encode(params, config, e, nonpad, prefix)
    probs = predict_frontier_probs(params, hidden, nonpad, prefix)
    return ad.reshape(probs, (length,)) if single else probs


# -- dense reference (verification only) ---------------------------------------


def dense_reference(params: dict[str, Tensor], config: FrontierConfig,
                    x: np.ndarray, nonpad: np.ndarray, windowed: bool,
                    prefix: str = "frontier.") -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward the same stack with explicit L x L attention, in numpy.

    With ``windowed`` the |i-j| <= radius mask is applied (weights outside
    come out exactly zero); without it attention is full, which is only
    meaningful when L <= radius + 1 so every offset has a learned bias.
    Returns the final hidden states and each layer's attention weights
    (B, heads, L, L).
    """
    def p(name):
        return params[prefix + name].data.astype(np.float64)

    x = x.astype(np.float64)
    b, length, h = x.shape
    nh, r = config.heads, config.radius
    dh = h // nh
    if not windowed and length > r + 1:
        raise ValueError("full-attention reference needs L <= radius + 1")

    offs = np.arange(length)[None, :] - np.arange(length)[:, None]  # j - i
    in_band = np.abs(offs) <= r
    nonpad = np.asarray(nonpad, dtype=bool)

    def ln(t, g, bb):
        mu = t.mean(-1, keepdims=True)
        var = ((t - mu) ** 2).mean(-1, keepdims=True)
        return (t - mu) / np.sqrt(var + 1e-5) * g + bb

    weights_out = []
    for i in range(config.layers):
        lp = f"l{i}."
        normed = ln(x, p(lp + "ln1_g"), p(lp + "ln1_b"))
        q = (normed @ p(lp + "wq") + p(lp + "bq")).reshape(b, length, nh, dh).transpose(0, 2, 1, 3)
        k = (normed @ p(lp + "wk") + p(lp + "bk")).reshape(b, length, nh, dh).transpose(0, 2, 1, 3)
        v = (normed @ p(lp + "wv") + p(lp + "bv")).reshape(b, length, nh, dh).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
        bias = np.zeros((nh, length, length))
        rel = p(lp + "rel_bias")
        clipped = np.clip(offs + r, 0, 2 * r)
        for head in range(nh):
            bias[head] = np.where(in_band, rel[head][clipped], 0.0)
        scores = scores + bias[None]
        allowed = nonpad[:, None, None, :] & np.ones((1, 1, length, 1), bool)
        if windowed:
            allowed = allowed & in_band[None, None]
        masked = np.where(allowed, scores, -np.inf)
        rowmax = masked.max(-1, keepdims=True)
        rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
        e = np.where(allowed, np.exp(masked - rowmax), 0.0)
        z = e.sum(-1, keepdims=True)
        attn = e / np.where(z == 0, 1.0, z)
        weights_out.append(attn)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, length, h)
        x = x + ctx @ p(lp + "wo") + p(lp + "bo")
        normed = ln(x, p(lp + "ln2_g"), p(lp + "ln2_b"))
        z1 = normed @ p(lp + "w1") + p(lp + "b1")
        x = x + (z1 / (1.0 + np.exp(-z1))) @ p(lp + "w2") + p(lp + "b2")
    return ln(x, p("lnf_g"), p("lnf_b")), weights_out
