"""Encoder-decoder over block embeddings with a byte-level decoder.

The encoder input passes through the differentiable tokenizer (frontier
probabilities, Gaussian assignment map, weighted-conv pooling, projection,
truncation) and a dense Transformer encoder then runs on the short block
sequence. The decoder is an ordinary causal Transformer over bytes with
cross-attention into the encoded blocks. All parameters live in one flat
dict; names starting with ``frontier.`` or ``pool.`` form the tokenizer
group, ``enc.`` / ``dec.`` the sequence-model group.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from byteblocks import assignment as asg
from byteblocks import autodiff as ad
from byteblocks import pooling
from byteblocks.autodiff import Tensor
from byteblocks.bytetext import EOS_ID, PAD_ID, VOCAB_SIZE, CorruptionExample
from byteblocks.frontier import (FrontierConfig, const_param, embed_bytes,
                                 init_frontier_params, normal_param,
                                 predict_frontier_probs, sliding_window_encode)

TOKENIZER_PREFIXES = ("frontier.", "pool.")
SEQMODEL_PREFIXES = ("enc.", "dec.")


@dataclass
class ModelConfig:
    hidden_dim: int = 128          # h_LM
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    ffn_dim: int | None = None     # defaults to 4 * hidden_dim
    dropout: float = 0.1
    vocab_size: int = VOCAB_SIZE
    max_blocks: int = 256
    max_target_len: int = 256
    trunc_factor: int = 4
    sigma_floor: float = asg.DEFAULT_SIGMA_FLOOR
    conv_taps: int = 3
    frontier: FrontierConfig = field(default_factory=FrontierConfig)

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.hidden_dim
        if self.hidden_dim % self.heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.trunc_factor < 1:
            raise ValueError("trunc_factor must be at least 1")
        if self.conv_taps % 2 != 1:
            raise ValueError("conv_taps must be odd")
        if min(self.enc_layers, self.dec_layers, self.max_blocks, self.max_target_len) < 1:
            raise ValueError("layer counts and table sizes must be positive")

    @classmethod
    def preset(cls, name: str) -> "ModelConfig":
        """Named configurations. mini/toy run in tests; small/base mirror the
        reference hyperparameters and are not exercised by CI."""
        presets = {
            "mini": cls(hidden_dim=32, enc_layers=1, dec_layers=1, heads=2,
                        dropout=0.1, max_blocks=64, max_target_len=64,
                        frontier=FrontierConfig(embed_dim=16, layers=1, heads=2, window=4)),
            "toy": cls(hidden_dim=128, enc_layers=2, dec_layers=2, heads=4,
                       dropout=0.1,
                       frontier=FrontierConfig(embed_dim=64, layers=1, heads=4, window=16)),
            "small": cls(hidden_dim=512, enc_layers=6, dec_layers=6, heads=8,
                         ffn_dim=2048, dropout=0.1, max_blocks=256, max_target_len=512,
                         frontier=FrontierConfig(embed_dim=64, layers=1, heads=8, window=16)),
            "base": cls(hidden_dim=768, enc_layers=12, dec_layers=12, heads=12,
                        ffn_dim=3072, dropout=0.1, max_blocks=256, max_target_len=512,
                        frontier=FrontierConfig(embed_dim=128, layers=2, heads=8, window=16)),
        }
        if name not in presets:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        return presets[name]


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """All trainable tensors, flat-keyed. Deterministic in (config, seed)."""
    rng = np.random.default_rng(seed)
    h, hb = config.hidden_dim, config.frontier.embed_dim
    f, v = config.ffn_dim, config.vocab_size
    params = init_frontier_params(config.frontier, rng, v, dtype=dtype)

    # Center tap starts near identity so bytes flow into blocks from step one.
    kernel = rng.normal(0, 0.02, size=(config.conv_taps, hb))
    kernel[config.conv_taps // 2] += 1.0
    params["pool.kernel"] = const_param(kernel, dtype)
    # Fan-in scale; this projection is the whole encoder input, so a timid
    # init buries the content signal under the positional vectors.
    params["pool.proj_w"] = normal_param(rng, (hb, h), scale=1.0 / np.sqrt(hb), dtype=dtype)
    params["pool.proj_b"] = const_param(np.zeros(h), dtype)

    params["enc.pos"] = normal_param(rng, (config.max_blocks, h), dtype=dtype)
    for i in range(config.enc_layers):
        lp = f"enc.l{i}."
        _init_ln(params, lp + "ln1", h, dtype)
        _init_attn(params, rng, lp + "self_", h, dtype)
        _init_ln(params, lp + "ln2", h, dtype)
        _init_ffn(params, rng, lp, h, f, dtype)
    _init_ln(params, "enc.lnf", h, dtype)

    params["dec.tok_embed"] = normal_param(rng, (v, h), dtype=dtype)
    params["dec.pos"] = normal_param(rng, (config.max_target_len, h), dtype=dtype)
    for i in range(config.dec_layers):
        lp = f"dec.l{i}."
        _init_ln(params, lp + "ln1", h, dtype)
        _init_attn(params, rng, lp + "self_", h, dtype)
        _init_ln(params, lp + "ln2", h, dtype)
        _init_attn(params, rng, lp + "cross_", h, dtype)
        _init_ln(params, lp + "ln3", h, dtype)
        _init_ffn(params, rng, lp, h, f, dtype)
    _init_ln(params, "dec.lnf", h, dtype)
    params["dec.out_w"] = normal_param(rng, (h, v), dtype=dtype)
    params["dec.out_b"] = const_param(np.zeros(v), dtype)
    return params


def _init_ln(params, name, h, dtype):
    params[name + "_g"] = const_param(np.ones(h), dtype)
    params[name + "_b"] = const_param(np.zeros(h), dtype)


def _init_attn(params, rng, base, h, dtype):
    for n in ("wq", "wk", "wv", "wo"):
        params[base + n] = normal_param(rng, (h, h), dtype=dtype)
    for n in ("bq", "bk", "bv", "bo"):
        params[base + n] = const_param(np.zeros(h), dtype)


def _init_ffn(params, rng, base, h, f, dtype):
    params[base + "w1"] = normal_param(rng, (h, f), dtype=dtype)
    params[base + "b1"] = const_param(np.zeros(f), dtype)
    params[base + "w2"] = normal_param(rng, (f, h), dtype=dtype)
    params[base + "b2"] = const_param(np.zeros(h), dtype)


def parameter_group(name: str) -> str:
    """'tokenizer' for frontier/pooling tensors, 'seqmodel' for the encoder-decoder."""
    if name.startswith(TOKENIZER_PREFIXES):
        return "tokenizer"
    if name.startswith(SEQMODEL_PREFIXES):
        return "seqmodel"
    raise ValueError(f"parameter {name!r} belongs to no group")


# -- batches -------------------------------------------------------------------


@dataclass
class Batch:
    """Padded arrays for one training step."""

    enc_ids: np.ndarray       # (B, L) int, PAD beyond enc_lengths
    enc_lengths: np.ndarray   # (B,)
    dec_inputs: np.ndarray    # (B, T) int, teacher-forced (starts with PAD)
    dec_targets: np.ndarray   # (B, T) int
    dec_weights: np.ndarray   # (B, T) float, 1 on real target tokens

    def __post_init__(self):
        b = self.enc_ids.shape[0]
        if not (self.enc_lengths.shape == (b,) and self.dec_inputs.shape == self.dec_targets.shape
                and self.dec_weights.shape == self.dec_inputs.shape and self.dec_inputs.shape[0] == b):
            raise ValueError("batch arrays disagree on shape")
        if (self.enc_lengths < 1).any():
            raise ValueError("every example needs at least one encoder byte")
        if (self.dec_weights.sum(axis=1) < 1).any():
            raise ValueError("every example needs a non-empty target")


def batch_from_example(example: CorruptionExample) -> Batch:
    """Wrap one corruption pair as a batch of one."""
    target = np.asarray(example.target, dtype=np.int64)
    if target.size == 0:
        raise ValueError("empty target")
    dec_in = np.concatenate(([PAD_ID], target[:-1]))
    return Batch(enc_ids=np.asarray(example.corrupted, dtype=np.int64)[None],
                 enc_lengths=np.array([len(example.corrupted)]),
                 dec_inputs=dec_in[None], dec_targets=target[None],
                 dec_weights=np.ones((1, target.size)))


def collate(examples: list[CorruptionExample]) -> Batch:
    """Pad a list of corruption pairs into one batch."""
    if not examples:
        raise ValueError("empty batch")
    enc_len = max(len(e.corrupted) for e in examples)
    tgt_len = max(len(e.target) for e in examples)
    b = len(examples)
    enc = np.full((b, enc_len), PAD_ID, dtype=np.int64)
    dec_in = np.full((b, tgt_len), PAD_ID, dtype=np.int64)
    dec_tgt = np.full((b, tgt_len), PAD_ID, dtype=np.int64)
    w = np.zeros((b, tgt_len))
    lengths = np.zeros(b, dtype=np.int64)
    for i, e in enumerate(examples):
        n, t = len(e.corrupted), len(e.target)
        if t == 0:
            raise ValueError("empty target")
        enc[i, :n] = e.corrupted
        lengths[i] = n
        dec_in[i, 1:t] = e.target[:-1]
        dec_tgt[i, :t] = e.target
        w[i, :t] = 1.0
    return Batch(enc, lengths, dec_in, dec_tgt, w)


# -- forward pieces ------------------------------------------------------------


@dataclass
class BlockState:
    """Everything the tokenizer front end produced for a batch."""

    blocks: Tensor              # (B, K_hat_max, h_LM)
    block_lengths: np.ndarray   # (B,) truncated counts L_hat
    block_counts: np.ndarray    # (B,) plausible counts L_B
    probs: Tensor               # (B, L) frontier probabilities, pads zero
    assignment: Tensor          # (B, K_hat_max, L) kept rows of P
    nonpad: np.ndarray          # (B, L)


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = rng.uniform(size=x.shape) >= rate
    return x * Tensor((keep / (1.0 - rate)).astype(x.dtype))


def _dense_attention(params, base: str, q_in: Tensor, kv_in: Tensor,
                     heads: int, allowed: np.ndarray) -> Tensor:
    b, tq, h = q_in.shape
    tk = kv_in.shape[1]
    dh = h // heads

    def split(t: Tensor, length: int) -> Tensor:
        return ad.transpose(ad.reshape(t, (b, length, heads, dh)), (0, 2, 1, 3))

    q = split(q_in @ params[base + "wq"] + params[base + "bq"], tq)
    k = split(kv_in @ params[base + "wk"] + params[base + "bk"], tk)
    v = split(kv_in @ params[base + "wv"] + params[base + "bv"], tk)
    scores = (q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    attn = ad.masked_softmax(scores, allowed)
    ctx = ad.reshape(ad.transpose(attn @ v, (0, 2, 1, 3)), (b, tq, h))
    return ctx @ params[base + "wo"] + params[base + "bo"]


def encode_blocks(params: dict[str, Tensor], config: ModelConfig,
                  enc_ids: np.ndarray, enc_lengths: np.ndarray) -> BlockState:
    """Tokenizer front end: ids -> truncated, projected block embeddings."""
    enc_ids = np.asarray(enc_ids)
    enc_lengths = np.asarray(enc_lengths)
    b, length = enc_ids.shape
    nonpad = np.arange(length)[None, :] < enc_lengths[:, None]

    e_b = embed_bytes(params["frontier.byte_embed"], enc_ids)
    hidden = sliding_window_encode(params, config.frontier, e_b, nonpad)
    probs = predict_frontier_probs(params, hidden, nonpad)

    moments = asg.cumulative_moments(probs)
    counts = asg.plausible_block_counts(moments, enc_lengths)
    limits = np.maximum(1, enc_lengths // config.trunc_factor)
    khat = np.minimum(counts, limits)
    khat_max = int(khat.max())
    if khat_max > config.max_blocks:
        raise ValueError(f"{khat_max} blocks exceed the position table ({config.max_blocks})")

    amap = asg.build_assignment_map(moments, counts, sigma_floor=config.sigma_floor)
    col_mask = Tensor(nonpad[:, None, :].astype(probs.dtype))
    masked_p = amap.P * col_mask
    # Pooling and projection are row-independent, so pooling only the rows the
    # truncation keeps equals pool-then-truncate at lower cost.
    p_kept = ad.narrow(masked_p, -2, 0, khat_max)
    e_masked = e_b * Tensor(nonpad[:, :, None].astype(e_b.dtype))
    pooled = pooling.weighted_conv_pool(p_kept, e_masked, params["pool.kernel"])
    blocks = pooling.project_blocks(pooled, params["pool.proj_w"], params["pool.proj_b"])
    return BlockState(blocks=blocks, block_lengths=khat, block_counts=counts,
                      probs=probs, assignment=p_kept, nonpad=nonpad)


def transformer_encoder(params: dict[str, Tensor], config: ModelConfig, x: Tensor,
                        key_mask: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
    """Dense pre-norm encoder stack over block positions."""
    b, t, _ = x.shape
    x = x + ad.gather(params["enc.pos"], np.arange(t))
    allowed = key_mask[:, None, None, :]
    for i in range(config.enc_layers):
        lp = f"enc.l{i}."
        normed = ad.layer_norm(x, params[lp + "ln1_g"], params[lp + "ln1_b"])
        x = x + _dropout(_dense_attention(params, lp + "self_", normed, normed,
                                          config.heads, allowed), config.dropout, rng)
        normed = ad.layer_norm(x, params[lp + "ln2_g"], params[lp + "ln2_b"])
        ffn = _silu_ffn(params, lp, normed)
        x = x + _dropout(ffn, config.dropout, rng)
    return ad.layer_norm(x, params["enc.lnf_g"], params["enc.lnf_b"])


def _silu_ffn(params, base, x):
    z = x @ params[base + "w1"] + params[base + "b1"]
    return (z * ad.sigmoid(z)) @ params[base + "w2"] + params[base + "b2"]


def transformer_decoder(params: dict[str, Tensor], config: ModelConfig,
                        enc_out: Tensor, enc_mask: np.ndarray,
                        dec_inputs: np.ndarray,
                        rng: np.random.Generator | None = None) -> Tensor:
    """Causal decoder with cross-attention; returns (B, T, vocab) logits."""
    dec_inputs = np.asarray(dec_inputs)
    b, t = dec_inputs.shape
    if t > config.max_target_len:
        raise ValueError(f"target length {t} exceeds position table ({config.max_target_len})")
    x = ad.gather(params["dec.tok_embed"], dec_inputs) + ad.gather(params["dec.pos"], np.arange(t))
    causal = np.tril(np.ones((t, t), dtype=bool))[None, None]
    cross = enc_mask[:, None, None, :]
    for i in range(config.dec_layers):
        lp = f"dec.l{i}."
        normed = ad.layer_norm(x, params[lp + "ln1_g"], params[lp + "ln1_b"])
        x = x + _dropout(_dense_attention(params, lp + "self_", normed, normed,
                                          config.heads, causal), config.dropout, rng)
        normed = ad.layer_norm(x, params[lp + "ln2_g"], params[lp + "ln2_b"])
        x = x + _dropout(_dense_attention(params, lp + "cross_", normed, enc_out,
                                          config.heads, cross), config.dropout, rng)
        normed = ad.layer_norm(x, params[lp + "ln3_g"], params[lp + "ln3_b"])
        x = x + _dropout(_silu_ffn(params, lp, normed), config.dropout, rng)
    x = ad.layer_norm(x, params["dec.lnf_g"], params["dec.lnf_b"])
    return x @ params["dec.out_w"] + params["dec.out_b"]


def encode_decode_loss(params: dict[str, Tensor], config: ModelConfig,
                       batch: Batch | CorruptionExample,
                       rng: np.random.Generator | None = None) -> tuple[Tensor, dict]:
    """Teacher-forced span-denoising loss, token-mean over the batch.

    Pass ``rng`` to enable dropout (training); omit it for deterministic
    evaluation. Metrics come back as plain floats.
    """
    if isinstance(batch, CorruptionExample):
        batch = batch_from_example(batch)
    state = encode_blocks(params, config, batch.enc_ids, batch.enc_lengths)
    t = batch.dec_inputs.shape[1]
    block_mask = np.arange(state.blocks.shape[1])[None, :] < state.block_lengths[:, None]
    enc_out = transformer_encoder(params, config, state.blocks, block_mask, rng)
    logits = transformer_decoder(params, config, enc_out, block_mask, batch.dec_inputs, rng)
    flat = ad.reshape(logits, (logits.shape[0] * t, config.vocab_size))
    loss = ad.cross_entropy_logits(flat, batch.dec_targets.reshape(-1),
                                   batch.dec_weights.reshape(-1))
    metrics = {
        "sharpness": asg.sharpness(state.probs.data[state.nonpad]),
        "mean_block_count": float(state.block_counts.mean()),
        "mean_block_kept": float(state.block_lengths.mean()),
    }
    return loss, metrics


def greedy_decode(params: dict[str, Tensor], config: ModelConfig, enc_ids,
                  max_len: int) -> np.ndarray:
    """Argmax decoding until eos or ``max_len`` tokens; eos is not returned."""
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    enc_ids = np.asarray(enc_ids, dtype=np.int64)
    if enc_ids.ndim != 1:
        raise ValueError("greedy_decode expects a single sequence")
    with ad.no_grad():
        state = encode_blocks(params, config, enc_ids[None], np.array([enc_ids.size]))
        block_mask = np.arange(state.blocks.shape[1])[None, :] < state.block_lengths[:, None]
        enc_out = transformer_encoder(params, config, state.blocks, block_mask)
        emitted: list[int] = []
        for _ in range(max_len):
            dec_in = np.array([[PAD_ID] + emitted])
            logits = transformer_decoder(params, config, enc_out, block_mask, dec_in)
            nxt = int(np.argmax(logits.data[0, -1]))
            if nxt == EOS_ID:
                break
            emitted.append(nxt)
    return np.array(emitted, dtype=np.int64)


def sequence_log_likelihood(params: dict[str, Tensor], config: ModelConfig,
                            enc_ids, target_ids) -> float:
    """Teacher-forced total log-probability of ``target_ids`` (ending in eos)."""
    target = np.asarray(target_ids, dtype=np.int64)
    if target.size == 0:
        raise ValueError("empty target")
    with ad.no_grad():
        example = CorruptionExample(np.asarray(enc_ids, dtype=np.int64), target)
        loss, _ = encode_decode_loss(params, config, example)
    return -float(loss.data) * target.size


def classify_by_generation(params: dict[str, Tensor], config: ModelConfig,
                           enc_ids, labels: list[str]) -> str:
    """Pick the label whose byte rendering the decoder likes best."""
    from byteblocks.bytetext import encode_text

    if not labels:
        raise ValueError("no labels given")
    if len(set(labels)) != len(labels):
        raise ValueError("labels must be distinct")
    best, best_ll = labels[0], -np.inf
    for lab in labels:
        target = np.concatenate((encode_text(lab), [EOS_ID]))
        ll = sequence_log_likelihood(params, config, enc_ids, target)
        if ll > best_ll:
            best, best_ll = lab, ll
    return best
