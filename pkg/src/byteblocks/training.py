"""Two-group optimization with a triangular schedule.

The sequence model (``enc.`` / ``dec.`` parameters) trains at ten times the
learning rate of the tokenizer side (``frontier.`` / ``pool.``), and that
factor is part of the contract, not a tuning suggestion. Batches and dropout
draw from generators keyed by (seed, step), so a run restored from a
checkpoint replays the exact arithmetic of an uninterrupted one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from byteblocks import model as mdl
from byteblocks.autodiff import Tensor
from byteblocks.bytetext import span_corrupt
from byteblocks.model import Batch, ModelConfig, collate, parameter_group

MIN_DOC_BYTES = 4  # shortest sequence round(0.15 * L) can still mask


@dataclass
class OptimizerGroups:
    """Per-group base learning rates. The 10x ratio is load-bearing."""

    lr_seqmodel: float = 1e-2
    lr_tokenizer: float = 1e-3

    def __post_init__(self):
        if min(self.lr_seqmodel, self.lr_tokenizer) <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_tokenizer * 10.0 != self.lr_seqmodel:
            raise ValueError("sequence-model lr must be exactly 10x the tokenizer lr")

    def base_lr(self, name: str) -> float:
        return self.lr_seqmodel if parameter_group(name) == "seqmodel" else self.lr_tokenizer


@dataclass
class Schedule:
    """Triangular multiplier: 0 -> 1 over warmup, then 1 -> 0 at total."""

    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.warmup_steps < 0 or self.total_steps <= self.warmup_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")

    def multiplier(self, step: int) -> float:
        if step < self.warmup_steps:
            return step / self.warmup_steps
        rest = self.total_steps - self.warmup_steps
        return max(0.0, (self.total_steps - step) / rest)


@dataclass
class TrainConfig:
    groups: OptimizerGroups = field(default_factory=OptimizerGroups)
    schedule: Schedule = field(default_factory=lambda: Schedule(100, 1000))
    optimizer: str = "adam"    # or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    seq_len: int = 128

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.seq_len < MIN_DOC_BYTES:
            raise ValueError("batch_size and seq_len out of range")


@dataclass
class TrainState:
    """Everything a resumed run needs: weights, moments, clock, seed."""

    params: dict[str, Tensor]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    adam_t: int
    step: int
    seed: int


def init_train_state(config: ModelConfig, seed: int, dtype=np.float32) -> TrainState:
    params = mdl.init_params(config, seed, dtype=dtype)
    m = {k: np.zeros_like(t.data) for k, t in params.items()}
    v = {k: np.zeros_like(t.data) for k, t in params.items()}
    return TrainState(params=params, m=m, v=v, adam_t=0, step=0, seed=seed)


def restart_state(state: TrainState, seed: int) -> TrainState:
    """Keep the weights, reset the clock and optimizer moments.

    Fine-tuning is a fresh phase: it gets its own schedule position and
    fresh second-moment estimates instead of inheriting the decayed tail
    of the pretraining run.
    """
    m = {k: np.zeros_like(t.data) for k, t in state.params.items()}
    v = {k: np.zeros_like(t.data) for k, t in state.params.items()}
    return TrainState(params=state.params, m=m, v=v, adam_t=0, step=0, seed=seed)


def _apply_update(state: TrainState, grads: dict[str, np.ndarray],
                  cfg: TrainConfig, mult: float) -> None:
    if cfg.optimizer == "sgd":
        for name, g in grads.items():
            lr = cfg.groups.base_lr(name) * mult
            state.params[name].data -= (lr * g).astype(state.params[name].dtype)
        return
    state.adam_t += 1
    b1c = 1.0 - cfg.beta1 ** state.adam_t
    b2c = 1.0 - cfg.beta2 ** state.adam_t
    for name, g in grads.items():
        p = state.params[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        lr = cfg.groups.base_lr(name) * mult
        step = lr * (m / b1c) / (np.sqrt(v / b2c) + cfg.eps)
        p.data -= step.astype(p.dtype)


def training_step(state: TrainState, batch: Batch, model_config: ModelConfig,
                  train_config: TrainConfig) -> tuple[TrainState, dict]:
    """One optimizer update in place; returns (state, log record).

    A non-finite loss or gradient rejects the update: parameters and moments
    stay untouched, the step counter still advances so the data stream moves
    on, and the record carries finite=False.
    """
    mult = train_config.schedule.multiplier(state.step)
    drop_rng = np.random.default_rng((state.seed, state.step, 2))
    loss, metrics = mdl.encode_decode_loss(state.params, model_config, batch, rng=drop_rng)
    loss_val = float(loss.data)

    finite = np.isfinite(loss_val)
    grads: dict[str, np.ndarray] = {}
    if finite:
        loss.backward()
        for name, p in state.params.items():
            if not np.isfinite(p.grad).all():
                finite = False
                break
            grads[name] = p.grad
    if finite:
        _apply_update(state, grads, train_config, mult)

    record = {
        "step": state.step,
        "loss": loss_val,
        "lr_A": train_config.groups.lr_seqmodel * mult,
        "lr_B": train_config.groups.lr_tokenizer * mult,
        "sharpness": metrics["sharpness"],
        "mean_L_B": metrics["mean_block_count"],
        "mean_L_hat": metrics["mean_block_kept"],
        "finite": bool(finite),
    }
    state.step += 1
    return state, record


def usable_corpus(corpus_ids: list[np.ndarray]) -> list[np.ndarray]:
    """Drop documents too short to span-corrupt."""
    return [doc for doc in corpus_ids if len(doc) >= MIN_DOC_BYTES]


def sample_batch(corpus_ids: list[np.ndarray], seed: int, step: int,
                 train_config: TrainConfig) -> Batch:
    """Deterministic batch for (seed, step): pick documents, crop, corrupt."""
    if not corpus_ids:
        raise ValueError("empty corpus")
    rng = np.random.default_rng((seed, step, 1))
    picks = rng.integers(0, len(corpus_ids), size=train_config.batch_size)
    examples = []
    for i in picks:
        ids = corpus_ids[int(i)][:train_config.seq_len]
        examples.append(span_corrupt(ids, rng=rng))
    return collate(examples)


def pretrain(state: TrainState, corpus_ids: list[np.ndarray],
             model_config: ModelConfig, train_config: TrainConfig,
             total_steps: int, on_record=None, checkpoint_every: int = 0,
             save_fn=None) -> TrainState:
    """Run training_step until ``state.step`` reaches ``total_steps``.

    ``on_record`` sees every log record; ``save_fn(state)`` fires every
    ``checkpoint_every`` steps (when > 0). Resuming a loaded state continues
    the same trajectory because nothing here depends on wall time or call
    history.
    """
    docs = usable_corpus(corpus_ids)
    if not docs:
        raise ValueError("corpus has no usable documents")
    while state.step < total_steps:
        batch = sample_batch(docs, state.seed, state.step, train_config)
        state, record = training_step(state, batch, model_config, train_config)
        if on_record is not None:
            on_record(record)
        if save_fn is not None and checkpoint_every > 0 and state.step % checkpoint_every == 0:
            save_fn(state)
    return state


def record_line(record: dict) -> str:
    """One training-log line: compact JSON, stable key order."""
    return json.dumps(record, sort_keys=True)
