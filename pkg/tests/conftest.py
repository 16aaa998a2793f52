"""Shared fixtures; the expensive toy training run is session-scoped."""

import time
from dataclasses import dataclass

import numpy as np
import pytest

from byteblocks import assignment as asg
from byteblocks import model as mdl
from byteblocks import training as tr
from byteblocks.autodiff import Tensor, no_grad
from byteblocks.bytetext import encode_text, span_corrupt
from byteblocks.frontier import FrontierConfig


def toy_corpus(seed=0, n_docs=200, n_words=50):
    """Synthetic space-separated prose over a small closed vocabulary.

    Word order is half predictable (each word follows its list neighbor with
    probability 0.5, else jumps anywhere), so masked spans are often
    recoverable from context and the encoder content actually matters; fully
    random order lets the model get away with ignoring it.
    """
    rng = np.random.default_rng(seed)
    sylls = ["ba", "ko", "ti", "mu", "re", "sa", "lo", "ne", "pi", "du", "ga", "ve"]
    combos = sorted({a + b + c + d for a in sylls for b in sylls
                     for c in sylls for d in sylls})
    words = [combos[i] for i in
             np.random.default_rng(1).permutation(len(combos))[:n_words]]
    texts = []
    for _ in range(n_docs):
        n = int(rng.integers(13, 17))
        idx = int(rng.integers(n_words))
        picks = []
        for _ in range(n):
            picks.append(words[idx])
            idx = (idx + 1) % n_words if rng.random() < 0.5 else int(rng.integers(n_words))
        texts.append(" ".join(picks))
    return words, texts


def probe_sharpness(params, config, docs):
    """Mean frontier sharpness over a fixed probe batch of corrupted docs."""
    with no_grad():
        rng = np.random.default_rng(42)
        batch = mdl.collate([span_corrupt(d[:128], rng=rng) for d in docs[:16]])
        state = mdl.encode_blocks(params, config, batch.enc_ids, batch.enc_lengths)
        return asg.sharpness(state.probs.data[state.nonpad])


@dataclass
class ToyRun:
    words: list
    texts: list
    docs: list
    config: mdl.ModelConfig
    init_params: dict
    records: list
    state: tr.TrainState
    sharpness_init: float
    sharpness_final: float
    train_seconds: float


@pytest.fixture(scope="session")
def toy_run():
    """2000 pretraining steps on the synthetic corpus (batch 16, L=128).

    Takes several minutes; every consumer shares this one run.
    """
    words, texts = toy_corpus()
    docs = [encode_text(t) for t in texts]
    config = mdl.ModelConfig(
        hidden_dim=64, enc_layers=2, dec_layers=2, heads=4, dropout=0.1,
        max_blocks=64, max_target_len=64,
        frontier=FrontierConfig(embed_dim=32, layers=1, heads=4, window=16))
    state = tr.init_train_state(config, seed=11)
    init_params = {k: Tensor(v.data.copy()) for k, v in state.params.items()}
    s_init = probe_sharpness(state.params, config, docs)

    train_config = tr.TrainConfig(schedule=tr.Schedule(200, 2000),
                                  batch_size=16, seq_len=128)
    records = []
    t0 = time.time()
    state = tr.pretrain(state, docs, config, train_config, 2000,
                        on_record=records.append)
    seconds = time.time() - t0
    s_final = probe_sharpness(state.params, config, docs)
    return ToyRun(words=words, texts=texts, docs=docs, config=config,
                  init_params=init_params, records=records, state=state,
                  sharpness_init=s_init, sharpness_final=s_final,
                  train_seconds=seconds)
