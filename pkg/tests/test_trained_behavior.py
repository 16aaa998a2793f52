"""Behavioral properties of toy-trained models (built on the session fixture)."""

import numpy as np
import pytest

from byteblocks import assignment as asg
from byteblocks import evaluation as ev
from byteblocks import model as mdl
from byteblocks import training as tr
from byteblocks.autodiff import no_grad
from byteblocks.bytetext import encode_text


def full_map(params, config, doc):
    """Untruncated assignment map for the first 128 bytes of one document."""
    with no_grad():
        ids = doc[:128]
        state = mdl.encode_blocks(params, config, ids[None, :],
                                  np.array([ids.size]))
        m = asg.cumulative_moments(state.probs)
        counts = asg.plausible_block_counts(m, np.array([ids.size]))
        return asg.build_assignment_map(m, counts).as_array()[0]


def test_training_lowers_assignment_entropy(toy_run):
    before = asg.mean_column_entropy(full_map(toy_run.init_params,
                                              toy_run.config, toy_run.docs[0]))
    after = asg.mean_column_entropy(full_map(toy_run.state.params,
                                             toy_run.config, toy_run.docs[0]))
    assert after < before
    print(f"mean column entropy {before:.3f} -> {after:.3f}")


@pytest.mark.xfail(strict=False, reason="emerges at scale, not reliably in "
                   "2000 toy steps; the sign of the gap flips between toy "
                   "corpora and seeds")
def test_space_adjacent_frontier_probability(toy_run):
    at, allp = [], []
    with no_grad():
        for text, doc in zip(toy_run.texts[:32], toy_run.docs[:32]):
            ids = doc[:128]
            raw = np.frombuffer(text.encode()[:128], dtype=np.uint8)
            state = mdl.encode_blocks(toy_run.state.params, toy_run.config,
                                      ids[None, :], np.array([ids.size]))
            p = state.probs.data[0]
            allp.append(p)
            at.append(p[np.flatnonzero(raw == 32)])
    at_space = float(np.concatenate(at).mean())
    overall = float(np.concatenate(allp).mean())
    print(f"p_F at spaces {at_space:.4f} vs corpus mean {overall:.4f}")
    assert at_space > overall


def sorted_half_pairs(words, rng):
    """Label each word by which half of the sorted vocabulary it falls in.

    The class is a spelling feature (leading syllable rank), so a model that
    reads bytes can generalize it to held-out words; arbitrary index-based
    labels cannot beat chance off the training set.
    """
    ranked = sorted(words)
    lo = set(ranked[:len(ranked) // 2])

    def pair(w):
        return ("one" if w in lo else "two", encode_text(w))

    perm = rng.permutation(len(words))
    train = [pair(words[i]) for i in perm[:30]]
    test = [pair(words[i]) for i in perm[30:]]
    return train, test


def test_finetuned_classifier_beats_majority(toy_run):
    train_pairs, test_pairs = sorted_half_pairs(toy_run.words,
                                                np.random.default_rng(7))

    # Finetune from an early checkpoint of the fixture's own run (same seed,
    # 200 steps). With much longer pretraining on this corpus the decoder
    # drifts to solving denoising through position alone, and label
    # conditioning then stalls at the unconditional loss.
    state = tr.init_train_state(toy_run.config, seed=11)
    state = tr.pretrain(state, toy_run.docs, toy_run.config, tr.TrainConfig(
        schedule=tr.Schedule(50, 200), batch_size=16, seq_len=128), 200)

    # Hot but ratio-preserving rates; conditioning a tiny decoder onto two
    # fresh label strings is slow at the pretraining rates.
    state = tr.restart_state(state, seed=4)
    cfg = tr.TrainConfig(groups=tr.OptimizerGroups(3e-2, 3e-3),
                         schedule=tr.Schedule(30, 700), batch_size=8,
                         seq_len=128)
    state = ev.finetune(state, train_pairs, toy_run.config, cfg, 700)

    majority = max(sum(1 for l, _ in test_pairs if l == "one"),
                   sum(1 for l, _ in test_pairs if l == "two")) / len(test_pairs)
    acc = ev.evaluate_classifier(state.params, toy_run.config, test_pairs)
    print(f"held-out accuracy {acc:.3f} vs majority baseline {majority:.3f}")
    assert acc > majority
