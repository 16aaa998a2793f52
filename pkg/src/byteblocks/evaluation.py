"""Classification-as-generation evaluation, with byte-noise robustness runs.

A labeled dataset is tab-separated "label<TAB>text" lines. Classification
fine-tunes the pretrained seq2seq model to emit the label bytes, and
evaluation picks the label with the highest teacher-forced log-likelihood.
Noise robustness applies random byte edits to the evaluation inputs
(and optionally to the fine-tuning inputs first).
"""

from __future__ import annotations

import numpy as np

from byteblocks import model as mdl
from byteblocks.bytetext import EOS_ID, CorruptionExample, encode_text, inject_noise
from byteblocks.model import ModelConfig
from byteblocks.training import TrainConfig, TrainState, training_step

LabeledIds = list[tuple[str, np.ndarray]]


def load_labeled(path) -> list[tuple[str, str]]:
    """Parse label<TAB>text lines; malformed lines are an error, not a skip."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            label, sep, text = line.partition("\t")
            if not sep or not label or not text:
                raise ValueError(f"{path}:{lineno}: expected 'label<TAB>text'")
            pairs.append((label, text))
    if not pairs:
        raise ValueError(f"{path}: no labeled examples")
    return pairs


def pairs_to_ids(pairs: list[tuple[str, str]]) -> LabeledIds:
    return [(label, encode_text(text)) for label, text in pairs]


def apply_noise(id_pairs: LabeledIds, tau: float, seed: int) -> LabeledIds:
    """Per-example random byte edits at rate tau; tau=0 returns inputs as-is."""
    if tau == 0.0:
        return id_pairs
    out = []
    for i, (label, ids) in enumerate(id_pairs):
        rng = np.random.default_rng((seed, i, 5))
        out.append((label, inject_noise(ids, tau, rng=rng)))
    return out


def label_examples(id_pairs: LabeledIds) -> list[CorruptionExample]:
    """Fine-tuning pairs: input text bytes, target label bytes + eos."""
    out = []
    for label, ids in id_pairs:
        target = np.concatenate((encode_text(label), [EOS_ID]))
        out.append(CorruptionExample(corrupted=ids, target=target, spans=[]))
    return out


def finetune(state: TrainState, id_pairs: LabeledIds, model_config: ModelConfig,
             train_config: TrainConfig, total_steps: int, on_record=None) -> TrainState:
    """Continue training on label generation; batches keyed by (seed, step)."""
    examples = label_examples(id_pairs)
    while state.step < total_steps:
        rng = np.random.default_rng((state.seed, state.step, 3))
        picks = rng.integers(0, len(examples), size=min(train_config.batch_size, len(examples)))
        batch = mdl.collate([examples[int(i)] for i in picks])
        state, record = training_step(state, batch, model_config, train_config)
        if on_record is not None:
            on_record(record)
    return state


def evaluate_classifier(params, model_config: ModelConfig, id_pairs: LabeledIds,
                        labels: list[str] | None = None) -> float:
    """Fraction of examples whose best-scoring label matches the truth."""
    if labels is None:
        labels = sorted({label for label, _ in id_pairs})
    hits = 0
    for label, ids in id_pairs:
        pred = mdl.classify_by_generation(params, model_config, ids, labels)
        hits += pred == label
    return hits / len(id_pairs)


def noise_accuracy_table(params, model_config: ModelConfig, id_pairs: LabeledIds,
                         taus: list[float], seed: int) -> list[tuple[float, float]]:
    """Accuracy per noise rate, evaluation-side noise only."""
    labels = sorted({label for label, _ in id_pairs})
    table = []
    for tau in taus:
        noisy = apply_noise(id_pairs, tau, seed)
        table.append((tau, evaluate_classifier(params, model_config, noisy, labels)))
    return table
