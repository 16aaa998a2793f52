"""Byte-level text handling: vocabulary, codec, corpus loading, corruption.

The vocabulary is fixed and data-independent. Ids 0 and 1 are pad and eos,
raw bytes 0..255 map to ids 2..257, and 100 sentinel ids (258..357) mark
masked spans for the denoising objective, giving 358 ids in total.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_ID = 0
EOS_ID = 1
BYTE_OFFSET = 2
NUM_BYTES = 256
SENTINEL_BASE = BYTE_OFFSET + NUM_BYTES  # 258
NUM_SENTINELS = 100
VOCAB_SIZE = SENTINEL_BASE + NUM_SENTINELS  # 358

MAX_DOCUMENT_BYTES = 1 << 15  # documents longer than this are dropped


def sentinel_id(k: int) -> int:
    """Id of the k-th span sentinel (k counts from 0)."""
    if not 0 <= k < NUM_SENTINELS:
        raise ValueError(f"sentinel index {k} outside [0, {NUM_SENTINELS})")
    return SENTINEL_BASE + k


def encode_text(text: str) -> np.ndarray:
    """UTF-8 encode ``text`` and shift each byte into the id space."""
    raw = np.frombuffer(text.encode("utf-8"), dtype=np.uint8)
    return raw.astype(np.int64) + BYTE_OFFSET


def decode_ids(ids) -> str:
    """Invert ``encode_text``; specials render as readable escapes.

    Byte runs are decoded as UTF-8 with invalid sequences replaced by the
    replacement character, so any id sequence decodes to *something*.
    """
    ids = np.asarray(ids)
    parts: list[str] = []
    buf = bytearray()

    def flush():
        if buf:
            parts.append(buf.decode("utf-8", errors="replace"))
            buf.clear()

    for i in ids.tolist():
        if BYTE_OFFSET <= i < SENTINEL_BASE:
            buf.append(i - BYTE_OFFSET)
        elif i == PAD_ID:
            flush()
            parts.append("<pad>")
        elif i == EOS_ID:
            flush()
            parts.append("<eos>")
        elif SENTINEL_BASE <= i < VOCAB_SIZE:
            flush()
            parts.append(f"<extra_id_{i - SENTINEL_BASE}>")
        else:
            raise ValueError(f"id {i} outside the vocabulary [0, {VOCAB_SIZE})")
    flush()
    return "".join(parts)


def filter_document(byte_count: int) -> bool:
    """Keep a document iff its byte count does not exceed the cap (inclusive)."""
    if byte_count < 0:
        raise ValueError("byte count cannot be negative")
    return byte_count <= MAX_DOCUMENT_BYTES


@dataclass
class CorpusStats:
    kept: int = 0
    dropped_long: int = 0
    dropped_empty: int = 0


def load_corpus(path: str | Path) -> tuple[list[np.ndarray], CorpusStats]:
    """Read newline-delimited documents, encode and length-filter them."""
    stats = CorpusStats()
    docs: list[np.ndarray] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                stats.dropped_empty += 1
                continue
            ids = encode_text(line)
            if not filter_document(len(ids)):
                stats.dropped_long += 1
                continue
            docs.append(ids)
            stats.kept += 1
    return docs, stats


# -- span corruption ----------------------------------------------------------


@dataclass
class CorruptionExample:
    """A denoising pair: encoder input with sentinels, decoder target."""

    corrupted: np.ndarray
    target: np.ndarray
    spans: list[tuple[int, int]] = field(default_factory=list)  # (start, length)


def _composition(total: int, parts: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform composition of ``total`` into ``parts`` nonnegative integers."""
    if parts == 1:
        return np.array([total])
    bars = np.sort(rng.choice(total + parts - 1, size=parts - 1, replace=False))
    edges = np.concatenate(([-1], bars, [total + parts - 1]))
    return np.diff(edges) - 1


def span_corrupt(ids, mask_rate: float = 0.15, mean_span: float = 20.0,
                 rng: np.random.Generator | None = None) -> CorruptionExample:
    """Mask random spans of a byte sequence, T5 style.

    Exactly round(mask_rate * L) bytes are masked, split over
    max(1, round(masked / mean_span)) non-overlapping spans with at least one
    unmasked byte between consecutive spans. Each span is replaced by one
    sentinel in the encoder input; the target lists sentinel, span bytes,
    sentinel, span bytes, ... and ends with eos.
    """
    if rng is None:
        rng = np.random.default_rng()
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("span_corrupt expects a flat id sequence")
    if ids.size and ((ids < BYTE_OFFSET) | (ids >= SENTINEL_BASE)).any():
        raise ValueError("span_corrupt operates on plain byte ids")
    if not 0.0 < mask_rate < 1.0:
        raise ValueError("mask_rate must lie in (0, 1)")
    if mean_span < 1.0:
        raise ValueError("mean_span must be at least 1")
    length = ids.size

    n_mask = int(round(mask_rate * length))
    if n_mask < 1:
        raise ValueError(f"sequence of {length} bytes is too short to mask at rate {mask_rate}")
    n_spans = max(1, int(round(n_mask / mean_span)))
    if n_spans > NUM_SENTINELS:
        raise ValueError(f"{n_spans} spans exceed the {NUM_SENTINELS} available sentinels")

    # Interior gaps need one byte each, so this much slack must exist.
    free = length - n_mask - (n_spans - 1)
    if free < 0:
        raise ValueError(f"sequence of {length} bytes cannot hold {n_spans} separated spans of {n_mask} total")

    if n_spans == 1:
        span_lens = np.array([n_mask])
    else:
        cuts = np.sort(rng.choice(n_mask - 1, size=n_spans - 1, replace=False)) + 1
        span_lens = np.diff(np.concatenate(([0], cuts, [n_mask])))
    gaps = _composition(free, n_spans + 1, rng)

    spans: list[tuple[int, int]] = []
    cursor = int(gaps[0])
    for t in range(n_spans):
        spans.append((cursor, int(span_lens[t])))
        cursor += int(span_lens[t])
        if t < n_spans - 1:
            cursor += int(gaps[t + 1]) + 1  # the +1 is the mandatory separator

    corrupted: list[int] = []
    target: list[int] = []
    prev_end = 0
    for t, (start, n) in enumerate(spans):
        corrupted.extend(ids[prev_end:start].tolist())
        corrupted.append(sentinel_id(t))
        target.append(sentinel_id(t))
        target.extend(ids[start:start + n].tolist())
        prev_end = start + n
    corrupted.extend(ids[prev_end:].tolist())
    target.append(EOS_ID)

    return CorruptionExample(np.array(corrupted, dtype=np.int64),
                             np.array(target, dtype=np.int64), spans)


def splice_spans(corrupted, target) -> np.ndarray:
    """Reconstruct the original ids from a corruption pair (test oracle)."""
    corrupted = np.asarray(corrupted)
    target = np.asarray(target).tolist()
    fills: dict[int, list[int]] = {}
    current: list[int] | None = None
    for i in target:
        if SENTINEL_BASE <= i < VOCAB_SIZE:
            current = fills.setdefault(i, [])
        elif i == EOS_ID:
            current = None
        else:
            if current is None:
                raise ValueError("target bytes before any sentinel")
            current.append(i)
    out: list[int] = []
    for i in corrupted.tolist():
        if SENTINEL_BASE <= i < VOCAB_SIZE:
            out.extend(fills.get(i, []))
        else:
            out.append(i)
    return np.array(out, dtype=np.int64)


# -- synthetic noise ----------------------------------------------------------

DELETE, REPLACE, INSERT = 0, 1, 2


def noise_edit_plan(length: int, tau: float,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw the edit schedule for ``inject_noise``: positions and op codes.

    Exactly floor(tau * length) distinct positions, each with delete, replace
    or insert chosen uniformly. Split out so evaluation code can inspect the
    op mix without applying the edits.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    n_edits = int(np.floor(tau * length))
    positions = rng.choice(length, size=n_edits, replace=False)
    ops = rng.integers(0, 3, size=n_edits)
    return positions, ops


def inject_noise(ids, tau: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Corrupt a byte sequence with floor(tau * L) random edits.

    Edit positions are drawn uniformly without replacement; each position gets
    delete, replace-with-random-byte or insert-random-byte with probability
    1/3. Edits apply right to left so earlier positions stay valid; an insert
    places the new byte just before the drawn position.
    """
    if rng is None:
        rng = np.random.default_rng()
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("inject_noise expects a flat id sequence")
    if ids.size and ((ids < BYTE_OFFSET) | (ids >= SENTINEL_BASE)).any():
        raise ValueError("inject_noise operates on plain byte ids")

    positions, ops = noise_edit_plan(ids.size, tau, rng)
    if positions.size == 0:
        return ids.copy()
    order = np.argsort(-positions)  # pair ops with positions, then right to left

    out = ids.tolist()
    for j in order:
        p, op = int(positions[j]), int(ops[j])
        if op == DELETE:
            del out[p]
        elif op == REPLACE:
            out[p] = int(rng.integers(0, NUM_BYTES)) + BYTE_OFFSET
        else:
            out.insert(p, int(rng.integers(0, NUM_BYTES)) + BYTE_OFFSET)
    return np.array(out, dtype=np.int64)
