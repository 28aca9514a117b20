"""Fixed-shape model input encoding.

Turns triplets into padded batches: per-second video features sampled at
equally spaced timestamps to a fixed length, text tokenized to fixed
lengths with CLS/SEP framing, and BERT-style corruption of question tokens
for masked language modeling. Everything here is numpy; the model layer
converts to torch tensors at its boundary.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .corpus import VqaTriplet
from .errors import FeatureLookupError

MLM_IGNORE = -1  # label value at uncorrupted positions

# MLM corruption probabilities (fixed, BERT-style)
CORRUPT_PROB = 0.15
MASK_FRACTION = 0.80
KEEP_FRACTION = 0.10

# ---------------------------------------------------------------------------
# Tokenizer port and the whitespace toy tokenizer
# ---------------------------------------------------------------------------


class TokenizerPort(Protocol):
    """Deterministic text-to-token-ids mapping with BERT-style specials.

    Faithful runs plug a WordPiece-compatible adapter (vocab size 30,522)
    through this interface; tests use the whitespace toy tokenizer below.
    """

    vocab_size: int
    pad_id: int
    cls_id: int
    sep_id: int
    mask_id: int

    def tokenize(self, text: str) -> list[int]: ...

    def special_ids(self) -> frozenset[int]: ...


class WhitespaceTokenizer:
    """Toy tokenizer: one lowercased whitespace word per token.

    The vocabulary is the sorted set of words seen at construction; unknown
    words map to [UNK]. Ships for desk-scale runs and tests only.
    """

    def __init__(self, texts: Iterable[str] = ()):
        words = sorted({w.lower() for text in texts for w in text.split()})
        self.pad_id = 0
        self.unk_id = 1
        self.cls_id = 2
        self.sep_id = 3
        self.mask_id = 4
        self._word_to_id = {w: i + 5 for i, w in enumerate(words)}
        self._id_to_word = {i: w for w, i in self._word_to_id.items()}
        self.vocab_size = 5 + len(words)

    def tokenize(self, text: str) -> list[int]:
        return [self._word_to_id.get(w.lower(), self.unk_id) for w in text.split()]

    def special_ids(self) -> frozenset[int]:
        return frozenset(
            {self.pad_id, self.unk_id, self.cls_id, self.sep_id, self.mask_id}
        )

    def words(self) -> list[str]:
        """Vocabulary words in id order (for checkpoint embedding)."""
        return [self._id_to_word[i] for i in sorted(self._id_to_word)]


def tokenizer_from_words(words: Sequence[str]) -> WhitespaceTokenizer:
    """Rebuild a WhitespaceTokenizer from a stored word list."""
    return WhitespaceTokenizer([" ".join(words)] if words else [])


# ---------------------------------------------------------------------------
# Video feature files
# ---------------------------------------------------------------------------

_FEAT_HEADER = struct.Struct("<II")  # n_rows, d_v


def write_feature_file(path: Path | str, features: np.ndarray) -> None:
    """Write a per-video feature file: 8-byte header then float32 LE rows.

    Rows are 1-second steps from video time 0.
    """
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2:
        raise ValueError("features must be a 2-D (n_rows, d_v) array")
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(features.shape[0], features.shape[1]))
        fh.write(features.tobytes(order="C"))


def read_feature_file(path: Path | str) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(_FEAT_HEADER.size)
        if len(header) != _FEAT_HEADER.size:
            raise FeatureLookupError(f"feature file {path} has a truncated header")
        n_rows, d_v = _FEAT_HEADER.unpack(header)
        data = fh.read()
    expected = n_rows * d_v * 4
    if len(data) != expected:
        raise FeatureLookupError(
            f"feature file {path} has {len(data)} payload bytes, expected {expected}"
        )
    return np.frombuffer(data, dtype="<f4").reshape(n_rows, d_v).copy()


class FeatureStore:
    """Directory of `<video_id>.feat` files with per-second feature rows."""

    def __init__(self, directory: Path | str):
        self.directory = Path(directory)

    def lookup(self, video_id: str, start_s: float, end_s: float) -> np.ndarray:
        """Feature rows covering [start_s, end_s): floor-second granularity.

        Returns floor(end) - floor(start) rows, clamped to at least one, and
        clipped to the rows the file actually holds.
        """
        path = self.directory / f"{video_id}.feat"
        if not path.exists():
            raise FeatureLookupError(f"no feature file for video {video_id!r}")
        rows = read_feature_file(path)
        return _clip_rows(rows, video_id, start_s, end_s)


class InMemoryFeatureStore:
    """Test double keeping full per-video feature matrices in memory."""

    def __init__(self, features: dict[str, np.ndarray]):
        self.features = {k: np.asarray(v, dtype=np.float32) for k, v in features.items()}

    def lookup(self, video_id: str, start_s: float, end_s: float) -> np.ndarray:
        if video_id not in self.features:
            raise FeatureLookupError(f"no features for video {video_id!r}")
        return _clip_rows(self.features[video_id], video_id, start_s, end_s)


def _clip_rows(
    rows: np.ndarray, video_id: str, start_s: float, end_s: float
) -> np.ndarray:
    first = int(np.floor(start_s))
    last = max(int(np.floor(end_s)), first + 1)
    first = max(first, 0)
    out = rows[first : min(max(last, first + 1), rows.shape[0])]
    if out.shape[0] == 0:
        raise FeatureLookupError(
            f"clip [{start_s}, {end_s}] of video {video_id!r} lies outside the "
            f"available feature rows ({rows.shape[0]} rows)"
        )
    return out


# ---------------------------------------------------------------------------
# Encoding operations
# ---------------------------------------------------------------------------


def sample_video_features(
    features: np.ndarray, t: int
) -> tuple[np.ndarray, np.ndarray]:
    """Sample n feature rows to exactly t: equally spaced picks or zero-pad.

    For n >= t the selected indices are round(j * (n-1) / (t-1)) for
    j = 0..t-1 (index 0 when t = 1); for n < t the rows are copied in order
    and the remainder zero-padded. Returns (t x d_v features, t mask).
    """
    features = np.asarray(features, dtype=np.float32)
    n = features.shape[0]
    if n == 0:
        raise ValueError("cannot sample features from an empty clip")
    if t < 1:
        raise ValueError("t must be >= 1")
    if n >= t:
        if t == 1:
            indices = np.array([0])
        else:
            # round half up for platform-independent index selection
            indices = np.floor(np.arange(t) * (n - 1) / (t - 1) + 0.5).astype(int)
        return features[indices], np.ones(t, dtype=bool)
    out = np.zeros((t, features.shape[1]), dtype=np.float32)
    out[:n] = features
    mask = np.zeros(t, dtype=bool)
    mask[:n] = True
    return out, mask


def encode_text(
    text: str, tokenizer: TokenizerPort, max_len: int
) -> tuple[np.ndarray, np.ndarray]:
    """Encode text as [CLS] tokens [SEP] with padding to max_len.

    Truncation keeps the head of the token sequence; [SEP] is always the
    last non-pad token. Returns (ids, mask) of length max_len.
    """
    if max_len < 2:
        raise ValueError("max_len must be at least 2 (CLS and SEP)")
    tokens = tokenizer.tokenize(text)[: max_len - 2]
    ids = [tokenizer.cls_id, *tokens, tokenizer.sep_id]
    n = len(ids)
    ids = ids + [tokenizer.pad_id] * (max_len - n)
    mask = np.zeros(max_len, dtype=bool)
    mask[:n] = True
    return np.array(ids, dtype=np.int64), mask


def encode_text_pair(
    first: str, second: str, tokenizer: TokenizerPort, max_len: int
) -> tuple[np.ndarray, np.ndarray]:
    """Encode two texts as [CLS] first [SEP] second [SEP], truncated to max_len.

    Used for the cross-modal matching path where question and answer are one
    text stream. Truncation drops tokens from the tail of the concatenation
    while keeping the final [SEP].
    """
    if max_len < 3:
        raise ValueError("max_len must be at least 3 for a text pair")
    body = [*tokenizer.tokenize(first), tokenizer.sep_id, *tokenizer.tokenize(second)]
    body = body[: max_len - 2]
    if body and body[-1] == tokenizer.sep_id:
        body = body[:-1]  # avoid a doubled separator before the final SEP
    ids = [tokenizer.cls_id, *body, tokenizer.sep_id]
    n = len(ids)
    ids = ids + [tokenizer.pad_id] * (max_len - n)
    mask = np.zeros(max_len, dtype=bool)
    mask[:n] = True
    return np.array(ids, dtype=np.int64), mask


def corrupt_for_mlm(
    ids: np.ndarray,
    mask: np.ndarray,
    tokenizer: TokenizerPort,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """BERT-style corruption of eligible token positions.

    Eligible positions are non-pad, non-special tokens. Each is corrupted
    independently with probability 0.15; a corrupted token becomes [MASK]
    80% of the time, stays unchanged 10% of the time and becomes a uniform
    random vocabulary token otherwise. Labels hold the original id at
    corrupted positions and MLM_IGNORE elsewhere.
    """
    ids = np.asarray(ids)
    specials = tokenizer.special_ids()
    eligible = np.asarray(mask, dtype=bool) & ~np.isin(ids, list(specials))
    corrupted = ids.copy()
    labels = np.full(ids.shape, MLM_IGNORE, dtype=np.int64)

    pick = (rng.random(ids.shape) < CORRUPT_PROB) & eligible
    branch = rng.random(ids.shape)
    random_ids = rng.integers(0, tokenizer.vocab_size, size=ids.shape)

    labels[pick] = ids[pick]
    mask_branch = pick & (branch < MASK_FRACTION)
    random_branch = pick & (branch >= MASK_FRACTION + KEEP_FRACTION)
    corrupted[mask_branch] = tokenizer.mask_id
    corrupted[random_branch] = random_ids[random_branch]
    return corrupted, labels


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EncodeConfig:
    l: int = 20  # question length in tokens
    t: int = 20  # video feature rows
    m: int = 10  # answer length in tokens
    mlm: bool = True  # corrupt question tokens and emit labels


@dataclass
class EncodedBatch:
    """Fixed-shape arrays for one training or evaluation batch."""

    question_ids: np.ndarray  # B x l int64 (corrupted when mlm is on)
    question_mask: np.ndarray  # B x l bool
    answer_ids: np.ndarray  # B x m int64
    answer_mask: np.ndarray  # B x m bool
    video_features: np.ndarray  # B x t x d_v float32
    video_mask: np.ndarray  # B x t bool
    mlm_labels: np.ndarray  # B x l int64, MLM_IGNORE where uncorrupted
    answer_strings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.question_ids.shape[0]


def assemble_batch(
    triplets: Sequence[VqaTriplet],
    feature_store,
    tokenizer: TokenizerPort,
    cfg: EncodeConfig,
    rng: np.random.Generator | None = None,
) -> EncodedBatch:
    """Encode triplets into one fixed-shape batch.

    MLM corruption applies to question tokens only and requires an rng.
    """
    if not triplets:
        raise ValueError("cannot assemble an empty batch")
    if cfg.mlm and rng is None:
        raise ValueError("MLM corruption requires an rng")

    q_ids, q_mask, a_ids, a_mask, feats, f_mask, labels = [], [], [], [], [], [], []
    for triplet in triplets:
        ids, mask = encode_text(triplet.question, tokenizer, cfg.l)
        if cfg.mlm:
            ids, lab = corrupt_for_mlm(ids, mask, tokenizer, rng)
        else:
            lab = np.full(cfg.l, MLM_IGNORE, dtype=np.int64)
        q_ids.append(ids)
        q_mask.append(mask)
        labels.append(lab)

        ids, mask = encode_text(triplet.answer, tokenizer, cfg.m)
        a_ids.append(ids)
        a_mask.append(mask)

        rows = feature_store.lookup(triplet.video_id, triplet.start_s, triplet.end_s)
        sampled, mask = sample_video_features(rows, cfg.t)
        feats.append(sampled)
        f_mask.append(mask)

    return EncodedBatch(
        question_ids=np.stack(q_ids),
        question_mask=np.stack(q_mask),
        answer_ids=np.stack(a_ids),
        answer_mask=np.stack(a_mask),
        video_features=np.stack(feats),
        video_mask=np.stack(f_mask),
        mlm_labels=np.stack(labels),
        answer_strings=[t.answer for t in triplets],
    )


def encode_answers(
    answers: Sequence[str], tokenizer: TokenizerPort, m: int
) -> tuple[np.ndarray, np.ndarray]:
    """Encode a list of answer strings to (K x m ids, K x m mask)."""
    ids, masks = zip(*(encode_text(a, tokenizer, m) for a in answers))
    return np.stack(ids), np.stack(masks)
