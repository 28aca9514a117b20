"""Shared fixtures: reduced model configs, toy corpora, synthetic tasks."""

from __future__ import annotations

import numpy as np
import pytest

from narraqa.corpus import NarratedVideo, TranscriptSegment, VqaTriplet
from narraqa.encode import InMemoryFeatureStore, WhitespaceTokenizer
from narraqa.evaluate import EvalSample
from narraqa.model import VqaT, VqaTConfig

# Reduced architecture used for gradient checks and fast unit tests.
REDUCED = dict(
    d=8, d_h=16, n_layers=1, n_heads=2, l=4, t=3, m=3,
    d_q=6, d_a=6, d_v=5, text_layers=1, text_heads=2,
)

SMALL = dict(
    d=32, d_h=64, n_layers=1, n_heads=4, l=8, t=4, m=4,
    d_q=16, d_a=16, d_v=16, text_layers=1, text_heads=2,
)

ANSWER_WORDS = ["red", "blue", "green", "gold", "pink", "teal", "gray", "lime"]


@pytest.fixture
def toy_tokenizer() -> WhitespaceTokenizer:
    return WhitespaceTokenizer(
        ["what color is shown here", " ".join(ANSWER_WORDS), "the quick brown fox"]
    )


@pytest.fixture
def reduced_model(toy_tokenizer) -> VqaT:
    cfg = VqaTConfig(vocab_size=toy_tokenizer.vocab_size, **REDUCED)
    return VqaT(cfg, seed=7)


def segment(start: float, end: float, text: str) -> TranscriptSegment:
    return TranscriptSegment(start_s=start, end_s=end, text=text)


def video(video_id: str, *segments: TranscriptSegment) -> NarratedVideo:
    return NarratedVideo(video_id=video_id, segments=tuple(segments))


def make_synthetic_task(
    n_train: int = 64,
    n_test: int = 32,
    n_answers: int = 8,
    d_v: int = 16,
    seed: int = 0,
):
    """Task where the answer is a deterministic function of the video features.

    Video i carries a one-hot feature pattern for class i mod n_answers plus
    small noise; the question text is constant, so only the video identifies
    the answer.
    """
    rng = np.random.default_rng(seed)
    answers = ANSWER_WORDS[:n_answers]
    question = "what color is shown here?"
    features: dict[str, np.ndarray] = {}
    train: list[VqaTriplet] = []
    test: list[EvalSample] = []
    for i in range(n_train + n_test):
        label = i % n_answers
        vid = f"v{i:03d}"
        pattern = np.zeros(d_v, dtype=np.float32)
        pattern[label] = 3.0
        rows = pattern + 0.1 * rng.standard_normal((12, d_v)).astype(np.float32)
        features[vid] = rows.astype(np.float32)
        if i < n_train:
            train.append(VqaTriplet(vid, 0.0, 12.0, question, answers[label]))
        else:
            test.append(
                EvalSample(
                    video_id=vid, start_s=0.0, end_s=12.0, question=question,
                    answer=answers[label], sample_id=len(test),
                )
            )
    return train, test, InMemoryFeatureStore(features), answers
