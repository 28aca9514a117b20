"""Vocabulary construction, prediction, metrics and analysis reports.

Open-ended prediction ranks a fixed answer vocabulary by the dot product
between the fused video-question embedding and each precomputed answer
embedding. Accuracy is exact string match after trimming; datasets with
five reference answers per question score a prediction by how many
annotators gave it (one annotator: half credit, two or more: full).
Reports add per-quartile accuracy over answer training frequency and a
per-question-type breakdown.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .encode import EncodeConfig, TokenizerPort, encode_answers, encode_text, encode_text_pair, sample_video_features
from .errors import DataValidationError, ParseError

# ---------------------------------------------------------------------------
# Answer vocabulary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnswerVocabulary:
    """Ordered answer list with its string-to-index map and source rule."""

    answers: tuple[str, ...]
    rule: str
    index: dict[str, int] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(set(self.answers)) != len(self.answers):
            raise DataValidationError("vocabulary contains duplicate answers")
        if not self.answers:
            raise DataValidationError("vocabulary is empty")
        object.__setattr__(
            self, "index", {a: i for i, a in enumerate(self.answers)}
        )

    def __len__(self) -> int:
        return len(self.answers)

    def __contains__(self, answer: str) -> bool:
        return answer.strip() in self.index


def build_vocab(
    train_answers: Iterable[str],
    top_k: int | None = None,
    min_count: int | None = None,
    explicit: Sequence[str] | None = None,
) -> AnswerVocabulary:
    """Build a vocabulary by exactly one rule.

    Ordering is by descending training count, then ascending lexicographic;
    a top_k cutoff that falls inside a tie keeps the lexicographically
    smallest answers.
    """
    rules = [r for r in (top_k, min_count, explicit) if r is not None]
    if len(rules) != 1:
        raise ValueError("specify exactly one of top_k, min_count, explicit")
    if explicit is not None:
        return AnswerVocabulary(tuple(explicit), rule="explicit")
    counts = Counter(a.strip() for a in train_answers if a.strip())
    if not counts:
        raise DataValidationError("no training answers to build a vocabulary from")
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if top_k is not None:
        chosen = [a for a, _ in ordered[:top_k]]
        rule = f"top_k:{top_k}"
    else:
        chosen = [a for a, c in ordered if c >= min_count]
        rule = f"min_count:{min_count}"
    if not chosen:
        raise DataValidationError(f"vocabulary rule {rule} selected no answers")
    return AnswerVocabulary(tuple(chosen), rule=rule)


# ---------------------------------------------------------------------------
# Evaluation samples
# ---------------------------------------------------------------------------


@dataclass
class EvalSample:
    """One downstream QA sample in exactly one ground-truth form."""

    video_id: str
    start_s: float
    end_s: float
    question: str
    answer: str | None = None  # open-ended
    answers: tuple[str, ...] | None = None  # five reference answers
    candidates: tuple[str, ...] | None = None  # multiple choice
    correct: int | None = None
    question_type: str | None = None
    answer_train_frequency: int | None = None
    sample_id: int = 0

    def validate(self) -> None:
        forms = [
            self.answer is not None,
            self.answers is not None,
            self.candidates is not None,
        ]
        if sum(forms) != 1:
            raise DataValidationError(
                f"sample {self.sample_id} must carry exactly one ground-truth form"
            )
        if self.answers is not None and len(self.answers) != 5:
            raise DataValidationError(
                f"sample {self.sample_id} needs exactly 5 reference answers"
            )
        if self.candidates is not None:
            if len(self.candidates) != 4:
                raise DataValidationError(
                    f"sample {self.sample_id} needs exactly 4 candidates"
                )
            if self.correct is None or not 0 <= self.correct <= 3:
                raise DataValidationError(
                    f"sample {self.sample_id} has an invalid correct index"
                )

    @property
    def ground_truth_strings(self) -> tuple[str, ...]:
        if self.answer is not None:
            return (self.answer,)
        if self.answers is not None:
            return self.answers
        return (self.candidates[self.correct],)


def load_eval_samples(path: Path | str) -> list[EvalSample]:
    """Read newline-delimited QA records in any of the three forms."""
    samples: list[EvalSample] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                sample = EvalSample(
                    video_id=str(rec["video_id"]),
                    start_s=float(rec["start"]),
                    end_s=float(rec["end"]),
                    question=str(rec["question"]),
                    answer=rec.get("answer"),
                    answers=tuple(rec["answers"]) if "answers" in rec else None,
                    candidates=tuple(rec["candidates"]) if "candidates" in rec else None,
                    correct=rec.get("correct"),
                    question_type=rec.get("question_type"),
                    answer_train_frequency=rec.get("answer_train_frequency"),
                    sample_id=len(samples),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad QA record: {exc}", line=line_no) from exc
            sample.validate()
            samples.append(sample)
    return samples


def annotate_frequencies(
    samples: Sequence[EvalSample], train_answers: Iterable[str]
) -> None:
    """Fill answer_train_frequency from a training answer multiset.

    Samples with several reference answers take the largest count among
    them; absent answers count 0. Existing values are preserved.
    """
    counts = Counter(a.strip() for a in train_answers)
    for sample in samples:
        if sample.answer_train_frequency is None:
            sample.answer_train_frequency = max(
                counts.get(g.strip(), 0) for g in sample.ground_truth_strings
            )


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def embed_vocab(
    model, tokenizer: TokenizerPort, vocab: AnswerVocabulary, m: int
) -> torch.Tensor:
    """Answer embeddings for the whole vocabulary, computed once."""
    ids, mask = encode_answers(vocab.answers, tokenizer, m)
    model.eval()
    with torch.no_grad():
        return model.encode_answer(ids, mask)


def rank_by_score(scores: np.ndarray, vocab: AnswerVocabulary) -> list[str]:
    """Vocabulary answers sorted by descending score, ties by vocab index."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return [vocab.answers[i] for i in order]


def _encode_sample_inputs(sample, tokenizer, feature_store, cfg: EncodeConfig):
    q_ids, q_mask = encode_text(sample.question, tokenizer, cfg.l)
    rows = feature_store.lookup(sample.video_id, sample.start_s, sample.end_s)
    feats, f_mask = sample_video_features(rows, cfg.t)
    return q_ids[None], q_mask[None], feats[None], f_mask[None]


def zero_shot_predict(
    model,
    tokenizer: TokenizerPort,
    feature_store,
    sample: EvalSample,
    vocab: AnswerVocabulary,
    vocab_embeddings: torch.Tensor,
    cfg: EncodeConfig,
) -> list[str]:
    """Rank the vocabulary for one sample by fused-embedding dot product."""
    model.eval()
    with torch.no_grad():
        fused = model.encode_video_question(
            *_encode_sample_inputs(sample, tokenizer, feature_store, cfg)
        )
        scores = model.score(fused, vocab_embeddings)[0]
    return rank_by_score(scores.cpu().numpy(), vocab)


def match_predict(
    model,
    tokenizer: TokenizerPort,
    feature_store,
    sample: EvalSample,
    vocab: AnswerVocabulary,
    cfg: EncodeConfig,
) -> list[str]:
    """Rank the vocabulary by the cross-modal matching head.

    Each candidate answer is concatenated to the question into a single
    text stream before scoring, as in narration-matching pretraining.
    """
    model.eval()
    _, _, feats, f_mask = _encode_sample_inputs(sample, tokenizer, feature_store, cfg)
    logits = []
    with torch.no_grad():
        for answer in vocab.answers:
            ids, mask = encode_text_pair(sample.question, answer, tokenizer, cfg.l)
            logits.append(
                float(model.match_logits(ids[None], mask[None], feats, f_mask)[0])
            )
    return rank_by_score(np.array(logits), vocab)


def multiple_choice_predict(
    model,
    tokenizer: TokenizerPort,
    feature_store,
    sample: EvalSample,
    cfg: EncodeConfig,
    scorer: str = "joint",
) -> int:
    """Index of the best of 4 candidates; ties pick the lowest index."""
    sample.validate()
    model.eval()
    q_ids, q_mask, feats, f_mask = _encode_sample_inputs(
        sample, tokenizer, feature_store, cfg
    )
    with torch.no_grad():
        if scorer == "joint":
            fused = model.encode_video_question(q_ids, q_mask, feats, f_mask)
            ids, mask = encode_answers(sample.candidates, tokenizer, cfg.m)
            scores = model.score(fused, model.encode_answer(ids, mask))[0]
        elif scorer == "match":
            scores = []
            for candidate in sample.candidates:
                ids, mask = encode_text_pair(sample.question, candidate, tokenizer, cfg.l)
                scores.append(model.match_logits(ids[None], mask[None], feats, f_mask)[0])
            scores = torch.stack(list(scores))
        else:
            raise ValueError(f"unknown scorer {scorer!r}")
    return int(np.argmax(scores.cpu().numpy()))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def consensus_accuracy(prediction: str, ground_truths: Sequence[str]) -> float:
    """min(matching annotators / 2, 1) over exactly five reference answers."""
    if len(ground_truths) != 5:
        raise ValueError("consensus accuracy requires exactly 5 ground-truth answers")
    matches = sum(1 for g in ground_truths if g.strip() == prediction.strip())
    return min(matches / 2.0, 1.0)


def sample_topk_accuracy(ranked: Sequence[str], sample: EvalSample, k: int) -> float:
    """Top-k credit for one open-ended sample.

    Single ground truth: 1 if it appears (trimmed exact match) in the first
    k answers. Five references: the best per-annotator credit among the
    first k answers.
    """
    top = list(ranked[:k])
    if sample.answers is not None:
        return max((consensus_accuracy(p, sample.answers) for p in top), default=0.0)
    truth = sample.answer.strip()
    return 1.0 if any(p.strip() == truth for p in top) else 0.0


def accuracy_topk(
    ranked_lists: Sequence[Sequence[str]], samples: Sequence[EvalSample], k: int
) -> float:
    """Mean top-k accuracy; out-of-vocabulary ground truths count as misses."""
    if not samples:
        raise ValueError("cannot compute accuracy over an empty sample set")
    if k < 1:
        raise ValueError("k must be >= 1")
    return float(
        np.mean([sample_topk_accuracy(r, s, k) for r, s in zip(ranked_lists, samples)])
    )


def question_type_of(question: str, metadata_type: str | None = None) -> str:
    """Dataset-provided type when present, else a first-words heuristic."""
    if metadata_type:
        return metadata_type
    q = question.strip().lower()
    if q.startswith(("what color", "what colour")):
        return "Color"
    if q.startswith(("how many", "how much")):
        return "Number"
    for word, label in (("what", "What"), ("who", "Who"), ("when", "When"), ("where", "Where")):
        if q.startswith(word):
            return label
    return "Other"


def quartile_split(samples: Sequence[EvalSample]) -> list[list[EvalSample]]:
    """Four groups by descending answer training frequency, sizes within 1.

    The first group holds the most frequent answers. Ties are broken by
    ascending sample id for determinism.
    """
    if not samples:
        raise ValueError("cannot split an empty sample set")
    missing = [s.sample_id for s in samples if s.answer_train_frequency is None]
    if missing:
        raise DataValidationError(
            f"samples {missing[:5]} lack answer_train_frequency"
        )
    ordered = sorted(samples, key=lambda s: (-s.answer_train_frequency, s.sample_id))
    n = len(ordered)
    base, rem = divmod(n, 4)
    groups: list[list[EvalSample]] = []
    start = 0
    for g in range(4):
        size = base + (1 if g < rem else 0)
        groups.append(ordered[start : start + size])
        start += size
    return groups


def question_type_report(
    samples: Sequence[EvalSample], per_sample_accuracy: Sequence[float]
) -> dict[str, dict[str, float]]:
    """Accuracy and count per question type; empty types are omitted."""
    by_type: dict[str, list[float]] = {}
    for sample, acc in zip(samples, per_sample_accuracy):
        label = question_type_of(sample.question, sample.question_type)
        by_type.setdefault(label, []).append(acc)
    return {
        label: {"accuracy": float(np.mean(values)), "n": len(values)}
        for label, values in sorted(by_type.items())
    }


# ---------------------------------------------------------------------------
# Full-dataset evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    top1: float
    top10: float | None
    per_quartile: list[float] | None
    per_type: dict[str, dict[str, float]]
    n_samples: int
    oov_rate: float
    type_source: str  # "metadata" or "heuristic"

    def to_dict(self) -> dict:
        return {
            "top1": self.top1,
            "top10": self.top10,
            "per_quartile": self.per_quartile,
            "per_type": self.per_type,
            "n_samples": self.n_samples,
            "oov_rate": self.oov_rate,
            "type_source": self.type_source,
        }


def evaluate_dataset(
    model,
    tokenizer: TokenizerPort,
    feature_store,
    samples: Sequence[EvalSample],
    cfg: EncodeConfig,
    vocab: AnswerVocabulary | None = None,
    scorer: str = "joint",
    train_answers: Iterable[str] | None = None,
) -> EvalReport:
    """Evaluate a dataset end to end and assemble the report.

    Open-ended samples need a vocabulary; multiple-choice samples are
    scored against their own candidates. Quartile accuracy appears when
    training answer frequencies are available (from sample metadata or a
    provided training answer multiset).
    """
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    for sample in samples:
        sample.validate()
    is_mc = samples[0].candidates is not None
    if any((s.candidates is not None) != is_mc for s in samples):
        raise DataValidationError("dataset mixes multiple-choice and open-ended samples")
    if train_answers is not None:
        annotate_frequencies(samples, train_answers)
    per_sample_top1: list[float] = []
    oov = 0

    if is_mc:
        top10 = None
        for sample in samples:
            chosen = multiple_choice_predict(
                model, tokenizer, feature_store, sample, cfg, scorer=scorer
            )
            per_sample_top1.append(1.0 if chosen == sample.correct else 0.0)
    else:
        if vocab is None:
            raise ValueError("open-ended evaluation requires a vocabulary")
        vocab_emb = embed_vocab(model, tokenizer, vocab, cfg.m)
        per_sample_top10: list[float] = []
        for sample in samples:
            if scorer == "match":
                ranked = match_predict(model, tokenizer, feature_store, sample, vocab, cfg)
            else:
                ranked = zero_shot_predict(
                    model, tokenizer, feature_store, sample, vocab, vocab_emb, cfg
                )
            per_sample_top1.append(sample_topk_accuracy(ranked, sample, 1))
            per_sample_top10.append(sample_topk_accuracy(ranked, sample, 10))
            if not any(g in vocab for g in sample.ground_truth_strings):
                oov += 1
        top10 = float(np.mean(per_sample_top10))

    per_quartile = None
    if all(s.answer_train_frequency is not None for s in samples):
        acc_by_id = {s.sample_id: a for s, a in zip(samples, per_sample_top1)}
        per_quartile = [
            float(np.mean([acc_by_id[s.sample_id] for s in group])) if group else 0.0
            for group in quartile_split(samples)
        ]

    type_source = "metadata" if all(s.question_type for s in samples) else "heuristic"
    return EvalReport(
        top1=float(np.mean(per_sample_top1)),
        top10=top10,
        per_quartile=per_quartile,
        per_type=question_type_report(samples, per_sample_top1),
        n_samples=len(samples),
        oov_rate=oov / len(samples),
        type_source=type_source,
    )
