"""Training losses.

The pretraining objective is contrastive: each sample's fused
video-question embedding should score its own answer above the other
answers in the batch. Negative answers are deduplicated by string, so a
repeated wrong answer enters a sample's denominator once. With the
negative pool widened to a whole answer vocabulary the same loss becomes
standard cross-entropy, which is how finetuning and the multiple-choice
form are implemented. Masked-language-modeling and binary matching losses
complete the set.

All functions take torch tensors of any float dtype and are differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .encode import MLM_IGNORE

NEG_INF = float("-inf")


@dataclass(frozen=True)
class ContrastiveBatchView:
    """One batch seen by the contrastive loss."""

    fused: torch.Tensor  # B x d, f(v_i, q_i)
    answers: torch.Tensor  # B x d, g(a_i), index-aligned with answer_strings
    answer_strings: list[str]

    def __post_init__(self):
        if self.fused.shape[0] != self.answers.shape[0] or len(
            self.answer_strings
        ) != self.fused.shape[0]:
            raise ValueError("fused, answers and answer_strings must be index-aligned")


@dataclass(frozen=True)
class LossBundle:
    """Per-phase loss values for logging; total honors the active terms."""

    contrastive: float = 0.0
    mlm: float = 0.0
    matching: float = 0.0
    lambda_mlm: float = 1.0

    @property
    def total(self) -> float:
        return self.contrastive + self.lambda_mlm * self.mlm + self.matching


def contrastive_loss(
    view: ContrastiveBatchView,
    dedup: bool = True,
    extra_negatives: tuple[list[str], torch.Tensor] | None = None,
    reduction: str = "mean",
) -> torch.Tensor:
    """In-batch contrastive loss over answer embeddings.

    With dedup on, sample i's negative pool is the set of distinct answer
    strings in the batch (plus any extra negatives) excluding its own
    answer string; duplicates contribute once. With dedup off the pool is
    the multiset of all other samples' answers. Strings are compared after
    trimming surrounding whitespace. `extra_negatives` widens the pool
    (e.g. to a full vocabulary, which makes the loss equal cross-entropy).
    """
    fused, answers, strings = view.fused, view.answers, view.answer_strings
    pos = (fused * answers).sum(dim=-1)  # B

    keys = [s.strip() for s in strings]
    if dedup:
        pool_keys: list[str] = []
        pool_rows: list[torch.Tensor] = []
        seen: set[str] = set()
        candidates = list(zip(keys, answers))
        if extra_negatives is not None:
            extra_strings, extra_emb = extra_negatives
            candidates += list(zip((s.strip() for s in extra_strings), extra_emb))
        for key, row in candidates:
            if key not in seen:
                seen.add(key)
                pool_keys.append(key)
                pool_rows.append(row)
        pool = torch.stack(pool_rows)  # U x d
        scores = fused @ pool.T  # B x U
        same = torch.tensor(
            [[pk == k for pk in pool_keys] for k in keys], dtype=torch.bool
        )
        neg_scores = scores.masked_fill(same, NEG_INF)
    else:
        pool = answers
        scores = fused @ pool.T  # B x B
        # exclude only the sample's own row; equal strings elsewhere still count
        same = torch.eye(len(keys), dtype=torch.bool)
        neg_scores = scores.masked_fill(same, NEG_INF)
        if extra_negatives is not None:
            _, extra_emb = extra_negatives
            neg_scores = torch.cat([neg_scores, fused @ extra_emb.T], dim=1)

    finite = neg_scores[~torch.isinf(neg_scores)]
    if not bool(torch.isfinite(pos).all()) or not bool(torch.isfinite(finite).all()):
        raise ValueError("contrastive scores are not finite")

    log_denom = torch.logsumexp(torch.cat([pos[:, None], neg_scores], dim=1), dim=1)
    per_sample = log_denom - pos
    if reduction == "none":
        return per_sample
    return per_sample.mean()


def finetune_loss(
    fused: torch.Tensor,
    vocab_embeddings: torch.Tensor,
    target_indices: torch.Tensor,
    reduction: str = "mean",
) -> torch.Tensor:
    """Cross-entropy of fused embeddings against a fixed answer vocabulary.

    Equals the contrastive loss with the negative pool set to the whole
    vocabulary minus the target answer.
    """
    target_indices = torch.as_tensor(target_indices, dtype=torch.long)
    n_vocab = vocab_embeddings.shape[0]
    if bool((target_indices < 0).any()) or bool((target_indices >= n_vocab).any()):
        raise ValueError("target index out of vocabulary range")
    logits = fused @ vocab_embeddings.T
    nll = -F.log_softmax(logits, dim=-1).gather(1, target_indices[:, None])[:, 0]
    if reduction == "none":
        return nll
    return nll.mean()


def multiple_choice_loss(
    fused: torch.Tensor,
    candidate_embeddings: torch.Tensor,
    correct_index: torch.Tensor,
) -> torch.Tensor:
    """4-way softmax cross-entropy over per-sample candidate scores."""
    if candidate_embeddings.shape[1] != 4:
        raise ValueError("multiple-choice batches carry exactly 4 candidates")
    correct_index = torch.as_tensor(correct_index, dtype=torch.long)
    if bool((correct_index < 0).any()) or bool((correct_index > 3).any()):
        raise ValueError("correct_index must lie in 0..3")
    scores = torch.einsum("bd,bkd->bk", fused, candidate_embeddings)
    return -F.log_softmax(scores, dim=-1).gather(1, correct_index[:, None]).mean()


def mlm_loss(
    question_outputs: torch.Tensor,
    mlm_labels: torch.Tensor,
    mlm_head: torch.nn.Module,
) -> torch.Tensor:
    """Cross-entropy over corrupted question positions; 0 when none exist."""
    mlm_labels = torch.as_tensor(mlm_labels, dtype=torch.long)
    labeled = mlm_labels != MLM_IGNORE
    if not bool(labeled.any()):
        return question_outputs.sum() * 0.0
    logits = mlm_head(question_outputs[labeled])
    return F.cross_entropy(logits, mlm_labels[labeled])


def matching_loss(
    pos_logits: torch.Tensor,
    video_neg_logits: torch.Tensor,
    text_neg_logits: torch.Tensor,
) -> torch.Tensor:
    """Binary cross-entropy over positives and their two in-batch negatives."""
    logits = torch.cat([pos_logits, video_neg_logits, text_neg_logits])
    targets = torch.cat(
        [torch.ones_like(pos_logits), torch.zeros_like(video_neg_logits),
         torch.zeros_like(text_neg_logits)]
    )
    return F.binary_cross_entropy_with_logits(logits, targets)
