"""Pretraining and finetuning loops.

Pretraining composes batches from a limited set of videos per step (clips
are drawn only from those videos), optimizes the contrastive objective
plus masked language modeling with Adam under a cosine-annealed learning
rate, and checkpoints every epoch. Finetuning optimizes vocabulary
cross-entropy and keeps the checkpoint with the best validation top-1.
The narration-matching phase trains only the video-question branch with
binary matching and masking losses; its checkpoints deliberately omit the
answer branch so the answer encoder is initialized from the question text
encoder on partial load.

Data-fraction subsets select videos by ascending 64-bit hash of the video
id, so smaller fractions are strict subsets of larger ones.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import IO, Sequence

import numpy as np
import torch

from .corpus import NarratedVideo, VqaTriplet, aggregate_segments, dedup_adjacent_repetitions
from .encode import (
    EncodeConfig,
    MLM_IGNORE,
    WhitespaceTokenizer,
    assemble_batch,
    corrupt_for_mlm,
    encode_answers,
    encode_text,
    sample_video_features,
    tokenizer_from_words,
)
from .evaluate import AnswerVocabulary, EvalSample, accuracy_topk, embed_vocab, zero_shot_predict
from .model import Checkpoint, VqaT, VqaTConfig, load_state_arrays, save_checkpoint, state_arrays
from .objectives import ContrastiveBatchView, contrastive_loss, finetune_loss, matching_loss, mlm_loss

# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

PHASES = ("pretrain", "finetune", "matching-pretrain")


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "pretrain"
    initial_lr: float = 5e-5
    epochs: int = 10
    batch_clips: int = 4096
    videos_per_batch: int = 128  # pretrain batch composition only
    seed: int = 0
    data_fraction: float = 1.0
    mlm: bool = True
    dedup: bool = True
    lambda_mlm: float = 1.0
    max_steps: int | None = None  # cap for smoke profiles

    def validate(self) -> None:
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.initial_lr <= 0 or self.epochs < 1 or self.batch_clips < 1:
            raise ValueError("invalid optimization settings")
        if self.videos_per_batch < 1:
            raise ValueError("videos_per_batch must be >= 1")
        if not 0 < self.data_fraction <= 1:
            raise ValueError("data_fraction must lie in (0, 1]")


def default_finetune_config(**overrides) -> TrainConfig:
    base = dict(phase="finetune", initial_lr=1e-5, epochs=20, batch_clips=256)
    base.update(overrides)
    return TrainConfig(**base)


def lr_at(step: int, total_steps: int, initial_lr: float) -> float:
    """Cosine-annealed learning rate from initial_lr at step 0 down to 0."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return initial_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# Data-fraction subsets
# ---------------------------------------------------------------------------


def _video_hash(video_id: str) -> int:
    return int.from_bytes(
        hashlib.blake2b(video_id.encode("utf-8"), digest_size=8).digest(), "little"
    )


def select_video_subset(video_ids: Sequence[str], fraction: float) -> list[str]:
    """Deterministic nested subset: first ceil(fraction * n) ids by hash order."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    unique = sorted(set(video_ids), key=lambda v: (_video_hash(v), v))
    k = min(len(unique), max(1, math.ceil(fraction * len(unique))))
    return unique[:k]


def subset_triplets(triplets: Sequence[VqaTriplet], fraction: float) -> list[VqaTriplet]:
    if fraction >= 1.0:
        return list(triplets)
    chosen = set(select_video_subset([t.video_id for t in triplets], fraction))
    return [t for t in triplets if t.video_id in chosen]


# ---------------------------------------------------------------------------
# Shared loop helpers
# ---------------------------------------------------------------------------


def _checkpoint_config(model: VqaT, tokenizer, cfg: TrainConfig) -> dict:
    return {
        "model": asdict(model.cfg),
        "tokenizer_words": tokenizer.words(),
        "phase": cfg.phase,
        "train": asdict(cfg),
    }


def build_model_from_checkpoint(
    ckpt: Checkpoint, allow_partial: bool = False, seed: int = 0,
    qa_t: bool | None = None,
) -> tuple[VqaT, WhitespaceTokenizer]:
    """Rebuild the model and tokenizer a checkpoint was trained with."""
    model_cfg = VqaTConfig(**ckpt.config["model"])
    if qa_t is not None:
        model_cfg = replace(model_cfg, qa_t=qa_t)
    model = VqaT(model_cfg, seed=seed)
    load_state_arrays(model, ckpt.params, allow_partial=allow_partial)
    tokenizer = tokenizer_from_words(ckpt.config.get("tokenizer_words", []))
    return model, tokenizer


class _MetricsLog:
    def __init__(self, path: Path | str | None):
        self._fh: IO[str] | None = open(path, "w", encoding="utf-8") if path else None

    def write(self, **fields) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(fields) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _f(value: torch.Tensor) -> float:
    return float(value.detach())


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _validation_top1(
    model: VqaT, tokenizer, feature_store, samples: Sequence[EvalSample],
    vocab: AnswerVocabulary, encode_cfg: EncodeConfig,
) -> float:
    vocab_emb = embed_vocab(model, tokenizer, vocab, encode_cfg.m)
    ranked = [
        zero_shot_predict(model, tokenizer, feature_store, s, vocab, vocab_emb, encode_cfg)
        for s in samples
    ]
    return accuracy_topk(ranked, samples, 1)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


def pretrain(
    dataset: Sequence[VqaTriplet],
    feature_store,
    cfg: TrainConfig,
    model_cfg: VqaTConfig | None = None,
    tokenizer: WhitespaceTokenizer | None = None,
    out_dir: Path | str | None = None,
    log_path: Path | str | None = None,
) -> Checkpoint:
    """Contrastive + MLM pretraining over generated triplets."""
    cfg.validate()
    if not dataset:
        raise ValueError("pretraining dataset is empty")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    triplets = subset_triplets(dataset, cfg.data_fraction)
    if tokenizer is None:
        tokenizer = WhitespaceTokenizer(
            [t.question for t in triplets] + [t.answer for t in triplets]
        )
    model_cfg = replace(model_cfg or VqaTConfig(), vocab_size=tokenizer.vocab_size)
    model = VqaT(model_cfg, seed=cfg.seed)
    encode_cfg = EncodeConfig(l=model_cfg.l, t=model_cfg.t, m=model_cfg.m, mlm=cfg.mlm)

    by_video: dict[str, list[VqaTriplet]] = {}
    for t in triplets:
        by_video.setdefault(t.video_id, []).append(t)
    video_ids = sorted(by_video)

    steps_per_epoch = max(1, math.ceil(len(triplets) / cfg.batch_clips))
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.initial_lr)
    log = _MetricsLog(log_path)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = None
    try:
        for step in range(total_steps):
            epoch = step // steps_per_epoch
            lr = lr_at(step, total_steps, cfg.initial_lr)
            batch_triplets = _draw_clip_batch(by_video, video_ids, rng, cfg)
            batch = assemble_batch(batch_triplets, feature_store, tokenizer, encode_cfg, rng)

            model.train()
            fused, q_out = model.encode_video_question(
                batch.question_ids, batch.question_mask,
                batch.video_features, batch.video_mask,
                return_question_outputs=True,
            )
            answers = model.encode_answer(batch.answer_ids, batch.answer_mask)
            view = ContrastiveBatchView(fused, answers, batch.answer_strings)
            c_loss = contrastive_loss(view, dedup=cfg.dedup)
            if cfg.mlm:
                m_loss = mlm_loss(q_out, batch.mlm_labels, model.mlm_head)
                total = c_loss + cfg.lambda_mlm * m_loss
            else:
                m_loss = torch.zeros(())
                total = c_loss

            optimizer.zero_grad()
            total.backward()
            _set_lr(optimizer, lr)
            optimizer.step()

            log.write(step=step, epoch=epoch, lr=lr, loss=_f(total),
                      contrastive=_f(c_loss), mlm=_f(m_loss))

            end_of_epoch = (step + 1) % steps_per_epoch == 0 or step + 1 == total_steps
            if end_of_epoch:
                checkpoint = Checkpoint(
                    params=state_arrays(model),
                    config=_checkpoint_config(model, tokenizer, cfg),
                    step=step + 1,
                )
                if out_dir is not None:
                    save_checkpoint(out_dir / f"epoch-{epoch + 1:03d}.ckpt", checkpoint)
    finally:
        log.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "final.ckpt", checkpoint)
    return checkpoint


def _draw_clip_batch(
    by_video: dict[str, list[VqaTriplet]],
    video_ids: list[str],
    rng: np.random.Generator,
    cfg: TrainConfig,
) -> list[VqaTriplet]:
    """Draw up to videos_per_batch videos, then up to batch_clips of their clips."""
    n_videos = min(cfg.videos_per_batch, len(video_ids))
    chosen = rng.choice(len(video_ids), size=n_videos, replace=False)
    pool: list[VqaTriplet] = []
    for idx in sorted(chosen):
        pool.extend(by_video[video_ids[idx]])
    if len(pool) <= cfg.batch_clips:
        return pool
    picks = rng.choice(len(pool), size=cfg.batch_clips, replace=False)
    return [pool[i] for i in sorted(picks)]


# ---------------------------------------------------------------------------
# Finetuning
# ---------------------------------------------------------------------------


def finetune(
    init: Checkpoint | None,
    dataset: Sequence[EvalSample],
    vocab: AnswerVocabulary,
    feature_store,
    cfg: TrainConfig,
    model_cfg: VqaTConfig | None = None,
    tokenizer: WhitespaceTokenizer | None = None,
    val_samples: Sequence[EvalSample] | None = None,
    allow_partial: bool = False,
    qa_t: bool | None = None,
    out_dir: Path | str | None = None,
    log_path: Path | str | None = None,
) -> Checkpoint:
    """Vocabulary cross-entropy finetuning with best-validation selection.

    Training samples whose answer is not in the vocabulary are excluded.
    Without an init checkpoint the model trains from scratch. Validation
    defaults to the training set when no split is provided. `qa_t`
    overrides the checkpoint's video-ablation setting when given.
    """
    cfg.validate()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    if init is not None:
        model, tokenizer = build_model_from_checkpoint(
            init, allow_partial=allow_partial, seed=cfg.seed, qa_t=qa_t
        )
        model_cfg = model.cfg
    else:
        if tokenizer is None:
            texts = [s.question for s in dataset] + list(vocab.answers)
            tokenizer = WhitespaceTokenizer(texts)
        model_cfg = replace(model_cfg or VqaTConfig(), vocab_size=tokenizer.vocab_size)
        model = VqaT(model_cfg, seed=cfg.seed)
    encode_cfg = EncodeConfig(l=model_cfg.l, t=model_cfg.t, m=model_cfg.m, mlm=cfg.mlm)

    train_samples = [s for s in dataset if s.answer is not None and s.answer in vocab]
    if not train_samples:
        raise ValueError("no training samples with in-vocabulary answers")
    targets_all = np.array(
        [vocab.index[s.answer.strip()] for s in train_samples], dtype=np.int64
    )
    val_samples = list(val_samples) if val_samples is not None else list(train_samples)
    vocab_ids, vocab_mask = encode_answers(vocab.answers, tokenizer, encode_cfg.m)

    steps_per_epoch = max(1, math.ceil(len(train_samples) / cfg.batch_clips))
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.initial_lr)
    log = _MetricsLog(log_path)
    best: tuple[float, int, Checkpoint] | None = None  # (metric, epoch, ckpt)
    step = 0
    last = {"loss": 0.0, "contrastive": 0.0, "mlm": 0.0}
    try:
        for epoch in range(cfg.epochs):
            if step >= total_steps:
                break
            order = rng.permutation(len(train_samples))
            for start in range(0, len(train_samples), cfg.batch_clips):
                if step >= total_steps:
                    break
                picks = order[start : start + cfg.batch_clips]
                batch_samples = [train_samples[i] for i in picks]
                batch = assemble_batch(
                    [_sample_to_triplet(s) for s in batch_samples],
                    feature_store, tokenizer, encode_cfg, rng,
                )
                lr = lr_at(step, total_steps, cfg.initial_lr)

                model.train()
                fused, q_out = model.encode_video_question(
                    batch.question_ids, batch.question_mask,
                    batch.video_features, batch.video_mask,
                    return_question_outputs=True,
                )
                vocab_emb = model.encode_answer(vocab_ids, vocab_mask)
                f_loss = finetune_loss(
                    fused, vocab_emb, torch.as_tensor(targets_all[picks])
                )
                if cfg.mlm:
                    m_loss = mlm_loss(q_out, batch.mlm_labels, model.mlm_head)
                    total = f_loss + cfg.lambda_mlm * m_loss
                else:
                    m_loss = torch.zeros(())
                    total = f_loss

                optimizer.zero_grad()
                total.backward()
                _set_lr(optimizer, lr)
                optimizer.step()

                last = {"loss": _f(total), "contrastive": _f(f_loss),
                        "mlm": _f(m_loss)}
                log.write(step=step, epoch=epoch, lr=lr, **last)
                step += 1

            val_top1 = _validation_top1(
                model, tokenizer, feature_store, val_samples, vocab, encode_cfg
            )
            log.write(step=step, epoch=epoch,
                      lr=lr_at(step, total_steps, cfg.initial_lr),
                      val_top1=val_top1, **last)
            if best is None or val_top1 > best[0]:
                best = (
                    val_top1,
                    epoch,
                    Checkpoint(
                        params=state_arrays(model),
                        config=_checkpoint_config(model, tokenizer, cfg),
                        step=step,
                        val_metric=val_top1,
                    ),
                )
    finally:
        log.close()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "best.ckpt", best[2])
    return best[2]


def _sample_to_triplet(sample: EvalSample) -> VqaTriplet:
    return VqaTriplet(
        video_id=sample.video_id, start_s=sample.start_s, end_s=sample.end_s,
        question=sample.question, answer=sample.answer,
    )


# ---------------------------------------------------------------------------
# Narration matching pretraining
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NarrationPair:
    """A clip paired with the narration spoken over it."""

    video_id: str
    start_s: float
    end_s: float
    text: str


def narration_pairs(
    videos: Sequence[NarratedVideo],
    min_duration_s: float = 10.0,
    min_words: int = 10,
) -> list[NarrationPair]:
    """Aggregated (clip, narration) pairs for matching pretraining."""
    pairs: list[NarrationPair] = []
    for video in videos:
        cleaned = aggregate_segments(
            dedup_adjacent_repetitions(video), min_duration_s, min_words
        )
        for seg in cleaned.segments:
            if seg.text.split():
                pairs.append(
                    NarrationPair(video.video_id, seg.start_s, seg.end_s, seg.text)
                )
    return pairs


def matching_pretrain(
    dataset: Sequence[NarrationPair],
    feature_store,
    cfg: TrainConfig,
    model_cfg: VqaTConfig | None = None,
    tokenizer: WhitespaceTokenizer | None = None,
    out_dir: Path | str | None = None,
    log_path: Path | str | None = None,
) -> Checkpoint:
    """Cross-modal matching + MLM over (clip, narration) pairs.

    Only the video-question branch trains; one video negative and one text
    negative are drawn per positive pair by rolling the batch. Checkpoints
    omit the answer branch, so loading them into a full model requires the
    partial-transfer path (which fills the answer branch from the question
    text encoder).
    """
    cfg.validate()
    if not dataset:
        raise ValueError("matching dataset is empty")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    if tokenizer is None:
        tokenizer = WhitespaceTokenizer([p.text for p in dataset])
    model_cfg = replace(model_cfg or VqaTConfig(), vocab_size=tokenizer.vocab_size)
    model = VqaT(model_cfg, seed=cfg.seed)
    encode_cfg = EncodeConfig(l=model_cfg.l, t=model_cfg.t, m=model_cfg.m, mlm=cfg.mlm)

    f_branch = [
        p for n, p in model.named_parameters()
        if not n.startswith(("answer_backbone.", "answer_proj."))
    ]
    optimizer = torch.optim.Adam(f_branch, lr=cfg.initial_lr)

    steps_per_epoch = max(1, math.ceil(len(dataset) / cfg.batch_clips))
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)

    log = _MetricsLog(log_path)
    checkpoint = None
    try:
        for step in range(total_steps):
            epoch = step // steps_per_epoch
            lr = lr_at(step, total_steps, cfg.initial_lr)
            size = min(cfg.batch_clips, len(dataset))
            picks = rng.choice(len(dataset), size=size, replace=False)
            pairs = [dataset[i] for i in sorted(picks)]

            ids_list, mask_list, labels_list, feats_list, fmask_list = [], [], [], [], []
            for pair in pairs:
                ids, mask = encode_text(pair.text, tokenizer, encode_cfg.l)
                if cfg.mlm:
                    ids, labels = corrupt_for_mlm(ids, mask, tokenizer, rng)
                else:
                    labels = np.full(encode_cfg.l, MLM_IGNORE, dtype=np.int64)
                rows = feature_store.lookup(pair.video_id, pair.start_s, pair.end_s)
                feats, f_mask = sample_video_features(rows, encode_cfg.t)
                ids_list.append(ids)
                mask_list.append(mask)
                labels_list.append(labels)
                feats_list.append(feats)
                fmask_list.append(f_mask)

            ids = np.stack(ids_list)
            mask = np.stack(mask_list)
            labels = np.stack(labels_list)
            feats = np.stack(feats_list)
            f_mask = np.stack(fmask_list)

            model.train()
            fused, q_out = model.encode_video_question(
                ids, mask, feats, f_mask, return_question_outputs=True
            )
            pos_logits = model.match_head(fused).squeeze(-1)
            video_neg = model.match_head(
                model.encode_video_question(
                    ids, mask, np.roll(feats, 1, axis=0), np.roll(f_mask, 1, axis=0)
                )
            ).squeeze(-1)
            text_neg = model.match_head(
                model.encode_video_question(
                    np.roll(ids, -1, axis=0), np.roll(mask, -1, axis=0), feats, f_mask
                )
            ).squeeze(-1)
            match = matching_loss(pos_logits, video_neg, text_neg)
            if cfg.mlm:
                m_loss = mlm_loss(q_out, labels, model.mlm_head)
                total = match + cfg.lambda_mlm * m_loss
            else:
                m_loss = torch.zeros(())
                total = match

            optimizer.zero_grad()
            total.backward()
            _set_lr(optimizer, lr)
            optimizer.step()

            log.write(step=step, epoch=epoch, lr=lr, loss=_f(total),
                      contrastive=0.0, mlm=_f(m_loss), matching=_f(match))

            if (step + 1) % steps_per_epoch == 0 or step + 1 == total_steps:
                params = {
                    k: v for k, v in state_arrays(model).items()
                    if not k.startswith(("answer_backbone.", "answer_proj."))
                }
                checkpoint = Checkpoint(
                    params=params,
                    config=_checkpoint_config(model, tokenizer, cfg),
                    step=step + 1,
                )
                if out_dir is not None:
                    out = Path(out_dir)
                    out.mkdir(parents=True, exist_ok=True)
                    save_checkpoint(out / f"epoch-{epoch + 1:03d}.ckpt", checkpoint)
    finally:
        log.close()
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "final.ckpt", checkpoint)
    return checkpoint
