"""Command-line entry points.

Commands: generate (transcripts to triplet shards), stats (shard summary
plus histogram figures), train (pretrain / finetune / matching-pretrain),
evaluate (report JSON plus accuracy figures), and sample-for-review
(random triplet sheet for manual quality judgment).

Configuration precedence is flags over profile/config file over built-in
defaults. Exit codes: 0 success, 2 usage or input error, 1 internal error.
Every command writes a manifest next to its outputs.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import sys
from collections import Counter
from importlib import resources
from pathlib import Path

import click
import numpy as np

from . import corpus, qagen
from .encode import EncodeConfig, FeatureStore
from .errors import NarraqaError
from .evaluate import build_vocab, evaluate_dataset, load_eval_samples
from .figures import render_report_figures, render_stats_figures
from .manifest import RunManifest
from .model import VqaTConfig, load_checkpoint, save_checkpoint
from .train import (
    TrainConfig,
    build_model_from_checkpoint,
    finetune,
    matching_pretrain,
    narration_pairs,
    pretrain,
)


class _Fail(click.ClickException):
    """Input/usage failure: exits with code 2."""

    exit_code = 2


def _load_profile(name_or_path: str | None) -> dict:
    if not name_or_path:
        return {}
    path = Path(name_or_path)
    if path.exists():
        return json.loads(path.read_text())
    builtin = resources.files("narraqa.profiles").joinpath(f"{name_or_path}.json")
    if builtin.is_file():
        return json.loads(builtin.read_text())
    raise _Fail(f"profile {name_or_path!r} is neither a file nor a built-in profile")


def _guard(fn, *args, **kwargs):
    """Run a command body, mapping domain errors to exit code 2."""
    try:
        return fn(*args, **kwargs)
    except (NarraqaError, FileNotFoundError, ValueError) as exc:
        raise _Fail(str(exc)) from exc


@click.group()
def main() -> None:
    """VideoQA data generation, training and evaluation."""


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


@main.command()
@click.option("--transcripts", required=True, type=click.Path(path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--ports", default="stub", show_default=True,
              help="Generation port set; only 'stub' ships with the package.")
@click.option("--max-answers", default=2, show_default=True, type=int)
@click.option("--max-sentence-tokens", default=32, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
def generate(transcripts: Path, out_dir: Path, ports: str, max_answers: int,
             max_sentence_tokens: int, seed: int) -> None:
    """Generate (clip, question, answer) triplet shards from transcripts."""

    def run() -> None:
        if ports != "stub":
            raise _Fail(f"unknown port set {ports!r}; only 'stub' is built in")
        if not transcripts.exists():
            raise _Fail(f"transcripts file {transcripts} does not exist")
        cfg = qagen.GenerationConfig(
            max_sentence_tokens=max_sentence_tokens,
            max_answers_per_sentence=max_answers,
        )
        manifest = RunManifest(
            "generate",
            {"ports": ports, "max_answers": max_answers,
             "max_sentence_tokens": max_sentence_tokens},
            seed=seed,
        )
        manifest.add_input(transcripts)
        out_dir.mkdir(parents=True, exist_ok=True)

        triplets = []
        with open(transcripts, encoding="utf-8") as fh:
            for video in corpus.parse_transcripts(fh):
                triplets.extend(qagen.generate_triplets(video, qagen.stub_ports(), cfg))
        shard_path = out_dir / "shard-00000.jsonl"
        shard = corpus.write_shard(triplets, shard_path)
        manifest.add_output(shard_path)
        manifest.write(out_dir / "manifest.json")
        click.echo(f"wrote {shard.count} triplets to {shard_path}")

    _guard(run)


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------


@main.command()
@click.option("--shards", "shard_dir", required=True, type=click.Path(path_type=Path))
@click.option("--out", "out_path", type=click.Path(path_type=Path), default=None,
              help="Summary JSON path (defaults to <shards>/stats.json).")
@click.option("--figures/--no-figures", default=True, show_default=True)
def stats(shard_dir: Path, out_path: Path | None, figures: bool) -> None:
    """Summarize triplet shards: counts, answer diversity, length histograms."""

    def run() -> None:
        if not shard_dir.exists():
            raise _Fail(f"shard directory {shard_dir} does not exist")
        triplets = corpus.read_shard_dir(shard_dir)
        q_lengths = [len(t.question.split()) for t in triplets]
        a_lengths = [len(t.answer.split()) for t in triplets]
        durations = [t.end_s - t.start_s for t in triplets]
        answer_counts = Counter(t.answer.strip() for t in triplets)
        hist, edges = np.histogram(durations, bins=10) if durations else ([], [])
        summary = {
            "triplets": len(triplets),
            "unique_answers": len(answer_counts),
            "answers_more_than_once": sum(1 for c in answer_counts.values() if c > 1),
            "answers_more_than_ten": sum(1 for c in answer_counts.values() if c > 10),
            "mean_question_words": float(np.mean(q_lengths)) if q_lengths else 0.0,
            "mean_answer_words": float(np.mean(a_lengths)) if a_lengths else 0.0,
            "mean_clip_duration_s": float(np.mean(durations)) if durations else 0.0,
            "clip_duration_histogram": {
                "counts": [int(c) for c in hist],
                "edges": [float(e) for e in edges],
            },
        }
        target = out_path or (shard_dir / "stats.json")
        manifest = RunManifest("stats", {"shards": str(shard_dir)})
        with open(target, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
        manifest.add_output(target)
        if figures:
            for fig_path in render_stats_figures(
                q_lengths, a_lengths, durations, target.parent
            ):
                manifest.add_output(fig_path)
        manifest.write(target.with_suffix(".manifest.json"))
        click.echo(json.dumps(summary, indent=2))

    _guard(run)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


@main.command()
@click.argument("phase", type=click.Choice(["pretrain", "finetune", "matching-pretrain"]))
@click.option("--shards", "shard_dir", type=click.Path(path_type=Path), default=None,
              help="Triplet shards (pretrain).")
@click.option("--transcripts", type=click.Path(path_type=Path), default=None,
              help="Transcripts for matching-pretrain narration pairs.")
@click.option("--dataset", type=click.Path(path_type=Path), default=None,
              help="Downstream QA file (finetune).")
@click.option("--val-dataset", type=click.Path(path_type=Path), default=None)
@click.option("--features", "feature_dir", required=True, type=click.Path(path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--profile", default=None, help="Built-in profile name or config JSON path.")
@click.option("--vocab", "vocab_rule", default="min_count:2", show_default=True,
              help="Vocabulary rule for finetuning: top_k:N, min_count:N or file:PATH.")
@click.option("--init", "init_path", type=click.Path(path_type=Path), default=None)
@click.option("--allow-partial", is_flag=True, default=False,
              help="Partial checkpoint load; fills the answer branch from the question branch.")
@click.option("--lr", type=float, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-clips", type=int, default=None)
@click.option("--videos-per-batch", type=int, default=None)
@click.option("--max-steps", type=int, default=None)
@click.option("--data-fraction", type=float, default=1.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--no-mlm", is_flag=True, default=False)
@click.option("--no-dedup", is_flag=True, default=False)
@click.option("--qa-t", is_flag=True, default=False,
              help="Language-only ablation: video input zeroed and masked.")
def train(phase: str, shard_dir, transcripts, dataset, val_dataset, feature_dir,
          out_dir, profile, vocab_rule, init_path, allow_partial, lr, epochs,
          batch_clips, videos_per_batch, max_steps, data_fraction, seed,
          no_mlm, no_dedup, qa_t) -> None:
    """Run one training phase and write checkpoints plus a metrics log."""

    def run() -> None:
        profile_cfg = _load_profile(profile)
        phase_key = "finetune" if phase == "finetune" else "pretrain"
        defaults = {"pretrain": dict(initial_lr=5e-5, epochs=10, batch_clips=4096,
                                     videos_per_batch=128),
                    "finetune": dict(initial_lr=1e-5, epochs=20, batch_clips=256)}[phase_key]
        defaults.update(profile_cfg.get(phase_key, {}))
        flag_overrides = {"initial_lr": lr, "epochs": epochs, "batch_clips": batch_clips,
                          "videos_per_batch": videos_per_batch}
        defaults.update({k: v for k, v in flag_overrides.items() if v is not None})
        if data_fraction <= 0 or data_fraction > 1:
            raise _Fail(f"--data-fraction {data_fraction} outside (0, 1]")
        cfg = TrainConfig(
            phase=phase, seed=seed, data_fraction=data_fraction,
            mlm=not no_mlm, dedup=not no_dedup, max_steps=max_steps, **defaults,
        )
        model_cfg = VqaTConfig(**{**profile_cfg.get("model", {}), "qa_t": qa_t})
        feature_store = FeatureStore(feature_dir)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.jsonl"
        manifest = RunManifest(f"train:{phase}", {
            "train": dataclasses.asdict(cfg), "model": dataclasses.asdict(model_cfg),
            "profile": profile, "init": str(init_path) if init_path else None,
        }, seed=seed)

        if phase == "pretrain":
            if shard_dir is None:
                raise _Fail("pretrain requires --shards")
            triplets = corpus.read_shard_dir(Path(shard_dir))
            if not triplets:
                raise _Fail(f"no triplets found under {shard_dir}")
            ckpt = pretrain(triplets, feature_store, cfg, model_cfg=model_cfg,
                            out_dir=out, log_path=log_path)
        elif phase == "matching-pretrain":
            if transcripts is None:
                raise _Fail("matching-pretrain requires --transcripts")
            with open(transcripts, encoding="utf-8") as fh:
                videos = list(corpus.parse_transcripts(fh))
            pairs = narration_pairs(videos)
            if not pairs:
                raise _Fail("no narration pairs after aggregation")
            ckpt = matching_pretrain(pairs, feature_store, cfg, model_cfg=model_cfg,
                                     out_dir=out, log_path=log_path)
        else:
            if dataset is None:
                raise _Fail("finetune requires --dataset")
            samples = load_eval_samples(Path(dataset))
            train_answers = [s.answer for s in samples if s.answer is not None]
            vocab = _resolve_vocab(vocab_rule, train_answers)
            init = load_checkpoint(Path(init_path)) if init_path else None
            val = load_eval_samples(Path(val_dataset)) if val_dataset else None
            ckpt = finetune(init, samples, vocab, feature_store, cfg,
                            model_cfg=model_cfg, val_samples=val,
                            allow_partial=allow_partial,
                            qa_t=qa_t if qa_t else None,
                            out_dir=out, log_path=log_path)

        final = out / ("best.ckpt" if phase == "finetune" else "final.ckpt")
        if not final.exists():
            save_checkpoint(final, ckpt)
        manifest.add_output(final)
        manifest.add_output(log_path)
        manifest.write(out / "manifest.json")
        metric = f", val_top1={ckpt.val_metric:.4f}" if ckpt.val_metric is not None else ""
        click.echo(f"trained {ckpt.step} steps{metric}; checkpoint at {final}")

    _guard(run)


def _resolve_vocab(rule: str, train_answers: list[str]):
    if rule.startswith("top_k:"):
        return build_vocab(train_answers, top_k=int(rule.split(":", 1)[1]))
    if rule.startswith("min_count:"):
        return build_vocab(train_answers, min_count=int(rule.split(":", 1)[1]))
    if rule.startswith("file:"):
        path = Path(rule.split(":", 1)[1])
        answers = [line.strip() for line in path.read_text().splitlines() if line.strip()]
        return build_vocab([], explicit=answers)
    raise _Fail(f"unknown vocabulary rule {rule!r}")


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


@main.command()
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(path_type=Path))
@click.option("--dataset", required=True, type=click.Path(path_type=Path))
@click.option("--features", "feature_dir", required=True, type=click.Path(path_type=Path))
@click.option("--vocab", "vocab_rule", default="min_count:2", show_default=True)
@click.option("--train-answers", "train_path", type=click.Path(path_type=Path), default=None,
              help="Training QA file for vocabulary and frequency quartiles.")
@click.option("--mode", type=click.Choice(["zero-shot", "finetuned", "mc"]),
              default="zero-shot", show_default=True)
@click.option("--scorer", type=click.Choice(["joint", "match"]), default="joint",
              show_default=True)
@click.option("--allow-partial", is_flag=True, default=False)
@click.option("--report", "report_path", required=True, type=click.Path(path_type=Path))
@click.option("--figures/--no-figures", default=True, show_default=True)
def evaluate(ckpt_path: Path, dataset: Path, feature_dir: Path, vocab_rule: str,
             train_path: Path | None, mode: str, scorer: str, allow_partial: bool,
             report_path: Path, figures: bool) -> None:
    """Evaluate a checkpoint on a QA dataset and write the report."""

    def run() -> None:
        ckpt = load_checkpoint(ckpt_path)
        model, tokenizer = build_model_from_checkpoint(ckpt, allow_partial=allow_partial)
        samples = load_eval_samples(dataset)
        if not samples:
            raise _Fail(f"dataset {dataset} is empty")
        feature_store = FeatureStore(feature_dir)
        cfg = EncodeConfig(l=model.cfg.l, t=model.cfg.t, m=model.cfg.m, mlm=False)

        train_answers = None
        if train_path is not None:
            train_answers = [
                s.answer for s in load_eval_samples(train_path) if s.answer is not None
            ]
        vocab = None
        if mode != "mc":
            source = train_answers
            if source is None:
                source = [g for s in samples for g in s.ground_truth_strings]
            vocab = _resolve_vocab(vocab_rule, source)

        report = evaluate_dataset(
            model, tokenizer, feature_store, samples, cfg,
            vocab=vocab, scorer=scorer, train_answers=train_answers,
        )
        manifest = RunManifest("evaluate", {
            "checkpoint": str(ckpt_path), "dataset": str(dataset), "mode": mode,
            "scorer": scorer, "vocab": vocab_rule,
        })
        report_path.parent.mkdir(parents=True, exist_ok=True)
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
            fh.write("\n")
        manifest.add_output(report_path)
        if figures:
            for fig_path in render_report_figures(report.to_dict(), report_path.parent):
                manifest.add_output(fig_path)
        manifest.write(report_path.with_suffix(".manifest.json"))
        click.echo(json.dumps(report.to_dict(), indent=2))

    _guard(run)


# ---------------------------------------------------------------------------
# sample-for-review
# ---------------------------------------------------------------------------


@main.command("sample-for-review")
@click.option("--shards", "shard_dir", required=True, type=click.Path(path_type=Path))
@click.option("--n", default=100, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
def sample_for_review(shard_dir: Path, n: int, seed: int, out_path: Path) -> None:
    """Uniformly sample triplets into a CSV sheet for manual judgment."""

    def run() -> None:
        triplets = corpus.read_shard_dir(shard_dir)
        if n > len(triplets):
            raise _Fail(f"requested {n} rows but shards hold only {len(triplets)}")
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(triplets), size=n, replace=False)
        manifest = RunManifest("sample-for-review", {"n": n}, seed=seed)
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["video_id", "start", "end", "question", "answer", "judgment"])
            for i in picks:
                t = triplets[int(i)]
                writer.writerow([t.video_id, t.start_s, t.end_s, t.question, t.answer, ""])
        manifest.add_output(out_path)
        manifest.write(out_path.with_suffix(".manifest.json"))
        click.echo(f"wrote {n} rows to {out_path}")

    _guard(run)


if __name__ == "__main__":
    sys.exit(main())
