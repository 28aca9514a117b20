"""Matplotlib figure rendering for CLI report paths.

Figures are written as PNG files next to the delimited/JSON outputs:
dataset statistics produce question/answer length and clip duration
histograms, evaluation reports produce per-quartile and per-question-type
accuracy bars.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def render_stats_figures(
    question_lengths: Sequence[int],
    answer_lengths: Sequence[int],
    clip_durations: Sequence[float],
    out_dir: Path | str,
) -> list[Path]:
    """Histogram figures for triplet statistics; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    fig, ax = plt.subplots(figsize=(6, 4))
    if question_lengths:
        upper = max(max(question_lengths), max(answer_lengths, default=1))
        bins = range(0, upper + 2)
        ax.hist(question_lengths, bins=bins, alpha=0.6, label="question")
        ax.hist(answer_lengths, bins=bins, alpha=0.6, label="answer")
        ax.legend()
    ax.set_xlabel("words")
    ax.set_ylabel("count")
    ax.set_title("Question and answer length")
    path = out_dir / "length_histogram.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    if clip_durations:
        ax.hist(clip_durations, bins=30)
    ax.set_xlabel("clip duration (s)")
    ax.set_ylabel("count")
    ax.set_title("Clip duration")
    path = out_dir / "clip_duration_histogram.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)
    return written


def render_report_figures(report: dict, out_dir: Path | str) -> list[Path]:
    """Bar charts for an evaluation report; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    if report.get("per_quartile"):
        fig, ax = plt.subplots(figsize=(5, 4))
        values = report["per_quartile"]
        ax.bar([f"Q{i + 1}" for i in range(len(values))], values)
        ax.set_ylabel("top-1 accuracy")
        ax.set_title("Accuracy by answer-frequency quartile")
        ax.set_ylim(0, 1)
        path = out_dir / "quartile_accuracy.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    if report.get("per_type"):
        fig, ax = plt.subplots(figsize=(6, 4))
        labels = list(report["per_type"])
        values = [report["per_type"][k]["accuracy"] for k in labels]
        ax.bar(labels, values)
        ax.set_ylabel("top-1 accuracy")
        ax.set_title(f"Accuracy by question type ({report.get('type_source', '')})")
        ax.set_ylim(0, 1)
        plt.xticks(rotation=30, ha="right")
        path = out_dir / "type_accuracy.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written
