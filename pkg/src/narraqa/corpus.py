"""Transcript and triplet corpus handling.

Ingests timestamped ASR transcripts (newline-delimited JSON, one video per
line), normalizes narration by removing word repetitions between adjacent
segments, aggregates short segments into clips with minimum duration and
word count, and reads/writes triplet shards.

All transformations are pure per-video functions.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, replace
from pathlib import Path
from typing import IO, Iterable, Iterator

from .errors import DataValidationError, ParseError

# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TranscriptSegment:
    """One timestamped piece of transcribed speech."""

    start_s: float  # seconds, >= 0
    end_s: float  # seconds, >= start_s
    text: str  # whitespace-tokenizable words, no control characters

    def words(self) -> list[str]:
        return self.text.split()

    def validate(self) -> None:
        if self.start_s < 0:
            raise DataValidationError(f"segment start {self.start_s} is negative")
        if self.end_s < self.start_s:
            raise DataValidationError(
                f"segment end {self.end_s} precedes start {self.start_s}"
            )
        if any(unicodedata.category(c) == "Cc" for c in self.text):
            raise DataValidationError("segment text contains control characters")


@dataclass(frozen=True)
class NarratedVideo:
    """A video id with its ordered list of transcript segments."""

    video_id: str
    segments: tuple[TranscriptSegment, ...]

    def validate(self) -> None:
        if not self.video_id:
            raise DataValidationError("empty video_id")
        prev = None
        for seg in self.segments:
            seg.validate()
            if prev is not None and seg.start_s < prev:
                raise DataValidationError(
                    f"segments of video {self.video_id!r} are not sorted by start time"
                )
            prev = seg.start_s

    def words(self) -> list[str]:
        out: list[str] = []
        for seg in self.segments:
            out.extend(seg.words())
        return out


@dataclass(frozen=True)
class VqaTriplet:
    """A (video clip, question, answer) unit of generated training data."""

    video_id: str
    start_s: float
    end_s: float
    question: str
    answer: str

    def validate(self) -> None:
        if not self.start_s < self.end_s:
            raise DataValidationError(
                f"triplet clip range [{self.start_s}, {self.end_s}] is empty"
            )
        if not self.question:
            raise DataValidationError("triplet question is empty")
        if not self.answer.split():
            raise DataValidationError("triplet answer has no words")


@dataclass(frozen=True)
class TripletShard:
    """Pointer to a written shard file and its record count."""

    path: Path
    count: int


# ---------------------------------------------------------------------------
# Transcript parsing
# ---------------------------------------------------------------------------


def parse_transcripts(
    source: IO[str] | IO[bytes] | Iterable[str] | Iterable[bytes],
) -> Iterator[NarratedVideo]:
    """Parse newline-delimited transcript records into NarratedVideo values.

    Accepts text or UTF-8 byte lines. Each line is
    `{"video_id": str, "segments": [{"start", "end", "text"}, ...]}`.
    Raises ParseError with the 1-based line number on malformed records and
    DataValidationError naming the video on invariant violations.
    """
    seen: set[str] = set()
    for line_no, line in enumerate(source, start=1):
        if isinstance(line, bytes):
            try:
                line = line.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise ParseError(f"invalid UTF-8: {exc}", line=line_no) from exc
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", line=line_no) from exc
        video = _video_from_record(record, line_no)
        if video.video_id in seen:
            raise DataValidationError(f"duplicate video_id {video.video_id!r}")
        seen.add(video.video_id)
        video.validate()
        yield video


def _video_from_record(record: object, line_no: int) -> NarratedVideo:
    if not isinstance(record, dict):
        raise ParseError("record is not a JSON object", line=line_no)
    try:
        video_id = record["video_id"]
        raw_segments = record["segments"]
    except KeyError as exc:
        raise ParseError(f"missing field {exc.args[0]!r}", line=line_no) from exc
    if not isinstance(video_id, str) or not isinstance(raw_segments, list):
        raise ParseError("video_id must be a string and segments a list", line=line_no)
    segments = []
    for raw in raw_segments:
        try:
            segments.append(
                TranscriptSegment(
                    start_s=float(raw["start"]),
                    end_s=float(raw["end"]),
                    text=str(raw["text"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(
                f"bad segment in video {video_id!r}: {exc}", line=line_no
            ) from exc
    return NarratedVideo(video_id=video_id, segments=tuple(segments))


def write_transcripts(videos: Iterable[NarratedVideo], path: Path | str) -> int:
    """Serialize videos to the newline-delimited transcript format."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for video in videos:
            record = {
                "video_id": video.video_id,
                "segments": [
                    {"start": s.start_s, "end": s.end_s, "text": s.text}
                    for s in video.segments
                ],
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
            n += 1
    return n


# ---------------------------------------------------------------------------
# Narration normalization
# ---------------------------------------------------------------------------


def dedup_adjacent_repetitions(video: NarratedVideo) -> NarratedVideo:
    """Remove word sequences repeated across adjacent segments.

    For each consecutive segment pair, the longest word sequence that is both
    a suffix of the left segment and a prefix of the right segment is dropped
    from the front of the right segment. Word comparison is case-insensitive;
    retained words keep their original casing. Removal repeats per pair until
    no overlap remains, which makes the whole transformation idempotent.
    Timestamps are unchanged; emptied segments are retained.
    """
    if len(video.segments) < 2:
        return video
    out = [video.segments[0]]
    for seg in video.segments[1:]:
        left_words = out[-1].words()
        right_words = seg.words()
        trimmed = False
        while True:
            k = _longest_overlap(left_words, right_words)
            if k == 0:
                break
            right_words = right_words[k:]
            trimmed = True
        if trimmed:
            seg = replace(seg, text=" ".join(right_words))
        out.append(seg)
    return replace(video, segments=tuple(out))


def _longest_overlap(left: list[str], right: list[str]) -> int:
    """Longest k such that the last k words of `left` equal the first k of `right`."""
    left_l = [w.lower() for w in left]
    right_l = [w.lower() for w in right]
    for k in range(min(len(left_l), len(right_l)), 0, -1):
        if left_l[-k:] == right_l[:k]:
            return k
    return 0


def aggregate_segments(
    video: NarratedVideo,
    min_duration_s: float = 10.0,
    min_words: int = 10,
) -> NarratedVideo:
    """Greedily merge consecutive segments into clips meeting both thresholds.

    Segments are merged left to right until the running clip spans at least
    `min_duration_s` seconds and `min_words` words. A trailing remainder that
    fails either threshold is merged backward into the previous clip, or
    stands alone if it is the only one. Merged text is space-joined; the
    merged range is [first start, last end].
    """
    if min_duration_s <= 0 or min_words <= 0:
        raise ValueError("aggregation thresholds must be positive")
    if not video.segments:
        return video
    groups: list[list[TranscriptSegment]] = []
    current: list[TranscriptSegment] = []
    for seg in video.segments:
        current.append(seg)
        if _group_duration(current) >= min_duration_s and _group_words(current) >= min_words:
            groups.append(current)
            current = []
    if current:
        if groups:
            groups[-1].extend(current)
        else:
            groups.append(current)
    merged = tuple(_merge_group(g) for g in groups)
    return replace(video, segments=merged)


def _group_duration(group: list[TranscriptSegment]) -> float:
    return group[-1].end_s - group[0].start_s


def _group_words(group: list[TranscriptSegment]) -> int:
    return sum(len(s.words()) for s in group)


def _merge_group(group: list[TranscriptSegment]) -> TranscriptSegment:
    if len(group) == 1:
        return group[0]
    text = " ".join(t for t in (s.text for s in group) if t.split())
    return TranscriptSegment(start_s=group[0].start_s, end_s=group[-1].end_s, text=text)


# ---------------------------------------------------------------------------
# Triplet shards
# ---------------------------------------------------------------------------


def write_shard(triplets: Iterable[VqaTriplet], path: Path | str) -> TripletShard:
    """Write triplets as newline-delimited JSON; returns the shard descriptor."""
    path = Path(path)
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for triplet in triplets:
            triplet.validate()
            record = {
                "video_id": triplet.video_id,
                "start": triplet.start_s,
                "end": triplet.end_s,
                "question": triplet.question,
                "answer": triplet.answer,
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
            count += 1
    return TripletShard(path=path, count=count)


def read_shard(path: Path | str) -> list[VqaTriplet]:
    """Read a shard written by write_shard; ParseError carries the line number."""
    out: list[VqaTriplet] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                triplet = VqaTriplet(
                    video_id=str(record["video_id"]),
                    start_s=float(record["start"]),
                    end_s=float(record["end"]),
                    question=str(record["question"]),
                    answer=str(record["answer"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad triplet record: {exc}", line=line_no) from exc
            triplet.validate()
            out.append(triplet)
    return out


def read_shard_dir(directory: Path | str, pattern: str = "*.jsonl") -> list[VqaTriplet]:
    """Read every shard in a directory, in sorted filename order."""
    triplets: list[VqaTriplet] = []
    for path in sorted(Path(directory).glob(pattern)):
        triplets.extend(read_shard(path))
    return triplets
