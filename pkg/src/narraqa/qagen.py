"""Question-answer generation from punctuated narration.

Turns a narrated video into (clip, question, answer) triplets: narration is
split into sentences by a punctuator port, each sentence is aligned to a
clip via the timestamps of the segments its words came from, an answer
extractor proposes answer spans, and a question generator produces one
question per (sentence, answer) pair.

The three ports are the integration surface for real models (a trained
punctuator and seq2seq answer/question transformers). Deterministic stub
implementations ship here so the pipeline is fully testable offline; port
outputs are validated eagerly so a misbehaving adapter cannot silently
corrupt generated shards.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

from .corpus import NarratedVideo, VqaTriplet, dedup_adjacent_repetitions
from .errors import ContractViolation

_PUNCT_CHARS = ".,;:!?\"'()[]"

# ---------------------------------------------------------------------------
# Ports and config
# ---------------------------------------------------------------------------


class PunctuatorPort(Protocol):
    """Splits a word list into sentences.

    `punctuate` returns sentence boundaries: for each sentence, the index one
    past its last word. Boundaries must be strictly increasing and the last
    one must equal the word count.
    """

    def punctuate(self, words: list[str]) -> list[int]: ...


class AnswerExtractorPort(Protocol):
    """Extracts candidate answer spans from one sentence.

    Every returned answer must be a contiguous substring of the input
    sentence, deduplicated, in deterministic order.
    """

    def extract(self, sentence: str) -> list[str]: ...


class QuestionGeneratorPort(Protocol):
    """Generates a question for an (answer, sentence) pair.

    Must return a non-empty question ending in '?'. Model-backed adapters
    are expected to decode with a 4-wide beam and return the top beam.
    """

    def generate(self, answer: str, sentence: str) -> str: ...


@dataclass(frozen=True)
class GenerationConfig:
    max_sentence_tokens: int = 32  # sentence truncated to this many words
    max_answers_per_sentence: int = 2

    def validate(self) -> None:
        if self.max_sentence_tokens < 1 or self.max_answers_per_sentence < 1:
            raise ValueError("generation limits must be positive")


@dataclass(frozen=True)
class SentenceSpan:
    """A punctuated sentence with its clip time range and word provenance."""

    text: str
    start_s: float
    end_s: float
    source_word_range: tuple[int, int]  # inclusive indices into the video word list


# ---------------------------------------------------------------------------
# Reference stub ports
# ---------------------------------------------------------------------------


class StubPunctuator:
    """Rule-based punctuator: sentence breaks at terminator words.

    Emits a boundary after any word ending in '.', '?' or '!'. If 16 words
    accumulate without a terminator a boundary is forced, and a final
    boundary always closes the word list.
    """

    max_run = 16

    def punctuate(self, words: list[str]) -> list[int]:
        boundaries: list[int] = []
        run = 0
        for i, word in enumerate(words):
            run += 1
            if word.endswith((".", "?", "!")) or run == self.max_run:
                boundaries.append(i + 1)
                run = 0
        if words and (not boundaries or boundaries[-1] != len(words)):
            boundaries.append(len(words))
        return boundaries


class StubAnswerExtractor:
    """Returns the final two words of the sentence as a single answer span.

    The span is taken verbatim from the sentence and then stripped of
    surrounding punctuation, so it always remains a contiguous substring.
    Sentences of fewer than two words yield no answers.
    """

    def extract(self, sentence: str) -> list[str]:
        spans = _word_char_spans(sentence)
        if len(spans) < 2:
            return []
        span = sentence[spans[-2][0] : spans[-1][1]]
        answer = span.strip().strip(_PUNCT_CHARS).strip()
        if not answer:
            return []
        return [answer]


def _word_char_spans(text: str) -> list[tuple[int, int]]:
    """Character offsets (start, end) of each whitespace-delimited word."""
    spans: list[tuple[int, int]] = []
    start = None
    for i, c in enumerate(text):
        if c.isspace():
            if start is not None:
                spans.append((start, i))
                start = None
        elif start is None:
            start = i
    if start is not None:
        spans.append((start, len(text)))
    return spans


class StubQuestionGenerator:
    """Cloze-style generator: replaces the answer span with 'what'."""

    def generate(self, answer: str, sentence: str) -> str:
        question = sentence.replace(answer, "what", 1)
        question = " ".join(question.split()).rstrip(_PUNCT_CHARS + " ")
        return question + "?"


@dataclass(frozen=True)
class GenerationPorts:
    punctuator: PunctuatorPort
    answer_extractor: AnswerExtractorPort
    question_generator: QuestionGeneratorPort


def stub_ports() -> GenerationPorts:
    return GenerationPorts(
        punctuator=StubPunctuator(),
        answer_extractor=StubAnswerExtractor(),
        question_generator=StubQuestionGenerator(),
    )


# ---------------------------------------------------------------------------
# Pipeline operations
# ---------------------------------------------------------------------------


def punctuate_and_split(
    video: NarratedVideo, punctuator: PunctuatorPort
) -> list[SentenceSpan]:
    """Split a video's narration into sentences aligned to clip time ranges.

    Words are flattened in segment order, each tagged with its source
    segment; a sentence's range runs from the start of the segment holding
    its first word to the end of the segment holding its last word.
    """
    words: list[str] = []
    word_segment: list[int] = []
    for seg_idx, seg in enumerate(video.segments):
        for word in seg.words():
            words.append(word)
            word_segment.append(seg_idx)
    if not words:
        return []

    boundaries = punctuator.punctuate(words)
    _check_boundaries(boundaries, len(words), video.video_id)

    spans: list[SentenceSpan] = []
    first = 0
    for boundary in boundaries:
        last = boundary - 1
        start_seg = video.segments[word_segment[first]]
        end_seg = video.segments[word_segment[last]]
        spans.append(
            SentenceSpan(
                text=" ".join(words[first : boundary]),
                start_s=start_seg.start_s,
                end_s=end_seg.end_s,
                source_word_range=(first, last),
            )
        )
        first = boundary
    return spans


def _check_boundaries(boundaries: list[int], n_words: int, video_id: str) -> None:
    prev = 0
    for b in boundaries:
        if b <= prev:
            raise ContractViolation(
                f"punctuator boundaries not strictly increasing for video {video_id!r}"
            )
        prev = b
    if not boundaries or boundaries[-1] != n_words:
        raise ContractViolation(
            f"punctuator boundaries do not cover all words of video {video_id!r}"
        )


def truncate_sentence(sentence: str, max_tokens: int) -> str:
    words = sentence.split()
    if len(words) <= max_tokens:
        return sentence
    return " ".join(words[:max_tokens])


def extract_answers(
    sentence: str,
    extractor: AnswerExtractorPort,
    cfg: GenerationConfig = GenerationConfig(),
) -> list[str]:
    """Run the answer extractor on a truncated sentence and validate output."""
    cfg.validate()
    if not sentence:
        raise ValueError("sentence must be non-empty")
    truncated = truncate_sentence(sentence, cfg.max_sentence_tokens)
    answers = extractor.extract(truncated)
    seen: set[str] = set()
    unique: list[str] = []
    for answer in answers:
        if answer not in truncated:
            raise ContractViolation(
                f"extracted answer {answer!r} is not a substring of the sentence"
            )
        if answer and answer not in seen:
            seen.add(answer)
            unique.append(answer)
    return unique[: cfg.max_answers_per_sentence]


def generate_question(
    answer: str, sentence: str, generator: QuestionGeneratorPort
) -> str:
    """Generate and validate one question for an (answer, sentence) pair."""
    if not answer:
        raise ValueError("answer must be non-empty")
    if not sentence:
        raise ValueError("sentence must be non-empty")
    question = generator.generate(answer, sentence)
    if not question or not question.endswith("?"):
        raise ContractViolation(
            f"question generator returned invalid output {question!r}"
        )
    return question


def generate_triplets(
    video: NarratedVideo,
    ports: GenerationPorts,
    cfg: GenerationConfig = GenerationConfig(),
) -> list[VqaTriplet]:
    """Full generation pipeline for one video.

    Removes adjacent-segment word repetitions, splits the narration into
    sentences, extracts answers per sentence and generates one question per
    answer. Each triplet inherits its sentence's clip range. Sentences that
    yield no answers contribute no triplets.
    """
    cfg.validate()
    video = dedup_adjacent_repetitions(video)
    triplets: list[VqaTriplet] = []
    for idx, span in enumerate(punctuate_and_split(video, ports.punctuator)):
        sentence = truncate_sentence(span.text, cfg.max_sentence_tokens)
        try:
            answers = extract_answers(sentence, ports.answer_extractor, cfg)
            for answer in answers:
                question = generate_question(answer, sentence, ports.question_generator)
                triplets.append(
                    VqaTriplet(
                        video_id=video.video_id,
                        start_s=span.start_s,
                        end_s=span.end_s,
                        question=question,
                        answer=answer,
                    )
                )
        except ContractViolation as exc:
            raise ContractViolation(
                f"video {video.video_id!r}, sentence {idx}: {exc}"
            ) from exc
    return triplets
