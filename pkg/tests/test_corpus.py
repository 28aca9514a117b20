"""Transcript parsing, narration normalization and shard roundtrips."""

import io
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from narraqa.corpus import (
    NarratedVideo,
    TranscriptSegment,
    VqaTriplet,
    aggregate_segments,
    dedup_adjacent_repetitions,
    parse_transcripts,
    read_shard,
    write_shard,
    write_transcripts,
)
from narraqa.errors import DataValidationError, ParseError

from conftest import segment, video


class TestParseTranscripts:
    def test_identity_field_mapping(self):
        line = '{"video_id":"v1","segments":[{"start":0.0,"end":3.2,"text":"hello world"}]}'
        videos = list(parse_transcripts(io.StringIO(line)))
        assert len(videos) == 1
        assert videos[0].video_id == "v1"
        assert videos[0].segments == (segment(0.0, 3.2, "hello world"),)

    def test_out_of_order_segments_rejected(self):
        line = json.dumps(
            {
                "video_id": "v1",
                "segments": [
                    {"start": 5.0, "end": 6.0, "text": "b"},
                    {"start": 2.0, "end": 3.0, "text": "a"},
                ],
            }
        )
        with pytest.raises(DataValidationError, match="v1"):
            list(parse_transcripts(io.StringIO(line)))

    def test_empty_segments(self):
        videos = list(parse_transcripts(io.StringIO('{"video_id":"v2","segments":[]}')))
        assert videos[0].video_id == "v2"
        assert videos[0].segments == ()

    def test_malformed_json_carries_line_number(self):
        source = io.StringIO('{"video_id":"v1","segments":[]}\n{broken\n')
        with pytest.raises(ParseError, match="line 2"):
            list(parse_transcripts(source))

    def test_byte_stream_input(self):
        source = io.BytesIO(
            '{"video_id":"vb","segments":[{"start":0,"end":1,"text":"héllo"}]}\n'.encode()
        )
        (videoobj,) = list(parse_transcripts(source))
        assert videoobj.video_id == "vb"
        assert videoobj.segments[0].text == "héllo"
        with pytest.raises(ParseError, match="UTF-8"):
            list(parse_transcripts(io.BytesIO(b"\xff\xfe{}\n")))

    def test_duplicate_video_id_rejected(self):
        line = '{"video_id":"v1","segments":[]}'
        with pytest.raises(DataValidationError, match="duplicate"):
            list(parse_transcripts(io.StringIO(line + "\n" + line)))

    def test_parse_serialize_parse_identity(self, tmp_path):
        videos = [
            video("a", segment(0, 2, "one two"), segment(2, 4, "three")),
            video("b", segment(1.5, 8.25, "héllo wörld")),
            video("c"),
        ]
        path = tmp_path / "t.jsonl"
        write_transcripts(videos, path)
        with open(path, encoding="utf-8") as fh:
            parsed = list(parse_transcripts(fh))
        assert parsed == videos


class TestDedupAdjacentRepetitions:
    def test_suffix_prefix_overlap_removed(self):
        # brute-force oracle over overlap lengths: longest match is 2 words
        v = video("v", segment(0, 3, "fold them in half"), segment(3, 6, "in half again"))
        out = dedup_adjacent_repetitions(v)
        assert [s.text for s in out.segments] == ["fold them in half", "again"]
        assert [(s.start_s, s.end_s) for s in out.segments] == [(0, 3), (3, 6)]

    def test_zero_overlap_unchanged(self):
        v = video("v", segment(0, 2, "add sugar"), segment(2, 4, "then mix"))
        assert dedup_adjacent_repetitions(v) == v

    def test_full_overlap_empties_segment(self):
        v = video("v", segment(0, 2, "mix it"), segment(2, 4, "mix it"))
        out = dedup_adjacent_repetitions(v)
        assert [s.text for s in out.segments] == ["mix it", ""]

    def test_case_insensitive_match_preserves_casing(self):
        v = video("v", segment(0, 2, "Mix It"), segment(2, 4, "mix it NOW"))
        out = dedup_adjacent_repetitions(v)
        assert [s.text for s in out.segments] == ["Mix It", "NOW"]

    @given(
        st.lists(
            st.lists(st.sampled_from(["a", "b", "c", "x"]), max_size=5).map(" ".join),
            max_size=5,
        )
    )
    @settings(max_examples=200)
    def test_idempotent(self, texts):
        v = video("v", *(segment(float(i), float(i + 1), t) for i, t in enumerate(texts)))
        once = dedup_adjacent_repetitions(v)
        assert dedup_adjacent_repetitions(once) == once

    @given(
        st.lists(
            st.lists(st.sampled_from(["a", "b", "c", "x"]), max_size=5).map(" ".join),
            max_size=5,
        )
    )
    @settings(max_examples=200)
    def test_no_adjacent_overlap_remains(self, texts):
        v = video("v", *(segment(float(i), float(i + 1), t) for i, t in enumerate(texts)))
        out = dedup_adjacent_repetitions(v)
        for left, right in zip(out.segments, out.segments[1:]):
            lw = [w.lower() for w in left.words()]
            rw = [w.lower() for w in right.words()]
            for k in range(1, min(len(lw), len(rw)) + 1):
                assert lw[-k:] != rw[:k]


def words(n: int, tag: str = "w") -> str:
    return " ".join(f"{tag}{i}" for i in range(n))


class TestAggregateSegments:
    def test_greedy_merge_until_thresholds(self):
        v = video(
            "v",
            segment(0, 4, words(5, "a")),
            segment(4, 7, words(4, "b")),
            segment(7, 12, words(6, "c")),
        )
        out = aggregate_segments(v)
        assert len(out.segments) == 1
        merged = out.segments[0]
        assert (merged.start_s, merged.end_s) == (0, 12)
        assert len(merged.words()) == 15

    def test_already_above_thresholds_unchanged(self):
        v = video("v", segment(0, 12, words(12)))
        assert aggregate_segments(v) == v

    def test_remainder_merges_backward(self):
        v = video("v", segment(0, 11, words(11, "a")), segment(11, 13, words(3, "b")))
        out = aggregate_segments(v)
        assert len(out.segments) == 1
        assert (out.segments[0].start_s, out.segments[0].end_s) == (0, 13)
        assert len(out.segments[0].words()) == 14

    def test_sole_singleton_stands_alone(self):
        v = video("v", segment(0, 2, "too short"))
        out = aggregate_segments(v)
        assert out == v

    def test_invalid_thresholds(self):
        with pytest.raises(ValueError):
            aggregate_segments(video("v"), min_duration_s=0)

    @given(
        st.lists(
            st.tuples(st.floats(0.5, 8.0), st.integers(0, 8)), min_size=1, max_size=12
        )
    )
    @settings(max_examples=200)
    def test_properties(self, spec):
        # contiguous segments: durations and word counts drawn freely
        segments = []
        clock = 0.0
        for duration, n_words in spec:
            segments.append(segment(clock, clock + duration, words(n_words)))
            clock += duration
        v = video("v", *segments)
        out = aggregate_segments(v)
        # endpoints preserved
        assert out.segments[0].start_s == v.segments[0].start_s
        assert out.segments[-1].end_s == v.segments[-1].end_s
        # word sequence preserved in order
        assert out.words() == v.words()
        # every clip except a sole singleton meets both thresholds
        if len(out.segments) > 1 or (
            out.segments[0].end_s - out.segments[0].start_s >= 10
            and len(out.segments[0].words()) >= 10
        ):
            for s in out.segments:
                assert s.end_s - s.start_s >= 10
                assert len(s.words()) >= 10


class TestShardRoundtrip:
    def make_triplets(self):
        return [
            VqaTriplet("v1", 0.0, 4.0, "what is this?", "a piano"),
            VqaTriplet("v1", 4.0, 9.0, "what did we cut?", "it open"),
            VqaTriplet("v2", 1.0, 7.5, "what færge?", "smörgås"),
        ]

    def test_roundtrip_identity(self, tmp_path):
        path = tmp_path / "shard.jsonl"
        shard = write_shard(self.make_triplets(), path)
        assert shard.count == 3
        assert read_shard(path) == self.make_triplets()

    def test_empty_shard(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        shard = write_shard([], path)
        assert shard.count == 0
        assert read_shard(path) == []

    def test_truncated_record_reports_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        write_shard(self.make_triplets(), path)
        content = path.read_text().splitlines()
        content[2] = content[2][: len(content[2]) // 2]
        path.write_text("\n".join(content) + "\n")
        with pytest.raises(ParseError, match="line 3"):
            read_shard(path)

    def test_byte_identical_rewrites(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_shard(self.make_triplets(), a)
        write_shard(self.make_triplets(), b)
        assert a.read_bytes() == b.read_bytes()
