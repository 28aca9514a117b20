"""VideoQA from narrated videos.

Generates (video clip, question, answer) triplets from timestamped
transcripts, trains a joint video-question / answer embedding model with a
deduplicated in-batch contrastive objective plus masked language modeling,
and evaluates zero-shot or finetuned predictions on downstream QA sets.
"""

from .corpus import NarratedVideo, TranscriptSegment, TripletShard, VqaTriplet
from .encode import EncodeConfig, EncodedBatch, FeatureStore, WhitespaceTokenizer
from .evaluate import AnswerVocabulary, EvalReport, EvalSample
from .model import Checkpoint, VqaT, VqaTConfig
from .qagen import GenerationConfig, SentenceSpan
from .train import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "AnswerVocabulary",
    "Checkpoint",
    "EncodeConfig",
    "EncodedBatch",
    "EvalReport",
    "EvalSample",
    "FeatureStore",
    "GenerationConfig",
    "NarratedVideo",
    "SentenceSpan",
    "TrainConfig",
    "TranscriptSegment",
    "TripletShard",
    "VqaT",
    "VqaTConfig",
    "VqaTriplet",
    "WhitespaceTokenizer",
    "__version__",
]
