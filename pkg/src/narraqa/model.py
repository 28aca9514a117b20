"""Joint video-question / answer embedding model.

Two branches: a video-question encoder that fuses question tokens and video
feature rows in a multimodal transformer and reads out the question CLS
position, and an answer encoder projecting the answer CLS embedding into
the same space. Scores are plain dot products between the two. A token
classification head over question positions serves masked language
modeling, and a scalar head over the fused embedding serves cross-modal
matching (used by the narration-matching baseline, where question and
answer travel as one concatenated text).

Text comes in through trainable backbones behind TextBackbonePort; the
one shipped here is a small transformer encoder suitable for desk-scale
runs. A full pretrained encoder can be plugged through the same port.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointError

# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VqaTConfig:
    """Architecture hyperparameters. Defaults are the faithful profile."""

    d: int = 512  # fused embedding width
    d_h: int = 2048  # transformer feed-forward width
    n_layers: int = 2
    n_heads: int = 8
    dropout: float = 0.1
    l: int = 20  # question tokens
    t: int = 20  # video feature rows
    m: int = 10  # answer tokens
    d_q: int = 768  # question backbone width
    d_a: int = 768  # answer backbone width
    d_v: int = 1024  # video feature dimension
    vocab_size: int = 30522
    text_layers: int = 1  # toy backbone depth
    text_heads: int = 2
    qa_t: bool = False  # language-only ablation: video input zeroed and masked

    def validate(self) -> None:
        if self.d % self.n_heads != 0:
            raise ValueError("d must be divisible by n_heads")
        if self.d_q % self.text_heads != 0 or self.d_a % self.text_heads != 0:
            raise ValueError("backbone widths must be divisible by text_heads")
        for name in ("d", "d_h", "n_layers", "n_heads", "l", "t", "m", "d_q", "d_a", "d_v", "vocab_size", "text_layers", "text_heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class TextBackbonePort(Protocol):
    """Contextualizes token ids into per-token embeddings of fixed width."""

    def contextualize(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor: ...


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    """Fixed sinusoidal positional table, (length x dim)."""
    positions = torch.arange(length, dtype=torch.float32).unsqueeze(1)
    freqs = torch.exp(
        torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim)
    )
    table = torch.zeros(length, dim)
    table[:, 0::2] = torch.sin(positions * freqs)
    table[:, 1::2] = torch.cos(positions * freqs[: dim // 2])
    return table


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        b, s, _ = x.shape
        q = self.query(x).view(b, s, self.heads, self.head_dim).transpose(1, 2)
        k = self.key(x).view(b, s, self.heads, self.head_dim).transpose(1, 2)
        v = self.value(x).view(b, s, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = self.drop(torch.softmax(scores, dim=-1))
        fused = (attn @ v).transpose(1, 2).reshape(b, s, -1)
        return self.out(fused)


class TransformerBlock(nn.Module):
    """Pre-norm residual block: attention then feed-forward."""

    def __init__(self, dim: int, heads: int, hidden: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, dim),
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        x = x + self.drop(self.attn(self.norm1(x), key_mask))
        x = x + self.drop(self.ffn(self.norm2(x)))
        return x


class TextBackbone(nn.Module):
    """Small trainable transformer encoder over token ids."""

    def __init__(self, vocab_size: int, dim: int, heads: int, layers: int,
                 max_len: int, dropout: float):
        super().__init__()
        self.token_embed = nn.Embedding(vocab_size, dim)
        self.register_buffer("pos", sinusoidal_positions(max_len, dim), persistent=False)
        self.drop = nn.Dropout(dropout)
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, heads, 4 * dim, dropout) for _ in range(layers)
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.token_embed(ids) + self.pos[: ids.shape[1]]
        x = self.drop(x)
        for block in self.blocks:
            x = block(x, mask)
        return self.norm(x)

    def contextualize(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self(ids, mask)


class InputEmbedding(nn.Module):
    """Projects question tokens and video rows into the fused width.

    Each projected vector passes GELU then LayerNorm, gains its fixed
    sinusoidal position (video rows continue the question's position index
    range) and a learnt per-modality encoding, then dropout.
    """

    def __init__(self, cfg: VqaTConfig):
        super().__init__()
        self.project_q = nn.Linear(cfg.d_q, cfg.d)
        self.project_v = nn.Linear(cfg.d_v, cfg.d)
        self.norm_q = nn.LayerNorm(cfg.d)
        self.norm_v = nn.LayerNorm(cfg.d)
        self.mod_q = nn.Parameter(torch.zeros(cfg.d))
        self.mod_v = nn.Parameter(torch.zeros(cfg.d))
        self.register_buffer(
            "pos", sinusoidal_positions(cfg.l + cfg.t, cfg.d), persistent=False
        )
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, q_tokens: torch.Tensor, v_feats: torch.Tensor) -> torch.Tensor:
        l = q_tokens.shape[1]
        t = v_feats.shape[1]
        q = self.norm_q(F.gelu(self.project_q(q_tokens))) + self.pos[:l] + self.mod_q
        v = self.norm_v(F.gelu(self.project_v(v_feats))) + self.pos[l : l + t] + self.mod_v
        return self.drop(torch.cat([q, v], dim=1))


# ---------------------------------------------------------------------------
# The model
# ---------------------------------------------------------------------------


class VqaT(nn.Module):
    """Video-question encoder f, answer encoder g, and auxiliary heads."""

    def __init__(self, cfg: VqaTConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.question_backbone = TextBackbone(
            cfg.vocab_size, cfg.d_q, cfg.text_heads, cfg.text_layers, cfg.l, cfg.dropout
        )
        self.answer_backbone = TextBackbone(
            cfg.vocab_size, cfg.d_a, cfg.text_heads, cfg.text_layers, cfg.m, cfg.dropout
        )
        self.input_embed = InputEmbedding(cfg)
        self.encoder = nn.ModuleList(
            TransformerBlock(cfg.d, cfg.n_heads, cfg.d_h, cfg.dropout)
            for _ in range(cfg.n_layers)
        )
        self.fused_drop = nn.Dropout(cfg.dropout)
        self.fused_proj = nn.Linear(cfg.d, cfg.d)
        self.answer_proj = nn.Linear(cfg.d_a, cfg.d)
        self.mlm_head = nn.Linear(cfg.d, cfg.vocab_size)
        self.match_head = nn.Linear(cfg.d, 1)
        self._reset_parameters(seed)
        if dtype != torch.float32:
            self.to(dtype)

    # -- initialization ----------------------------------------------------

    def _reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    # Xavier-scale uniform; drawn from an explicit generator
                    # so initialization ignores global RNG state
                    bound = math.sqrt(6.0 / sum(module.weight.shape))
                    module.weight.uniform_(-bound, bound, generator=gen)
                    module.bias.zero_()
                elif isinstance(module, nn.Embedding):
                    module.weight.normal_(0.0, 0.02, generator=gen)
                elif isinstance(module, nn.LayerNorm):
                    module.weight.fill_(1.0)
                    module.bias.zero_()
            self.input_embed.mod_q.normal_(0.0, 0.02, generator=gen)
            self.input_embed.mod_v.normal_(0.0, 0.02, generator=gen)

    @property
    def dtype(self) -> torch.dtype:
        return self.fused_proj.weight.dtype

    # -- tensor coercion ----------------------------------------------------

    def _ids(self, x) -> torch.Tensor:
        return torch.as_tensor(np.asarray(x), dtype=torch.long)

    def _mask(self, x) -> torch.Tensor:
        return torch.as_tensor(np.asarray(x), dtype=torch.bool)

    def _feats(self, x) -> torch.Tensor:
        if isinstance(x, torch.Tensor):
            return x.to(self.dtype)
        return torch.as_tensor(np.asarray(x)).to(self.dtype)

    # -- forward paths -------------------------------------------------------

    def embed_inputs(self, q_tokens: torch.Tensor, v_feats: torch.Tensor) -> torch.Tensor:
        """Fused-width input sequence for contextualized tokens and features."""
        q_tokens = self._feats(q_tokens)
        v_feats = self._feats(v_feats)
        if q_tokens.dim() == 2:
            return self.input_embed(q_tokens[None], v_feats[None])[0]
        return self.input_embed(q_tokens, v_feats)

    def encode_video_question(
        self, question_ids, question_mask, video_features, video_mask,
        return_question_outputs: bool = False,
    ):
        """Fused embedding f(v, q); optionally also the question outputs.

        Attention is restricted to unmasked positions. In the language-only
        configuration the video input is zeroed and its positions masked, so
        the output is independent of the video entirely.
        """
        question_ids = self._ids(question_ids)
        question_mask = self._mask(question_mask)
        video_features = self._feats(video_features)
        video_mask = self._mask(video_mask)
        if self.cfg.qa_t:
            video_features = torch.zeros_like(video_features)
            video_mask = torch.zeros_like(video_mask)

        full_mask = torch.cat([question_mask, video_mask], dim=1)
        if not bool(full_mask.any(dim=1).all()):
            raise ValueError("a sample has no unmasked positions")

        q_tokens = self.question_backbone(question_ids, question_mask)
        x = self.input_embed(q_tokens, video_features)
        for block in self.encoder:
            x = block(x, full_mask)
        fused = self.fused_proj(self.fused_drop(x[:, 0, :]))
        if return_question_outputs:
            return fused, x[:, : question_ids.shape[1], :]
        return fused

    def encode_answer(self, answer_ids, answer_mask) -> torch.Tensor:
        """Answer embedding g(a) from the answer backbone CLS output."""
        answer_ids = self._ids(answer_ids)
        answer_mask = self._mask(answer_mask)
        if not bool(answer_mask.any(dim=1).all()):
            raise ValueError("a sample has an empty answer encoding")
        tokens = self.answer_backbone(answer_ids, answer_mask)
        return self.answer_proj(tokens[:, 0, :])

    def score(self, fused: torch.Tensor, answers: torch.Tensor) -> torch.Tensor:
        """Dot-product scores: (B x d) x (K x d) -> B x K."""
        return fused @ answers.T

    def match_logits(self, pair_ids, pair_mask, video_features, video_mask) -> torch.Tensor:
        """Scalar matching logit per (video, concatenated text) pair."""
        fused = self.encode_video_question(pair_ids, pair_mask, video_features, video_mask)
        return self.match_head(fused).squeeze(-1)

    def mlm_logits(self, question_outputs: torch.Tensor) -> torch.Tensor:
        return self.mlm_head(question_outputs)


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

_MAGIC = b"NQACKPT1"
_LEN = struct.Struct("<I")


@dataclass
class Checkpoint:
    """Parameter snapshot plus the config needed to rebuild the pipeline."""

    params: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    step: int = 0
    val_metric: float | None = None


def state_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    """Named parameters as float32 arrays (dotted-path keys)."""
    return {
        name: p.detach().cpu().to(torch.float32).numpy().copy()
        for name, p in model.named_parameters()
    }


def save_checkpoint(path: Path | str, checkpoint: Checkpoint) -> None:
    """Write a checkpoint: magic, JSON header, then raw float32 LE tensors.

    Tensors are stored in sorted name order and the header is canonical
    JSON, so save -> load -> save is byte-identical.
    """
    names = sorted(checkpoint.params)
    header = {
        "config": checkpoint.config,
        "step": checkpoint.step,
        "val_metric": checkpoint.val_metric,
        "tensors": [
            {"name": n, "shape": list(checkpoint.params[n].shape)} for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_LEN.pack(len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(checkpoint.params[name], dtype="<f4").tobytes())


def load_checkpoint(path: Path | str) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (header_len,) = _LEN.unpack(fh.read(_LEN.size))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        params: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = fh.read(count * 4)
            if len(data) != count * 4:
                raise CheckpointError(f"{path} is truncated at tensor {entry['name']!r}")
            params[entry["name"]] = (
                np.frombuffer(data, dtype="<f4").reshape(shape).copy()
            )
    return Checkpoint(
        params=params,
        config=header.get("config", {}),
        step=int(header.get("step", 0)),
        val_metric=header.get("val_metric"),
    )


def load_state_arrays(
    model: nn.Module, arrays: dict[str, np.ndarray], allow_partial: bool = False
) -> list[str]:
    """Copy checkpoint arrays into model parameters.

    Strict mode fails on any missing or extra key. Partial mode loads the
    intersection and additionally initializes the answer branch from the
    question branch: for every `question_backbone.*` array whose
    `answer_backbone.*` counterpart is absent from the checkpoint, the
    question-branch weights are copied over. Returns the parameter names
    that were filled.
    """
    targets = dict(model.named_parameters())
    if not allow_partial:
        missing = sorted(set(targets) - set(arrays))
        extra = sorted(set(arrays) - set(targets))
        if missing or extra:
            raise CheckpointError(
                f"checkpoint does not match model: missing={missing} extra={extra}"
            )
    assignments: dict[str, np.ndarray] = {
        name: arrays[name] for name in targets if name in arrays
    }
    if allow_partial:
        for name, value in arrays.items():
            if not name.startswith("question_backbone."):
                continue
            counterpart = "answer_backbone." + name[len("question_backbone."):]
            if counterpart in targets and counterpart not in arrays:
                assignments[counterpart] = value
    with torch.no_grad():
        for name, value in assignments.items():
            param = targets[name]
            if tuple(param.shape) != tuple(value.shape):
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {value.shape}, "
                    f"model {tuple(param.shape)}"
                )
            param.copy_(torch.as_tensor(value).to(param.dtype))
    return sorted(assignments)
