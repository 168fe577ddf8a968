"""Micro-caption conditioning: a pooled prompt vector plus per-word embedding rows.

Captions come from a closed grammar ("<size> <color> <shape> at <position>"). The
encoder produces two views of a caption: `pooled`, an order-free summary used as the
sequence start token, and `tokens`, positional per-word rows consumed by
cross-attention. Both are learned; the encoder behind the interface is swappable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn.tensor import Tensor

PAD_WORD = "<pad>"
NULL_WORD = "<null>"

SIZES = ("small", "large")
COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle")
POSITIONS = ("top-left", "top-right", "bottom-left", "bottom-right", "center")
CONNECTIVES = ("a", "at")

MAX_WORDS = 12


class Vocabulary:
    """Dense word->id table over the caption grammar; PAD is id 0, NULL is id 1."""

    def __init__(self, words: tuple[str, ...] | None = None):
        if words is None:
            words = (PAD_WORD, NULL_WORD) + SIZES + COLORS + SHAPES + CONNECTIVES + POSITIONS
        if words[0] != PAD_WORD or words[1] != NULL_WORD:
            raise ValueError("vocabulary must reserve id 0 for PAD and id 1 for NULL")
        if len(set(words)) != len(words):
            raise ValueError("duplicate words in vocabulary")
        self.words = tuple(words)
        self.ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def null_id(self) -> int:
        return 1

    def tokenize(self, text: str) -> list[int]:
        words = text.split()
        if not words:
            raise ValueError("empty caption")
        if len(words) > MAX_WORDS:
            raise ValueError(f"caption longer than {MAX_WORDS} words")
        try:
            return [self.ids[w] for w in words]
        except KeyError as err:
            raise ValueError(f"unknown word {err.args[0]!r}") from None

    def detokenize(self, ids: list[int]) -> str:
        return " ".join(self.words[i] for i in ids)


@dataclass
class PromptEmbedding:
    """pooled: (d_model,) summary; tokens: (MAX_WORDS, d_model) rows; valid: bool mask."""

    pooled: Tensor
    tokens: Tensor
    valid: np.ndarray

    def __post_init__(self):
        if self.valid.shape != (self.tokens.shape[0],):
            raise ValueError("valid mask length must match token rows")


class PromptEncoder:
    """Learned word/position embeddings and the pooled-summary projection."""

    def __init__(self, vocab: Vocabulary, d_model: int, rng: np.random.Generator):
        self.vocab = vocab
        self.d_model = d_model
        self.params: dict[str, Tensor] = {
            "prompt.word_emb": nn.normal_param(rng, (len(vocab), d_model), 0.02),
            "prompt.pos_emb": nn.normal_param(rng, (MAX_WORDS, d_model), 0.02),
            "prompt.pool_proj": nn.normal_param(rng, (d_model, d_model), 0.02),
        }

    def pad_ids(self, ids: list[int]) -> tuple[np.ndarray, np.ndarray]:
        padded = np.full(MAX_WORDS, self.vocab.pad_id, dtype=np.int64)
        padded[: len(ids)] = ids
        valid = np.zeros(MAX_WORDS, dtype=bool)
        valid[: len(ids)] = True
        return padded, valid

    def embed_batch(self, id_lists: list[list[int]]) -> tuple[Tensor, Tensor, np.ndarray]:
        """Batched embedding: pooled (B, d), tokens (B, M, d), valid (B, M)."""
        if not id_lists:
            raise ValueError("empty batch")
        padded = np.stack([self.pad_ids(ids)[0] for ids in id_lists])
        valid = np.stack([self.pad_ids(ids)[1] for ids in id_lists])
        words = nn.embedding(self.params["prompt.word_emb"], padded)
        tokens = nn.add(words, self.params["prompt.pos_emb"])
        counts = valid.sum(axis=1, keepdims=True).astype(np.float32)
        mask = (valid[:, :, None]).astype(np.float32)
        summed = nn.sum_axis(nn.mul(words, mask), axis=1)
        mean = nn.mul(summed, 1.0 / counts)
        pooled = nn.matmul(mean, self.params["prompt.pool_proj"])
        return pooled, tokens, valid

    def embed(self, ids: list[int]) -> PromptEmbedding:
        pooled, tokens, valid = self.embed_batch([ids])
        return PromptEmbedding(nn.reshape(pooled, (self.d_model,)), nn.reshape(tokens, (MAX_WORDS, self.d_model)), valid[0])

    def embed_caption(self, text: str) -> PromptEmbedding:
        return self.embed(self.vocab.tokenize(text))

    def null_prompt(self) -> PromptEmbedding:
        """Dedicated unconditional prompt: the NULL word alone."""
        return self.embed([self.vocab.null_id])


def canonical_caption(size: str, color: str, shape: str, position: str) -> str:
    return f"{size} {color} {shape} at {position}"
