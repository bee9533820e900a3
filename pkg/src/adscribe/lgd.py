"""Language-guided detection: visual queries attend over script-token keys and values."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .detector import CandidateSet, DetectionHead, candidate_pool, score_candidates


class WordEmbeddingTable:
    """Read-only view of a (|vocab|, D) embedding matrix plus its special ids."""

    def __init__(self, weight: torch.Tensor, pad_id: int = 0, stop_id: int = 1):
        if not torch.isfinite(weight).all():
            raise ValueError("embedding table contains non-finite values")
        self.weight = weight
        self.pad_id = pad_id
        self.stop_id = stop_id

    @property
    def vocab_size(self) -> int:
        return self.weight.shape[0]


def embed_script(tokens, table: WordEmbeddingTable) -> torch.Tensor:
    ids = torch.as_tensor(np.asarray(tokens, dtype=np.int64))
    if ids.numel() < 1:
        raise ValueError("script must contain at least one token")
    if (ids < 0).any() or (ids >= table.vocab_size).any():
        raise KeyError(f"token id outside vocabulary of size {table.vocab_size}")
    return table.weight[ids]


class CrossAttention(nn.Module):
    """Single-head attention with bias-free query/key/value/output projections."""

    def __init__(self, width: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        std = 1.0 / math.sqrt(width)

        def p():
            return nn.Parameter(torch.as_tensor(rng.normal(0.0, std, (width, width)), dtype=torch.float64))

        self.query, self.key, self.value, self.out = p(), p(), p(), p()
        self.scale = 1.0 / math.sqrt(width)

    def weights(self, x: torch.Tensor, xw: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        logits = (x @ self.query) @ (xw @ self.key).transpose(-1, -2) * self.scale
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[..., None, :], float("-inf"))
        return torch.softmax(logits, dim=-1)

    def forward(self, x, xw, key_mask=None):
        return self.weights(x, xw, key_mask) @ (xw @ self.value) @ self.out


def cross_attend(x, xw, params: CrossAttention, key_mask=None) -> torch.Tensor:
    """X_ca = softmax(XQ (Xw K)^T / sqrt(D)) Xw V O.

    ``key_mask`` is True at real tokens; False positions (padding) get zero weight.
    """
    x = torch.as_tensor(x, dtype=torch.float64)
    xw = torch.as_tensor(xw, dtype=torch.float64)
    if x.shape[-1] != xw.shape[-1] or x.shape[-1] != params.query.shape[0]:
        raise ValueError("visual, word and attention widths must match")
    return params(x, xw, key_mask)


def lgd_score(x, xw, cs: CandidateSet, head: DetectionHead, params: CrossAttention,
              key_mask=None) -> torch.Tensor:
    """Candidate probabilities from cross-attended features.

    ``xw`` is the word-side stack output, not the raw embeddings.
    """
    return score_candidates(candidate_pool(cross_attend(x, xw, params, key_mask), cs), head)
