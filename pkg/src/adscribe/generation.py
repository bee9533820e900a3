"""Feature suppression and script generation through a frozen autoregressive decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .detector import CandidateSet


@dataclass(frozen=True)
class SuppressionConfig:
    k: int = 3


@dataclass(frozen=True)
class BeamConfig:
    width: int = 5
    max_tokens: int = 67

    def __post_init__(self):
        if self.width < 1 or self.max_tokens < 1:
            raise ValueError("beam width and max_tokens must be >= 1")


def top_k_indices(scores, k: int):
    """Indices of the k largest scores; on ties the lower index wins."""
    if isinstance(scores, torch.Tensor):
        return torch.sort(scores.detach(), dim=-1, descending=True, stable=True).indices[..., :k]
    return np.argsort(-np.asarray(scores), axis=-1, kind="stable")[..., :k]


def suppression_weights(scores, cs: CandidateSet, k: int):
    """Per-frame scale (1/k) * sum of selected scores whose candidate covers the frame."""
    if not 1 <= k <= cs.size:
        raise ValueError(f"k must lie in [1, {cs.size}]")
    theta = top_k_indices(scores, k)
    if isinstance(scores, torch.Tensor):
        p = torch.gather(scores, -1, theta)
        mem = cs.torch_matrix("membership").to(scores.dtype)[theta]
        return (p[..., None] * mem).sum(-2) / k
    scores = np.asarray(scores, dtype=np.float64)
    p = np.take_along_axis(scores, theta, -1)
    return (p[..., None] * cs.membership[theta]).sum(-2) / k


def suppress(v, scores, cs: CandidateSet, cfg: SuppressionConfig = SuppressionConfig()):
    """V_sup = (1/k) sum_{i in top-k} p_i (c_i 1^T) * V.

    Only the selected scores carry gradient; the selection itself is hard.
    """
    if v.shape[-2] != cs.n or scores.shape[-1] != cs.size:
        raise ValueError("feature rows / score length do not match the candidate set")
    return suppression_weights(scores, cs, cfg.k)[..., None] * v


class DecoderInterface(Protocol):
    width: int
    vocab_size: int
    stop_id: int

    def next_token_probs(self, prefix: np.ndarray, sequences: Sequence[Sequence[int]]) -> np.ndarray:
        """(len(sequences), vocab_size) next-token distributions after ``prefix`` rows."""


class ToyDecoder(nn.Module):
    """One pre-norm causal self-attention block over [prefix rows; token embeddings]."""

    def __init__(self, vocab_size: int, width: int, max_positions: int = 256, heads: int = 2,
                 stop_id: int = 1, pad_id: int = 0, rng: np.random.Generator | None = None):
        super().__init__()
        if width % heads:
            raise ValueError("width must be divisible by heads")
        rng = np.random.default_rng() if rng is None else rng
        self.vocab_size, self.width, self.heads = vocab_size, width, heads
        self.stop_id, self.pad_id = stop_id, pad_id
        self.max_positions = max_positions

        def p(*shape, std=None):
            std = 1.0 / math.sqrt(shape[-1]) if std is None else std
            return nn.Parameter(torch.as_tensor(rng.normal(0.0, std, shape), dtype=torch.float64))

        def const(value, *shape):
            return nn.Parameter(torch.full(shape, float(value), dtype=torch.float64))

        self.tok_emb = p(vocab_size, width, std=1.0)
        self.pos_emb = p(max_positions, width, std=0.1)
        self.ln1_w, self.ln1_b = const(1, width), const(0, width)
        self.qkv = p(3 * width, width)
        self.proj = p(width, width)
        self.ln2_w, self.ln2_b = const(1, width), const(0, width)
        self.fc1, self.fc1_b = p(4 * width, width), const(0, 4 * width)
        self.fc2, self.fc2_b = p(width, 4 * width), const(0, width)
        self.lnf_w, self.lnf_b = const(1, width), const(0, width)
        self.lm_head = p(vocab_size, width)

    def freeze(self) -> "ToyDecoder":
        for param in self.parameters():
            param.requires_grad_(False)
        return self

    def _block(self, h: torch.Tensor) -> torch.Tensor:
        bsz, length, width = h.shape
        hd = width // self.heads
        x = nn.functional.layer_norm(h, (width,), self.ln1_w, self.ln1_b)
        q, k, v = (x @ self.qkv.T).split(width, dim=-1)
        q, k, v = (t.reshape(bsz, length, self.heads, hd).transpose(1, 2) for t in (q, k, v))
        causal = torch.ones(length, length, dtype=torch.bool).tril()
        att = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        att = torch.softmax(att.masked_fill(~causal, float("-inf")), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(bsz, length, width)
        h = h + y @ self.proj.T
        x = nn.functional.layer_norm(h, (width,), self.ln2_w, self.ln2_b)
        x = x @ self.fc1.T + self.fc1_b
        h = h + (x * torch.sigmoid(x)) @ self.fc2.T + self.fc2_b
        return nn.functional.layer_norm(h, (width,), self.lnf_w, self.lnf_b)

    def log_probs(self, prefix: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """Next-token log-probabilities at the last prefix row and after every token.

        prefix: (B, P, D); tokens: (B, T) ids. Returns (B, T + 1, vocab).
        """
        n_prefix = prefix.shape[1]
        seq = torch.cat([prefix, self.tok_emb[tokens]], dim=1)
        if seq.shape[1] > self.max_positions:
            raise ValueError(f"sequence of {seq.shape[1]} positions exceeds {self.max_positions}")
        h = self._block(seq + self.pos_emb[: seq.shape[1]])
        return torch.log_softmax(h[:, n_prefix - 1:] @ self.lm_head.T, dim=-1)

    @torch.no_grad()
    def next_token_probs(self, prefix, sequences):
        prefix = torch.as_tensor(np.asarray(prefix), dtype=torch.float64)
        lengths = {len(s) for s in sequences}
        if len(lengths) != 1:
            raise ValueError("all beams must have the same length")
        tokens = torch.as_tensor(np.asarray(sequences, dtype=np.int64).reshape(len(sequences), -1))
        batch_prefix = prefix.expand(len(sequences), *prefix.shape)
        return torch.exp(self.log_probs(batch_prefix, tokens)[:, -1]).numpy()


def generate(zctx, z, dec: DecoderInterface, bc: BeamConfig = BeamConfig()) -> list[int]:
    """Length-normalized beam search; returns the best hypothesis.

    A hypothesis ends when it emits the stop token or reaches ``max_tokens``.
    """
    prefix = np.concatenate([np.asarray(zctx, dtype=np.float64), np.asarray(z, dtype=np.float64)], axis=0)
    if prefix.shape[-1] != dec.width:
        raise ValueError(f"prefix width {prefix.shape[-1]} does not match decoder width {dec.width}")
    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    for _ in range(bc.max_tokens):
        probs = np.asarray(dec.next_token_probs(prefix, [seq for seq, _ in live]), dtype=np.float64)
        if np.any(np.abs(probs.sum(axis=-1) - 1.0) > 1e-9) or np.any(probs < 0):
            raise ValueError("decoder returned an unnormalized distribution")
        expansions = []
        with np.errstate(divide="ignore"):
            logp = np.log(probs)
        for (seq, score), row in zip(live, logp):
            for tok in np.flatnonzero(np.isfinite(row)):
                expansions.append((seq + (int(tok),), score + row[tok]))
        expansions.sort(key=lambda c: (-c[1] / len(c[0]), c[0]))
        live = []
        for seq, score in expansions[: bc.width]:
            (finished if seq[-1] == dec.stop_id else live).append((seq, score))
        if not live:
            break
    finished.extend(live)
    best = min(finished, key=lambda c: (-c[1] / len(c[0]), c[0]))
    return list(best[0])


def teacher_forced_logits(zctx, z, gold, dec: ToyDecoder) -> torch.Tensor:
    """(K, vocab) distributions; row k conditions on the prefix and gold[:k]."""
    prefix = torch.cat([torch.as_tensor(zctx), torch.as_tensor(z)], dim=-2)
    gold = torch.as_tensor(np.asarray(gold, dtype=np.int64))
    if gold.numel() < 1:
        raise ValueError("gold script must contain at least one token")
    return torch.exp(dec.log_probs(prefix[None], gold[None, :-1])[0])
