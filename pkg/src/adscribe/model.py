"""The full detector + generator network with batched forward pieces."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .detector import DetectionHead, build_candidates, candidate_pool, score_candidates
from .encoders import STACK_NAMES, EncoderStack, enhance
from .generation import SuppressionConfig, ToyDecoder, suppress
from .lgd import CrossAttention, WordEmbeddingTable, lgd_score


@dataclass(frozen=True)
class ModelConfig:
    width: int = 16
    state_dim: int = 16
    n_layers: int = 2
    clip_len: int = 32
    context_len: int = 64
    script_len: int = 36
    top_k: int = 3
    vocab_size: int = 64
    decoder_heads: int = 2
    max_tokens: int = 67
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class AdModel(nn.Module):
    """Holds every named stack, both detection heads, the cross-attention and the decoder.

    The decoder is frozen: its parameters never receive gradients and are left out
    of :meth:`trainable_parameters`.
    """

    def __init__(self, cfg: ModelConfig, decoder: ToyDecoder | None = None):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.stacks = nn.ModuleDict(
            {name: EncoderStack(name, cfg.width, cfg.n_layers, cfg.state_dim, rng) for name in STACK_NAMES})
        # one positive among M candidates
        prior = 1.0 / (cfg.clip_len * (cfg.clip_len + 1) // 2 + 1)
        self.head_vod = DetectionHead(cfg.width, rng, prior)
        self.head_lgd = DetectionHead(cfg.width, rng, prior)
        self.cross_attn = CrossAttention(cfg.width, rng)
        if decoder is None:
            decoder = ToyDecoder(cfg.vocab_size, cfg.width,
                                 max_positions=cfg.context_len + cfg.clip_len + cfg.max_tokens + 1,
                                 heads=cfg.decoder_heads, rng=rng)
        self.decoder = decoder.freeze()
        self.cs = build_candidates(cfg.clip_len)
        self.bypass_suppression = False

    @property
    def word_table(self) -> WordEmbeddingTable:
        return WordEmbeddingTable(self.decoder.tok_emb, self.decoder.pad_id, self.decoder.stop_id)

    def trainable_parameters(self):
        return [(name, p) for name, p in self.named_parameters() if not name.startswith("decoder.")]

    def clamp_(self):
        for stack in self.stacks.values():
            stack.clamp_()

    # -- forward pieces; every tensor carries a leading batch dimension --

    def enhance(self, context, clip):
        return enhance(self.stacks["enhance"], context, clip)

    def detection_features(self, v):
        # runs backwards in time: a frame's feature sees the rest of the clip, so a
        # pooled candidate can tell where its event ends; V already carries the onset
        return self.stacks["det_visual"](v.flip(-2)).flip(-2)

    def vod_scores(self, x):
        return score_candidates(candidate_pool(x, self.cs), self.head_vod)

    def word_features(self, tokens):
        return self.stacks["det_word"](self.decoder.tok_emb[tokens])

    def lgd_scores(self, x, tokens, key_mask):
        return lgd_score(x, self.word_features(tokens), self.cs, self.head_lgd, self.cross_attn, key_mask)

    def suppress(self, v, scores):
        if self.bypass_suppression:
            return v
        return suppress(v, scores, self.cs, SuppressionConfig(self.cfg.top_k))

    def prefix(self, v_ctx, v_sup):
        """Decoder prefix [Z'; Z] from the enhanced context and the suppressed clip."""
        return torch.cat([self.stacks["gen_context"](v_ctx), self.stacks["gen_visual"](v_sup)], dim=-2)
