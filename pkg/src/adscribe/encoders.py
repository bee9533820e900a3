"""S4 layers and the named encoder stacks built from them.

A layer is: layer-norm -> per-channel diagonal SSM convolution -> x*sigmoid(x)
-> channel mix -> residual add. All stacks are causal in time.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

STACK_NAMES = ("enhance", "det_visual", "det_word", "gen_visual", "gen_context")


class S4Layer(nn.Module):
    def __init__(self, width: int, state_dim: int = 16, rng: np.random.Generator | None = None,
                 mix_scale: float = 0.5):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        r = np.arange(state_dim)
        a_re = np.full((width, state_dim), -0.5)
        a_im = np.tile(np.pi * r, (width, 1)).astype(np.float64)
        flat = np.full((width, state_dim), 1.0 / math.sqrt(state_dim))
        log_step = rng.uniform(math.log(1e-3), math.log(1e-1), width)

        def p(x):
            return nn.Parameter(torch.tensor(np.array(x), dtype=torch.float64))

        self.a_re, self.a_im = p(a_re), p(a_im)
        self.b_re, self.b_im = p(flat), p(np.zeros_like(flat))
        self.d_re, self.d_im = p(flat), p(np.zeros_like(flat))
        self.log_step = p(log_step)
        self.norm_weight = p(np.ones(width))
        self.norm_bias = p(np.zeros(width))
        self.mix_weight = p(rng.normal(0.0, mix_scale / math.sqrt(width), (width, width)))
        self.mix_bias = p(np.zeros(width))

    @property
    def width(self) -> int:
        return self.mix_weight.shape[0]

    def discrete(self):
        """Bilinear (Abar, Bbar, Dbar) per channel, each (width, state_dim) complex."""
        a = torch.complex(self.a_re, self.a_im)
        b = torch.complex(self.b_re, self.b_im)
        d = torch.complex(self.d_re, self.d_im)
        half = torch.exp(self.log_step)[:, None] * a / 2
        denom = 1 - half
        return (1 + half) / denom, torch.exp(self.log_step)[:, None] * b / denom, d

    def kernel(self, length: int) -> torch.Tensor:
        """Real taps, shape (width, length)."""
        a_bar, b_bar, d_bar = self.discrete()
        steps = torch.arange(length, dtype=torch.float64)
        vander = torch.exp(torch.log(a_bar)[..., None] * steps)
        return torch.einsum("cr,crl->cl", d_bar * b_bar, vander).real

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.width:
            raise ValueError(f"expected width {self.width}, got {x.shape[-1]}")
        length = x.shape[-2]
        h = nn.functional.layer_norm(x, (self.width,), self.norm_weight, self.norm_bias)
        n = 2 * length
        k_f = torch.fft.rfft(self.kernel(length), n=n)
        u_f = torch.fft.rfft(h.transpose(-1, -2), n=n)
        c = torch.fft.irfft(k_f * u_f, n=n)[..., :length].transpose(-1, -2)
        g = c * torch.sigmoid(c)
        return x + g @ self.mix_weight.T + self.mix_bias

    @torch.no_grad()
    def clamp_(self):
        self.a_re.clamp_(max=0.0)
        self.log_step.clamp_(max=0.0)


class EncoderStack(nn.Module):
    def __init__(self, name: str, width: int, n_layers: int = 2, state_dim: int = 16,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if name not in STACK_NAMES:
            raise ValueError(f"unknown stack name {name!r}")
        self.name = name
        self.layers = nn.ModuleList(S4Layer(width, state_dim, rng) for _ in range(n_layers))

    @property
    def width(self) -> int:
        return self.layers[0].width

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            seq = layer(seq)
        return seq

    def clamp_(self):
        for layer in self.layers:
            layer.clamp_()


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=torch.float64)


def apply_stack(stack: EncoderStack, seq) -> torch.Tensor:
    """Run ``seq`` (..., L, D) through every layer of ``stack`` in order."""
    seq = _as_tensor(seq)
    if seq.shape[-1] != stack.width:
        raise ValueError(f"stack {stack.name!r} has width {stack.width}, input has {seq.shape[-1]}")
    return stack(seq)


def enhance(stack: EncoderStack, context, clip) -> tuple[torch.Tensor, torch.Tensor]:
    """One pass over [context; clip], split back into (V', V)."""
    context, clip = _as_tensor(context), _as_tensor(clip)
    if context.shape[-1] != clip.shape[-1]:
        raise ValueError("context and clip widths differ")
    n_ctx = context.shape[-2]
    out = apply_stack(stack, torch.cat([context, clip], dim=-2))
    return out[..., :n_ctx, :], out[..., n_ctx:, :]


def zero_mix_(stack: EncoderStack) -> EncoderStack:
    """Zero every channel-mix weight and bias, turning the stack into the identity."""
    with torch.no_grad():
        for layer in stack.layers:
            layer.mix_weight.zero_()
            layer.mix_bias.zero_()
    return stack
