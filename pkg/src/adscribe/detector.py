"""Anchor-based event detection over every contiguous interval of a clip."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class CandidateSet:
    """All N(N+1)/2 contiguous intervals, ordered by length then start.

    ``starts`` are 1-based frame indices, so entry ``m`` covers frames
    ``starts[m] .. starts[m] + lengths[m] - 1``. The last entry is the whole clip.
    """

    n: int
    starts: np.ndarray
    lengths: np.ndarray
    _torch_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def size(self) -> int:
        return self.starts.size

    def __len__(self):
        return self.size

    def index(self, start: int, length: int) -> int:
        """0-based position of the 1-based interval (start, length)."""
        if not (1 <= length <= self.n and 1 <= start <= self.n - length + 1):
            raise ValueError(f"({start}, {length}) is not a candidate for N={self.n}")
        before = (length - 1) * self.n - (length - 1) * (length - 2) // 2
        return before + start - 1

    @property
    def membership(self) -> np.ndarray:
        """Binary (M, N) matrix: row m is c_m."""
        frames = np.arange(1, self.n + 1)
        return ((frames >= self.starts[:, None]) & (frames < (self.starts + self.lengths)[:, None])).astype(np.float64)

    @property
    def pool_matrix(self) -> np.ndarray:
        # c_m^T c_M is the interval length
        return self.membership / self.lengths[:, None]

    def torch_matrix(self, kind: str) -> torch.Tensor:
        if kind not in self._torch_cache:
            mat = self.membership if kind == "membership" else self.pool_matrix
            self._torch_cache[kind] = torch.as_tensor(mat, dtype=torch.float64)
        return self._torch_cache[kind]


@lru_cache(maxsize=None)
def build_candidates(n: int) -> CandidateSet:
    if n < 1:
        raise ValueError("clip length must be >= 1")
    starts, lengths = [], []
    for length in range(1, n + 1):
        for start in range(1, n - length + 2):
            starts.append(start)
            lengths.append(length)
    return CandidateSet(n, np.array(starts), np.array(lengths))


def candidate_pool(x, cs: CandidateSet):
    """Mean of the frames inside each candidate: the (M, D) matrix Cbar @ X.

    Accepts numpy arrays or torch tensors with any leading batch dimensions.
    """
    if x.shape[-2] != cs.n:
        raise ValueError(f"features have {x.shape[-2]} frames, candidate set expects {cs.n}")
    if isinstance(x, torch.Tensor):
        return cs.torch_matrix("pool").to(x.dtype) @ x
    return cs.pool_matrix @ np.asarray(x, dtype=np.float64)


class DetectionHead(nn.Module):
    """D -> D -> 1 perceptron with x*sigmoid(x) hidden activation and sigmoid output."""

    def __init__(self, width: int, rng: np.random.Generator | None = None, prior: float | None = None):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        bound = 1.0 / np.sqrt(width)

        def p(x):
            return nn.Parameter(torch.tensor(np.array(x), dtype=torch.float64))

        self.w1 = p(rng.uniform(-bound, bound, (width, width)))
        self.b1 = p(np.zeros(width))
        self.w2 = p(rng.uniform(-bound, bound, width))
        # prior: expected fraction of positive candidates; sets the initial output bias
        self.b2 = p(np.zeros(()) if prior is None else np.log(prior / (1.0 - prior)))

    def forward(self, xc: torch.Tensor) -> torch.Tensor:
        h = xc @ self.w1.T + self.b1
        h = h * torch.sigmoid(h)
        return torch.sigmoid(h @ self.w2 + self.b2)


def score_candidates(xc, head: DetectionHead) -> torch.Tensor:
    xc = xc if isinstance(xc, torch.Tensor) else torch.as_tensor(np.asarray(xc), dtype=torch.float64)
    if xc.shape[-1] != head.w1.shape[1]:
        raise ValueError("candidate feature width does not match the head")
    return head(xc)


def frame_runs(y) -> list[tuple[int, int]]:
    """Maximal runs of ones in a binary vector as 1-based (start, length) pairs."""
    y = np.asarray(y).astype(bool)
    runs = []
    i = 0
    while i < y.size:
        if y[i]:
            j = i
            while j < y.size and y[j]:
                j += 1
            runs.append((i + 1, j - i))
            i = j
        else:
            i += 1
    return runs


def candidate_iou(cs: CandidateSet, start: int, length: int) -> np.ndarray:
    """Frame IoU of every candidate against the 1-based interval (start, length)."""
    s0, e0 = start, start + length - 1
    e = cs.starts + cs.lengths - 1
    inter = np.clip(np.minimum(e, e0) - np.maximum(cs.starts, s0) + 1, 0, None)
    union = cs.lengths + length - inter
    return inter / union


def label_candidates(y, cs: CandidateSet) -> np.ndarray:
    """One-hot target at the candidate with the highest IoU against the single run in ``y``.

    An all-zero ``y`` gives an all-zero target. More than one run is rejected.
    """
    y = np.asarray(y)
    if y.shape != (cs.n,):
        raise ValueError(f"label vector must have length {cs.n}")
    runs = frame_runs(y)
    target = np.zeros(cs.size)
    if not runs:
        return target
    if len(runs) > 1:
        raise ValueError(f"expected at most one event per window, found {len(runs)}")
    target[int(np.argmax(candidate_iou(cs, *runs[0])))] = 1.0
    return target
