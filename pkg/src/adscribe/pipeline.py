"""Whole-movie inference: sliding windows, detect -> generate refinement loop, event decoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import AdEvent, MovieRecord, cut_window
from .generation import BeamConfig, generate
from .lgd import embed_script
from .model import AdModel
from .text import Vocabulary


class TaintError(RuntimeError):
    """A ground-truth script reached a path that must only see generated scripts."""


@dataclass(frozen=True)
class Script:
    tokens: tuple[int, ...]
    generated: bool


@dataclass(frozen=True)
class WindowPlan:
    movie_len: int
    clip_len: int
    context_len: int
    step: int
    clip_starts: tuple[int, ...]

    @property
    def windows(self) -> list[tuple[tuple[int, int], tuple[int, int]]]:
        """[(context [a, b), clip [b, b + N))] with possibly negative / out-of-range bounds (zero padded)."""
        return [((s - self.context_len, s), (s, s + self.clip_len)) for s in self.clip_starts]


def plan_windows(movie_len: int, clip_len: int, context_len: int, step: int) -> WindowPlan:
    if movie_len < 1:
        raise ValueError("movie must have at least one frame")
    if clip_len < 1 or step < 1:
        raise ValueError("clip length and step must be >= 1")
    starts = [0]
    while starts[-1] + clip_len < movie_len:
        starts.append(starts[-1] + step)
    return WindowPlan(movie_len, clip_len, context_len, step, tuple(starts))


@dataclass
class Trace:
    """Ordered record of (operation, window, iteration) for inspection in tests and reports."""

    calls: list[tuple[str, int, int]] = field(default_factory=list)

    def __call__(self, op: str, window: int, iteration: int = 0):
        self.calls.append((op, window, iteration))

    def count(self, op: str) -> int:
        return sum(1 for c in self.calls if c[0] == op)


@dataclass
class MovieResult:
    movie_id: str
    plan: WindowPlan
    scores: list[list[np.ndarray]]
    scripts: list[list[Script]]
    events: list[AdEvent]
    tau: float = 0.5
    nms_iou: float = 0.5

    @property
    def iterations(self) -> int:
        return len(self.scores[0]) if self.scores else 0

    def events_at(self, iteration: int, vocab: Vocabulary | None = None) -> list[AdEvent]:
        """Decoded events using the scores of a given 1-based iteration."""
        scores = [per_window[iteration - 1] for per_window in self.scores]
        scripts = [per_window[iteration - 1] for per_window in self.scripts]
        return decode_events(scores, self.plan, self.tau, self.nms_iou, _texts(scripts, vocab))

    def to_json(self, vocab: Vocabulary, cs) -> dict:
        per_window = []
        for start, scores, scripts in zip(self.plan.clip_starts, self.scores, self.scripts):
            its = []
            for j, (s, script) in enumerate(zip(scores, scripts), 1):
                m = int(np.argmax(s))
                its.append({
                    "iteration": j,
                    "mode": "vod" if j == 1 else "lgd",
                    "best_start": start + int(cs.starts[m]) - 1,
                    "best_end": start + int(cs.starts[m] + cs.lengths[m]) - 2,
                    "best_score": round(float(s[m]), 6),
                    "script_text": vocab.decode(script.tokens),
                })
            per_window.append({"clip_start": start, "iterations": its})
        return {
            "movie_id": self.movie_id,
            "events": [{"start": e.start, "end": e.end, "score": round(e.score, 6), "script_text": e.script}
                       for e in self.events],
            "per_window": per_window,
        }


def _texts(scripts: list[Script], vocab: Vocabulary | None):
    if vocab is None:
        return None
    return [vocab.decode(s.tokens) for s in scripts]


def _pad_tokens(tokens, length: int, pad_id: int):
    ids = np.full((1, length), pad_id, dtype=np.int64)
    ids[0, : len(tokens)] = tokens
    mask = np.arange(length)[None] < len(tokens)
    return torch.as_tensor(ids), torch.as_tensor(mask)


@torch.no_grad()
def run_movie(movie: MovieRecord, model: AdModel, vocab: Vocabulary, iterations: int = 2, tau: float = 0.5,
              step: int | None = None, nms_iou: float = 0.5, beam: BeamConfig | None = None,
              trace: Trace | None = None) -> MovieResult:
    """Detect and describe every window, refining with the previous script from iteration 2 on."""
    if iterations < 1:
        raise ValueError("need at least one iteration")
    cfg = model.cfg
    beam = beam or BeamConfig(max_tokens=cfg.max_tokens)
    trace = trace if trace is not None else Trace()
    plan = plan_windows(movie.n_frames, cfg.clip_len, cfg.context_len, step or max(cfg.clip_len // 2, 1))
    all_scores, all_scripts = [], []
    for i, start in enumerate(plan.clip_starts):
        context, clip = cut_window(movie, start, cfg.clip_len, cfg.context_len)
        trace("enhance", i)
        v_ctx, v = model.enhance(torch.as_tensor(context)[None], torch.as_tensor(clip)[None])
        x = model.detection_features(v)
        scores_i, scripts_i = [], []
        previous: Script | None = None
        for j in range(1, iterations + 1):
            if j == 1:
                trace("vod", i, j)
                scores = model.vod_scores(x)
            else:
                if not previous.generated:
                    raise TaintError(f"window {i}: ground-truth script reached inference-time LGD")
                tokens = previous.tokens[: cfg.script_len]
                trace("embed_script", i, j)
                embed_script(tokens, model.word_table)
                ids, mask = _pad_tokens(tokens, cfg.script_len, vocab.pad_id)
                trace("lgd", i, j)
                scores = model.lgd_scores(x, ids, mask)
            trace("suppress", i, j)
            prefix = model.prefix(v_ctx, model.suppress(v, scores))[0].numpy()
            trace("generate", i, j)
            tokens = generate(prefix[: cfg.context_len], prefix[cfg.context_len:], model.decoder, beam)
            previous = Script(tuple(tokens), generated=True)
            scores_i.append(scores[0].numpy().copy())
            scripts_i.append(previous)
        all_scores.append(scores_i)
        all_scripts.append(scripts_i)
    final_texts = [vocab.decode(s[-1].tokens) for s in all_scripts]
    events = decode_events([s[-1] for s in all_scores], plan, tau, nms_iou, final_texts)
    return MovieResult(movie.movie_id, plan, all_scores, all_scripts, events, tau, nms_iou)


def interval_iou_frames(a0: int, a1: int, b0: int, b1: int) -> float:
    inter = min(a1, b1) - max(a0, b0) + 1
    if inter <= 0:
        return 0.0
    return inter / ((a1 - a0 + 1) + (b1 - b0 + 1) - inter)


def decode_events(scores, plan: WindowPlan, tau: float = 0.5, nms_iou: float = 0.5,
                  scripts: list[str] | None = None) -> list[AdEvent]:
    """Per-window argmax candidate above ``tau``, mapped to movie frames, then greedy NMS."""
    from .detector import build_candidates

    cs = build_candidates(plan.clip_len)
    proposals = []
    for i, (start, s) in enumerate(zip(plan.clip_starts, scores)):
        s = np.asarray(s)
        m = int(np.argmax(s))
        if s[m] < tau:
            continue
        first = start + int(cs.starts[m]) - 1
        last = min(first + int(cs.lengths[m]) - 1, plan.movie_len - 1)
        if first >= plan.movie_len:
            continue
        proposals.append((float(s[m]), i, first, last))
    proposals.sort(key=lambda p: (-p[0], p[1]))
    kept = []
    for score, i, first, last in proposals:
        if all(interval_iou_frames(first, last, k[2], k[3]) <= nms_iou for k in kept):
            kept.append((score, i, first, last))
    kept.sort(key=lambda p: (p[2], p[3]))
    return [AdEvent(first, last, scripts[i] if scripts else None, score) for score, i, first, last in kept]


TAU_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))
NMS_GRID = (0.5, 0.4, 0.3, 0.2, 0.1, 0.0)


def calibrate_decoding(movies, model: AdModel, vocab: Vocabulary, iterations: int = 2,
                       iou_thresh: float = 0.1, step: int | None = None, beam: BeamConfig | None = None,
                       tau_grid=TAU_GRID, nms_grid=(0.5,)) -> tuple[float, float, dict[tuple[float, float], float]]:
    """Pick (tau, nms_iou) with the best pooled F1 of the final iteration on held-out movies.

    Scores and scripts depend on neither value (every window is described), so one pass
    of the loop serves the whole grid. Ties go to tau nearest 0.5, then the larger nms_iou.
    """
    from .metrics import MatchCounts, match_counts

    results = [run_movie(m, model, vocab, iterations, step=step, beam=beam) for m in movies]
    f1s = {}
    for nms in nms_grid:
        for tau in tau_grid:
            total = MatchCounts()
            for movie, res in zip(movies, results):
                final = [per_window[-1] for per_window in res.scores]
                total = total + match_counts(decode_events(final, res.plan, tau, nms), movie.annotations, iou_thresh)
            f1s[tau, nms] = total.prf()[2]
    tau, nms = max(f1s, key=lambda k: (round(f1s[k], 12), -abs(k[0] - 0.5), k[1]))
    return tau, nms, f1s


def calibrate_tau(movies, model: AdModel, vocab: Vocabulary, iterations: int = 2, nms_iou: float = 0.5,
                  iou_thresh: float = 0.1, step: int | None = None, beam: BeamConfig | None = None,
                  grid=TAU_GRID) -> tuple[float, dict[float, float]]:
    """Threshold-only calibration at a fixed ``nms_iou``."""
    tau, _, f1s = calibrate_decoding(movies, model, vocab, iterations, iou_thresh, step, beam, grid, (nms_iou,))
    return tau, {t: f for (t, _), f in f1s.items()}
