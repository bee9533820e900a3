"""Detection precision/recall/F1 at an IoU threshold, Rouge-L, CIDEr-D, and GT-to-prediction pairing."""

from __future__ import annotations

import itertools
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

from .data import AdEvent
from .text import metric_tokens

log = logging.getLogger(__name__)


def interval_iou(a: AdEvent, b: AdEvent) -> float:
    """|a ∩ b| / |a ∪ b| counted in frames of the inclusive intervals."""
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    return inter / (a.length + b.length - inter)


@dataclass
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other):
        return MatchCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def prf(self) -> tuple[float, float, float]:
        p = self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0
        r = self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return p, r, f


def greedy_match(preds, gts, iou_thresh: float = 0.1) -> list[tuple[int, int, float]]:
    """One-to-one matching taking pairs in descending IoU order; only pairs with IoU > threshold.

    When several pairs share an IoU and compete for the same event, every maximal way of
    taking them is tried and the one giving the best remaining matching wins, so the
    result does not depend on input order.
    """
    pairs = []
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            iou = interval_iou(p, g)
            if iou > iou_thresh:
                pairs.append((iou, i, j))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    return [(i, j, iou) for iou, i, j in _match(pairs, frozenset(), frozenset())]


def _disjoint(group) -> bool:
    return len({i for _, i, _ in group}) == len(group) == len({j for _, _, j in group})


def _match(pairs, used_p, used_g):
    avail = [t for t in pairs if t[1] not in used_p and t[2] not in used_g]
    if not avail:
        return []
    top = avail[0][0]
    group = [t for t in avail if t[0] == top]
    rest = avail[len(group):]
    if _disjoint(group):
        return group + _match(rest, used_p | {i for _, i, _ in group}, used_g | {j for _, _, j in group})
    best, best_key = None, None
    for size in range(min(len({i for _, i, _ in group}), len({j for _, _, j in group})), 0, -1):
        for chosen in itertools.combinations(group, size):
            if not _disjoint(chosen):
                continue
            cand = list(chosen) + _match(rest, used_p | {i for _, i, _ in chosen}, used_g | {j for _, _, j in chosen})
            key = (tuple(sorted((t[0] for t in cand), reverse=True)), [(-i, -j) for _, i, j in cand])
            if best_key is None or key > best_key:
                best, best_key = cand, key
        if best is not None:
            # a larger tied matching always beats a smaller one
            return best
    return []


def match_counts(preds, gts, iou_thresh: float = 0.1) -> MatchCounts:
    tp = len(greedy_match(preds, gts, iou_thresh))
    return MatchCounts(tp, len(preds) - tp, len(gts) - tp)


def detection_prf(preds, gts, iou_thresh: float = 0.1) -> tuple[float, float, float]:
    return match_counts(preds, gts, iou_thresh).prf()


def lcs_length(a, b) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = 1.2) -> float:
    """LCS F-measure; strings are normalized with :func:`metric_tokens`."""
    cand, ref = metric_tokens(candidate), metric_tokens(reference)
    if not ref:
        log.warning("rouge_l: empty reference, scoring 0")
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    r, p = lcs / len(ref), lcs / len(cand)
    return (1 + beta**2) * r * p / (r + beta**2 * p)


def _ngrams(tokens, n_max):
    counts = Counter()
    for n in range(1, n_max + 1):
        for i in range(len(tokens) - n + 1):
            counts[tuple(tokens[i: i + n])] += 1
    return counts


class CiderD:
    """CIDEr-D with document frequencies from a reference corpus.

    ``corpus`` is a list of reference sets (one set per described item); an n-gram's
    document frequency is the number of sets in which any reference contains it.
    """

    def __init__(self, corpus, n: int = 4, sigma: float = 6.0):
        if not corpus:
            raise ValueError("CIDEr needs a non-empty reference corpus")
        self.n, self.sigma = n, sigma
        self.doc_freq = Counter()
        for refs in corpus:
            seen = set()
            for ref in refs:
                seen.update(_ngrams(metric_tokens(ref), n))
            self.doc_freq.update(seen)
        self.log_n_docs = math.log(float(len(corpus)))

    def _vec(self, tokens):
        vec = [{} for _ in range(self.n)]
        norm = [0.0] * self.n
        for gram, tf in _ngrams(tokens, self.n).items():
            w = tf * (self.log_n_docs - math.log(max(1.0, self.doc_freq[gram])))
            vec[len(gram) - 1][gram] = w
            norm[len(gram) - 1] += w * w
        return vec, [math.sqrt(x) for x in norm]

    def score(self, candidate, references) -> float:
        cand = metric_tokens(candidate)
        if not cand or not references:
            return 0.0
        vh, nh = self._vec(cand)
        total = [0.0] * self.n
        for ref in references:
            r = metric_tokens(ref)
            vr, nr = self._vec(r)
            penalty = math.exp(-((len(cand) - len(r)) ** 2) / (2 * self.sigma**2))
            for k in range(self.n):
                dot = sum(min(w, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0) for g, w in vh[k].items())
                if nh[k] and nr[k]:
                    dot /= nh[k] * nr[k]
                total[k] += dot * penalty
        return 10.0 * sum(total) / self.n / len(references)


def cider(candidates, references, corpus=None) -> float:
    """Mean CIDEr-D of candidates[i] against the reference set references[i]."""
    if not candidates:
        return 0.0
    scorer = CiderD(corpus if corpus is not None else references)
    return sum(scorer.score(c, refs) for c, refs in zip(candidates, references)) / len(candidates)


def pair_generation(gts, preds) -> list[tuple[AdEvent, AdEvent | None]]:
    """Each GT with the prediction whose centre is nearest (ties: earlier prediction); None when no predictions."""
    out = []
    for g in gts:
        best = min(preds, key=lambda p: abs(p.center - g.center), default=None)
        out.append((g, best))
    return out


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    rouge_l: float
    cider: float
    tp: int
    fp: int
    fn: int
    per_movie: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        rows = [("precision", self.precision), ("recall", self.recall), ("f1", self.f1),
                ("rouge_l", self.rouge_l), ("cider", self.cider)]
        lines = [f"{'metric':<10} {'value':>8}"] + [f"{k:<10} {v:>8.4f}" for k, v in rows]
        lines.append(f"{'tp/fp/fn':<10} {self.tp}/{self.fp}/{self.fn}")
        return "\n".join(lines)


def evaluate(predictions: dict[str, list[AdEvent]], annotations: dict[str, list[AdEvent]],
             iou_thresh: float = 0.1) -> EvalReport:
    """Pooled detection counts over movies plus generation metrics on closest-event pairs."""
    total = MatchCounts()
    per_movie = {}
    cands, refs = [], []
    for movie_id in sorted(annotations):
        gts = annotations[movie_id]
        preds = predictions.get(movie_id, [])
        counts = match_counts(preds, gts, iou_thresh)
        total = total + counts
        p, r, f = counts.prf()
        per_movie[movie_id] = {"precision": p, "recall": r, "f1": f, **asdict(counts)}
        for gt, pred in pair_generation(gts, preds):
            cands.append((pred.script or "") if pred is not None else "")
            refs.append([gt.script or ""])
    for movie_id in sorted(set(predictions) - set(annotations)):
        total = total + MatchCounts(0, len(predictions[movie_id]), 0)
    p, r, f = total.prf()
    rl = sum(rouge_l(c, rs[0]) for c, rs in zip(cands, refs)) / len(refs) if refs else 0.0
    cd = cider(cands, refs, corpus=refs) if refs else 0.0
    return EvalReport(p, r, f, rl, cd, total.tp, total.fp, total.fn, per_movie)
