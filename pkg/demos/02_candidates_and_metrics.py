"""Anchor candidates, suppression weights and the evaluation metrics on small hand examples."""

import numpy as np

from adscribe.data import AdEvent
from adscribe.detector import build_candidates, candidate_pool, label_candidates
from adscribe.generation import suppression_weights
from adscribe.metrics import cider, detection_prf, interval_iou, rouge_l

cs = build_candidates(4)
print("N=4 ->", cs.size, "candidates")
print("(start, length):", list(zip(cs.starts.tolist(), cs.lengths.tolist())))
print("N=32 ->", build_candidates(32).size)

x = np.arange(8, dtype=float).reshape(4, 2)
print("pooled means:\n", candidate_pool(x, cs))

y = np.array([0, 1, 1, 0])                       # one event on frames 2..3 (1-based)
target = label_candidates(y, cs)
print("positive candidate:", int(np.argmax(target)), "=", cs.index(2, 2))

scores = np.zeros(cs.size)
scores[cs.index(1, 2)] = 0.9
scores[cs.index(2, 2)] = 0.6
print("per-frame suppression, k=3:", suppression_weights(scores, cs, 3))   # [0.3, 0.5, 0.2, 0]

print()
print("IoU {10..20} vs {15..25}:", interval_iou(AdEvent(10, 20), AdEvent(15, 25)))
gts = [AdEvent(0, 9), AdEvent(100, 119)]
preds = [AdEvent(0, 4), AdEvent(100, 100)]    # IoU 0.5 and 0.05
print("P/R/F1:", detection_prf(preds, gts))

print("Rouge-L('a c d', 'a b c d'):", round(rouge_l("a c d", "a b c d"), 4))
refs = [["a man opens the door ."], ["the door opens slowly ."], ["a dog runs across the field ."]]
print("CIDEr-D:", round(cider(["a man opens the door", "the door opens", "a cat runs"], refs), 4))
