"""Small end-to-end run: synthetic movies, decoder pretraining, staged training, refinement.

Takes a few minutes on one core. The full benchmark lives in configs/benchmark.cfg
and runs through the CLI (see README).
"""

import numpy as np
import torch

from adscribe.data import SynthConfig, synth_dataset
from adscribe.metrics import MatchCounts, match_counts
from adscribe.model import AdModel, ModelConfig
from adscribe.pipeline import Trace, calibrate_tau, run_movie
from adscribe.training import PretrainConfig, TrainConfig, pretrain_decoder, train

torch.set_num_threads(1)

ds = synth_dataset(SynthConfig(n_train=40, n_val=5, n_test=5))
vocab = ds.vocab
print(len(ds.train), "train movies,", len(vocab), "words")
first = ds.train[0]
print(first.movie_id, [(e.start, e.end, e.script) for e in first.annotations])

cfg = ModelConfig(vocab_size=len(vocab), max_tokens=12)
model = AdModel(cfg)

losses = pretrain_decoder(model.decoder, ds.train, vocab, cfg, PretrainConfig(steps=300, lr=3e-3))
print("decoder pretraining loss: %.3f -> %.3f" % (losses[0], losses[-1]))

tc = TrainConfig(epochs=4, lr=3e-3, warmup_steps=10, det_only_epochs=120, det_lr=1e-2,
                 freeze_vod_in_joint=True)
result = train(model, ds.train, vocab, tc)
log = result.log
print("steps:", result.steps, "first/last loss_total: %.3f / %.3f" % (log[0]["loss_total"], log[-1]["loss_total"]))

tau, f1s = calibrate_tau(ds.val, model, vocab, iterations=2)
print("tau from val:", tau)

trace = Trace()
res = run_movie(ds.test[0], model, vocab, iterations=2, tau=tau, trace=trace)
print("trace of window 0:", [op for op, w, _ in trace.calls if w == 0])
for ev in res.events:
    print("  event", ev.start, ev.end, round(ev.score, 3), "|", ev.script)
print("  truth", [(e.start, e.end) for e in ds.test[0].annotations])

for j in (1, 2):
    total = MatchCounts()
    for movie in ds.test:
        r = run_movie(movie, model, vocab, iterations=2, tau=tau)
        total = total + match_counts(r.events_at(j), movie.annotations)
    print("iteration %d  P/R/F1 = %.3f %.3f %.3f" % ((j,) + total.prf()))
