import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adscribe import pipeline
from adscribe.data import AdEvent, MovieRecord
from adscribe.detector import build_candidates
from adscribe.generation import BeamConfig
from adscribe.model import AdModel, ModelConfig
from adscribe.pipeline import Trace, TaintError, decode_events, interval_iou_frames, plan_windows, run_movie
from adscribe.text import Vocabulary

VOCAB = Vocabulary(["a", "b", "c", "d", "e", "f"])
CFG = ModelConfig(width=4, state_dim=4, n_layers=1, clip_len=4, context_len=4, script_len=5, top_k=3,
                  vocab_size=len(VOCAB), max_tokens=4, seed=0)
BEAM = BeamConfig(2, 4)


def movie(frames=10, seed=0):
    feats = np.random.default_rng(seed).normal(size=(frames, 4))
    return MovieRecord("m", feats, [AdEvent(2, 4)])


def one_hot_scores(cs, start, length, value):
    s = np.full(cs.size, 0.01)
    s[cs.index(start, length)] = value
    return s


class TestPlan:
    def test_counting_example(self):
        plan = plan_windows(96, 32, 64, 16)
        assert plan.clip_starts == (0, 16, 32, 48, 64)
        assert plan.windows[0] == ((-64, 0), (0, 32))

    def test_single_window(self):
        assert plan_windows(32, 32, 64, 32).clip_starts == (0,)

    def test_errors(self):
        with pytest.raises(ValueError):
            plan_windows(0, 4, 4, 2)
        with pytest.raises(ValueError):
            plan_windows(10, 4, 4, 0)

    @settings(max_examples=100)
    @given(st.integers(1, 300), st.integers(1, 40), st.integers(0, 40), st.data())
    def test_coverage_and_stride(self, length, n, ctx, data):
        step = data.draw(st.integers(1, n))
        plan = plan_windows(length, n, ctx, step)
        covered = np.zeros(length, dtype=bool)
        for s in plan.clip_starts:
            covered[s: s + n] = True
        assert covered.all()
        assert all(b - a == step for a, b in zip(plan.clip_starts, plan.clip_starts[1:]))


class TestDecode:
    def test_index_mapping(self):
        plan = plan_windows(64, 32, 64, 32)
        cs = build_candidates(32)
        events = decode_events([one_hot_scores(cs, 5, 4, 0.9), np.zeros(cs.size)], plan)
        assert [(e.start, e.end, e.score) for e in events] == [(4, 7, 0.9)]

    def test_duplicate_suppressed(self):
        plan = plan_windows(48, 32, 64, 16)
        cs = build_candidates(32)
        # window 0 at frames 20..23 is (21, 4); window 1 sees the same frames as (5, 4)
        events = decode_events([one_hot_scores(cs, 21, 4, 0.9), one_hot_scores(cs, 5, 4, 0.8)], plan)
        assert [(e.start, e.end, e.score) for e in events] == [(20, 23, 0.9)]

    def test_below_tau(self):
        plan = plan_windows(64, 32, 64, 16)
        assert decode_events([np.full(528, 0.4)] * len(plan.clip_starts), plan, tau=0.5) == []

    def test_tail_clipped_to_movie(self):
        plan = plan_windows(6, 4, 4, 4)
        cs = build_candidates(4)
        events = decode_events([np.zeros(10), one_hot_scores(cs, 1, 4, 0.9)], plan)
        assert [(e.start, e.end) for e in events] == [(4, 5)]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_output_invariants(self, seed):
        rng = np.random.default_rng(seed)
        plan = plan_windows(int(rng.integers(8, 60)), 8, 8, int(rng.integers(1, 9)))
        scores = [rng.random(36) for _ in plan.clip_starts]
        events = decode_events(scores, plan, tau=0.3, nms_iou=0.4)
        assert [(e.start, e.end) for e in events] == sorted((e.start, e.end) for e in events)
        for i, a in enumerate(events):
            assert 0 <= a.start <= a.end < plan.movie_len
            for b in events[i + 1:]:
                assert interval_iou_frames(a.start, a.end, b.start, b.end) <= 0.4


class TestRunMovie:
    def model(self):
        return AdModel(CFG)

    def test_one_iteration_never_runs_lgd(self):
        trace = Trace()
        res = run_movie(movie(), self.model(), VOCAB, iterations=1, beam=BEAM, trace=trace)
        assert trace.count("lgd") == 0 and trace.count("embed_script") == 0
        assert trace.count("vod") == len(res.plan.clip_starts)

    def test_two_iteration_trace(self):
        trace = Trace()
        res = run_movie(movie(), self.model(), VOCAB, iterations=2, beam=BEAM, trace=trace)
        expected = []
        for i in range(len(res.plan.clip_starts)):
            expected += [("enhance", i, 0), ("vod", i, 1), ("suppress", i, 1), ("generate", i, 1),
                         ("embed_script", i, 2), ("lgd", i, 2), ("suppress", i, 2), ("generate", i, 2)]
        assert trace.calls == expected

    def test_shapes(self):
        res = run_movie(movie(), self.model(), VOCAB, iterations=3, beam=BEAM)
        assert res.iterations == 3
        assert all(len(w) == 3 and all(s.shape == (10,) for s in w) for w in res.scores)
        assert all(s.generated for w in res.scripts for s in w)

    def test_deterministic(self):
        a = run_movie(movie(), self.model(), VOCAB, beam=BEAM)
        b = run_movie(movie(), self.model(), VOCAB, beam=BEAM)
        assert all(np.array_equal(x, y) for wa, wb in zip(a.scores, b.scores) for x, y in zip(wa, wb))
        assert a.scripts == b.scripts and a.events == b.events

    def test_ground_truth_script_is_refused(self, monkeypatch):
        monkeypatch.setattr(pipeline, "Script", lambda tokens, generated: _GroundTruth(tokens))
        with pytest.raises(TaintError):
            run_movie(movie(), self.model(), VOCAB, iterations=2, beam=BEAM)

    def test_bad_iterations(self):
        with pytest.raises(ValueError):
            run_movie(movie(), self.model(), VOCAB, iterations=0)

    def test_events_at_final_matches_events(self):
        res = run_movie(movie(), self.model(), VOCAB, iterations=2, tau=0.0, beam=BEAM)
        assert res.events_at(2, VOCAB) == res.events
        assert res.events


class _GroundTruth:
    def __init__(self, tokens):
        self.tokens = tuple(tokens)
        self.generated = False


class TestCalibration:
    @pytest.fixture
    def fragment(self, monkeypatch):
        # window 0 finds frames 0..9, window 1 a 4-frame fragment of it (IoU 0.4)
        plan = plan_windows(20, 16, 0, 4)
        cs = build_candidates(16)
        scores = [one_hot_scores(cs, 1, 10, 0.9), one_hot_scores(cs, 1, 4, 0.6)]
        scores += [np.full(cs.size, 0.01)] * (len(plan.clip_starts) - 2)
        res = pipeline.MovieResult("m", plan, [[s] for s in scores], [], [])
        monkeypatch.setattr(pipeline, "run_movie", lambda *a, **k: res)
        return [MovieRecord("m", np.zeros((20, 4)), [AdEvent(0, 9)])]

    def test_joint_grid_suppresses_fragment(self, fragment):
        tau, nms, f1s = pipeline.calibrate_decoding(fragment, None, VOCAB, nms_grid=pipeline.NMS_GRID)
        assert (tau, nms) == (0.5, 0.3)
        assert f1s[0.5, 0.5] == pytest.approx(2 / 3) and f1s[0.5, 0.3] == 1.0

    def test_threshold_only(self, fragment):
        tau, f1s = pipeline.calibrate_tau(fragment, None, VOCAB)
        assert tau == 0.65 and f1s[0.6] == pytest.approx(2 / 3)
