import itertools

import numpy as np
import pytest
import torch

from adscribe.detector import build_candidates
from adscribe.generation import (
    BeamConfig, SuppressionConfig, ToyDecoder, generate, suppress, suppression_weights, teacher_forced_logits,
    top_k_indices,
)


class TableDecoder:
    """Next-token distribution is a fixed function of the emitted sequence."""

    def __init__(self, vocab=3, stop_id=1, seed=0, width=2):
        self.vocab_size, self.stop_id, self.width = vocab, stop_id, width
        self.rng = np.random.default_rng(seed)
        self.table = {}

    def dist(self, seq):
        seq = tuple(seq)
        if seq not in self.table:
            p = self.rng.random(self.vocab_size) + 0.05
            self.table[seq] = p / p.sum()
        return self.table[seq]

    def next_token_probs(self, prefix, sequences):
        return np.stack([self.dist(s) for s in sequences])


def exhaustive_best(dec, max_tokens):
    best = None
    for n in range(1, max_tokens + 1):
        for seq in itertools.product(range(dec.vocab_size), repeat=n):
            if dec.stop_id in seq[:-1] or (n < max_tokens and seq[-1] != dec.stop_id):
                continue
            lp = sum(np.log(dec.dist(seq[:i])[seq[i]]) for i in range(n))
            key = (-lp / n, seq)
            best = key if best is None or key < best else best
    return list(best[1])


class TestSuppression:
    def test_row_scales_example(self):
        cs = build_candidates(4)
        scores = np.zeros(10)
        scores[cs.index(1, 2)] = 0.9
        scores[cs.index(2, 2)] = 0.6
        w = suppression_weights(scores, cs, 3)
        # third pick is (1,1) with score 0
        np.testing.assert_allclose(w, [0.3, 0.5, 0.2, 0.0])

    def test_k1_single_candidate(self):
        cs = build_candidates(5)
        scores = np.full(15, 0.1)
        scores[cs.index(2, 3)] = 0.8
        np.testing.assert_allclose(suppression_weights(scores, cs, 1), [0, 0.8, 0.8, 0.8, 0])

    def test_tie_break_prefers_lower_index(self):
        assert top_k_indices(np.array([0.5, 0.7, 0.7, 0.1]), 2).tolist() == [1, 2]
        assert top_k_indices(torch.tensor([0.5, 0.7, 0.7, 0.1]), 2).tolist() == [1, 2]

    def test_numpy_and_torch_agree(self):
        cs = build_candidates(8)
        scores = np.random.default_rng(0).random(36)
        v = np.random.default_rng(1).normal(size=(8, 3))
        a = suppress(v, scores, cs, SuppressionConfig(4))
        b = suppress(torch.as_tensor(v), torch.as_tensor(scores), cs, SuppressionConfig(4))
        np.testing.assert_allclose(a, b.numpy(), atol=1e-14)

    def test_gradient_reaches_only_selected_scores(self):
        cs = build_candidates(4)
        scores = torch.tensor(np.random.default_rng(2).random(10), requires_grad=True)
        suppress(torch.ones(4, 2, dtype=torch.float64), scores, cs, SuppressionConfig(2)).sum().backward()
        chosen = set(top_k_indices(scores, 2).tolist())
        for i, g in enumerate(scores.grad.tolist()):
            assert (g != 0) == (i in chosen)

    def test_weights_bounded_by_max_score(self):
        cs = build_candidates(10)
        scores = np.random.default_rng(3).random(55)
        w = suppression_weights(scores, cs, 5)
        assert (w >= 0).all() and (w <= scores.max() + 1e-15).all()

    def test_bad_k_and_shapes(self):
        cs = build_candidates(3)
        with pytest.raises(ValueError):
            suppression_weights(np.zeros(6), cs, 7)
        with pytest.raises(ValueError):
            suppress(np.zeros((4, 2)), np.zeros(6), cs)


class TestBeam:
    def test_always_stop(self):
        class Stop(TableDecoder):
            def dist(self, seq):
                return np.array([0.0, 1.0, 0.0])
        assert generate(np.zeros((1, 2)), np.zeros((1, 2)), Stop()) == [1]

    @pytest.mark.parametrize("seed", range(6))
    def test_width_one_is_greedy(self, seed):
        dec = TableDecoder(vocab=4, seed=seed)
        seq = []
        while len(seq) < 6:
            seq.append(int(np.argmax(dec.dist(seq))))
            if seq[-1] == dec.stop_id:
                break
        assert generate(np.zeros((1, 2)), np.zeros((1, 2)), dec, BeamConfig(1, 6)) == seq

    @pytest.mark.parametrize("seed", range(10))
    def test_wide_beam_is_exhaustive(self, seed):
        dec = TableDecoder(vocab=3, seed=seed)
        got = generate(np.zeros((1, 2)), np.zeros((1, 2)), dec, BeamConfig(27, 3))
        assert got == exhaustive_best(dec, 3)

    def test_unnormalized_rejected(self):
        class Bad(TableDecoder):
            def dist(self, seq):
                return np.array([0.5, 0.6, 0.0])
        with pytest.raises(ValueError, match="unnormalized"):
            generate(np.zeros((1, 2)), np.zeros((1, 2)), Bad())

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            generate(np.zeros((1, 3)), np.zeros((1, 3)), TableDecoder())

    def test_bad_config(self):
        with pytest.raises(ValueError):
            BeamConfig(0, 5)

    def test_max_tokens_bounds_length(self):
        dec = ToyDecoder(9, 4, rng=np.random.default_rng(0))
        out = generate(np.zeros((2, 4)), np.ones((3, 4)), dec, BeamConfig(3, 5))
        assert 1 <= len(out) <= 5


class TestToyDecoder:
    def test_distributions_normalized(self):
        dec = ToyDecoder(11, 4, rng=np.random.default_rng(0))
        p = dec.next_token_probs(np.random.default_rng(1).normal(size=(3, 4)), [[2, 3], [4, 5]])
        assert p.shape == (2, 11)
        np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-12)

    def test_teacher_forcing_is_causal(self):
        dec = ToyDecoder(11, 4, rng=np.random.default_rng(0))
        rng = np.random.default_rng(1)
        zc, z = torch.as_tensor(rng.normal(size=(2, 4))), torch.as_tensor(rng.normal(size=(3, 4)))
        a = teacher_forced_logits(zc, z, [2, 3, 4, 5], dec)
        b = teacher_forced_logits(zc, z, [2, 3, 9, 9], dec)
        assert a.shape == (4, 11)
        assert torch.allclose(a[:3], b[:3], atol=1e-13)

    def test_teacher_forcing_matches_incremental(self):
        dec = ToyDecoder(7, 4, rng=np.random.default_rng(2))
        prefix = np.random.default_rng(3).normal(size=(4, 4))
        gold = [3, 5, 2]
        tf = teacher_forced_logits(torch.as_tensor(prefix[:1]), torch.as_tensor(prefix[1:]), gold, dec)
        for k in range(3):
            np.testing.assert_allclose(tf[k].detach().numpy(), dec.next_token_probs(prefix, [gold[:k]])[0], atol=1e-12)

    def test_freeze(self):
        dec = ToyDecoder(5, 4).freeze()
        assert not any(p.requires_grad for p in dec.parameters())

    def test_too_long(self):
        dec = ToyDecoder(5, 4, max_positions=4)
        with pytest.raises(ValueError):
            dec.log_probs(torch.zeros(1, 3, 4, dtype=torch.float64), torch.zeros(1, 2, dtype=torch.long))

    def test_empty_gold(self):
        with pytest.raises(ValueError):
            teacher_forced_logits(torch.zeros(1, 4), torch.zeros(1, 4), [], ToyDecoder(5, 4))
