import json
import math
import random

import httpx
import mpmath
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semuq.dpo import (
    DpoConfig,
    ExternalLabelerScorer,
    PreferencePair,
    ScoredGeneration,
    TokenF1Scorer,
    build_pairs,
    dpo_batch_loss,
    dpo_loss,
    score_generation,
)
from semuq.errors import EmptyBatch, InvalidConfig, ScorerUnavailable, TooFewCandidates


def gen(score=0.5, pol=0.0, ref=0.0, text="t"):
    return ScoredGeneration(text, pol, ref, score)


def pair_with_ratios(w_ratio, l_ratio, base=-10.0):
    return PreferencePair("p", gen(0.9, base + w_ratio, base), gen(0.1, base + l_ratio, base))


def direct_loss(delta):
    # oracle: straight from the sigmoid definition
    return -math.log(1.0 / (1.0 + math.exp(-delta)))


class TestScorer:
    def test_identity(self):
        assert score_generation("No acute disease.", "no acute disease", TokenF1Scorer()) == 1.0

    def test_disjoint(self):
        assert score_generation("heart enlarged", "lungs clear", TokenF1Scorer()) == 0.0

    def test_partial(self):
        # hand count: 3 shared tokens; precision 3/3, recall 3/4
        f1 = score_generation("no acute disease", "no acute cardiopulmonary disease", TokenF1Scorer())
        assert math.isclose(f1, 2 * 1.0 * 0.75 / 1.75)
        assert math.isclose(f1, 0.857, abs_tol=5e-4)

    def test_empty_reference(self):
        with pytest.raises(InvalidConfig):
            score_generation("x", "", TokenF1Scorer())

    def test_external(self):
        labels = {"effusion present": ["effusion"], "effusion and edema": ["effusion", "edema"]}

        def handler(request):
            return httpx.Response(200, json={"labels": labels[json.loads(request.content)["text"]]})

        scorer = ExternalLabelerScorer(base_url="http://lab.local", transport=httpx.MockTransport(handler))
        assert math.isclose(score_generation("effusion present", "effusion and edema", scorer), 2 / 3)

    def test_external_unavailable(self):
        scorer = ExternalLabelerScorer(
            base_url="http://lab.local", transport=httpx.MockTransport(lambda r: httpx.Response(404))
        )
        with pytest.raises(ScorerUnavailable):
            score_generation("a", "b", scorer)


class TestBuildPairs:
    def test_two(self):
        a, b = gen(0.8, text="a"), gen(0.3, text="b")
        p = build_pairs("x", [a, b])
        assert p.winner is a and p.loser is b
        assert math.isclose(p.score_gap, 0.5)

    def test_ties(self):
        assert build_pairs("x", [gen(0.4), gen(0.4), gen(0.4)]) is None

    def test_first_max_first_min(self):
        cands = [gen(s, text=str(i)) for i, s in enumerate([0.5, 0.9, 0.1, 0.9])]
        p = build_pairs("x", cands)
        assert p.winner.text == "1" and p.loser.text == "2"
        assert math.isclose(p.score_gap, 0.8)

    def test_min_gap(self):
        assert build_pairs("x", [gen(0.5), gen(0.4)], min_gap=0.2) is None

    def test_too_few(self):
        with pytest.raises(TooFewCandidates):
            build_pairs("x", [gen()])

    @settings(max_examples=200, deadline=None)
    @given(scores=st.lists(st.floats(0, 1), min_size=2, max_size=8))
    def test_pair_order(self, scores):
        p = build_pairs("x", [gen(s) for s in scores])
        if max(scores) == min(scores):
            assert p is None
        else:
            assert p.winner.score > p.loser.score


class TestLoss:
    def test_symmetric_point(self):
        assert abs(dpo_loss(pair_with_ratios(0.0, 0.0)) - math.log(2)) <= 1e-12

    def test_beta_example(self):
        loss = dpo_loss(pair_with_ratios(1.0, -1.0), DpoConfig(0.1))
        assert math.isclose(loss, direct_loss(0.2), abs_tol=1e-12)
        assert abs(loss - 0.59814) <= 1e-5

    def test_limit(self):
        assert dpo_loss(pair_with_ratios(5000.0, -5000.0), DpoConfig(1.0)) == 0.0
        assert math.isclose(dpo_loss(pair_with_ratios(-400.0, 400.0), DpoConfig(1.0)), 800.0)

    def test_invalid_beta(self):
        with pytest.raises(InvalidConfig):
            DpoConfig(0.0)

    def test_pair_invariant(self):
        with pytest.raises(InvalidConfig):
            PreferencePair("p", gen(0.2), gen(0.2))

    @settings(max_examples=200, deadline=None)
    @given(d1=st.floats(-30, 30), d2=st.floats(-30, 30))
    def test_monotone_and_positive(self, d1, d2):
        lo, hi = sorted((d1, d2))
        cfg = DpoConfig(1.0)
        l_lo, l_hi = dpo_loss(pair_with_ratios(lo, 0.0), cfg), dpo_loss(pair_with_ratios(hi, 0.0), cfg)
        assert l_lo > 0 and l_hi > 0
        assert l_hi <= l_lo

    @settings(max_examples=200, deadline=None)
    @given(a=st.floats(-20, 20), b=st.floats(-20, 20), t=st.floats(0, 1))
    def test_convex(self, a, b, t):
        cfg = DpoConfig(1.0)
        f = lambda d: dpo_loss(pair_with_ratios(d, 0.0), cfg)
        assert f(t * a + (1 - t) * b) <= t * f(a) + (1 - t) * f(b) + 1e-9

    @settings(max_examples=200, deadline=None)
    @given(delta=st.floats(-20, 20))
    def test_antisymmetry(self, delta):
        cfg = DpoConfig(1.0)
        fwd = dpo_loss(pair_with_ratios(delta, 0.0), cfg)
        back = dpo_loss(pair_with_ratios(-delta, 0.0), cfg)
        assert math.isclose(back, direct_loss(-delta), rel_tol=1e-9, abs_tol=1e-12)
        assert fwd + back >= 2 * math.log(2) - 1e-12

    @settings(max_examples=200, deadline=None)
    @given(c1=st.floats(-50, 50), c2=st.floats(-50, 50))
    def test_shift_invariance(self, c1, c2):
        base = PreferencePair("p", gen(0.9, -3.0, -4.0), gen(0.1, -5.0, -2.5))
        shifted = PreferencePair(
            "p", gen(0.9, -3.0 + c1, -4.0 + c1), gen(0.1, -5.0 + c2, -2.5 + c2)
        )
        assert math.isclose(dpo_loss(base), dpo_loss(shifted), abs_tol=1e-9)


def random_batch(rng, n):
    return [
        PreferencePair(
            f"p{i}",
            gen(0.9, rng.uniform(-60, -1), rng.uniform(-60, -1)),
            gen(0.1, rng.uniform(-60, -1), rng.uniform(-60, -1)),
        )
        for i in range(n)
    ]


def central_difference(pairs, cfg, i, which, h=1e-5):
    """Central difference of the mean loss, evaluated in 50-digit arithmetic."""
    def mean_with(offset):
        beta = mpmath.mpf(cfg.beta)
        total = mpmath.mpf(0)
        for j, p in enumerate(pairs):
            pw, pl = mpmath.mpf(p.winner.policy_logprob), mpmath.mpf(p.loser.policy_logprob)
            if j == i:
                if which == "winner":
                    pw += offset
                else:
                    pl += offset
            delta = beta * ((pw - p.winner.reference_logprob) - (pl - p.loser.reference_logprob))
            total += mpmath.log(1 + mpmath.exp(-delta))
        return total / len(pairs)

    with mpmath.workdps(50):
        h = mpmath.mpf(h)
        return float((mean_with(h) - mean_with(-h)) / (2 * h))


class TestBatch:
    def test_single(self):
        p = pair_with_ratios(0.3, -0.2)
        assert dpo_batch_loss([p]).mean == dpo_loss(p)

    def test_zero_ratios(self):
        cfg = DpoConfig(0.1)
        out = dpo_batch_loss([pair_with_ratios(0.0, 0.0)] * 4, cfg)
        assert math.isclose(out.mean, math.log(2), abs_tol=1e-15)
        assert all(math.isclose(g, -0.1 / 8) for g in out.grad_winner)
        assert all(math.isclose(g, 0.1 / 8) for g in out.grad_loser)

    def test_empty(self):
        with pytest.raises(EmptyBatch):
            dpo_batch_loss([])

    @pytest.mark.parametrize("seed", range(10))
    def test_finite_differences(self, seed):
        rng = random.Random(seed)
        pairs = random_batch(rng, rng.randint(1, 6))
        cfg = DpoConfig(rng.uniform(0.05, 1.0))
        out = dpo_batch_loss(pairs, cfg)
        for i in range(len(pairs)):
            for which, grads in (("winner", out.grad_winner), ("loser", out.grad_loser)):
                fd = central_difference(pairs, cfg, i, which)
                assert math.isclose(grads[i], fd, rel_tol=1e-6)
