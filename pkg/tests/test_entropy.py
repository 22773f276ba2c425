import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semuq.clustering import BinaryRuleJudge, NormalizedExactJudge, build_clustering, cluster
from semuq.entropy import (
    EstimatorKind,
    cluster_log_masses,
    corrected_entropy,
    discrete_entropy,
    entropy_report,
    nats_to_bits,
    rao_blackwell_entropy,
    within_cluster_entropy,
)
from semuq.errors import InvalidConfig, MissingLikelihoods
from semuq.clustering import Clustering

from conftest import make_sampleset
from oracles import entropy_direct, estimators_direct

ln = math.log


def clustering_from(layout):
    """Build a clustering from [[(text, prob), ...], ...] without a judge."""
    texts, lps, assignment = [], [], []
    for c in layout:
        members = []
        for text, p in c:
            members.append(len(texts))
            texts.append(text)
            lps.append(ln(p))
        assignment.append(members)
    return build_clustering(assignment, texts, lps)


class TestDiscrete:
    def test_single_cluster(self):
        cl = cluster(make_sampleset(["yes"] * 7), BinaryRuleJudge())
        assert discrete_entropy(cl) == 0.0

    def test_sizes_2_1_1(self):
        cl = cluster(make_sampleset(["yes", "yes", "no", "maybe"]), BinaryRuleJudge())
        expected = entropy_direct([2, 1, 1])
        assert math.isclose(expected, 1.0397, abs_tol=5e-5)
        assert math.isclose(discrete_entropy(cl), expected, abs_tol=1e-12)

    def test_uniform_two(self):
        cl = cluster(make_sampleset(["yes"] * 3 + ["no"] * 3), BinaryRuleJudge())
        assert math.isclose(discrete_entropy(cl), ln(2), abs_tol=1e-15)


class TestMasses:
    def test_identity(self):
        cl = cluster(make_sampleset(["yes"], [-2.3]), BinaryRuleJudge())
        assert cluster_log_masses(cl) == pytest.approx([-2.3], abs=1e-15)

    def test_sum(self):
        cl = clustering_from([[("a", 0.4), ("b", 0.2)]])
        assert math.isclose(cluster_log_masses(cl)[0], ln(0.6), abs_tol=1e-15)

    def test_empty(self):
        with pytest.raises(InvalidConfig):
            cluster_log_masses(Clustering((), 0))

    def test_no_underflow(self):
        cl = cluster(make_sampleset(["yes", "Yes."], [-2000.0, -2001.0]), BinaryRuleJudge())
        expected = -2000.0 + math.log1p(math.exp(-1.0))
        assert math.isclose(cluster_log_masses(cl)[0], expected, rel_tol=1e-14)


class TestRaoBlackwell:
    def test_single(self):
        assert rao_blackwell_entropy(clustering_from([[("a", 0.4), ("b", 0.1)]])) == 0.0

    def test_03_01(self):
        cl = clustering_from([[("a", 0.3)], [("b", 0.1)]])
        expected = entropy_direct([0.3, 0.1])
        assert math.isclose(expected, 0.5623, abs_tol=5e-5)
        assert math.isclose(rao_blackwell_entropy(cl), expected, abs_tol=1e-12)

    @pytest.mark.parametrize("k", [2, 3, 5, 8])
    def test_uniform(self, k):
        cl = clustering_from([[(f"t{i}", 0.01)] for i in range(k)])
        assert math.isclose(rao_blackwell_entropy(cl), ln(k), abs_tol=1e-12)

    def test_missing(self):
        with pytest.raises(MissingLikelihoods):
            rao_blackwell_entropy(cluster(make_sampleset(["yes", "no"]), BinaryRuleJudge()))


class TestWithin:
    def test_singleton(self):
        cl = clustering_from([[("a", 0.4)]])
        assert within_cluster_entropy(cl.clusters[0]) == 0.0

    def test_04_01(self):
        cl = clustering_from([[("a", 0.4), ("b", 0.1)]])
        expected = entropy_direct([0.4, 0.1])
        assert math.isclose(expected, 0.5004, abs_tol=5e-5)
        assert math.isclose(within_cluster_entropy(cl.clusters[0]), expected, abs_tol=1e-12)

    @pytest.mark.parametrize("n", [2, 4, 7])
    def test_uniform(self, n):
        cl = clustering_from([[(f"t{i}", 0.05) for i in range(n)]])
        assert math.isclose(within_cluster_entropy(cl.clusters[0]), ln(n), abs_tol=1e-12)

    def test_duplicates_merge(self):
        cl = cluster(make_sampleset(["yes", "Yes.", "yes"], [-1.0, -2.0, -0.5]), BinaryRuleJudge())
        assert within_cluster_entropy(cl.clusters[0]) == 0.0


class TestCorrected:
    def test_all_singletons(self):
        cl = clustering_from([[("a", 0.3)], [("b", 0.1)], [("c", 0.2)]])
        assert corrected_entropy(cl, EstimatorKind.WITHIN_ONLY) == 0.0
        assert math.isclose(corrected_entropy(cl, EstimatorKind.COMBINED), rao_blackwell_entropy(cl), abs_tol=1e-15)

    def test_one_cluster(self):
        cl = clustering_from([[("a", 0.4), ("b", 0.1)]])
        w = corrected_entropy(cl, EstimatorKind.WITHIN_ONLY)
        c = corrected_entropy(cl, EstimatorKind.COMBINED)
        assert math.isclose(w, c, abs_tol=1e-15)
        assert math.isclose(w, 0.5004, abs_tol=5e-5)
        assert rao_blackwell_entropy(cl) == 0.0

    def test_a_b(self):
        cl = clustering_from([[("a1", 0.3), ("a2", 0.3)], [("b", 0.2)]])
        oracle = estimators_direct([[[ln(0.3)], [ln(0.3)]], [[ln(0.2)]]])
        assert math.isclose(oracle["within_only"], 0.5199, abs_tol=5e-5)
        assert math.isclose(oracle["combined"], 1.0822, abs_tol=5e-5)
        assert math.isclose(corrected_entropy(cl, "within_only"), oracle["within_only"], abs_tol=1e-12)
        assert math.isclose(corrected_entropy(cl, "combined"), oracle["combined"], abs_tol=1e-12)

    def test_rejects_other_kinds(self):
        with pytest.raises(InvalidConfig):
            corrected_entropy(clustering_from([[("a", 0.1)]]), EstimatorKind.DISCRETE)


class TestReport:
    def test_without_logprobs(self):
        rep = entropy_report(cluster(make_sampleset(["yes", "no"]), BinaryRuleJudge()), "c1")
        assert math.isclose(rep.values[EstimatorKind.DISCRETE], ln(2))
        for k in (EstimatorKind.RAO_BLACKWELL, EstimatorKind.WITHIN_ONLY, EstimatorKind.COMBINED):
            assert rep.values[k] is None
        assert rep.to_dict()["values"]["combined"] is None

    def test_single_dedup(self):
        rep = entropy_report(cluster(make_sampleset(["yes", "yes"], [-1, -1]), BinaryRuleJudge()))
        assert all(v == 0.0 for v in rep.values.values())

    def test_cross_check(self):
        cl = clustering_from([[("a1", 0.3), ("a2", 0.3)], [("b", 0.2)]])
        rep = entropy_report(cl, "x")
        assert rep.values[EstimatorKind.RAO_BLACKWELL] == rao_blackwell_entropy(cl)
        assert rep.values[EstimatorKind.COMBINED] == corrected_entropy(cl, "combined")
        assert rep.values[EstimatorKind.WITHIN_ONLY] == corrected_entropy(cl, "within_only")
        assert rep.per_cluster_within[0] == (0, within_cluster_entropy(cl.clusters[0]))
        assert rep.cluster_count == 2 and rep.m == 3

    def test_bits(self):
        rep = entropy_report(clustering_from([[("a", 0.5)], [("b", 0.5)]]))
        assert math.isclose(rep.to_dict(bits=True)["values"]["rao_blackwell"], 1.0)
        assert math.isclose(nats_to_bits(ln(4)), 2.0)


# --- properties ---------------------------------------------------------------


def random_layout(rng, max_m=8):
    """Random clustering layout: clusters -> dedup members -> duplicate log-probs."""
    m = rng.randint(1, max_m)
    labels = [rng.randint(0, m - 1) for _ in range(m)]
    texts = [rng.choice(["p", "q", "r"]) for _ in range(m)]
    lps = [rng.uniform(-30, 0) for _ in range(m)]
    return labels, texts, lps


def spec_to_both(labels, texts, lps):
    order = sorted(set(labels), key=labels.index)
    assignment = [[i for i, l in enumerate(labels) if l == c] for c in order]
    # texts are made cluster-unique so dedup only merges within a cluster
    full_texts = [f"{labels[i]}-{texts[i]}" for i in range(len(texts))]
    cl = build_clustering(assignment, full_texts, lps)
    nested = []
    for members in assignment:
        groups = {}
        for i in members:
            groups.setdefault(full_texts[i], []).append(lps[i])
        nested.append(list(groups.values()))
    return cl, nested


@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_oracle_equivalence(seed):
    cl, nested = spec_to_both(*random_layout(random.Random(seed)))
    oracle = estimators_direct(nested)
    rep = entropy_report(cl)
    for kind, value in rep.values.items():
        assert value >= 0 and math.isfinite(value)
        assert abs(value - oracle[kind.value]) <= 1e-9
    k = rep.cluster_count
    assert rep.values[EstimatorKind.DISCRETE] <= ln(k) + 1e-12
    assert rep.values[EstimatorKind.RAO_BLACKWELL] <= ln(k) + 1e-12
    assert rep.values[EstimatorKind.COMBINED] >= rep.values[EstimatorKind.RAO_BLACKWELL]
    assert rep.values[EstimatorKind.COMBINED] >= rep.values[EstimatorKind.WITHIN_ONLY]
    for (i, h), c in zip(rep.per_cluster_within, cl.clusters):
        assert h <= ln(len(c.dedup_members)) + 1e-12


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), shift=st.floats(-500, 500))
def test_scale_invariance(seed, shift):
    labels, texts, lps = random_layout(random.Random(seed))
    a, _ = spec_to_both(labels, texts, lps)
    b, _ = spec_to_both(labels, texts, [lp + shift for lp in lps])
    ra, rb = entropy_report(a), entropy_report(b)
    for k in ra.values:
        assert abs(ra.values[k] - rb.values[k]) <= 1e-10


@settings(max_examples=200, deadline=None)
@given(probs=st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=8))
def test_maximized_by_uniform(probs):
    k = len(probs)
    cl = clustering_from([[(f"t{i}", p)] for i, p in enumerate(probs)])
    assert rao_blackwell_entropy(cl) <= ln(k) + 1e-12
    uniform = clustering_from([[(f"t{i}", 0.3)] for i in range(k)])
    assert math.isclose(rao_blackwell_entropy(uniform), ln(k), abs_tol=1e-12)
    assert math.isclose(discrete_entropy(uniform), ln(k), abs_tol=1e-12)
    point = clustering_from([[(f"t{i}", p) for i, p in enumerate(probs)]])
    assert rao_blackwell_entropy(point) == 0.0 and discrete_entropy(point) == 0.0


@settings(max_examples=200, deadline=None)
@given(probs=st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=8, unique=True))
def test_single_cluster_contrast(probs):
    cl = clustering_from([[(f"t{i}", p) for i, p in enumerate(probs)]])
    assert rao_blackwell_entropy(cl) == 0.0
    assert corrected_entropy(cl, EstimatorKind.WITHIN_ONLY) > 0
