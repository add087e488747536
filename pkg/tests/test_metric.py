import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrprec.data import Edge, RelationGraph
from lrprec.errors import DimensionError, SamplingExhaustedError, UnknownKeyError
from lrprec.metric import (GLOBAL_USER, MetricHead, RelationInstance, UserMetric, distance, link_probability,
                           loss_and_grads, positives, probability_from_distance, sample_negatives)

from oracles import finite_difference, relative_gap

vec = st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3).map(np.array)


def random_metric(seed, D=4, K=3, q=0.0):
    return UserMetric("u", np.random.default_rng(seed).normal(size=(D, K)), q)


def test_distance_of_coincident_points_is_zero():
    m = random_metric(0)
    x = np.array([1.0, -2.0, 0.5])
    assert distance(m, x, x) == 0.0


def test_euclidean_case():
    assert distance(UserMetric("u", np.eye(2)), [1, 0], [0, 1]) == 2.0


def test_distance_matches_dense_matrix():
    rng = np.random.default_rng(1)
    E = rng.normal(size=(5, 7))
    xi, xj = rng.normal(size=(2, 7))
    delta = xi - xj
    ref = delta @ (E.T @ E) @ delta
    assert distance(UserMetric("u", E), xi, xj) == pytest.approx(ref, rel=1e-12)


def test_distance_length_mismatch():
    with pytest.raises(DimensionError):
        distance(random_metric(0), np.zeros(3), np.zeros(4))


@given(vec, vec, st.integers(0, 1000))
def test_distance_symmetric_and_nonnegative(a, b, seed):
    m = random_metric(seed)
    assert distance(m, a, b) == distance(m, b, a)
    assert distance(m, a, b) >= 0


@given(vec, vec, st.floats(0.1, 10))
def test_scaling_factor_scales_distance_quadratically(a, b, c):
    m = random_metric(2)
    scaled = UserMetric("u", c * m.factor)
    assert distance(scaled, a, b) == pytest.approx(c * c * distance(m, a, b), rel=1e-12, abs=1e-300)


def test_metric_matrix_is_psd():
    M = random_metric(3, D=2, K=4).matrix
    np.testing.assert_allclose(M, M.T)
    assert np.linalg.eigvalsh(M).min() > -1e-12


def test_probability_closed_forms():
    assert probability_from_distance(1.7, 1.7) == pytest.approx(0.5)
    assert probability_from_distance(1.7 + math.log(3), 1.7) == pytest.approx(0.25)
    x = np.array([1.0, 2.0, 3.0])
    assert link_probability(random_metric(0, q=0.0), x, x) == 0.5


@given(st.floats(-25, 25), st.floats(0.01, 20), st.floats(-10, 10))
def test_probability_monotone(d1, gap, q):
    # |q - d| stays below ~35, where float64 can still tell P apart from 1
    assert probability_from_distance(d1, q) > probability_from_distance(d1 + gap, q)
    assert probability_from_distance(d1, q + gap) > probability_from_distance(d1, q)


def test_probability_extremes_stay_finite():
    assert probability_from_distance(1e6, 0.0) == 0.0
    assert probability_from_distance(0.0, 1e6) == 1.0


def test_head_fallback_to_global_user():
    head = MetricHead.init(["a", "b"], 3, 4, 0)
    assert GLOBAL_USER in head.factors
    np.testing.assert_array_equal(head.metric_for("zzz").factor, head.factors[GLOBAL_USER])
    with pytest.raises(UnknownKeyError):
        head.metric_for("zzz", fallback=False)


def test_relation_instance_rejects_self_pair():
    with pytest.raises(ValueError):
        RelationInstance("u", "a", "a", "also_viewed", True)


def chain_graph(n_edges=10, n_items=12):
    return RelationGraph([Edge("u", f"i{k:02d}", f"i{k + 1:02d}", "also_viewed") for k in range(n_edges)]
                         + [Edge("u", f"i{n_items - 2:02d}", f"i{n_items - 1:02d}", "also_bought")])


def test_negatives_match_size_and_avoid_positives():
    g = chain_graph()
    neg = sample_negatives(g, seed=4)
    assert len(neg) == len(g)
    for inst in neg:
        assert not inst.label
        assert not g.has(inst.user, inst.i, inst.j, inst.type)
    counts = {}
    for inst in neg:
        counts[(inst.user, inst.type)] = counts.get((inst.user, inst.type), 0) + 1
    assert counts == g.strata()
    assert len({(n.type, n.i, n.j) for n in neg}) == len(neg)


def test_negatives_deterministic():
    g = chain_graph()
    assert sample_negatives(g, 7) == sample_negatives(g, 7)
    assert sample_negatives(g, 7) != sample_negatives(g, 8)


def test_complete_graph_exhausts():
    g = RelationGraph([Edge("u", a, b, "also_viewed") for a, b in [("a", "b"), ("a", "c"), ("b", "c")]])
    with pytest.raises(SamplingExhaustedError):
        sample_negatives(g, 0)


def one_pair_head(q, E=None):
    E = np.eye(2) if E is None else E
    return MetricHead({"u": E.copy()}, np.asarray(q))


@pytest.mark.parametrize("label,dq", [(True, 0.5), (False, -0.5)])
def test_loss_at_midpoint(label, dq):
    feats = {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])}  # d = 2
    res = loss_and_grads([RelationInstance("u", "a", "b", "also_viewed", label)], feats, one_pair_head(2.0))
    assert res.objective == pytest.approx(math.log(0.5))
    assert res.grad_q == pytest.approx(dq)


def test_loss_unknown_item_or_user():
    feats = {"a": np.zeros(2), "b": np.ones(2)}
    with pytest.raises(UnknownKeyError):
        loss_and_grads([RelationInstance("u", "a", "c", "also_viewed", True)], feats, one_pair_head(0.0))
    with pytest.raises(UnknownKeyError):
        loss_and_grads([RelationInstance("v", "a", "b", "also_viewed", True)], feats, one_pair_head(0.0))


def random_batch(seed, K=4, D=3, n_items=6, n=12):
    rng = np.random.default_rng(seed)
    head = MetricHead.init(["u", "v"], D, K, seed, q=0.5)
    feats = {f"i{k}": rng.normal(size=K) for k in range(n_items)}
    batch = []
    for _ in range(n):
        a, b = rng.choice(n_items, 2, replace=False)
        batch.append(RelationInstance(str(rng.choice(["u", "v"])), f"i{a}", f"i{b}", "also_viewed",
                                      bool(rng.integers(2))))
    return batch, feats, head


@pytest.mark.parametrize("loss", ["log_likelihood", "shifted_softplus"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_gradients_match_finite_differences(seed, loss):
    batch, feats, head = random_batch(seed)

    def f():
        return loss_and_grads(batch, feats, head, loss).objective

    res = loss_and_grads(batch, feats, head, loss)
    for u in res.grad_factors:
        assert relative_gap(res.grad_factors[u], finite_difference(f, head.factors[u])) < 1e-4
    assert relative_gap(np.array(res.grad_q), finite_difference(f, head.q)) < 1e-4
    for it, g in res.grad_features.items():
        assert relative_gap(g, finite_difference(f, feats[it])) < 1e-4


def test_loss_is_stable_for_huge_distances():
    feats = {"a": np.array([1e4, 0.0]), "b": np.zeros(2)}
    res = loss_and_grads([RelationInstance("u", "a", "b", "also_viewed", True),
                          RelationInstance("u", "b", "a", "also_viewed", False)], feats, one_pair_head(0.0))
    assert np.isfinite(res.objective)
    assert res.objective == pytest.approx(-1e8, rel=1e-9)


def test_positives_mirror_edges():
    g = chain_graph()
    pos = positives(g)
    assert len(pos) == len(g) and all(p.label for p in pos)
