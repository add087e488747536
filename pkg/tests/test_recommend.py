import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrprec.data import Item, ItemCatalog
from lrprec.errors import UnknownKeyError
from lrprec.metric import MetricHead
from lrprec.model import RelationModel
from lrprec.network import LayerSpec as L, init_stack
from lrprec.recommend import FeatureIndex, explain_recommendation, recommend, write_recommendations

from toy import group_model


def catalog_of(spec):
    return ItemCatalog({i: Item(i, cat, f"{i}.ppm") for i, cat in spec})


def test_closest_candidate_wins():
    # q = 1: candidate a sits at d = 1 = q, candidate b at d = 2 = q + 1
    model = group_model(q=1.0)
    images = {"q": np.array([[[0.0, 0.0]]]), "a": np.array([[[1.0, 0.0]]]),
              "b": np.array([[[0.0, math.sqrt(2.0)]]])}
    cat = catalog_of([("q", "x"), ("a", "x"), ("b", "x")])
    rec = recommend(model, FeatureIndex(model, cat, images), "q", "u", k=1)
    assert rec.by_category["x"][0][0] == "a"
    assert rec.by_category["x"][0][1] == pytest.approx(0.5)
    full = recommend(model, FeatureIndex(model, cat, images), "q", "u", k=5).by_category["x"]
    assert full[1][1] == pytest.approx(1 / (1 + math.e))


def test_catalog_with_only_the_query():
    model = group_model()
    images = {"q": np.zeros((1, 1, 2))}
    rec = recommend(model, FeatureIndex(model, catalog_of([("q", "x")]), images), "q", "u")
    assert rec.by_category == {"x": []}
    assert rec.records() == []


def random_setup(seed, n=20):
    stack = init_stack([L.conv(1, 2, 3, 1, 1), L.relu(), L.flatten(), L.dense(2 * 16, 4)], seed, (1, 4, 4))
    head = MetricHead.init(["u", "v"], 3, 4, seed, q=1.0)
    model = RelationModel(stack, head, "also_bought")
    rng = np.random.default_rng(seed)
    images = {f"i{k:02d}": rng.uniform(size=(1, 4, 4)) for k in range(n)}
    cat = catalog_of([(i, "a" if k % 3 else "b") for k, i in enumerate(images)])
    return model, images, cat


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 500), st.integers(1, 25))
def test_ranking_equals_exhaustive_sort(seed, k):
    model, images, cat = random_setup(seed)
    index = FeatureIndex(model, cat, images)
    rec = recommend(model, index, "i00", "v", k=k)
    for c in ("a", "b"):
        brute = []
        for item, it in cat.items.items():
            if item != "i00" and it.category == c:
                brute.append((item, model.probability("v", images["i00"], images[item])))
        brute.sort(key=lambda t: (-t[1], t[0]))
        got = rec.by_category[c]
        assert [i for i, _ in got] == [i for i, _ in brute[:k]]
        np.testing.assert_allclose([p for _, p in got], [p for _, p in brute[:k]], rtol=1e-12)
        probs = [p for _, p in got]
        assert probs == sorted(probs, reverse=True)


def test_ties_break_by_item_id():
    model = group_model()
    images = {"q": np.zeros((1, 1, 2)), "z": np.ones((1, 1, 2)), "m": np.ones((1, 1, 2)),
              "a": np.ones((1, 1, 2))}
    cat = catalog_of([(i, "x") for i in images])
    rec = recommend(model, FeatureIndex(model, cat, images), "q", "u", k=3)
    assert [i for i, _ in rec.by_category["x"]] == ["a", "m", "z"]


@pytest.mark.parametrize("shift", [-3.0, 0.5, 10.0])
def test_ranking_invariant_to_shift(shift):
    model, images, cat = random_setup(7)
    before = recommend(model, FeatureIndex(model, cat, images), "i03", "u", k=20)
    model.head.q[...] = float(model.head.q) + shift
    after = recommend(model, FeatureIndex(model, cat, images), "i03", "u", k=20)
    for c in before.by_category:
        assert [i for i, _ in before.by_category[c]] == [i for i, _ in after.by_category[c]]


def test_topk_of_union_equals_merged_topk():
    model, images, cat = random_setup(3)
    index = FeatureIndex(model, cat, images)
    whole = recommend(model, index, "i00", "u", k=4)
    for c, ranked in whole.by_category.items():
        members = sorted(i for i, it in cat.items.items() if it.category == c and i != "i00")
        half1, half2 = set(members[::2]), set(members[1::2])
        merged = []
        for half in (half1, half2):
            sub = ItemCatalog({i: cat.items[i] for i in cat.items if i in half or i == "i00"})
            merged += recommend(model, FeatureIndex(model, sub, images), "i00", "u", k=4).by_category[c]
        merged.sort(key=lambda t: (-t[1], t[0]))
        assert merged[:4] == ranked


def test_category_filter_and_unknown_lookups():
    model, images, cat = random_setup(1)
    index = FeatureIndex(model, cat, images)
    assert list(recommend(model, index, "i00", "u", categories="b").by_category) == ["b"]
    with pytest.raises(UnknownKeyError):
        recommend(model, index, "nope", "u")
    with pytest.raises(UnknownKeyError):
        recommend(model, index, "i00", "stranger")
    cold = recommend(model, index, "i00", "stranger", cold_start=True)
    assert cold.by_category["a"]


def test_recommend_is_read_only(tmp_path):
    model, images, cat = random_setup(2)
    before = model.fingerprint()
    index = FeatureIndex(model, cat, images)
    recommend(model, index, "i05", "u", k=3)
    assert model.fingerprint() == before
    index.check(model)
    model.head.q[...] = 99.0
    with pytest.raises(RuntimeError):
        index.check(model)


def test_jsonl_records(tmp_path):
    model, images, cat = random_setup(4)
    rec = recommend(model, FeatureIndex(model, cat, images), "i01", "u", k=2)
    write_recommendations([rec], tmp_path / "r.jsonl")
    lines = [json.loads(x) for x in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert len(lines) == 4
    assert set(lines[0]) == {"query", "user", "type", "category", "rank", "item", "probability"}
    assert [r["rank"] for r in lines] == [1, 2, 1, 2]


def test_explanation_symmetric_for_identical_images():
    stack = init_stack([L.conv(1, 2, 3, 1, 1, bias=False), L.flatten(), L.dense(32, 4, bias=False)], 0, (1, 4, 4))
    model = RelationModel(stack, MetricHead.init(["u"], 3, 4, 0, q=0.4), "also_viewed")
    img = np.random.default_rng(0).uniform(size=(1, 4, 4))
    hp = explain_recommendation(model, {"a": img, "b": img.copy()}, "a", "b", "u")
    assert hp.heatmap_i.sum() == pytest.approx(hp.heatmap_j.sum(), abs=1e-9)
    assert hp.total == pytest.approx(hp.prediction, abs=1e-8)
    with pytest.raises(UnknownKeyError):
        explain_recommendation(model, {"a": img}, "a", "zz", "u")


def test_explanation_conserves_on_bias_free_relu_stack():
    stack = init_stack([L.conv(1, 3, 3, 1, 1, bias=False), L.relu(), L.maxpool(2), L.flatten(),
                        L.dense(12, 5, bias=False)], 3, (1, 4, 4))
    model = RelationModel(stack, MetricHead.init(["u"], 2, 5, 1, q=0.2), "also_viewed")
    rng = np.random.default_rng(5)
    images = {"a": rng.uniform(size=(1, 4, 4)), "b": rng.uniform(size=(1, 4, 4))}
    hp = explain_recommendation(model, images, "a", "b", "u")
    assert hp.total == pytest.approx(model.probability("u", images["a"], images["b"]), rel=1e-8)
