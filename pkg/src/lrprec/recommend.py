"""Top-k recommendation by personalized link probability, with explanations."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import ItemCatalog, atomic_write
from .errors import UnknownKeyError
from .lrp import HeatmapPair, explain_pair
from .model import RelationModel


class FeatureIndex:
    """Features of every catalog item, computed once per model fingerprint."""

    def __init__(self, model: RelationModel, catalog: ItemCatalog, images: dict):
        self.fingerprint = model.fingerprint()
        self.catalog = catalog
        ids = [i for i in catalog.ids() if i in images]
        feats = model.features(np.stack([images[i] for i in ids])) if ids else np.zeros((0, 0))
        self.ids = ids
        self.matrix = feats
        self.slot = {i: n for n, i in enumerate(ids)}

    def check(self, model: RelationModel) -> None:
        if model.fingerprint() != self.fingerprint:
            raise RuntimeError("feature index was built for a different checkpoint; rebuild it")

    def __getitem__(self, item_id):
        return self.matrix[self.slot[item_id]]


@dataclass
class RecommendationList:
    query: str
    user: str
    relation_type: str
    by_category: dict = field(default_factory=dict)  # category -> [(item, probability)]

    def records(self) -> list:
        out = []
        for cat, ranked in self.by_category.items():
            for rank, (item, prob) in enumerate(ranked, start=1):
                out.append({"query": self.query, "user": self.user, "type": self.relation_type,
                            "category": cat, "rank": rank, "item": item, "probability": prob})
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())


def recommend(model: RelationModel, index: FeatureIndex, query: str, user: str, k: int = 3,
              categories=None, cold_start: bool = False) -> RecommendationList:
    """Exact top-``k`` items by P per product category, query excluded.

    Ties are broken by ascending item id. ``categories`` restricts the
    categories considered. Unknown users raise unless ``cold_start`` is set,
    in which case the shared fallback metric is used.
    """
    if query not in index.slot:
        raise UnknownKeyError(f"unknown query item {query!r}")
    if user not in model.head.factors and not cold_start:
        raise UnknownKeyError(f"unknown user {user!r}")
    wanted = None if categories is None else set([categories] if isinstance(categories, str) else categories)
    xq = index[query]
    out = RecommendationList(query, user, model.relation_type)
    cats = index.catalog.categories if wanted is None else sorted(wanted)
    for cat in cats:
        cands = [i for i in index.ids if i != query and index.catalog.items[i].category == cat]
        if not cands:
            out.by_category[cat] = []
            continue
        feats = index.matrix[[index.slot[i] for i in cands]]
        probs = model.pair_probabilities(user, xq[None, :], feats)
        ranked = sorted(zip(cands, probs.tolist()), key=lambda t: (-t[1], t[0]))
        out.by_category[cat] = ranked[:k]
    return out


def write_recommendations(lists, path) -> None:
    atomic_write(path, "".join(r.to_jsonl() for r in lists))


def explain_recommendation(model: RelationModel, images: dict, query: str, item: str, user: str,
                           epsilon: float = 0.0, relevance_source: str = "probability") -> HeatmapPair:
    for it in (query, item):
        if it not in images:
            raise UnknownKeyError(f"unknown item {it!r}")
    return explain_pair(model.stack, model.metric(user), images[query], images[item], epsilon,
                        relevance_source)
