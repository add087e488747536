"""Personalized low-rank Mahalanobis head and the pairwise training objective.

Each user owns a factor ``E`` of shape ``[D, K]`` so that the user's metric is
``M = E.T @ E``; a single shift ``q`` is shared by all users. The probability
that two items are related is ``1 / (1 + exp(d - q))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .data import RELATION_TYPES, RelationGraph
from .errors import DimensionError, SamplingExhaustedError, UnknownKeyError

GLOBAL_USER = "*"
LOSSES = ("log_likelihood", "shifted_softplus")


@dataclass
class UserMetric:
    user: str
    factor: np.ndarray  # [D, K]
    q: float = 0.0

    @property
    def matrix(self) -> np.ndarray:
        return self.factor.T @ self.factor


@dataclass
class MetricHead:
    """All users' factors plus the shared shift; arrays are updated in place."""
    factors: dict
    q: np.ndarray = field(default_factory=lambda: np.zeros(()))

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64).reshape(())

    @classmethod
    def init(cls, users, rank: int, feature_dim: int, seed: int, q: float = 0.0) -> "MetricHead":
        """Random factors scaled so that distances start at the scale of ``|x_i - x_j|^2``."""
        rng = np.random.default_rng(seed)
        factors = {}
        for u in sorted(set(users) | {GLOBAL_USER}):
            factors[u] = rng.normal(0.0, 1.0 / math.sqrt(rank), size=(rank, feature_dim))
        return cls(factors, np.asarray(q, dtype=np.float64))

    @property
    def rank(self) -> int:
        return next(iter(self.factors.values())).shape[0]

    def metric_for(self, user: str, fallback: bool = True) -> UserMetric:
        if user in self.factors:
            return UserMetric(user, self.factors[user], float(self.q))
        if fallback and GLOBAL_USER in self.factors:
            return UserMetric(user, self.factors[GLOBAL_USER], float(self.q))
        raise UnknownKeyError(f"no metric for user {user!r}")

    def named_params(self) -> dict:
        out = {f"E.{u}": f for u, f in sorted(self.factors.items())}
        out["q"] = self.q
        return out


def _check_pair(metric: UserMetric, xi, xj):
    xi = np.asarray(xi, dtype=np.float64)
    xj = np.asarray(xj, dtype=np.float64)
    k = metric.factor.shape[1]
    if xi.shape != (k,) or xj.shape != (k,):
        raise DimensionError(f"feature vectors must have length {k}, got {xi.shape} and {xj.shape}")
    return xi, xj


def distance(metric: UserMetric, xi, xj) -> float:
    """``(xi - xj) M (xi - xj)^T`` evaluated as ``||E (xi - xj)||^2``."""
    xi, xj = _check_pair(metric, xi, xj)
    proj = metric.factor @ (xi - xj)
    return float(proj @ proj)


def probability_from_distance(d, q):
    return expit(np.asarray(q) - np.asarray(d))


def link_probability(metric: UserMetric, xi, xj) -> float:
    return float(probability_from_distance(distance(metric, xi, xj), metric.q))


@dataclass(frozen=True)
class RelationInstance:
    user: str
    i: str
    j: str
    type: str
    label: bool  # True for a pair in R, False for a sampled negative

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError(f"relation instance needs two distinct items, got {self.i!r} twice")
        if self.type not in RELATION_TYPES:
            raise ValueError(f"unknown relation type {self.type!r}")


def positives(graph: RelationGraph) -> list:
    return [RelationInstance(e.user, e.src, e.dst, e.type, True) for e in graph.edges]


def sample_negatives(graph: RelationGraph, seed: int, universe: RelationGraph | None = None,
                     max_tries_per_pair: int = 50) -> list:
    """Sample one unrelated pair per edge of ``graph``.

    For every (user, relation type) stratum, pairs are drawn uniformly from
    the items the user interacts with in ``universe`` (default: ``graph``)
    and rejected if related there or already drawn. Gives up with
    SamplingExhaustedError once a stratum has used
    ``max_tries_per_pair * n + 100`` draws, or immediately if fewer than
    ``n`` unrelated pairs exist.
    """
    universe = graph if universe is None else universe
    rng = np.random.default_rng(seed)
    out = []
    for (user, rel_type), n in graph.strata().items():
        pool = universe.user_items(user) or graph.user_items(user)
        if len(pool) < 2:
            raise SamplingExhaustedError(f"user {user!r} has fewer than two items to pair")
        related = universe.pairs(user, rel_type) | graph.pairs(user, rel_type)
        available = len(pool) * (len(pool) - 1) // 2 - len(related)
        if available < n:
            raise SamplingExhaustedError(
                f"user {user!r}, type {rel_type!r}: need {n} unrelated pairs, only {available} exist"
            )
        chosen, order = set(), []
        budget = max_tries_per_pair * n + 100
        tries = 0
        while len(order) < n:
            if tries >= budget:
                raise SamplingExhaustedError(
                    f"user {user!r}, type {rel_type!r}: found {len(order)}/{n} negatives in {budget} draws"
                )
            draws = rng.integers(0, len(pool), size=(2 * (n - len(order)) + 8, 2))
            for a, b in draws:
                tries += 1
                if a == b:
                    continue
                pair = (pool[a], pool[b]) if pool[a] < pool[b] else (pool[b], pool[a])
                if pair in related or pair in chosen:
                    continue
                chosen.add(pair)
                order.append(pair)
                if len(order) == n or tries >= budget:
                    break
        out.extend(RelationInstance(user, i, j, rel_type, False) for i, j in order)
    return out


@dataclass
class LossResult:
    objective: float
    grad_factors: dict  # user -> [D, K]
    grad_q: float
    grad_features: dict  # item -> [K]
    distances: np.ndarray
    probabilities: np.ndarray


def loss_and_grads(batch, features, head: MetricHead, loss: str = "log_likelihood") -> LossResult:
    """Objective (to be maximized) over ``batch`` and its exact gradients.

    ``log_likelihood``: sum of log P over positives plus log(1 - P) over
    negatives. ``shifted_softplus`` swaps the negative term for
    ``1 + log(1 + exp(d - q))``.
    """
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")
    batch = list(batch)
    if not batch:
        return LossResult(0.0, {}, 0.0, {}, np.zeros(0), np.zeros(0))
    item_ids = sorted({x for inst in batch for x in (inst.i, inst.j)})
    for it in item_ids:
        if it not in features:
            raise UnknownKeyError(f"no feature vector for item {it!r}")
    for u in {inst.user for inst in batch}:
        if u not in head.factors:
            raise UnknownKeyError(f"no metric for user {u!r}")
    slot = {it: n for n, it in enumerate(item_ids)}
    X = np.stack([np.asarray(features[it], dtype=np.float64) for it in item_ids])
    ii = np.array([slot[inst.i] for inst in batch])
    jj = np.array([slot[inst.j] for inst in batch])
    label = np.array([inst.label for inst in batch])
    delta = X[ii] - X[jj]

    d = np.empty(len(batch))
    proj = np.empty((len(batch), head.rank))
    groups = {}
    for n, inst in enumerate(batch):
        groups.setdefault(inst.user, []).append(n)
    groups = {u: np.array(idx) for u, idx in sorted(groups.items())}
    for u, idx in groups.items():
        proj[idx] = delta[idx] @ head.factors[u].T
    d[:] = np.einsum("bd,bd->b", proj, proj)

    q = float(head.q)
    z = d - q
    prob = expit(-z)
    if loss == "log_likelihood":
        terms = np.where(label, log_expit(-z), log_expit(z))
        g_d = np.where(label, -expit(z), prob)
    else:
        terms = np.where(label, log_expit(-z), 1.0 + np.logaddexp(0.0, z))
        g_d = np.where(label, -expit(z), expit(z))
    objective = float(terms.sum())

    grad_factors = {}
    g_delta = np.empty_like(delta)
    for u, idx in groups.items():
        weighted = 2.0 * g_d[idx, None] * proj[idx]
        grad_factors[u] = weighted.T @ delta[idx]
        g_delta[idx] = weighted @ head.factors[u]
    g_X = np.zeros_like(X)
    np.add.at(g_X, ii, g_delta)
    np.add.at(g_X, jj, -g_delta)
    return LossResult(
        objective=objective,
        grad_factors=grad_factors,
        grad_q=float(-g_d.sum()),
        grad_features={it: g_X[n] for it, n in slot.items()},
        distances=d,
        probabilities=prob,
    )
