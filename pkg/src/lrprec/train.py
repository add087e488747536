"""End-to-end training of the feature extractor and the distance head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import RelationGraph
from .metric import GLOBAL_USER, MetricHead, RelationInstance, loss_and_grads, positives, sample_negatives
from .model import RelationModel
from .network import backward, forward_batch, init_stack
from .optim import AdamState, adam_step


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 256
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "log_likelihood"
    init_seed: int = 0
    negative_seed: int = 1
    shuffle_seed: int = 2


def build_model(specs, input_shape, users, rank: int, relation_type: str, seed: int,
                loss: str = "log_likelihood") -> RelationModel:
    stack = init_stack(specs, seed, input_shape)
    head = MetricHead.init(users, rank, stack.feature_dim, seed + 7919)
    return RelationModel(stack, head, relation_type, loss, {"seed": seed})


def _batch_step(model, batch, images, state, settings, init_q: bool):
    items = sorted({x for inst in batch for x in (inst.i, inst.j)})
    trace = forward_batch(model.stack, np.stack([images[i] for i in items]))
    feats = {it: trace.features[n] for n, it in enumerate(items)}
    if init_q:
        # start at P ~ 0.5 for a typical pair
        res = loss_and_grads(batch, feats, model.head, settings.loss)
        model.head.q[...] = np.median(res.distances)
    res = loss_and_grads(batch, feats, model.head, settings.loss)
    # the cold-start metric learns from every pair but does not steer the features
    pooled = [RelationInstance(GLOBAL_USER, b.i, b.j, b.type, b.label) for b in batch]
    res_global = loss_and_grads(pooled, feats, model.head, settings.loss)

    n = len(batch)
    g_feat = np.stack([res.grad_features[it] for it in items])
    param_grads, _ = backward(model.stack, trace, -g_feat / n)
    grads = {}
    for idx, p in enumerate(param_grads):
        for name, g in p.items():
            grads[f"{idx}.{name}"] = g
    for u, f in model.head.factors.items():
        g = res_global.grad_factors.get(u) if u == GLOBAL_USER else res.grad_factors.get(u)
        grads[f"E.{u}"] = np.zeros_like(f) if g is None else -g / n
    grads["q"] = np.asarray(-res.grad_q / n)
    params = {**model.stack.named_params(), **model.head.named_params()}
    adam_step(state, params, grads)

    correct = np.where([b.label for b in batch], res.probabilities >= 0.5, res.probabilities < 0.5)
    return res.objective / n, float(correct.mean())


def train(model: RelationModel, images: dict, train_graph: RelationGraph, universe: RelationGraph,
          settings: TrainSettings, log=None) -> list:
    """Maximize the pairwise log-likelihood with ADAM (by descending its negation).

    Each epoch draws a fresh negative set of the same size as the positives.
    ``log`` receives one dict per batch: epoch, step, objective (mean per
    pair) and batch accuracy. Returns the list of those dicts.
    """
    state = AdamState(settings.lr, settings.beta1, settings.beta2, settings.eps)
    rng = np.random.default_rng(settings.shuffle_seed)
    pos = positives(train_graph)
    history = []
    step = 0
    for epoch in range(settings.epochs):
        neg = sample_negatives(train_graph, settings.negative_seed + epoch, universe=universe)
        instances = pos + neg
        order = rng.permutation(len(instances))
        for start in range(0, len(order), settings.batch_size):
            batch = [instances[k] for k in order[start:start + settings.batch_size]]
            objective, acc = _batch_step(model, batch, images, state, settings, init_q=(step == 0))
            rec = {"epoch": epoch, "step": step, "objective": objective, "accuracy": acc}
            history.append(rec)
            if log is not None:
                log(rec)
            step += 1
    return history
