"""Accuracy reports and perturbation (pixel-flipping) curves."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from .data import RelationGraph, atomic_write
from .errors import AggregationError, EvaluationError, PerturbationRangeError
from .lrp import HeatmapPair
from .metric import positives, sample_negatives
from .model import RelationModel

POLICIES = ("lrp", "random")
ORDERINGS = ("global", "per_branch_equal")


@dataclass(frozen=True)
class AccuracyRow:
    category: str
    relation_type: str
    D: int
    accuracy: float  # percent
    n: int  # number of test instances behind the figure


@dataclass
class AccuracyReport:
    rows: list = field(default_factory=list)

    def lookup(self, category: str, relation_type: str, D: int) -> AccuracyRow:
        for r in self.rows:
            if (r.category, r.relation_type, r.D) == (category, relation_type, D):
                return r
        raise KeyError((category, relation_type, D))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "relation_type", "D", "accuracy"])
        for r in self.rows:
            w.writerow([r.category, r.relation_type, r.D, f"{r.accuracy:.4f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write(path, self.to_csv())


def feature_table(model: RelationModel, images: dict, items=None) -> dict:
    items = sorted(images) if items is None else list(items)
    feats = model.features(np.stack([images[i] for i in items]))
    return dict(zip(items, feats))


def labelled_instances(test_graph: RelationGraph, universe: RelationGraph, seed: int) -> list:
    """Test positives followed by an equal number of sampled negatives.

    Negatives come per (user, type) stratum, so negative ``k`` of a stratum
    is paired with positive ``k`` of the same stratum.
    """
    if len(test_graph) == 0:
        raise EvaluationError("the test split is empty")
    return positives(test_graph) + sample_negatives(test_graph, seed, universe=universe)


def score_instances(model: RelationModel, instances, features: dict) -> np.ndarray:
    out = np.empty(len(instances))
    by_user = {}
    for n, inst in enumerate(instances):
        by_user.setdefault(inst.user, []).append(n)
    for user, idx in by_user.items():
        xi = np.stack([features[instances[n].i] for n in idx])
        xj = np.stack([features[instances[n].j] for n in idx])
        out[idx] = model.pair_probabilities(user, xi, xj)
    return out


def evaluate_accuracy(model: RelationModel, images: dict, test_graph: RelationGraph,
                      universe: RelationGraph, categories: dict, seed: int,
                      threshold: float = 0.5, features: dict | None = None) -> AccuracyReport:
    """Balanced accuracy rows per (category, relation type) for one model.

    Each test positive is matched with one sampled negative from the same
    (user, type) stratum; the matched pair is filed under the category of the
    positive's source item, which keeps every category balanced.
    """
    if len(test_graph) == 0:
        raise EvaluationError("the test split is empty")
    D = model.rank
    rows = []
    for rel_type in sorted({e.type for e in test_graph.edges}):
        sub = test_graph.of_type(rel_type)
        pos = positives(sub)
        neg = sample_negatives(sub, seed, universe=universe)
        # both lists are ordered stratum by stratum with equal counts
        pos.sort(key=lambda r: (r.user, r.type))
        feats = features if features is not None else feature_table(
            model, images, sorted({x for r in pos + neg for x in (r.i, r.j)}))
        p_pos = score_instances(model, pos, feats)
        p_neg = score_instances(model, neg, feats)
        ok = np.concatenate([p_pos >= threshold, p_neg < threshold])
        cats = [categories[r.i] for r in pos]
        cats = np.array(cats + cats)
        for cat in sorted(set(cats)):
            sel = cats == cat
            rows.append(AccuracyRow(cat, rel_type, D, 100.0 * float(ok[sel].mean()), int(sel.sum())))
    return AccuracyReport(rows)


# -- perturbation ------------------------------------------------------------

@dataclass
class PairCurve:
    steps: np.ndarray  # 0, 1, ..., n_steps
    probabilities: np.ndarray
    policy: str
    seed: int


@dataclass
class PerturbationCurve:
    epsilon: float | None
    policy: str
    steps: np.ndarray
    accuracy: np.ndarray  # percent
    pixels_per_step: int
    seed: int

    @property
    def points(self) -> list:
        return list(zip(self.steps.tolist(), self.accuracy.tolist()))

    def auc(self) -> float:
        return curve_auc(self.steps, self.accuracy)


def curve_auc(steps, values) -> float:
    """Trapezoidal area normalized by the step range (mean height of the curve)."""
    steps = np.asarray(steps, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(steps) < 2:
        return float(values[0]) if len(values) else 0.0
    return float(integrate.trapezoid(values, steps) / (steps[-1] - steps[0]))


def perturbation_order(heatmaps: HeatmapPair | None, shape: tuple, policy: str, rng,
                       ordering: str = "global") -> np.ndarray:
    """Rows of (branch, row, col) in the order pixels get replaced."""
    h, w = shape
    if policy == "random":
        flat = rng.permutation(2 * h * w)
        branch, rest = np.divmod(flat, h * w)
        row, col = np.divmod(rest, w)
        return np.stack([branch, row, col], axis=1)
    if policy != "lrp":
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    if heatmaps is None:
        raise ValueError("the lrp policy needs heatmaps")
    if ordering == "global":
        return heatmaps.ranking
    if ordering != "per_branch_equal":
        raise ValueError(f"unknown ordering {ordering!r}; expected one of {ORDERINGS}")
    rank = heatmaps.ranking
    a, b = rank[rank[:, 0] == 0], rank[rank[:, 0] == 1]
    out = np.empty_like(rank)
    out[0::2], out[1::2] = a, b
    return out


def perturb_and_rescore(model: RelationModel, user: str, image_i, image_j, heatmaps: HeatmapPair | None,
                        steps: int, pixels_per_step: int, policy: str, seed: int,
                        ordering: str = "global") -> PairCurve:
    """Replace pixels in order, ``pixels_per_step`` at a time, and rescore.

    Replaced pixels get independent uniform[0, 1) values per channel. The
    input images are copied, never modified. Point 0 is the unperturbed
    probability.
    """
    image_i = np.asarray(image_i, dtype=np.float64)
    image_j = np.asarray(image_j, dtype=np.float64)
    c, h, w = image_i.shape
    if steps < 0 or pixels_per_step < 1:
        raise PerturbationRangeError(f"need steps >= 0 and pixels_per_step >= 1, got {steps}, {pixels_per_step}")
    if steps * pixels_per_step > 2 * h * w:
        raise PerturbationRangeError(
            f"{steps} steps x {pixels_per_step} pixels exceeds the {2 * h * w} pixels of the pair"
        )
    rng = np.random.default_rng(seed)
    order = perturbation_order(heatmaps, (h, w), policy, rng, ordering)
    work = np.stack([image_i, image_j]).copy()
    frames = [work.copy()]
    for s in range(steps):
        coords = order[s * pixels_per_step:(s + 1) * pixels_per_step]
        work[coords[:, 0], :, coords[:, 1], coords[:, 2]] = rng.uniform(0.0, 1.0, size=(len(coords), c))
        frames.append(work.copy())
    frames = np.stack(frames)  # [steps+1, 2, C, H, W]
    feats = model.features(frames.reshape((-1,) + image_i.shape)).reshape(steps + 1, 2, -1)
    probs = model.pair_probabilities(user, feats[:, 0], feats[:, 1])
    return PairCurve(np.arange(steps + 1), np.asarray(probs, dtype=np.float64), policy, seed)


def aggregate_curves(curves, threshold: float = 0.5, epsilon: float | None = None,
                     pixels_per_step: int = 1, seed: int = 0) -> PerturbationCurve:
    """Per step, the percentage of pairs still scored as related (P >= threshold)."""
    curves = list(curves)
    if not curves:
        raise AggregationError("no curves to aggregate")
    grid = curves[0].steps
    for c in curves[1:]:
        if c.steps.shape != grid.shape or not np.array_equal(c.steps, grid):
            raise AggregationError("curves were computed on different step grids")
    policies = {c.policy for c in curves}
    if len(policies) != 1:
        raise AggregationError(f"cannot mix policies {sorted(policies)}")
    still = np.stack([c.probabilities >= threshold for c in curves])
    return PerturbationCurve(epsilon, policies.pop(), grid.copy(), 100.0 * still.mean(axis=0),
                             pixels_per_step, seed)


def curves_csv(curves) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["policy", "epsilon", "step", "accuracy"])
    for cur in curves:
        eps = "" if cur.epsilon is None else repr(float(cur.epsilon))
        for s, a in cur.points:
            wr.writerow([cur.policy, eps, s, f"{a:.4f}"])
    return buf.getvalue()


def curves_gnuplot(curves) -> str:
    """One block per curve separated by two blank lines (gnuplot ``index``)."""
    blocks = []
    for cur in curves:
        eps = "none" if cur.epsilon is None else repr(float(cur.epsilon))
        lines = [f"# policy={cur.policy} epsilon={eps}", "# step accuracy"]
        lines += [f"{s} {a:.4f}" for s, a in cur.points]
        blocks.append("\n".join(lines))
    return "\n\n\n".join(blocks) + "\n"


def compare_auc(lrp_aucs, random_aucs) -> dict:
    """One-sided paired t-test of H1: LRP-ordered AUC < random-ordered AUC."""
    lrp_aucs = np.asarray(lrp_aucs, dtype=np.float64)
    random_aucs = np.asarray(random_aucs, dtype=np.float64)
    diff = lrp_aucs - random_aucs
    if np.allclose(diff, diff[0]):
        # degenerate variance: the sign of the constant difference decides
        p = 0.0 if diff[0] < 0 else 1.0
    else:
        p = float(stats.ttest_rel(lrp_aucs, random_aucs, alternative="less").pvalue)
    return {"mean_lrp": float(lrp_aucs.mean()), "mean_random": float(random_aucs.mean()),
            "p_value": p, "n": int(len(diff))}


def localization_score(heatmaps: HeatmapPair, mask_i, mask_j, top_fraction: float = 0.1) -> float:
    """Share of the pair's top ``top_fraction`` pixels (by |relevance|) inside the masks.

    Both heatmaps compete in one ranking, as in :func:`lrp.rank_pixels`.
    """
    masks = np.stack([np.asarray(mask_i, dtype=bool), np.asarray(mask_j, dtype=bool)])
    rank = heatmaps.ranking
    n_top = max(1, int(round(top_fraction * len(rank))))
    top = rank[:n_top]
    return float(masks[top[:, 0], top[:, 1], top[:, 2]].mean())
