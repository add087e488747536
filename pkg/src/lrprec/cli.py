"""Command-line entry point: ``lrprec <command> --config run.json``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, config_from_dict
from .data import (RELATION_TYPES, SyntheticSpec, SplitSpec, atomic_write, generate_synthetic, ingest,
                   load_images, make_split)
from .errors import ConfigError, IntegrityError, LrprecError
from .evaluation import (AccuracyReport, aggregate_curves, compare_auc, curves_csv, curves_gnuplot,
                         evaluate_accuracy, feature_table, perturb_and_rescore)
from .lrp import explain_pair, save_heatmap_csv, save_heatmap_pgm, save_overlay_ppm
from .model import RelationModel
from .recommend import FeatureIndex, recommend, write_recommendations
from .train import TrainSettings, build_model, train


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


class Workspace:
    """Dataset, split and images for one config, loaded lazily."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        if not cfg.manifest_path.is_file():
            raise ConfigError(f"config.paths.manifest: {cfg.manifest_path} does not exist")
        self.catalog, self.graph = ingest(cfg.manifest_path)
        self.split = make_split(self.graph, cfg.seed_for("split"), cfg.split_fraction)
        self.train_graph = self.graph.subset(self.split.train)
        self.test_graph = self.graph.subset(self.split.test)
        self._images = None

    @property
    def images(self) -> dict:
        if self._images is None:
            self._images = load_images(self.catalog, self.cfg.data_dir, self.cfg.input_shape)
        return self._images

    @property
    def categories(self) -> dict:
        return {i: it.category for i, it in self.catalog.items.items()}

    def load_model(self, relation_type: str, D: int) -> RelationModel:
        path = self.cfg.checkpoint_path(relation_type, D)
        if not path.is_file():
            raise IntegrityError(f"no checkpoint at {path}; run `train` first")
        model = RelationModel.load(path)
        if tuple(model.stack.specs) != tuple(self.cfg.specs()) or model.stack.input_shape != tuple(self.cfg.input_shape):
            raise IntegrityError(f"checkpoint {path} does not match the configured architecture")
        if model.rank != D or model.relation_type != relation_type:
            raise IntegrityError(f"checkpoint {path} holds type {model.relation_type!r}, D={model.rank}")
        return model


def cmd_generate(cfg: RunConfig, args) -> int:
    s = cfg.synthetic
    spec = SyntheticSpec(n_items=s.n_items, n_users=s.n_users, image_size=s.image_size,
                         pool_size=s.pool_size, noise=s.noise, background=s.background,
                         seed=cfg.seed_for("generate"))
    if tuple(cfg.input_shape) != (3, s.image_size, s.image_size):
        raise ConfigError(f"config.input_shape: synthetic images are [3, {s.image_size}, {s.image_size}]")
    catalog, graph = generate_synthetic(spec, cfg.data_dir)
    _say(f"generated {len(catalog)} items and {len(graph)} edges in {cfg.data_dir}")
    return 0


def cmd_ingest(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    _ = ws.images  # decode everything once so bad files fail here
    per_type = {t: sum(1 for e in ws.graph.edges if e.type == t) for t in RELATION_TYPES}
    summary = {
        "items": len(ws.catalog),
        "categories": ws.catalog.categories,
        "edges": len(ws.graph),
        "edges_per_type": per_type,
        "users": ws.graph.users,
        "train_edges": len(ws.split.train),
        "test_edges": len(ws.split.test),
    }
    atomic_write(cfg.out_dir / "ingest_summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    atomic_write(cfg.out_dir / "split.json", json.dumps(ws.split.to_dict()) + "\n")
    _say(f"ingested {summary['items']} items, {summary['edges']} edges")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    o = cfg.optimizer
    settings = TrainSettings(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=o.lr, beta1=o.beta1,
                             beta2=o.beta2, eps=o.eps, loss=cfg.loss, init_seed=cfg.seed_for("init"),
                             negative_seed=cfg.seed_for("negatives"), shuffle_seed=cfg.seed_for("shuffle"))
    log = []
    for D in cfg.D:
        for rel_type in cfg.relation_types:
            model = build_model(cfg.specs(), cfg.input_shape, ws.graph.users, D, rel_type,
                                cfg.seed_for("init"), cfg.loss)
            train_sub = ws.train_graph.of_type(rel_type)
            if len(train_sub) == 0:
                raise ConfigError(f"config.relation_types: no training edges of type {rel_type!r}")

            def record(rec, rel_type=rel_type, D=D):
                log.append({"relation_type": rel_type, "D": D, **rec})

            hist = train(model, ws.images, train_sub, ws.graph, settings, log=record)
            model.meta.update({"epochs": cfg.epochs, "split_seed": ws.split.seed})
            model.save(cfg.checkpoint_path(rel_type, D))
            _say(f"trained {rel_type} D={D}: objective {hist[0]['objective']:.4f} -> {hist[-1]['objective']:.4f}")
    atomic_write(cfg.out_dir / "train_log.jsonl", _jsonl(log))
    atomic_write(cfg.out_dir / "split.json", json.dumps(ws.split.to_dict()) + "\n")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    report = AccuracyReport()
    for D in cfg.D:
        for rel_type in cfg.relation_types:
            model = ws.load_model(rel_type, D)
            feats = feature_table(model, ws.images)
            part = evaluate_accuracy(model, ws.images, ws.test_graph.of_type(rel_type), ws.graph,
                                     ws.categories, cfg.seed_for("eval"), features=feats)
            report.rows.extend(part.rows)
    path = cfg.out_dir / "accuracy_report.csv"
    report.write_csv(path)
    _say(f"wrote {path}")
    return 0


def correct_test_pairs(model: RelationModel, ws: Workspace, relation_type: str, limit: int,
                       threshold: float = 0.5) -> list:
    """Test positives of ``relation_type`` the model gets right, in split order."""
    feats = feature_table(model, ws.images)
    out = []
    for e in ws.test_graph.of_type(relation_type).edges:
        p = float(model.pair_probabilities(e.user, feats[e.src], feats[e.dst]))
        if p >= threshold:
            out.append(e)
            if len(out) == limit:
                break
    return out


def cmd_explain(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    rel_type = args.type or cfg.perturbation.relation_type
    D = args.D or cfg.D[0]
    model = ws.load_model(rel_type, D)
    if args.src and args.dst:
        user = args.user or ws.graph.users[0]
        pairs = [(user, args.src, args.dst)]
    else:
        pairs = [(e.user, e.src, e.dst) for e in correct_test_pairs(model, ws, rel_type, args.n)]
    epsilons = [args.epsilon] if args.epsilon is not None else cfg.epsilons
    out_root = cfg.out_dir / "explanations" / rel_type
    records = []
    for user, src, dst in pairs:
        for it in (src, dst):
            if it not in ws.catalog:
                raise ConfigError(f"unknown item {it!r}")
        for eps in epsilons:
            hp = explain_pair(model.stack, model.metric(user), ws.images[src], ws.images[dst], eps,
                              cfg.relevance_source)
            tag = f"{user}_{src}_{dst}_eps{eps:g}"
            for branch, item, hm in (("i", src, hp.heatmap_i), ("j", dst, hp.heatmap_j)):
                stem = out_root / f"{tag}_{branch}"
                save_heatmap_csv(hm, stem.with_suffix(".csv"))
                save_heatmap_pgm(hm, stem.with_suffix(".pgm"))
                save_overlay_ppm(hm, ws.images[item], stem.with_name(stem.name + ".overlay.ppm"))
            records.append({"user": user, "src": src, "dst": dst, "type": rel_type, "epsilon": eps,
                            "prediction": hp.prediction, "relevance_i": float(hp.heatmap_i.sum()),
                            "relevance_j": float(hp.heatmap_j.sum())})
    atomic_write(out_root / "explanations.jsonl", _jsonl(records))
    _say(f"explained {len(pairs)} pair(s) into {out_root}")
    return 0


def perturbation_study(model: RelationModel, ws: Workspace, cfg: RunConfig, pairs, trial_seeds) -> dict:
    """LRP-ordered curves per epsilon and random-ordered curves, per trial seed."""
    pc = cfg.perturbation
    result = {"lrp": {}, "random": []}
    for eps in cfg.epsilons:
        heatmaps = [explain_pair(model.stack, model.metric(e.user), ws.images[e.src], ws.images[e.dst],
                                 eps, cfg.relevance_source) for e in pairs]
        per_trial = []
        for seed in trial_seeds:
            curves = [perturb_and_rescore(model, e.user, ws.images[e.src], ws.images[e.dst], hp,
                                          pc.steps, pc.pixels_per_step, "lrp", seed + n, pc.ordering)
                      for n, (e, hp) in enumerate(zip(pairs, heatmaps))]
            per_trial.append(aggregate_curves(curves, pc.threshold, eps, pc.pixels_per_step, seed))
        result["lrp"][eps] = per_trial
    for seed in trial_seeds:
        curves = [perturb_and_rescore(model, e.user, ws.images[e.src], ws.images[e.dst], None,
                                      pc.steps, pc.pixels_per_step, "random", seed + n)
                  for n, e in enumerate(pairs)]
        result["random"].append(aggregate_curves(curves, pc.threshold, None, pc.pixels_per_step, seed))
    return result


def _mean_curve(curves):
    first = curves[0]
    acc = np.mean([c.accuracy for c in curves], axis=0)
    return type(first)(first.epsilon, first.policy, first.steps, acc, first.pixels_per_step, first.seed)


def cmd_perturb(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    pc = cfg.perturbation
    model = ws.load_model(pc.relation_type, cfg.D[0])
    pairs = correct_test_pairs(model, ws, pc.relation_type, pc.max_pairs, pc.threshold)
    if not pairs:
        raise LrprecError("no correctly predicted test pairs to perturb")
    base = cfg.seed_for("perturbation")
    seeds = [base + 100_000 * t for t in range(pc.trials)]
    res = perturbation_study(model, ws, cfg, pairs, seeds)
    curves = [_mean_curve(res["lrp"][eps]) for eps in cfg.epsilons] + [_mean_curve(res["random"])]
    atomic_write(cfg.out_dir / "curves.csv", curves_csv(curves))
    atomic_write(cfg.out_dir / "curves.dat", curves_gnuplot(curves))
    summary = {"pairs": len(pairs), "relation_type": pc.relation_type, "trials": pc.trials,
               "auc": {("random" if c.epsilon is None else f"lrp eps={c.epsilon:g}"): c.auc() for c in curves}}
    if pc.trials > 1:
        summary["tests"] = {
            f"eps={eps:g}": compare_auc([c.auc() for c in res["lrp"][eps]], [c.auc() for c in res["random"]])
            for eps in cfg.epsilons
        }
    atomic_write(cfg.out_dir / "perturb_summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    _say(f"wrote perturbation curves for {len(pairs)} pairs")
    return 0


def cmd_recommend(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    rel_type = args.type or cfg.relation_types[0]
    model = ws.load_model(rel_type, args.D or cfg.D[0])
    index = FeatureIndex(model, ws.catalog, ws.images)
    queries = args.query or [ws.test_graph.of_type(rel_type).edges[0].src]
    user = args.user or ws.graph.users[0]
    lists = [recommend(model, index, q, user, args.k or cfg.k, args.category, cold_start=args.cold_start)
             for q in queries]
    path = cfg.out_dir / "recommendations.jsonl"
    write_recommendations(lists, path)
    _say(f"wrote {path}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "perturb": cmd_perturb,
    "recommend": cmd_recommend,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrprec", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the base seed")
    common.add_argument("--out", type=Path, help="override the output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("explain", "recommend"):
            p.add_argument("--type", choices=RELATION_TYPES)
            p.add_argument("--D", type=int)
            p.add_argument("--user")
        if name == "explain":
            p.add_argument("--src")
            p.add_argument("--dst")
            p.add_argument("--epsilon", type=float)
            p.add_argument("--n", type=int, default=3, help="pairs to explain when --src/--dst are absent")
        if name == "recommend":
            p.add_argument("--query", action="append", help="query item id (repeatable)")
            p.add_argument("--k", type=int)
            p.add_argument("--category")
            p.add_argument("--cold-start", action="store_true",
                           help="fall back to the shared metric for unknown users")
    return parser


def resolve_config(args) -> RunConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = config_from_dict({}, base_dir=Path.cwd())
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.paths.out_dir = str(args.out.resolve())
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except LrprecError as exc:
        _say(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
