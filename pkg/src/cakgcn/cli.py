"""Command-line entry point: synth, prepare, train, evaluate, explain.

Every command writes ``manifest.json`` into its output directory before doing
any heavy work, then rewrites it with artifact digests once outputs exist.
"""

import argparse
import hashlib
import json
import logging
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import (FRAPPE_TRANSFORM, RANKING, RATING, ContextSchema, DataError, DatasetBundle,
                   IngestTransform, KnowledgeGraph, apply_transform, build_bundle, load_interactions,
                   load_kg, read_schema_file)
from .explain import (DEFAULT_K_RANGE, ExplainError, export_analysis, extract_attention, kmeans,
                      render_explanation, select_k, situation_ids, write_explanations,
                      write_k_diagnostics)
from .model import (ABLATIONS, AGGREGATORS, BASELINES, HEADS, ConfigError, Graph, ModelConfig,
                    bundle_vocab, load_checkpoint, save_checkpoint)
from .synthetic import (PRESETS, SyntheticSpec, benchmark_spec, generate_synthetic, probe_auc,
                        write_synthetic)
from .training import FULL_GRID, RunConfig, evaluate, grid_search, train, write_history

log = logging.getLogger("cakgcn")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CONFIG = 4
EXIT_IO = 5
EXIT_EXPLAIN = 6

EXIT_CODES_HELP = """exit codes:
  0  success, all outputs written
  1  unexpected internal error
  2  bad command-line usage
  3  input data failed to parse or validate (message names file and line)
  4  invalid model or run configuration
  5  file system error (unreadable input, unwritable output)
  6  explanation request cannot be served (unknown user, model without attention)
"""


# ---------------------------------------------------------------------------
# manifest

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Command, resolved config, seeds, input digests and artifact paths of one invocation."""

    def __init__(self, command, config, seed, inputs, artifacts):
        self.command = command
        self.config = config
        self.seed = seed
        self.inputs = {str(p): sha256_file(p) for p in inputs if p is not None and Path(p).is_file()}
        self.artifacts = [str(a) for a in artifacts]
        self.artifact_digests = {}
        self.status = "running"

    def to_dict(self):
        return {
            "command": self.command,
            "config": self.config,
            "seeds": {"seed": self.seed},
            "inputs": self.inputs,
            "artifacts": self.artifacts,
            "artifact_digests": self.artifact_digests,
            "status": self.status,
            "tool_version": __version__,
        }

    def write(self, directory):
        Path(directory).mkdir(parents=True, exist_ok=True)
        path = Path(directory) / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def finish(self, directory):
        missing = [a for a in self.artifacts if not Path(a).is_file()]
        if missing:
            raise OSError(f"expected outputs were not written: {missing}")
        self.artifact_digests = {a: sha256_file(a) for a in self.artifacts}
        self.status = "complete"
        return self.write(directory)


# ---------------------------------------------------------------------------
# commands

SYNTH_FLAGS = {"users": "n_users", "items": "n_items", "factors": "n_factors",
               "conditions": "conditions_per_factor", "relations": "n_relations",
               "values": "values_per_relation", "per_user": "interactions_per_user",
               "noise": "noise", "task": "task"}


def cmd_synth(args):
    out = Path(args.out)
    overrides = {field: getattr(args, flag) for flag, field in SYNTH_FLAGS.items()
                 if getattr(args, flag) is not None}
    spec = benchmark_spec(args.preset, seed=args.seed, **overrides)
    spec.validate()
    names = ["schema.txt", "interactions.tsv", "kg.tsv", "truth_factors.tsv",
             "truth_relations.tsv", "synth_spec.txt"]
    manifest = RunManifest("synth", asdict(spec), args.seed, [], [out / n for n in names])
    manifest.write(out)
    data = generate_synthetic(spec)
    write_synthetic(data, out)
    if args.probe:
        auc = probe_auc(data, seed=args.seed)
        print(f"probe_auc: {auc:.6f}")
    manifest.finish(out)
    print(f"wrote {len(data.records)} interactions to {out}")
    return EXIT_OK


def _transform_from_args(args):
    if args.preset == "frappe":
        return FRAPPE_TRANSFORM
    if args.drop or args.to_kg or args.label_column:
        return IngestTransform(drop=tuple(_csv(args.drop)), to_kg=tuple(_csv(args.to_kg)),
                               label_column=args.label_column or "label")
    return None


def _csv(text):
    return [x.strip() for x in (text or "").split(",") if x.strip()]


def cmd_prepare(args):
    out = Path(args.out)
    transform = _transform_from_args(args)
    config = {"interactions": args.interactions, "schema": args.schema, "kg": args.kg,
              "transform": asdict(transform) if transform else None}
    names = ["schema.txt", "train.tsv", "valid.tsv", "test.tsv", "stats.txt"]
    arts = [out / n for n in names]
    if args.kg or (transform and transform.to_kg):
        arts.append(out / "kg.tsv")
    manifest = RunManifest("prepare", config, args.seed, [args.interactions, args.schema, args.kg], arts)
    manifest.write(out)

    task, scale, schema = read_schema_file(args.schema)
    extra = []
    if transform is not None:
        with tempfile.TemporaryDirectory() as tmp:
            canon = Path(tmp) / "interactions.tsv"
            factors, extra = apply_transform(args.interactions, canon, transform)
            schema = ContextSchema(factors)
            records = load_interactions(canon, schema, scale)
    else:
        records = load_interactions(args.interactions, schema, scale)
    triplets = list(load_kg(args.kg).triplets) if args.kg else []
    triplets += extra
    kg = KnowledgeGraph.from_triplets(triplets) if triplets else None
    bundle = build_bundle(records, schema, task, scale, kg, seed=args.seed)
    bundle.save(out)
    manifest.finish(out)
    for k, v in bundle.stats().items():
        print(f"{k}: {v:.6f}" if isinstance(v, float) else f"{k}: {v}")
    return EXIT_OK


def _parse_grid(text):
    if text == "full":
        return dict(FULL_GRID)
    grid = {}
    for part in text.split(";"):
        if not part.strip():
            continue
        key, _, vals = part.partition("=")
        key = key.strip().replace("-", "_")
        if key not in FULL_GRID:
            raise ConfigError(f"grid key {key!r} not one of {list(FULL_GRID)}")
        cast = int if key == "batch_size" else float
        try:
            grid[key] = [cast(v) for v in vals.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"bad grid values for {key!r}: {vals!r}") from None
    if not grid:
        raise ConfigError("empty grid")
    return grid


def _model_config(args, task):
    return ModelConfig(aggregator=args.aggregator, head=args.head, ablation=args.ablation,
                       baseline=args.baseline, dim=args.dim, fm_dim=args.fm_dim,
                       dropout=args.dropout, l2=args.l2, task=task)


def _bundle_inputs(data_dir):
    d = Path(data_dir)
    return [d / n for n in ("schema.txt", "train.tsv", "valid.tsv", "test.tsv", "kg.tsv")]


def cmd_train(args):
    out = Path(args.out)
    bundle_dir = Path(args.data)
    if not (bundle_dir / "schema.txt").is_file():
        raise DataError(f"{bundle_dir}: not a prepared dataset (schema.txt missing)")
    task, _, _ = read_schema_file(bundle_dir / "schema.txt")
    cfg = _model_config(args, task)
    run = RunConfig(lr=args.lr, batch_size=args.batch_size, max_epochs=args.epochs,
                    patience=args.patience, seed=args.seed, n_negatives=args.negatives)
    grid = _parse_grid(args.grid) if args.grid else None
    if run.batch_size < 1 or run.max_epochs < 1 or run.lr <= 0:
        raise ConfigError("batch size and epochs must be >= 1 and lr > 0")
    arts = [out / "checkpoint.bin", out / "history.tsv"]
    if grid:
        arts.append(out / "leaderboard.tsv")
    config = {"model": asdict(cfg), "run": asdict(run), "grid": grid, "data": str(bundle_dir)}
    manifest = RunManifest("train", config, args.seed, _bundle_inputs(bundle_dir), arts)
    manifest.write(out)

    bundle = DatasetBundle.load(bundle_dir)
    if grid:
        res, board = grid_search(bundle, cfg, run, grid)
        keys = list(grid)
        with open(out / "leaderboard.tsv", "w", encoding="utf-8") as fh:
            fh.write("\t".join([*keys, "valid", "best_epoch"]) + "\n")
            for row in board:
                fh.write("\t".join([*(f"{row[k]:g}" for k in keys), f"{row['valid']:.10g}",
                                    str(row["best_epoch"])]) + "\n")
    else:
        res = train(bundle, cfg, run)
    meta = {"run": asdict(res.run), "best_epoch": res.best_epoch, "best_valid": res.best_valid,
            "label": res.config.label()}
    save_checkpoint(out / "checkpoint.bin", res.model, bundle_vocab(bundle), meta)
    write_history(out / "history.tsv", res.history)
    manifest.finish(out)
    metric = "rmse" if task == RATING else "auc"
    print(f"{res.config.label()}: best epoch {res.best_epoch}, valid {metric} {res.best_valid:.6f}")
    return EXIT_OK


def cmd_evaluate(args):
    out = Path(args.out)
    arts = [out / "report.txt", out / "report.tsv"]
    config = {"checkpoint": args.checkpoint, "data": args.data, "task": args.task,
              "split": args.split, "negatives": args.negatives}
    manifest = RunManifest("evaluate", config, args.seed,
                           [args.checkpoint, *_bundle_inputs(args.data)], arts)
    manifest.write(out)
    model, vocab, _ = load_checkpoint(args.checkpoint)
    bundle = DatasetBundle.load(args.data)
    report = evaluate(model, bundle, vocab, seed=args.seed, n_negatives=args.negatives,
                      split=args.split, task=args.task)
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "report.tsv").write_text(report.tsv_header() + report.tsv_row(), encoding="utf-8")
    manifest.finish(out)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _parse_situation(text, factors):
    parts = _csv(text)
    if parts and all("=" in p for p in parts):
        given = dict(p.split("=", 1) for p in parts)
        missing = [f for f in factors if f not in given]
        if missing:
            raise ExplainError(f"situation is missing factor(s) {missing}")
        return tuple(given[f] for f in factors)
    if len(parts) != len(factors):
        raise ExplainError(f"situation needs {len(factors)} conditions ({', '.join(factors)})")
    return tuple(parts)


def _recommend(model, bundle, vocab, user, situation, n):
    """Top-n unseen items for (user, situation) by model score."""
    uid = vocab["users"].index(user)
    cond = situation_ids(vocab, situation)
    seen = {r.item for r in bundle.all_records() if r.user == user and tuple(r.situation) == situation}
    items = np.arange(len(vocab["items"]))
    scores = model.predict(np.full(len(items), uid), items, np.tile(cond, (len(items), 1)),
                           Graph.from_bundle(bundle))
    order = np.lexsort((items, -scores))
    return [vocab["items"][i] for i in order if vocab["items"][i] not in seen][:n]


def cmd_explain(args):
    out = Path(args.out)
    if not args.user and not args.cluster:
        raise ExplainError("nothing to do: give --user/--situation and/or --cluster")
    arts = []
    if args.user:
        arts.append(out / "explanations.jsonl")
    if args.cluster:
        arts += [out / "clusters.tsv", out / "centroids.tsv", out / "attention.tsv",
                 out / "k_selection.tsv"]
    config = {"checkpoint": args.checkpoint, "data": args.data, "user": args.user,
              "situation": args.situation, "item": args.item, "top_n": args.top_n,
              "recommend": args.recommend, "cluster": args.cluster, "k": args.k,
              "k_range": args.k_range}
    manifest = RunManifest("explain", config, args.seed, [args.checkpoint, *_bundle_inputs(args.data)], arts)
    manifest.write(out)
    model, vocab, _ = load_checkpoint(args.checkpoint)
    bundle = DatasetBundle.load(args.data)
    factors = vocab["factors"]

    if args.user:
        if args.user not in vocab["users"]:
            raise ExplainError(f"unknown user {args.user!r}")
        if not args.situation:
            raise ExplainError("--user needs --situation")
        situation = _parse_situation(args.situation, factors)
        cond = situation_ids(vocab, situation)
        items = [args.item] if args.item else _recommend(model, bundle, vocab, args.user, situation,
                                                          args.recommend)
        for it in items:
            if it not in vocab["items"]:
                raise ExplainError(f"unknown item {it!r}")
        profile = model.profile(vocab["users"].index(args.user), cond)
        exps = [render_explanation(profile, args.user, it, bundle.kg, situation, factors,
                                   vocab["relations"], args.top_n) for it in items]
        write_explanations(exps, out / "explanations.jsonl")
        for e in exps:
            print(e.sentence)

    if args.cluster:
        users = list(dict.fromkeys(r.user for r in bundle.splits["test"]))
        vectors, _ = extract_attention(model, vocab, users)
        x = np.array([v.weights for v in vectors])
        lo, _, hi = args.k_range.partition("-")
        k_range = range(int(lo), int(hi or lo) + 1)
        if args.k == "auto":
            sel = select_k(x, k_range, seed=args.seed)
            assignment = sel.assignment
        else:
            assignment = kmeans(x, int(args.k), seed=args.seed)
            sel = select_k(x, k_range, seed=args.seed) if len(x) > 2 else None
        export_analysis(assignment, vectors, factors, out)
        if sel is not None:
            write_k_diagnostics(sel, out / "k_selection.tsv")
        else:
            (out / "k_selection.tsv").write_text("k\tinertia\tsilhouette\n", encoding="utf-8")
        print(f"clustered {len(users)} users into k={assignment.k} (inertia {assignment.inertia:.6g})")
        if sel is not None and sel.no_clear_structure:
            print("note: no clear cluster structure (all silhouettes below 0.3)")
    manifest.finish(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser():
    p = argparse.ArgumentParser(
        prog="cakgcn",
        description="Context-aware knowledge-graph recommender: data preparation, training, "
                    "evaluation and explanation.",
        epilog=EXIT_CODES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    d = argparse.ArgumentDefaultsHelpFormatter

    s = sub.add_parser("synth", help="generate a synthetic dataset with planted attention")
    dflt = SyntheticSpec()
    s.add_argument("--out", required=True)
    s.add_argument("--preset", choices=sorted(PRESETS), default="default",
                   help="base configuration; any flag below overrides it (default: default)")
    s.add_argument("--users", type=int, help=f"(default preset: {dflt.n_users})")
    s.add_argument("--items", type=int, help=f"(default preset: {dflt.n_items})")
    s.add_argument("--factors", type=int, help=f"(default preset: {dflt.n_factors})")
    s.add_argument("--conditions", type=int,
                   help=f"conditions per factor (default preset: {dflt.conditions_per_factor})")
    s.add_argument("--relations", type=int, help=f"(default preset: {dflt.n_relations})")
    s.add_argument("--values", type=int,
                   help=f"attribute values per relation (default preset: {dflt.values_per_relation})")
    s.add_argument("--per-user", type=int,
                   help=f"interactions per user (default preset: {dflt.interactions_per_user})")
    s.add_argument("--noise", type=float,
                   help="ranking: chance a positive is a random item; rating: score noise "
                        f"(default preset: {dflt.noise})")
    s.add_argument("--task", choices=(RANKING, RATING), help=f"(default preset: {dflt.task})")
    s.add_argument("--seed", type=int, default=0, help="(default: 0)")
    s.add_argument("--probe", action="store_true", help="also report the logistic-probe AUC")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="validate raw files and write a split dataset bundle", formatter_class=d)
    s.add_argument("--interactions", required=True, help="TSV: user, item, <factors...>, label")
    s.add_argument("--schema", required=True, help="key: value sidecar with task, scale, factors")
    s.add_argument("--kg", default=None, help="TSV: head, relation, tail (optional)")
    s.add_argument("--out", required=True)
    s.add_argument("--preset", choices=("frappe",), default=None,
                   help="frappe: drop weekday and city, move cost into the KG, label column cnt")
    s.add_argument("--drop", default=None, help="comma-separated raw columns to drop")
    s.add_argument("--to-kg", default=None, help="comma-separated raw columns that become item relations")
    s.add_argument("--label-column", default=None, help="raw label column name (default: label)")
    s.add_argument("--seed", type=int, default=0, help="split seed")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train one model (or a grid) on a prepared bundle", formatter_class=d)
    s.add_argument("--data", required=True, help="prepared bundle directory")
    s.add_argument("--out", required=True)
    s.add_argument("--aggregator", choices=AGGREGATORS, default="sum")
    s.add_argument("--head", choices=HEADS, default="mf")
    s.add_argument("--ablation", choices=ABLATIONS, default="full")
    s.add_argument("--baseline", choices=BASELINES, default="none",
                   help="mf = plain-mf ablation with the MF head; fm/nfm = feature-based baselines")
    s.add_argument("--dim", type=int, default=128, help="embedding size d")
    s.add_argument("--fm-dim", type=int, default=16, help="factor size of the FM/NFM heads")
    s.add_argument("--dropout", type=float, default=0.0)
    s.add_argument("--l2", type=float, default=1e-3)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch-size", type=int, default=256)
    s.add_argument("--epochs", type=int, default=200, help="max epochs")
    s.add_argument("--patience", type=int, default=10, help="early-stopping patience in epochs")
    s.add_argument("--negatives", type=int, default=2, help="sampled negatives per positive (ranking)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grid", default=None,
                   help="'full' for the whole default grid, or e.g. 'lr=1e-3,5e-3;l2=1e-3,1e-2'")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="score a checkpoint on a split", formatter_class=d)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--task", choices=(RANKING, RATING), default=None, help="default: the checkpoint's task")
    s.add_argument("--split", choices=("train", "valid", "test"), default="test")
    s.add_argument("--negatives", type=int, default=2, help="sampled negatives per positive for AUC/F1")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("explain", help="explanations and attention clustering", formatter_class=d)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--user", default=None)
    s.add_argument("--situation", default=None,
                   help="conditions in factor order (a,b,c) or factor=condition pairs")
    s.add_argument("--item", default=None, help="item to explain (default: the top recommendations)")
    s.add_argument("--recommend", type=int, default=1, help="how many top items to explain without --item")
    s.add_argument("--top-n", type=int, default=1, help="relations/factors cited per explanation")
    s.add_argument("--cluster", action="store_true", help="cluster test users by factor attention")
    s.add_argument("--k", default="auto", help="number of clusters or 'auto' (silhouette)")
    s.add_argument("--k-range", default=f"{DEFAULT_K_RANGE[0]}-{DEFAULT_K_RANGE[-1]}")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_explain)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, ExplainError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_EXPLAIN
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
