"""Losses, the mini-batch training loop, grid search and evaluation protocols."""

import itertools
import logging
from collections import OrderedDict, defaultdict
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics
from . import tensor as T
from .data import RANKING, RATING, DataError, NegativeSampler
from .model import Graph, Model, ModelConfig, ModelSizes, bundle_vocab
from .optim import AdamState, adam_step
from .seeding import stream

log = logging.getLogger(__name__)

FULL_GRID = OrderedDict([
    ("lr", [5e-4, 1e-3, 5e-3, 1e-2, 5e-2]),
    ("batch_size", [128, 256, 512, 1024]),
    ("l2", [5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1]),
    ("dropout", [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]),
])

@dataclass
class RunConfig:
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    n_negatives: int = 2
    min_delta: float = 0.0


@dataclass
class TrainResult:
    model: Model
    history: list  # (epoch, train_loss, valid_metric)
    best_epoch: int
    best_valid: float
    config: ModelConfig = None
    run: RunConfig = None


@dataclass
class MetricReport:
    task: str
    metrics: OrderedDict
    counts: OrderedDict
    seed: int
    config: dict
    extras: OrderedDict = field(default_factory=OrderedDict)

    def to_text(self):
        lines = [f"task: {self.task}", f"seed: {self.seed}"]
        lines += [f"metric.{k}: {v:.10g}" for k, v in self.metrics.items()]
        lines += [f"{k}: {v:.10g}" if isinstance(v, float) else f"{k}: {v}" for k, v in self.extras.items()]
        lines += [f"count.{k}: {v}" for k, v in self.counts.items()]
        lines += [f"config.{k}: {v}" for k, v in self.config.items()]
        return "\n".join(lines) + "\n"

    def tsv_header(self):
        return "\t".join(["task", "seed", "model", *self.metrics]) + "\n"

    def tsv_row(self):
        vals = [f"{v:.10g}" for v in self.metrics.values()]
        return "\t".join([self.task, str(self.seed), self.config.get("label", ""), *vals]) + "\n"


# ---------------------------------------------------------------------------
# losses

def _l2(params):
    total = None
    for p in params:
        term = T.tsum(T.square(p))
        total = term if total is None else total + term
    return total


def loss_rating(predictions, labels, lam, params=()):
    """sum (y_hat - y)^2 + lam * ||params||^2."""
    predictions = T.as_tensor(predictions)
    y = np.asarray(labels, dtype=np.float64)
    if predictions.shape != y.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {y.shape}")
    loss = T.tsum(T.square(predictions - y))
    if lam and params:
        loss = loss + lam * _l2(params)
    return loss


def loss_ranking(pos_scores, neg_scores, lam, params=()):
    """Pointwise log loss over logits of observed positives and sampled negatives, plus L2."""
    pos, neg = T.as_tensor(pos_scores), T.as_tensor(neg_scores)
    loss = T.log_loss_sum(pos, np.ones(pos.shape)) + T.log_loss_sum(neg, np.zeros(neg.shape))
    if lam and params:
        loss = loss + lam * _l2(params)
    return loss


# ---------------------------------------------------------------------------
# training

def _check_task(bundle, config):
    if bundle.task != config.task:
        raise DataError(f"model task {config.task!r} does not match dataset task {bundle.task!r}")


def _fixed_negatives(bundle, sampler, split, k, seed):
    """Deterministic evaluation set: each positive of ``split`` plus k sampled negatives."""
    arr = bundle.arrays(split)
    rng = stream(seed, f"eval-{split}")
    negs = sampler.sample(split, np.arange(len(arr)), k, rng)
    keep = negs >= 0
    rows = np.repeat(np.arange(len(arr)), k)[keep.ravel()]
    users = np.concatenate([arr.users, arr.users[rows]])
    items = np.concatenate([arr.items, negs.ravel()[keep.ravel()]])
    conds = np.concatenate([arr.conds, arr.conds[rows]])
    labels = np.concatenate([np.ones(len(arr)), np.zeros(len(rows))])
    return users, items, conds, labels


def _valid_metric(model, bundle, graph, eval_set):
    users, items, conds, labels = eval_set
    scores = model.predict(users, items, conds, graph)
    if bundle.task == RATING:
        return metrics.rmse_mae(scores, labels)[0]
    return metrics.auc_score(scores, labels)


def train(bundle, config, run, log_every=0):
    """Mini-batch Adam with per-epoch validation, best-epoch retention and early stopping."""
    _check_task(bundle, config)
    if len(bundle.splits["train"]) == 0:
        raise DataError("empty training set")
    if config.uses_kg and config.baseline == "none" and not bundle.has_kg:
        raise DataError("this model variant needs a knowledge graph (kg.tsv) but the bundle has none")
    graph = Graph.from_bundle(bundle)
    model = Model(config, ModelSizes.from_bundle(bundle), stream(run.seed, "init"))
    params = model.trainable()
    opt = AdamState(params, lr=run.lr)
    rng_shuffle = stream(run.seed, "shuffle")
    rng_sample = stream(run.seed, "sampling")
    rng_drop = stream(run.seed, "dropout")
    train_arr = bundle.arrays("train")
    ranking = bundle.task == RANKING
    sampler = NegativeSampler(bundle) if ranking else None
    lower_better = not ranking

    if ranking:
        valid_set = _fixed_negatives(bundle, sampler, "valid", run.n_negatives, run.seed)
    else:
        v = bundle.arrays("valid")
        valid_set = (v.users, v.items, v.conds, v.labels)
    has_valid = len(valid_set[0]) > 0 and (not ranking or len(set(valid_set[3])) == 2)

    history = []
    best_state, best_epoch = model.state_copy(), 0
    best_valid = np.inf if lower_better else -np.inf
    stale = 0
    n = len(train_arr)
    for epoch in range(1, run.max_epochs + 1):
        if ranking:
            negs = sampler.sample("train", np.arange(n), run.n_negatives, rng_sample)
            keep = (negs >= 0).ravel()
            rows = np.repeat(np.arange(n), run.n_negatives)[keep]
            users = np.concatenate([train_arr.users, train_arr.users[rows]])
            items = np.concatenate([train_arr.items, negs.ravel()[keep]])
            conds = np.concatenate([train_arr.conds, train_arr.conds[rows]])
            labels = np.concatenate([np.ones(n), np.zeros(len(rows))])
        else:
            users, items, conds, labels = train_arr.users, train_arr.items, train_arr.conds, train_arr.labels
        order = rng_shuffle.permutation(len(users))
        data_loss = 0.0
        for s in range(0, len(order), run.batch_size):
            b = order[s:s + run.batch_size]
            bu, bi, bc, by = users[b], items[b], conds[b], labels[b]
            pred = model.forward(bu, bi, bc, graph, training=True, rng=rng_drop)
            # the full-data objective sum(loss) + l2*|theta|^2, scaled by 1/n so
            # each batch carries its B/n share of the penalty
            if ranking:
                loss = T.log_loss_sum(pred, by)
            else:
                loss = T.tsum(T.square(pred - by))
            obj = loss * (1.0 / len(b))
            if config.l2:
                obj = obj + (config.l2 / len(users)) * _l2(params.values())
            obj.backward()
            adam_step(opt, params)
            data_loss += float(loss.data)
        train_loss = data_loss + config.l2 * model.param_norm2()
        if has_valid:
            valid = _valid_metric(model, bundle, graph, valid_set)
        else:
            valid = float("nan")
        history.append((epoch, train_loss, valid))
        if log_every and epoch % log_every == 0:
            log.info("epoch %d loss %.4f valid %.4f", epoch, train_loss, valid)
        if not has_valid:
            best_state, best_epoch, best_valid = model.state_copy(), epoch, valid
            continue
        improved = valid < best_valid - run.min_delta if lower_better else valid > best_valid + run.min_delta
        if improved:
            best_state, best_epoch, best_valid, stale = model.state_copy(), epoch, valid, 0
        else:
            stale += 1
            if stale >= run.patience:
                break
    model.load_state(best_state)
    return TrainResult(model, history, best_epoch, float(best_valid), config, run)


def grid_search(bundle, config, run, grid):
    """Train every grid point; best by validation RMSE (rating) or AUC (ranking).

    ``grid`` maps any of lr, batch_size, l2, dropout to candidate lists.  Ties
    go to the smaller l2, then the smaller lr.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("grid must be non-empty")
    keys = list(grid)
    board = []
    for values in itertools.product(*(grid[k] for k in keys)):
        point = dict(zip(keys, values))
        cfg = replace(config, **{k: v for k, v in point.items() if k in ("l2", "dropout")})
        rc = replace(run, **{k: v for k, v in point.items() if k in ("lr", "batch_size")})
        res = train(bundle, cfg, rc)
        board.append({**point, "valid": res.best_valid, "best_epoch": res.best_epoch,
                      "_result": res})
    sign = 1.0 if bundle.task == RATING else -1.0
    best = min(board, key=lambda r: (sign * r["valid"], r.get("l2", config.l2), r.get("lr", run.lr)))
    leaderboard = [{k: v for k, v in r.items() if k != "_result"} for r in board]
    return best["_result"], leaderboard


# ---------------------------------------------------------------------------
# evaluation

def _check_vocab(vocab, bundle):
    mine = bundle_vocab(bundle)
    for key in ("users", "items", "entities", "relations", "conditions", "factors"):
        if list(vocab.get(key, [])) != list(mine[key]):
            raise DataError(f"checkpoint vocabulary {key!r} does not match the dataset")


def rank_candidates(model, bundle, graph, split="test", ks=(10, 20), chunk_rows=200_000):
    """HR@k / NDCG@k over the full item set minus items the user already has under that situation."""
    arr = bundle.arrays(split)
    seen = defaultdict(set)
    for s in ("train", "valid"):
        if s == split:
            continue
        a = bundle.arrays(s)
        for u, i, c in zip(a.users, a.items, map(tuple, a.conds)):
            seen[(u, c)].add(i)
    n_items = len(bundle.items)
    all_items = np.arange(n_items)
    hr = {k: 0.0 for k in ks}
    nd = {k: 0.0 for k in ks}
    per = max(1, chunk_rows // n_items)
    for s in range(0, len(arr), per):
        sl = slice(s, s + per)
        m = len(arr.users[sl])
        users = np.repeat(arr.users[sl], n_items)
        conds = np.repeat(arr.conds[sl], n_items, axis=0)
        items = np.tile(all_items, m)
        scores = model.predict(users, items, conds, graph).reshape(m, n_items)
        for j in range(m):
            u, target = arr.users[s + j], arr.items[s + j]
            excl = seen.get((u, tuple(arr.conds[s + j])), set()) - {target}
            row = scores[j]
            if excl:
                keep = np.ones(n_items, dtype=bool)
                keep[list(excl)] = False
                cand = row[keep]
                t_idx = int(np.flatnonzero(np.flatnonzero(keep) == target)[0])
            else:
                cand, t_idx = row, int(target)
            r = metrics.rank_of(cand, t_idx)
            for k in ks:
                h, g = metrics.hit_ndcg(r, k)
                hr[k] += h
                nd[k] += g
    n = max(len(arr), 1)
    return {k: hr[k] / n for k in ks}, {k: nd[k] / n for k in ks}


def auc_f1_on_split(model, bundle, split="test", seed=0, n_negatives=2):
    """AUC and F1 over the positives of ``split`` plus their fixed sampled negatives."""
    users, items, conds, labels = _fixed_negatives(bundle, NegativeSampler(bundle), split, n_negatives, seed)
    scores = model.predict(users, items, conds, Graph.from_bundle(bundle))
    auc, f1 = metrics.auc_f1(scores, labels)
    return auc, f1, int((labels == 0).sum())


def evaluate(model, bundle, vocab=None, seed=0, n_negatives=2, split="test", task=None):
    """MetricReport on ``split``: RMSE/MAE for ratings; AUC/F1 and HR/NDCG@{10,20} for ranking."""
    task = task or bundle.task
    if task != model.config.task or task != bundle.task:
        raise DataError(f"task mismatch: requested {task!r}, model {model.config.task!r}, data {bundle.task!r}")
    if vocab is not None:
        _check_vocab(vocab, bundle)
    graph = Graph.from_bundle(bundle)
    arr = bundle.arrays(split)
    cfg = asdict(model.config)
    cfg["label"] = model.config.label()
    if task == RATING:
        pred = model.predict(arr.users, arr.items, arr.conds, graph)
        rmse, mae = metrics.rmse_mae(pred, arr.labels)
        lo, hi = bundle.scale if bundle.scale else (-np.inf, np.inf)
        c_rmse, c_mae = metrics.rmse_mae(np.clip(pred, lo, hi), arr.labels)
        return MetricReport(task, OrderedDict([("rmse", rmse), ("mae", mae)]),
                            OrderedDict([(split, len(arr))]), seed, cfg,
                            OrderedDict([("clamped.rmse", c_rmse), ("clamped.mae", c_mae)]))
    auc, f1, n_neg = auc_f1_on_split(model, bundle, split, seed, n_negatives)
    hr, nd = rank_candidates(model, bundle, graph, split)
    m = OrderedDict([("auc", auc), ("f1", f1), ("hr@10", hr[10]), ("hr@20", hr[20]),
                     ("ndcg@10", nd[10]), ("ndcg@20", nd[20])])
    counts = OrderedDict([(split, len(arr)), ("negatives", n_neg)])
    return MetricReport(task, m, counts, seed, cfg,
                        OrderedDict([("negative_pool", f"{n_negatives} sampled per positive")]))


def write_history(path, history):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\ttrain_loss\tvalid_metric\n")
        for e, loss, v in history:
            fh.write(f"{e}\t{loss:.10g}\t{v:.10g}\n")
