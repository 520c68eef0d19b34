"""Attention extraction, k-means clustering of users and templated explanations."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from . import tensor as T
from .seeding import stream

NO_STRUCTURE_SILHOUETTE = 0.3
DEFAULT_K_RANGE = tuple(range(2, 7))


class ExplainError(ValueError):
    pass


@dataclass
class UserAttentionVector:
    user: str
    weights: np.ndarray


@dataclass
class ClusterAssignment:
    k: int
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int = 0
    restart: int = 0


@dataclass
class KSelection:
    k: int
    diagnostics: list  # (k, inertia, silhouette)
    no_clear_structure: bool
    assignment: ClusterAssignment = None


@dataclass
class Explanation:
    user: str
    item: str
    situation: dict
    factors: list = field(default_factory=list)  # [{factor, condition, weight}]
    relations: list = field(default_factory=list)  # [{relation, values, weight}]
    sentence: str = ""

    def to_record(self):
        return {"user": self.user, "item": self.item, "situation": self.situation,
                "factors": self.factors, "relations": self.relations, "sentence": self.sentence}


# ---------------------------------------------------------------------------
# attention

def _resolve(vocab, key, name):
    names = vocab[key]
    try:
        return names.index(name)
    except ValueError:
        raise ExplainError(f"unknown {key[:-1]} {name!r}") from None


def situation_ids(vocab, situation):
    factors = vocab["factors"]
    if len(situation) != len(factors):
        raise ExplainError(f"situation {tuple(situation)} does not match factors {factors}")
    return [_resolve(vocab, "conditions", f"{f}={c}") for f, c in zip(factors, situation)]


def extract_attention(model, vocab, users, situations=None):
    """Factor attention per user and, when situations are given, relation attention per (user, situation).

    ``situations`` is either None, one situation for every user, or a list
    aligned with ``users``.  Only the attention sub-passes run.
    """
    if "factor" not in model.params or not model.config.attentive:
        raise ExplainError(f"{model.config.label()} has no factor attention")
    uid = np.array([_resolve(vocab, "users", u) for u in users], dtype=np.int64)
    with T.no_grad():
        _, beta = model.factor_attention(T.gather(model.params["user"], uid))
    vectors = [UserAttentionVector(u, beta.data[k].copy()) for k, u in enumerate(users)]
    relation = {}
    if situations is not None:
        if situations and isinstance(situations[0], str):
            situations = [tuple(situations)] * len(users)
        if len(situations) != len(users):
            raise ExplainError("need one situation per user")
        conds = np.array([situation_ids(vocab, s) for s in situations], dtype=np.int64)
        att = model.attention(uid, conds)
        for k, (u, s) in enumerate(zip(users, situations)):
            if "relation_attention" in att:
                relation[(u, tuple(s))] = att["relation_attention"][k].copy()
    return vectors, relation


# ---------------------------------------------------------------------------
# clustering

def _kmeans_pp(x, k, rng):
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            c = int(rng.choice(n, p=d2 / total))
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            c = int(rng.choice(free))
        chosen.append(c)
        d2 = np.minimum(d2, ((x - x[c]) ** 2).sum(axis=1))
    return x[chosen].copy()


def _lloyd(x, centroids, max_iters):
    k = len(centroids)
    labels, d2 = _kernels.nearest_centroid(x, centroids)
    prev_inertia = float(d2.sum())
    it = 0
    for it in range(1, max_iters + 1):
        new = np.empty_like(centroids)
        counts = np.bincount(labels, minlength=k)
        taken = d2.copy()
        for c in range(k):
            if counts[c]:
                new[c] = x[labels == c].mean(axis=0)
            else:
                far = int(np.argmax(taken))
                new[c] = x[far]
                taken[far] = -1.0
        new_labels, d2 = _kernels.nearest_centroid(x, new)
        inertia = float(d2.sum())
        if inertia > prev_inertia * (1 + 1e-12) + 1e-15:
            raise RuntimeError(f"k-means inertia increased: {prev_inertia} -> {inertia}")
        prev_inertia = inertia
        centroids = new
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels, centroids, prev_inertia, it


def kmeans(vectors, k, seed=0, max_iters=300, restarts=10):
    """Lloyd's algorithm from k-means++ starts; the lowest-inertia restart wins (ties: earliest)."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D array of vectors, got shape {x.shape}")
    n = len(x)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of vectors ({n})")
    rng = stream(seed, "kmeans")
    best = None
    for r in range(max(1, restarts)):
        labels, cents, inertia, it = _lloyd(x, _kmeans_pp(x, k, rng), max_iters)
        if best is None or inertia < best.inertia:
            best = ClusterAssignment(k, labels.astype(np.int64), cents, inertia, it, r)
    return best


def silhouette(vectors, labels):
    """Mean silhouette coefficient; points alone in their cluster score 0."""
    x = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    ks = np.unique(labels)
    if not 2 <= len(ks) <= len(x) - 1:
        raise ValueError("silhouette needs between 2 and n-1 clusters")
    dist = _kernels.pairwise_dist(x)
    onehot = (labels[:, None] == ks[None, :]).astype(np.float64)
    sizes = onehot.sum(axis=0)
    sums = dist @ onehot  # (n, K) summed distance to each cluster
    own = np.searchsorted(ks, labels)
    n = len(x)
    own_size = sizes[own]
    a = np.where(own_size > 1, sums[np.arange(n), own] / np.maximum(own_size - 1, 1), 0.0)
    mean_other = sums / sizes[None, :]
    mean_other[np.arange(n), own] = np.inf
    b = mean_other.min(axis=1)
    s = np.where(own_size > 1, (b - a) / np.maximum(np.maximum(a, b), 1e-300), 0.0)
    return float(s.mean())


def select_k(vectors, k_range=DEFAULT_K_RANGE, seed=0, restarts=10):
    """k with the highest mean silhouette (ties: smaller k); flags weak structure."""
    x = np.asarray(vectors, dtype=np.float64)
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ValueError("k range is empty")
    ks = [k for k in ks if 2 <= k <= len(x) - 1]
    if not ks:
        raise ValueError(f"no k in range admits a silhouette with {len(x)} vectors")
    diags, best, best_assign = [], None, None
    for k in ks:
        a = kmeans(x, k, seed, restarts=restarts)
        if len(np.unique(a.labels)) < 2:
            sil = -1.0
        else:
            sil = silhouette(x, a.labels)
        diags.append((k, a.inertia, sil))
        if best is None or sil > best[2]:
            best, best_assign = (k, a.inertia, sil), a
    weak = all(s < NO_STRUCTURE_SILHOUETTE for _, _, s in diags)
    return KSelection(best[0], diags, weak, best_assign)


def adjusted_rand_index(a, b):
    """Hubert-Arabie adjusted Rand index of two labelings."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("labelings differ in length")
    n = len(a)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)

    def comb2(v):
        return (v * (v - 1) / 2.0).sum()

    index = comb2(table)
    sa, sb = comb2(table.sum(axis=1)), comb2(table.sum(axis=0))
    total = n * (n - 1) / 2.0
    expected = sa * sb / total if total else 0.0
    top = (sa + sb) / 2.0
    if top == expected:
        return 1.0
    return float((index - expected) / (top - expected))


def write_k_diagnostics(selection, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("k\tinertia\tsilhouette\n")
        for k, inertia, sil in selection.diagnostics:
            fh.write(f"{k}\t{inertia:.10g}\t{sil:.10g}\n")
        fh.write(f"# chosen k: {selection.k}\n")
        if selection.no_clear_structure:
            fh.write(f"# no clear structure: every silhouette < {NO_STRUCTURE_SILHOUETTE}\n")


def export_analysis(assignment, vectors, factors, directory):
    """clusters.tsv, centroids.tsv and attention.tsv; columns follow ``factors``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    fmt = "{:.10g}".format
    if len(vectors) != len(assignment.labels):
        raise ValueError("assignment and vectors disagree in length")
    with open(d / "clusters.tsv", "w", encoding="utf-8") as fh:
        fh.write("user\tcluster\n")
        for v, c in zip(vectors, assignment.labels):
            fh.write(f"{v.user}\t{int(c)}\n")
    with open(d / "centroids.tsv", "w", encoding="utf-8") as fh:
        fh.write("\t".join(["cluster", *factors]) + "\n")
        for c, row in enumerate(assignment.centroids):
            fh.write("\t".join([str(c), *map(fmt, row)]) + "\n")
    with open(d / "attention.tsv", "w", encoding="utf-8") as fh:
        fh.write("\t".join(["user", *factors]) + "\n")
        for v in vectors:
            fh.write("\t".join([v.user, *map(fmt, v.weights)]) + "\n")
    return [d / "clusters.tsv", d / "centroids.tsv", d / "attention.tsv"]


# ---------------------------------------------------------------------------
# explanations

def _pct(w):
    return f"{100.0 * w:.1f}%"


def render_explanation(profile, user, item, kg, situation, factors, relations, top_n=1):
    """Templated sentence plus structured fields for one recommendation.

    ``profile`` is the AttentionProfile at exactly this (user, situation);
    ``factors`` and ``relations`` name the profile's attention entries.
    """
    sit = dict(zip(factors, situation))
    phrase = " and ".join(f"{f} = {c}" for f, c in sit.items()) or "any situation"
    exp = Explanation(user, item, sit)
    fa = np.asarray(profile.factor_attention) if profile.factor_attention is not None else np.zeros(0)
    ra = np.asarray(profile.relation_attention) if profile.relation_attention is not None else np.zeros(0)
    if top_n <= 0:
        exp.sentence = f"Under {phrase}, this is recommended for you."
        return exp

    if fa.size:
        for f in np.argsort(-fa, kind="stable")[:top_n]:
            exp.factors.append({"factor": factors[f], "condition": situation[f], "weight": float(fa[f])})
    item_rels = []
    if kg is not None and ra.size:
        for r in np.argsort(-ra, kind="stable"):
            values = kg.attribute_values(item, relations[r])
            if values:
                item_rels.append({"relation": relations[r], "values": sorted(values), "weight": float(ra[r])})
            if len(item_rels) == top_n:
                break
    exp.relations = item_rels

    given = ""
    if exp.factors:
        top = exp.factors[0]
        given = f", especially given {top['factor']}: {top['condition']}"
    if item_rels:
        what = " and ".join(f"{r['relation']}: {'/'.join(r['values'])}" for r in item_rels)
        weights = ", ".join(_pct(r["weight"]) for r in item_rels)
        verb = "matches" if len(item_rels) == 1 else "match"
        exp.sentence = (f"Under {phrase}, this is recommended because its {what} {verb} "
                        f"what matters most to you ({weights}){given}.")
    elif exp.factors:
        top = exp.factors[0]
        exp.sentence = (f"Under {phrase}, this is recommended because of what matters most to you "
                        f"right now ({top['factor']}: {top['condition']}, {_pct(top['weight'])}).")
    else:
        exp.sentence = f"Under {phrase}, this is recommended for you."
    return exp


def write_explanations(explanations, path):
    """One JSON object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for e in explanations:
            fh.write(json.dumps(e.to_record(), sort_keys=True) + "\n")
