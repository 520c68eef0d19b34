"""Synthetic context + knowledge-graph data with planted attention ground truth.

Generative story
----------------
Every item carries one attribute value per relation.  Attribute values and
contextual conditions own small latent vectors.  User ``u`` belongs to a group
whose dominant contextual factor gets most of the planted factor attention
``alpha_u``; under situation ``cs`` the user also holds a planted relation
attention ``gamma_{u,cs}``.  The affinity of (u, cs) for item i is

    ctx   = sum_f alpha_{u,f} * sum_r gamma_{u,cs,r} * <h[cs_f], a[r, attr_r(i)]>
    taste = <p_u, z_i>,   z_i = mean_r a[r, attr_r(i)] + item noise
    score = context_weight * ctx / sd(ctx) + taste_weight * taste / sd(taste)
            + popularity_weight * pop_i

with gamma_{u,cs} = softmax((user_relation_weight * rho_u + sum_f alpha_{u,f} *
rho[cs_f]) / relation_temperature).  The sd() terms are global standard
deviations estimated once per draw.

Ranking data: a positive for (u, cs) is drawn uniformly from the items whose
score lies in the top ``top_fraction``; with probability ``noise`` it is
replaced by a uniformly random item.  Rating data: items are drawn uniformly
and the rating is the standardized score mapped onto 1..5 plus Gaussian noise
of standard deviation ``noise`` (in score units).
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, sparse

from .data import (RANKING, RATING, ContextSchema, InteractionRecord, KnowledgeGraph,
                   build_bundle, situation_key, write_interactions, write_kg,
                   write_schema_file)
from .metrics import auc_score


@dataclass
class SyntheticSpec:
    n_users: int = 200
    n_items: int = 300
    n_factors: int = 3
    conditions_per_factor: int = 4
    n_relations: int = 4
    values_per_relation: int = 6
    interactions_per_user: int = 40
    noise: float = 0.1
    seed: int = 0
    task: str = RANKING
    latent_dim: int = 8
    dominant_weight: float = 0.6
    relation_temperature: float = 3.0
    user_relation_weight: float = 0.3
    context_weight: float = 1.0
    taste_weight: float = 0.0
    popularity_weight: float = 0.0
    item_noise: float = 0.0
    top_fraction: float = 0.015

    def validate(self):
        for name in ("n_users", "n_items", "n_factors", "conditions_per_factor",
                     "n_relations", "values_per_relation", "interactions_per_user"):
            if getattr(self, name) < 1:
                raise ValueError(f"synthetic spec needs {name} >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.noise:
            raise ValueError("noise must be non-negative")
        if self.task == RANKING and self.noise > 1.0:
            raise ValueError("ranking noise is a probability")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ValueError("top_fraction must be in (0, 1]")
        if not 1.0 / self.n_factors <= self.dominant_weight <= 1.0:
            raise ValueError("dominant_weight must be in [1/n_factors, 1]")


# Overrides for a harder benchmark where per-user attention matters: positives
# come from a wider top band and items carry taste, popularity and noise terms
# that the KG does not explain.
ATTENTION_BENCHMARK = dict(dominant_weight=0.7, relation_temperature=1.0, user_relation_weight=1.0,
                           taste_weight=0.35, popularity_weight=0.2, item_noise=0.3, top_fraction=0.05)

# Sparse catalog (few interactions per item) so that KG propagation pays off.
KG_BENCHMARK = dict(ATTENTION_BENCHMARK, n_users=400, n_items=1200, item_noise=0.0,
                    popularity_weight=0.05)

# Frappe-sized: 957 users, 4082 items, ~96k interactions, 5 factors, 5 relations.
FRAPPE_SCALE = dict(ATTENTION_BENCHMARK, n_users=957, n_items=4082, interactions_per_user=100,
                    n_factors=5, n_relations=5, values_per_relation=17)

PRESETS = {"default": {}, "attention": ATTENTION_BENCHMARK, "kg": KG_BENCHMARK, "frappe": FRAPPE_SCALE}


def benchmark_spec(name, **overrides):
    presets = PRESETS
    if name not in presets:
        raise ValueError(f"unknown synthetic preset {name!r}; expected one of {sorted(presets)}")
    return SyntheticSpec(**{**presets[name], **overrides})


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    schema: ContextSchema
    records: list
    kg: KnowledgeGraph
    factor_truth: dict  # user -> np.ndarray over factors
    relation_truth: dict  # (user, situation) -> np.ndarray over relations
    groups: dict  # user -> dominant factor index
    relations: list = field(default_factory=list)

    def bundle(self, split_seed=None):
        seed = self.spec.seed if split_seed is None else split_seed
        scale = (1.0, 5.0) if self.spec.task == RATING else None
        return build_bundle(self.records, self.schema, self.spec.task, scale, self.kg, seed)


class _World:
    """All latent quantities of one synthetic draw."""

    def __init__(self, spec, rng):
        s = spec
        k = s.latent_dim
        self.attr = rng.integers(s.values_per_relation, size=(s.n_items, s.n_relations))
        self.a = rng.normal(size=(s.n_relations, s.values_per_relation, k)) / np.sqrt(k)
        self.h = rng.normal(size=(s.n_factors, s.conditions_per_factor, k)) / np.sqrt(k)
        self.p = rng.normal(size=(s.n_users, k)) / np.sqrt(k)
        self.z = self.a[np.arange(s.n_relations), self.attr].mean(axis=1)
        self.z += s.item_noise * rng.normal(size=self.z.shape) / np.sqrt(k)
        self.pop = rng.normal(size=s.n_items)
        # planted factor attention: balanced groups, one dominant factor per group
        self.group = rng.permutation(np.arange(s.n_users) % s.n_factors)
        self.alpha = np.empty((s.n_users, s.n_factors))
        for u in range(s.n_users):
            rest = rng.dirichlet(np.ones(s.n_factors - 1)) if s.n_factors > 1 else np.zeros(0)
            row = np.insert((1.0 - s.dominant_weight) * rest, self.group[u], 0.0)
            row[self.group[u]] = s.dominant_weight
            self.alpha[u] = row
        self.rel_user = rng.normal(size=(s.n_users, s.n_relations))
        self.rel_cond = rng.normal(size=(s.n_factors, s.conditions_per_factor, s.n_relations))
        # per (relation, value): latent projected on each condition, (F, C, R, V)
        self.cond_attr = np.einsum("fck,rvk->fcrv", self.h, self.a)
        # (F, C, R, I): the same affinity looked up at each item's attribute values
        self.item_affinity = np.ascontiguousarray(
            self.cond_attr[:, :, np.arange(s.n_relations)[:, None], self.attr.T])
        self.spec = spec

    def gamma(self, u, cs):
        """Planted relation attention of user ``u`` for each row of ``cs`` (S, F) -> (S, R)."""
        s = self.spec
        cs = np.atleast_2d(cs)
        logits = s.user_relation_weight * self.rel_user[u] + np.zeros((len(cs), s.n_relations))
        for f in range(s.n_factors):
            logits += self.alpha[u, f] * self.rel_cond[f, cs[:, f]]
        logits /= s.relation_temperature
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def raw_scores(self, u, cs):
        """(context term, taste term), each (S, n_items), for user ``u`` under situations ``cs``."""
        s = self.spec
        cs = np.atleast_2d(cs)
        g = self.gamma(u, cs)
        ctx = np.zeros((len(cs), s.n_items))
        for f in range(s.n_factors):
            for c in np.unique(cs[:, f]):
                rows = cs[:, f] == c
                # item i's affinity to condition c through relation r, weighted by attention
                ctx[rows] += self.alpha[u, f] * (g[rows] @ self.item_affinity[f, c])
        taste = np.broadcast_to(self.z @ self.p[u], ctx.shape)
        return ctx, taste


def _standardizers(world, rng, n=20000):
    """Global (sd ctx, sd taste, mean score, sd score) from random (user, situation) draws."""
    s = world.spec
    m = max(1, n // s.n_items)
    users = rng.integers(s.n_users, size=m)
    cs = rng.integers(s.conditions_per_factor, size=(m, s.n_factors))
    parts = [world.raw_scores(int(u), cs[j:j + 1]) for j, u in enumerate(users)]
    ctx = np.concatenate([p[0].ravel() for p in parts])
    taste = np.concatenate([p[1].ravel() for p in parts])
    pop = np.tile(world.pop, m)
    sd_ctx, sd_taste = float(np.std(ctx)) or 1.0, float(np.std(taste)) or 1.0
    score = s.context_weight * ctx / sd_ctx + s.taste_weight * taste / sd_taste + s.popularity_weight * pop
    return sd_ctx, sd_taste, float(np.mean(score)), float(np.std(score)) or 1.0


def generate_synthetic(spec):
    """Draw a dataset; the same spec (seed included) always yields identical data."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    w = _World(spec, rng)
    sd_ctx, sd_taste, mu_score, sd_score = _standardizers(w, np.random.default_rng(spec.seed + 7919))

    factors = [f"factor{f}" for f in range(spec.n_factors)]
    schema = ContextSchema(factors)
    cond_names = [[f"f{f}c{c}" for c in range(spec.conditions_per_factor)] for f in range(spec.n_factors)]
    relations = [f"rel{r}" for r in range(spec.n_relations)]
    item_names = [f"item{i}" for i in range(spec.n_items)]
    value_names = [[f"r{r}v{v}" for v in range(spec.values_per_relation)] for r in range(spec.n_relations)]

    records, rel_truth = [], {}
    n_top = max(1, int(round(spec.top_fraction * spec.n_items)))
    for u in range(spec.n_users):
        user = f"user{u}"
        seen = set()
        drawn = 0
        while len(seen) < spec.interactions_per_user and drawn < 50 * spec.interactions_per_user:
            batch = 2 * (spec.interactions_per_user - len(seen)) + 4
            drawn += batch
            cs = rng.integers(spec.conditions_per_factor, size=(batch, spec.n_factors))
            ctx, taste = w.raw_scores(u, cs)
            score = (spec.context_weight * ctx / sd_ctx + spec.taste_weight * taste / sd_taste
                     + spec.popularity_weight * w.pop)
            gam = w.gamma(u, cs)
            if spec.task == RANKING:
                top = np.sort(np.argpartition(-score, n_top - 1, axis=1)[:, :n_top], axis=1)
                random_pick = rng.random(batch) < spec.noise
                items = np.where(random_pick, rng.integers(spec.n_items, size=batch),
                                 top[np.arange(batch), rng.integers(n_top, size=batch)])
                labels = np.ones(batch)
            else:
                items = rng.integers(spec.n_items, size=batch)
                z = (score[np.arange(batch), items] - mu_score) / sd_score
                labels = np.clip(np.rint(3.0 + 1.25 * z + spec.noise * rng.normal(size=batch)), 1, 5)
            for j in range(batch):
                if len(seen) >= spec.interactions_per_user:
                    break
                situation = tuple(cond_names[f][cs[j, f]] for f in range(spec.n_factors))
                key = (int(items[j]), situation)
                if key in seen:
                    continue
                seen.add(key)
                records.append(InteractionRecord(user, item_names[key[0]], situation, float(labels[j])))
                rel_truth[(user, situation)] = gam[j].copy()

    triplets = [(item_names[i], relations[r], value_names[r][w.attr[i, r]])
                for i in range(spec.n_items) for r in range(spec.n_relations)]
    for f, names in zip(factors, cond_names):
        for c in names:
            schema.add_condition(f, c)
    kg = KnowledgeGraph.from_triplets(triplets)
    factor_truth = {f"user{u}": w.alpha[u].copy() for u in range(spec.n_users)}
    groups = {f"user{u}": int(w.group[u]) for u in range(spec.n_users)}
    return SyntheticData(spec, schema, records, kg, factor_truth, rel_truth, groups, relations)


def write_synthetic(data, directory):
    """interactions.tsv, kg.tsv, schema.txt plus the two ground-truth files."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    scale = (1.0, 5.0) if data.spec.task == RATING else None
    write_schema_file(d / "schema.txt", data.spec.task, scale, data.schema)
    write_interactions(d / "interactions.tsv", data.records, data.schema)
    write_kg(d / "kg.tsv", data.kg.triplets)
    with open(d / "truth_factors.tsv", "w", encoding="utf-8") as fh:
        fh.write("user\tfactor\tweight\n")
        for user, vec in data.factor_truth.items():
            for f, wgt in zip(data.schema.factors, vec):
                fh.write(f"{user}\t{f}\t{wgt:.12g}\n")
    with open(d / "truth_relations.tsv", "w", encoding="utf-8") as fh:
        fh.write("user\tsituation\trelation\tweight\n")
        for (user, situation), vec in data.relation_truth.items():
            for r, wgt in zip(data.relations, vec):
                fh.write(f"{user}\t{situation_key(situation)}\t{r}\t{wgt:.12g}\n")
    with open(d / "synth_spec.txt", "w", encoding="utf-8") as fh:
        for k, v in asdict(data.spec).items():
            fh.write(f"{k}: {v}\n")


# ---------------------------------------------------------------------------
# logistic probe

def probe_features(data, records):
    """Sparse one-hot (condition x attribute value) crosses for each record."""
    kg = data.kg
    rel_index = {r: j for j, r in enumerate(data.relations)}
    s = data.spec
    V = s.values_per_relation
    C = s.conditions_per_factor
    block = C * V
    rows, cols = [], []
    cond_pos = {f: {c: j for j, c in enumerate(data.schema.conditions[f])} for f in data.schema.factors}
    for n, rec in enumerate(records):
        attrs = {}
        for r, e in kg.adjacency.get(rec.item, ()):
            attrs[rel_index[r]] = int(e.split("v")[-1])
        for fi, (f, c) in enumerate(zip(data.schema.factors, rec.situation)):
            ci = cond_pos[f][c]
            for ri, v in attrs.items():
                rows.append(n)
                cols.append(((fi * s.n_relations + ri) * block) + ci * V + v)
    dim = s.n_factors * s.n_relations * block
    return sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(records), dim))


def probe_auc(data, seed=0, l2=1e-2, test_fraction=0.2):
    """Held-out AUC of an L2 logistic regression on condition x attribute crosses.

    Negatives: one uniformly drawn item per positive that the user never
    touched under the same situation.
    """
    rng = np.random.default_rng(seed)
    items = [f"item{i}" for i in range(data.spec.n_items)]
    seen = {(r.user, r.situation, r.item) for r in data.records}
    pos = data.records
    neg = []
    for r in pos:
        while True:
            it = items[int(rng.integers(len(items)))]
            if (r.user, r.situation, it) not in seen:
                break
        neg.append(InteractionRecord(r.user, it, r.situation, 0.0))
    recs = pos + neg
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    X = probe_features(data, recs)
    X = sparse.hstack([X, np.ones((X.shape[0], 1))]).tocsr()
    test = rng.random(len(y)) < test_fraction
    Xtr, ytr = X[~test], y[~test]

    def f(w):
        z = Xtr @ w
        loss = np.logaddexp(0, z).sum() - ytr @ z + 0.5 * l2 * w @ w
        p = 1.0 / (1.0 + np.exp(-z))
        return loss, Xtr.T @ (p - ytr) + l2 * w

    w0 = np.zeros(X.shape[1])
    w = optimize.minimize(f, w0, jac=True, method="L-BFGS-B").x
    return auc_score(X[test] @ w, y[test])
