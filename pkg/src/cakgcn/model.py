"""Context-aware knowledge-graph recommender, its output heads, ablations and FM-style baselines.

Weights are stored as (out, in) matrices and applied as ``x @ W.T + b``.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

AGGREGATORS = ("sum", "cat", "avg")
HEADS = ("mf", "fm", "mlp", "nfm")
ABLATIONS = ("full", "ca", "kgcn", "plain-mf")
BASELINES = ("none", "mf", "fm", "nfm")

CHECKPOINT_MAGIC = b"CAKGCN-CHECKPOINT\n"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    aggregator: str = "sum"
    head: str = "mf"
    ablation: str = "full"
    baseline: str = "none"
    dim: int = 128
    fm_dim: int = 16
    dropout: float = 0.0
    l2: float = 1e-3
    task: str = "ranking"

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"unknown aggregator {self.aggregator!r}; expected one of {AGGREGATORS}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.baseline not in BASELINES:
            raise ConfigError(f"unknown baseline {self.baseline!r}; expected one of {BASELINES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.baseline == "mf":
            # the MF baseline is by definition the model with both layers removed and an MF head
            self.ablation, self.head = "plain-mf", "mf"

    @property
    def uses_context(self):
        return self.baseline == "none" and self.ablation in ("full", "ca")

    @property
    def uses_kg(self):
        return self.baseline in ("fm", "nfm") or (self.baseline == "none" and self.ablation in ("full", "kgcn"))

    @property
    def attentive(self):
        return self.aggregator != "avg"

    def label(self):
        if self.baseline != "none":
            return self.baseline.upper()
        name = {"full": "CA-KGCN", "ca": "CA", "kgcn": "KGCN", "plain-mf": "MF"}[self.ablation]
        return f"{name}-{self.head.upper()}-{self.aggregator.upper()}"


@dataclass
class ModelSizes:
    n_users: int
    n_items: int
    n_entities: int
    n_conditions: int
    n_factors: int
    n_relations: int

    @classmethod
    def from_bundle(cls, bundle):
        return cls(len(bundle.users), len(bundle.items), len(bundle.entities),
                   len(bundle.conditions), bundle.schema.n_factors, len(bundle.relations))


@dataclass
class Graph:
    """Padded item adjacency: relation id, entity id and 0/1 mask per slot."""

    nbr_rel: np.ndarray
    nbr_ent: np.ndarray
    nbr_mask: np.ndarray

    @classmethod
    def from_bundle(cls, bundle):
        return cls(bundle.nbr_rel, bundle.nbr_ent, bundle.nbr_mask)

    @classmethod
    def empty(cls, n_items):
        z = np.zeros((n_items, 1), dtype=np.int64)
        return cls(z, z.copy(), np.zeros((n_items, 1)))


@dataclass
class AttentionProfile:
    """Attention for one (user, situation): scores before and after normalisation."""

    user: int
    factor_scores: np.ndarray = None
    factor_attention: np.ndarray = None
    relation_scores: np.ndarray = None
    relation_attention: np.ndarray = None
    extra: dict = field(default_factory=dict)


class Model:
    def __init__(self, config, sizes, rng=None, init=True):
        self.config = config
        self.sizes = sizes
        self.params = {}
        if config.uses_kg and config.baseline == "none" and sizes.n_relations == 0:
            raise ConfigError("model needs a knowledge graph but the dataset has no relations")
        if config.uses_context and sizes.n_factors == 0:
            raise ConfigError("model needs contextual factors but the schema declares none")
        if init:
            self._init_params(rng if rng is not None else np.random.default_rng(0))

    # -- parameters ----------------------------------------------------------

    def _init_params(self, rng):
        c, s, d = self.config, self.sizes, self.config.dim
        bound = 1.0 / np.sqrt(d)

        def uni(name, shape):
            self.params[name] = Tensor(rng.uniform(-bound, bound, size=shape), True, name)

        def zeros(name, shape):
            self.params[name] = Tensor(np.zeros(shape), True, name)

        uni("user", (s.n_users, d))
        uni("entity", (s.n_entities, d))
        if c.baseline in ("fm", "nfm"):
            uni("condition", (s.n_conditions, d))
            zeros("w0", (1,))
            zeros("user_w", (s.n_users, 1))
            zeros("entity_w", (s.n_entities, 1))
            zeros("condition_w", (s.n_conditions, 1))
            if c.baseline == "nfm":
                uni("hidden_w", (d, d))
                zeros("hidden_b", (d,))
                uni("out_w", (d,))
            return
        if c.uses_context:
            uni("condition", (s.n_conditions, d))
            uni("factor", (s.n_factors, d))
            if c.aggregator == "cat":
                uni("user_agg_w", (d, 2 * d))
            else:
                uni("user_agg_w", (d, d))
            zeros("user_agg_b", (d,))
        if c.uses_kg:
            uni("relation", (s.n_relations, d))
            if c.aggregator == "cat":
                uni("item_agg_w", (d, 2 * d))
            else:
                uni("item_agg_w", (d, d))
            zeros("item_agg_b", (d,))
        k = c.fm_dim
        if c.head == "mf":
            # ReLU outputs make u.i >= 0; the offset lets logits go negative
            zeros("mf_b", (1,))
        if c.head in ("fm", "nfm"):
            zeros("w0", (1,))
            uni("fm_lin", (2 * d,))
            uni("fm_v", (2 * d, k))
        if c.head == "mlp":
            uni("hidden_w", (d, 2 * d))
            zeros("hidden_b", (d,))
            uni("out_w", (d,))
            zeros("out_b", (1,))
        if c.head == "nfm":
            uni("hidden_w", (d, k))
            zeros("hidden_b", (d,))
            uni("out_w", (d,))

    def trainable(self):
        """Parameters reachable from the prediction (AVG never touches the attention tables)."""
        skip = () if self.config.attentive else ("factor", "relation")
        return {k: p for k, p in self.params.items() if k not in skip}

    def state_copy(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state):
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64, copy=True)

    # -- layers --------------------------------------------------------------

    def _aggregate(self, base, neigh, prefix):
        w, b = self.params[f"{prefix}_agg_w"], self.params[f"{prefix}_agg_b"]
        if self.config.aggregator == "cat":
            x = T.concat([neigh, base], axis=1)
        else:
            x = base + neigh
        return T.relu(T.matmul(x, w.T) + b)

    def factor_attention(self, u):
        """(scores, normalised attention) of users ``u`` (B, d) over contextual factors."""
        pi = T.matmul(u, self.params["factor"].T)
        return pi, T.softmax(T.leaky_relu(pi))

    def relation_attention(self, u_final):
        pi = T.matmul(u_final, self.params["relation"].T)
        return pi, T.softmax(T.leaky_relu(pi))

    def user_side(self, users, conds, aux=None):
        u = T.gather(self.params["user"], users)
        if not self.config.uses_context:
            return u
        cd = T.gather(self.params["condition"], conds)
        nf = conds.shape[1]
        if self.config.attentive:
            pi, beta = self.factor_attention(u)
            if aux is not None:
                aux["factor_scores"], aux["factor_attention"] = pi.data, beta.data
        else:
            beta = np.full((len(users), nf), 1.0 / nf)
        cs = T.weighted_sum(beta, cd)
        return self._aggregate(u, cs, "user")

    def item_side(self, items, u_final, graph, aux=None):
        i = T.gather(self.params["entity"], items)
        if not self.config.uses_kg:
            return i
        rel, ent, mask = graph.nbr_rel[items], graph.nbr_ent[items], graph.nbr_mask[items]
        if self.config.attentive:
            pi, beta = self.relation_attention(u_final)
            if aux is not None:
                aux["relation_scores"], aux["relation_attention"] = pi.data, beta.data
            w = T.take_cols(beta, rel) * mask
        else:
            w = mask / np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
        e = T.weighted_sum(w, T.gather(self.params["entity"], ent))
        return self._aggregate(i, e, "item")

    def head(self, u, i, training=False, rng=None):
        c, p = self.config, self.params
        if c.head == "mf":
            return T.rowdot(u, i) + p["mf_b"]
        x = T.concat([u, i], axis=1)
        if c.head == "mlp":
            h = T.relu(T.matmul(x, p["hidden_w"].T) + p["hidden_b"])
            h = T.dropout(h, c.dropout, training, rng)
            return T.matmul(h, p["out_w"]) + p["out_b"]
        lin = T.matmul(x, p["fm_lin"]) + p["w0"]
        s = T.matmul(x, p["fm_v"])
        s2 = T.matmul(T.square(x), T.square(p["fm_v"]))
        bi = 0.5 * (T.square(s) - s2)
        if c.head == "fm":
            return lin + T.tsum(bi, axis=1)
        h = T.relu(T.matmul(bi, p["hidden_w"].T) + p["hidden_b"])
        h = T.dropout(h, c.dropout, training, rng)
        return lin + T.matmul(h, p["out_w"])

    def _baseline_forward(self, users, items, conds, graph, training, rng):
        """Feature FM / NFM over one-hot user, item, conditions and the item's KG attributes."""
        c, p = self.config, self.params
        mask = graph.nbr_mask[items]
        ent = graph.nbr_ent[items]
        u = T.gather(p["user"], users)
        i = T.gather(p["entity"], items)
        cd = T.gather(p["condition"], conds)
        a = T.gather(p["entity"], ent)
        ones = np.ones(conds.shape)
        total = u + i + T.weighted_sum(ones, cd) + T.weighted_sum(mask, a)
        sq = (T.square(u) + T.square(i) + T.weighted_sum(ones, T.square(cd))
              + T.weighted_sum(mask, T.square(a)))
        bi = 0.5 * (T.square(total) - sq)
        lin = (p["w0"] + T.tsum(T.gather(p["user_w"], users), axis=1)
               + T.tsum(T.gather(p["entity_w"], items), axis=1)
               + T.tsum(T.weighted_sum(ones, T.gather(p["condition_w"], conds)), axis=1)
               + T.tsum(T.weighted_sum(mask, T.gather(p["entity_w"], ent)), axis=1))
        if c.baseline == "fm":
            return lin + T.tsum(bi, axis=1)
        bi = T.dropout(bi, c.dropout, training, rng)
        h = T.relu(T.matmul(bi, p["hidden_w"].T) + p["hidden_b"])
        h = T.dropout(h, c.dropout, training, rng)
        return lin + T.matmul(h, p["out_w"])

    def forward(self, users, items, conds, graph, training=False, rng=None, aux=None):
        """Scores (B,) for a batch: raw ratings for the rating task, logits for ranking."""
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        conds = np.asarray(conds, dtype=np.int64).reshape(len(users), -1)
        if self.config.baseline in ("fm", "nfm"):
            return self._baseline_forward(users, items, conds, graph, training, rng)
        u = self.user_side(users, conds, aux)
        i = self.item_side(items, u, graph, aux)
        u = T.dropout(u, self.config.dropout, training, rng)
        i = T.dropout(i, self.config.dropout, training, rng)
        return self.head(u, i, training, rng)

    def predict(self, users, items, conds, graph, batch_size=4096):
        out = np.empty(len(users))
        with T.no_grad():
            for s in range(0, len(users), batch_size):
                sl = slice(s, s + batch_size)
                out[sl] = self.forward(users[sl], items[sl], conds[sl], graph).data
        return out

    def attention(self, users, conds):
        """Attention sub-passes only; returns a dict of arrays (no parameter mutation)."""
        users = np.asarray(users, dtype=np.int64)
        conds = np.asarray(conds, dtype=np.int64).reshape(len(users), -1)
        out = {}
        with T.no_grad():
            if "factor" in self.params:
                pi, beta = self.factor_attention(T.gather(self.params["user"], users))
                out["factor_scores"], out["factor_attention"] = pi.data, beta.data
            if "relation" in self.params:
                u_final = self.user_side(users, conds)
                pi, beta = self.relation_attention(u_final)
                out["relation_scores"], out["relation_attention"] = pi.data, beta.data
        return out

    def profile(self, user, cond_ids):
        att = self.attention([user], [cond_ids])
        return AttentionProfile(
            user=int(user),
            factor_scores=att.get("factor_scores", np.zeros((1, 0)))[0],
            factor_attention=att.get("factor_attention", np.zeros((1, 0)))[0],
            relation_scores=att.get("relation_scores", np.zeros((1, 0)))[0],
            relation_attention=att.get("relation_attention", np.zeros((1, 0)))[0],
        )

    def param_norm2(self):
        return float(sum((p.data ** 2).sum() for p in self.params.values()))


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model, vocab, meta=None):
    """Single deterministic file: magic line, version line, JSON header line, raw float64 payload."""
    names = sorted(model.params)
    layout, offset = [], 0
    for n in names:
        a = model.params[n].data
        layout.append({"name": n, "shape": list(a.shape), "offset": offset})
        offset += a.size * 8
    header = {
        "config": asdict(model.config),
        "sizes": asdict(model.sizes),
        "vocab": vocab,
        "meta": meta or {},
        "tensors": layout,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(f"version: {CHECKPOINT_VERSION}\n".encode())
        fh.write(f"{len(blob)}\n".encode())
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (model, vocab dict, meta dict)."""
    with open(path, "rb") as fh:
        if fh.readline() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version = int(fh.readline().decode().split(":")[1])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        n = int(fh.readline())
        header = json.loads(fh.read(n))
        payload = fh.read()
    model = Model(ModelConfig(**header["config"]), ModelSizes(**header["sizes"]), init=False)
    for t in header["tensors"]:
        size = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=t["offset"]).reshape(t["shape"])
        model.params[t["name"]] = Tensor(arr.astype(np.float64), True, t["name"])
    return model, header["vocab"], header["meta"]


def bundle_vocab(bundle):
    return {
        "users": bundle.users.names,
        "items": bundle.items.names,
        "entities": bundle.entities.names,
        "relations": bundle.relations.names,
        "conditions": bundle.conditions.names,
        "factors": bundle.schema.factors,
        "task": bundle.task,
    }
