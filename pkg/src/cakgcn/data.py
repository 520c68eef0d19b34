"""Dataset schemas, TSV ingestion, vocabularies, split protocols and negative sampling."""

import csv
import math
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

RATING = "rating"
RANKING = "ranking"
TASKS = (RATING, RANKING)


class DataError(ValueError):
    """Malformed or inconsistent input data; message carries file and line when known."""


class Vocab:
    """Name <-> id map; ids are assigned in first-seen order."""

    def __init__(self, names=()):
        self.names = []
        self.index = {}
        for n in names:
            self.add(n)

    def add(self, name):
        i = self.index.get(name)
        if i is None:
            i = len(self.names)
            self.index[name] = i
            self.names.append(name)
        return i

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self.index

    def __getitem__(self, name):
        return self.index[name]

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.names == other.names

    def __repr__(self):
        return f"Vocab({len(self)})"


@dataclass
class ContextSchema:
    """Ordered contextual factors and, per factor, its vocabulary of conditions."""

    factors: list
    conditions: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.factors)) != len(self.factors):
            raise DataError(f"duplicate factor names in {self.factors}")
        for f in self.factors:
            self.conditions.setdefault(f, [])

    @property
    def n_factors(self):
        return len(self.factors)

    def add_condition(self, factor, cond):
        conds = self.conditions[factor]
        if cond not in conds:
            conds.append(cond)

    def copy_empty(self):
        return ContextSchema(list(self.factors))


@dataclass(frozen=True)
class InteractionRecord:
    user: str
    item: str
    situation: tuple
    label: float = 1.0


def situation_key(situation):
    return "|".join(situation)


@dataclass
class KnowledgeGraph:
    """Triplets (head, relation, tail) plus an item-centric adjacency."""

    triplets: list
    entities: Vocab
    relations: Vocab
    adjacency: dict

    @classmethod
    def from_triplets(cls, triplets, items=None):
        """``items``: names that count as items; None makes every head an item."""
        entities, relations = Vocab(), Vocab()
        adjacency = OrderedDict()
        clean = []
        for h, r, t in triplets:
            if h == t:
                raise DataError(f"self-loop triplet ({h}, {r}, {t})")
            entities.add(h)
            relations.add(r)
            entities.add(t)
            clean.append((h, r, t))
            if items is None or h in items:
                adjacency.setdefault(h, []).append((r, t))
        return cls(clean, entities, relations, adjacency)

    def restrict_to(self, items):
        return KnowledgeGraph.from_triplets(self.triplets, items)

    def attribute_values(self, item, relation):
        return [e for r, e in self.adjacency.get(item, ()) if r == relation]


# ---------------------------------------------------------------------------
# file formats

def _open_tsv(path):
    return open(path, newline="", encoding="utf-8")


def read_schema_file(path):
    """Parse the ``key: value`` sidecar. Returns (task, scale, ContextSchema)."""
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if ":" not in line:
                raise DataError(f"{path}:{lineno}: expected 'key: value'")
            k, v = line.split(":", 1)
            meta[k.strip()] = v.strip()
    task = meta.get("task", RANKING)
    if task not in TASKS:
        raise DataError(f"{path}: unknown task {task!r}")
    scale = parse_scale(meta.get("scale", "implicit"))
    factors = [f.strip() for f in meta.get("factors", "").split(",") if f.strip()]
    return task, scale, ContextSchema(factors)


def write_schema_file(path, task, scale, schema):
    scale_s = "implicit" if scale is None else f"{_fmt_num(scale[0])}-{_fmt_num(scale[1])}"
    Path(path).write_text(
        f"task: {task}\nscale: {scale_s}\nfactors: {','.join(schema.factors)}\n", encoding="utf-8")


def parse_scale(text):
    if text in (None, "", "implicit", "none"):
        return None
    lo, hi = text.split("-")
    return float(lo), float(hi)


def _fmt_num(x):
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def load_interactions(path, schema, scale=None):
    """Parse an interactions TSV against ``schema``; conditions are added to the schema as seen."""
    records = []
    with _open_tsv(path) as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: missing header")
        if len(header) < 3 or header[0] != "user" or header[1] != "item" or header[-1] != "label":
            raise DataError(f"{path}:1: header must be user, item, <factors...>, label")
        cols = header[2:-1]
        unknown = [c for c in cols if c not in schema.factors]
        if unknown:
            raise DataError(f"{path}:1: unknown factor column(s) {unknown}")
        if cols != list(schema.factors):
            raise DataError(f"{path}:1: factor columns {cols} do not match schema {schema.factors}")
        width = len(header)
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                label = float(row[-1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: label {row[-1]!r} is not a number") from None
            if not math.isfinite(label):
                raise DataError(f"{path}:{lineno}: non-finite label")
            if scale is not None and not scale[0] <= label <= scale[1]:
                raise DataError(f"{path}:{lineno}: rating {label} outside scale {scale}")
            situation = tuple(row[2:-1])
            if any(c == "" for c in situation) or not row[0] or not row[1]:
                raise DataError(f"{path}:{lineno}: empty field")
            for f, c in zip(schema.factors, situation):
                schema.add_condition(f, c)
            records.append(InteractionRecord(row[0], row[1], situation, label))
    return records


def write_interactions(path, records, schema):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["user", "item", *schema.factors, "label"])
        for r in records:
            w.writerow([r.user, r.item, *r.situation, _fmt_num(r.label)])


def load_kg(path, items=None):
    triplets = []
    with _open_tsv(path) as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header != ["head", "relation", "tail"]:
            raise DataError(f"{path}:1: header must be head, relation, tail")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 3 or not all(row):
                raise DataError(f"{path}:{lineno}: expected 3 non-empty fields")
            if row[0] == row[2]:
                raise DataError(f"{path}:{lineno}: self-loop triplet {tuple(row)}")
            triplets.append(tuple(row))
    return KnowledgeGraph.from_triplets(triplets, items)


def write_kg(path, triplets):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["head", "relation", "tail"])
        w.writerows(triplets)


# ---------------------------------------------------------------------------
# ingestion transforms

@dataclass
class IngestTransform:
    """Column-level rewrite applied to a raw interactions table before loading.

    ``drop``: factor columns removed; ``to_kg``: factor columns that are really
    item attributes, turned into (item, column, value) triplets; ``label_column``:
    raw name of the label column.
    """

    drop: tuple = ()
    to_kg: tuple = ()
    label_column: str = "label"


# weekday duplicates isweekend, city is nested in country, cost describes the app
FRAPPE_TRANSFORM = IngestTransform(drop=("weekday", "city"), to_kg=("cost",), label_column="cnt")


def apply_transform(raw_path, out_path, transform):
    """Rewrite a raw TSV into the canonical interactions format.

    Returns (factor names, extra KG triplets).
    """
    extra, seen = [], set()
    with _open_tsv(raw_path) as fh, open(out_path, "w", newline="", encoding="utf-8") as out:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or header[:2] != ["user", "item"] or transform.label_column not in header:
            raise DataError(f"{raw_path}:1: raw header needs user, item and {transform.label_column!r}")
        label_at = header.index(transform.label_column)
        keep = [i for i, c in enumerate(header)
                if i >= 2 and i != label_at and c not in transform.drop and c not in transform.to_kg]
        kg_cols = [i for i, c in enumerate(header) if c in transform.to_kg]
        factors = [header[i] for i in keep]
        w = csv.writer(out, delimiter="\t", lineterminator="\n")
        w.writerow(["user", "item", *factors, "label"])
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{raw_path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            w.writerow([row[0], row[1], *(row[i] for i in keep), row[label_at]])
            for i in kg_cols:
                t = (row[1], header[i], row[i])
                if t not in seen and row[1] != row[i]:
                    seen.add(t)
                    extra.append(t)
    return factors, extra


# ---------------------------------------------------------------------------
# splits and sampling

def split_random(records, ratios=(0.8, 0.1, 0.1), seed=0):
    """Random partition with largest-remainder rounding (ties go to the earlier split)."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    n = len(records)
    raw = [n * r for r in ratios]
    sizes = [math.floor(x + 1e-9) for x in raw]
    rem = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda j: (-(raw[j] - sizes[j]), j))
    for j in order[:rem]:
        sizes[j] += 1
    perm = np.random.default_rng(seed).permutation(n)
    parts, start = [], 0
    for s in sizes:
        idx = np.sort(perm[start:start + s])
        parts.append([records[i] for i in idx])
        start += s
    return tuple(parts)


def split_leave_one_out(records, seed=0):
    """Hold out one random record per user with at least two records."""
    by_user = OrderedDict()
    for i, r in enumerate(records):
        by_user.setdefault(r.user, []).append(i)
    rng = np.random.default_rng(seed)
    held = set()
    for idx in by_user.values():
        if len(idx) >= 2:
            held.add(idx[int(rng.integers(len(idx)))])
    train = [r for i, r in enumerate(records) if i not in held]
    test = [r for i, r in enumerate(records) if i in held]
    return train, test


def interacted_sets(records):
    """(user, situation) -> set of items seen together."""
    out = defaultdict(set)
    for r in records:
        out[(r.user, r.situation)].add(r.item)
    return out


class NegativeSample(NamedTuple):
    records: list
    short: bool


def sample_negatives(positive, k, interacted, catalog, rng):
    """k items the user never touched under the positive's situation, uniform without replacement.

    ``catalog``: ordered item names.  When fewer than k candidates exist, all of
    them are returned and ``short`` is set.
    """
    if k <= 0:
        return NegativeSample([], False)
    seen = interacted.get((positive.user, positive.situation), set())
    cands = [it for it in catalog if it not in seen]
    short = len(cands) < k
    if short:
        picks = cands
    else:
        picks = [cands[j] for j in rng.choice(len(cands), size=k, replace=False)]
    return NegativeSample(
        [InteractionRecord(positive.user, it, positive.situation, 0.0) for it in picks], short)


def dedupe(records):
    """Drop repeated (user, item, situation) triples, keeping the first."""
    seen, out = set(), []
    for r in records:
        key = (r.user, r.item, r.situation)
        if key not in seen:
            seen.add(key)
            out.append(r)
    return out


# ---------------------------------------------------------------------------
# bundle

@dataclass
class InteractionArrays:
    users: np.ndarray
    items: np.ndarray
    conds: np.ndarray  # (n, n_factors) global condition ids
    labels: np.ndarray

    def __len__(self):
        return len(self.users)

    def take(self, idx):
        return InteractionArrays(self.users[idx], self.items[idx], self.conds[idx], self.labels[idx])

    @staticmethod
    def concat(parts):
        return InteractionArrays(*(np.concatenate([getattr(p, f) for p in parts])
                                   for f in ("users", "items", "conds", "labels")))


class DatasetBundle:
    """Splits, schema, knowledge graph and integer vocabularies for one dataset.

    Vocabularies are built in first-seen order over train, valid, test and then
    the KG, so two bundles built from the same splits share ids.  Items occupy
    the first rows of the entity vocabulary.
    """

    def __init__(self, schema, train, valid, test, task, scale=None, kg=None):
        if task not in TASKS:
            raise DataError(f"unknown task {task!r}")
        self.task = task
        self.scale = scale
        self.splits = {"train": list(train), "valid": list(valid), "test": list(test)}
        self.schema = schema.copy_empty()
        self.users, self.items = Vocab(), Vocab()
        self.conditions = Vocab()
        cond_factor = []
        for split in ("train", "valid", "test"):
            for r in self.splits[split]:
                if len(r.situation) != self.schema.n_factors:
                    raise DataError(f"situation {r.situation} does not match factors {self.schema.factors}")
                if scale is not None and not scale[0] <= r.label <= scale[1]:
                    raise DataError(f"rating {r.label} outside scale {scale}")
                self.users.add(r.user)
                self.items.add(r.item)
                for fi, (f, c) in enumerate(zip(self.schema.factors, r.situation)):
                    key = f"{f}={c}"
                    if key not in self.conditions:
                        self.conditions.add(key)
                        cond_factor.append(fi)
                        self.schema.add_condition(f, c)
        self.condition_factor = np.asarray(cond_factor, dtype=np.int64)
        self.entities = Vocab(self.items.names)
        self.relations = Vocab()
        self.kg = None
        if kg is not None:
            self.kg = kg.restrict_to(self.items.index)
            for h, r, t in self.kg.triplets:
                self.entities.add(h)
                self.relations.add(r)
                self.entities.add(t)
        self._arrays = {}
        self._build_adjacency()

    @property
    def has_kg(self):
        return self.kg is not None and len(self.relations) > 0

    @property
    def n_non_item_entities(self):
        return len(self.entities) - len(self.items)

    def _build_adjacency(self):
        n = len(self.items)
        rows = [[] for _ in range(n)]
        if self.kg is not None:
            for item, edges in self.kg.adjacency.items():
                i = self.items[item]
                rows[i] = [(self.relations[r], self.entities[e]) for r, e in edges]
        width = max([len(r) for r in rows] + [1])
        self.nbr_rel = np.zeros((n, width), dtype=np.int64)
        self.nbr_ent = np.zeros((n, width), dtype=np.int64)
        self.nbr_mask = np.zeros((n, width))
        for i, edges in enumerate(rows):
            for j, (r, e) in enumerate(edges):
                self.nbr_rel[i, j] = r
                self.nbr_ent[i, j] = e
                self.nbr_mask[i, j] = 1.0

    def condition_ids(self, situation):
        return [self.conditions[f"{f}={c}"] for f, c in zip(self.schema.factors, situation)]

    def encode(self, records):
        n, nf = len(records), self.schema.n_factors
        users = np.empty(n, dtype=np.int64)
        items = np.empty(n, dtype=np.int64)
        conds = np.empty((n, nf), dtype=np.int64)
        labels = np.empty(n)
        try:
            for k, r in enumerate(records):
                users[k] = self.users[r.user]
                items[k] = self.items[r.item]
                conds[k] = self.condition_ids(r.situation)
                labels[k] = r.label
        except KeyError as exc:
            raise DataError(f"unknown id {exc.args[0]!r}") from None
        return InteractionArrays(users, items, conds, labels)

    def arrays(self, split):
        if split not in self._arrays:
            self._arrays[split] = self.encode(self.splits[split])
        return self._arrays[split]

    def all_records(self):
        return self.splits["train"] + self.splits["valid"] + self.splits["test"]

    def stats(self):
        """Counts in the layout of the usual dataset-statistics table."""
        n_int = sum(len(v) for v in self.splits.values())
        nu, ni = len(self.users), len(self.items)
        pairs = {(r.user, r.item) for r in self.all_records()}
        return OrderedDict([
            ("users", nu),
            ("items", ni),
            ("interactions", n_int),
            ("sparsity", 1.0 - len(pairs) / (nu * ni) if nu and ni else 0.0),
            ("contextual_factors", self.schema.n_factors),
            ("contextual_conditions", len(self.conditions)),
            ("relations", len(self.relations)),
            ("non_item_entities", self.n_non_item_entities),
            ("kg_triplets", len(self.kg.triplets) if self.kg is not None else 0),
            ("train", len(self.splits["train"])),
            ("valid", len(self.splits["valid"])),
            ("test", len(self.splits["test"])),
        ])

    # -- disk layout -------------------------------------------------------

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_schema_file(d / "schema.txt", self.task, self.scale, self.schema)
        for split, recs in self.splits.items():
            write_interactions(d / f"{split}.tsv", recs, self.schema)
        if self.kg is not None:
            write_kg(d / "kg.tsv", self.kg.triplets)
        with open(d / "stats.txt", "w", encoding="utf-8") as fh:
            for k, v in self.stats().items():
                fh.write(f"{k}: {v:.6f}\n" if isinstance(v, float) else f"{k}: {v}\n")

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        task, scale, schema = read_schema_file(d / "schema.txt")
        splits = [load_interactions(d / f"{s}.tsv", schema, scale) for s in ("train", "valid", "test")]
        kg = load_kg(d / "kg.tsv") if (d / "kg.tsv").exists() else None
        return cls(schema, *splits, task=task, scale=scale, kg=kg)


def build_bundle(records, schema, task, scale=None, kg=None, seed=0):
    """Split ``records`` with the task's protocol and wrap them in a bundle.

    rating: random 80/10/10.  ranking: duplicates removed, then leave-one-out
    for test and a second leave-one-out on the remainder for validation.
    """
    if task == RATING:
        train, valid, test = split_random(records, (0.8, 0.1, 0.1), seed)
    else:
        rest, test = split_leave_one_out(dedupe(records), seed)
        train, valid = split_leave_one_out(rest, seed + 1)
    return DatasetBundle(schema, train, valid, test, task, scale, kg)


class NegativeSampler:
    """Vectorised negative sampling against every interaction in the bundle.

    Draws are uniform over items the user has not interacted with under the
    same situation, without replacement inside one positive's group.  Slots
    that cannot be filled are returned as -1.
    """

    MAX_ROUNDS = 64

    def __init__(self, bundle):
        names = ("train", "valid", "test")
        parts = [bundle.arrays(s) for s in names]
        allr = InteractionArrays.concat(parts)
        self.n_items = len(bundle.items)
        if len(allr):
            _, inv = np.unique(np.column_stack([allr.users, allr.conds]), axis=0, return_inverse=True)
            inv = inv.ravel()
        else:
            inv = np.zeros(0, dtype=np.int64)
        self.pair_of, start = {}, 0
        for s, p in zip(names, parts):
            self.pair_of[s] = inv[start:start + len(p)]
            start += len(p)
        self.keys = np.unique(inv * self.n_items + allr.items)

    def _bad(self, pairs, draws):
        bad = np.isin(pairs[:, None] * self.n_items + draws, self.keys)
        for j in range(1, draws.shape[1]):
            bad[:, j] |= (draws[:, :j] == draws[:, j:j + 1]).any(axis=1)
        return bad

    def sample(self, split, idx, k, rng):
        idx = np.asarray(idx, dtype=np.int64)
        pairs = self.pair_of[split][idx]
        draws = rng.integers(self.n_items, size=(len(idx), k))
        for _ in range(self.MAX_ROUNDS):
            bad = self._bad(pairs, draws)
            if not bad.any():
                return draws
            draws[bad] = rng.integers(self.n_items, size=int(bad.sum()))
        bad = self._bad(pairs, draws)
        for row in np.flatnonzero(bad.any(axis=1)):
            taken = self.keys[(self.keys >= pairs[row] * self.n_items)
                              & (self.keys < (pairs[row] + 1) * self.n_items)] - pairs[row] * self.n_items
            cands = np.setdiff1d(np.arange(self.n_items), taken)
            pick = rng.choice(cands, size=min(k, len(cands)), replace=False)
            draws[row] = -1
            draws[row, :len(pick)] = pick
        return draws
