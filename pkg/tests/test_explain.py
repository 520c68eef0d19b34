import hashlib
import json
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cakgcn.data import KnowledgeGraph
from cakgcn.explain import (ExplainError, UserAttentionVector, adjusted_rand_index, export_analysis,
                            extract_attention, kmeans, render_explanation, select_k, silhouette,
                            write_explanations, write_k_diagnostics)
from cakgcn.model import AttentionProfile, Model, ModelConfig, ModelSizes, bundle_vocab


def blobs(centers, n, scale, seed):
    rng = np.random.default_rng(seed)
    pts = np.vstack([c + scale * rng.normal(size=(n, len(c))) for c in np.asarray(centers, float)])
    return pts, np.repeat(np.arange(len(centers)), n)


@pytest.fixture
def tiny_model(tiny_bundle):
    return Model(ModelConfig(dim=6), ModelSizes.from_bundle(tiny_bundle), np.random.default_rng(0))


def param_digest(model):
    h = hashlib.sha256()
    for k in sorted(model.params):
        h.update(model.params[k].data.tobytes())
    return h.hexdigest()


def test_uniform_when_factor_embeddings_equal(tiny_model, tiny_bundle):
    tiny_model.params["factor"].data[:] = 0.5
    vecs, _ = extract_attention(tiny_model, bundle_vocab(tiny_bundle), ["u1", "u2", "u3"])
    for v in vecs:
        assert np.allclose(v.weights, 0.5)


def test_factor_attention_same_across_situations(tiny_model, tiny_bundle):
    vocab = bundle_vocab(tiny_bundle)
    before = param_digest(tiny_model)
    sits = [("morning", "home"), ("evening", "work")]
    vecs, rel = extract_attention(tiny_model, vocab, ["u1", "u1"], sits)
    assert np.array_equal(vecs[0].weights, vecs[1].weights)
    assert not np.array_equal(rel[("u1", sits[0])], rel[("u1", sits[1])])
    assert param_digest(tiny_model) == before


def test_extract_errors(tiny_model, tiny_bundle):
    vocab = bundle_vocab(tiny_bundle)
    with pytest.raises(ExplainError, match="unknown user"):
        extract_attention(tiny_model, vocab, ["ghost"])
    with pytest.raises(ExplainError, match="unknown condition"):
        extract_attention(tiny_model, vocab, ["u1"], ("noon", "home"))
    avg = Model(ModelConfig(dim=6, aggregator="avg"), ModelSizes.from_bundle(tiny_bundle))
    with pytest.raises(ExplainError, match="no factor attention"):
        extract_attention(avg, vocab, ["u1"])


def test_kmeans_k1_is_mean():
    x = np.random.default_rng(0).normal(size=(40, 3))
    a = kmeans(x, 1)
    assert np.allclose(a.centroids[0], x.mean(axis=0))
    assert a.inertia == pytest.approx(x.var(axis=0).sum() * len(x))


def test_kmeans_two_blobs_exact_means():
    x, truth = blobs([[0, 0], [10, 10]], 20, 0.5, 1)
    a = kmeans(x, 2, seed=3)
    assert adjusted_rand_index(truth, a.labels) == 1.0
    for c in range(2):
        assert np.allclose(a.centroids[c], x[a.labels == c].mean(axis=0))


def test_kmeans_errors_and_determinism():
    x = np.random.default_rng(2).normal(size=(5, 2))
    with pytest.raises(ValueError, match="exceeds"):
        kmeans(x, 6)
    with pytest.raises(ValueError):
        kmeans(x, 0)
    a, b = kmeans(x, 3, seed=7), kmeans(x, 3, seed=7)
    assert np.array_equal(a.labels, b.labels) and a.inertia == b.inertia


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(1, 4), st.integers(0, 10**6))
def test_kmeans_fixed_point(n, d, seed):
    x = np.round(np.random.default_rng(seed).normal(size=(n, d)), 1)  # duplicates stress empty clusters
    k = min(n, 1 + seed % 5)
    a = kmeans(x, k, seed=seed, restarts=3)
    assert a.labels.min() >= 0 and a.labels.max() < k
    d2 = ((x[:, None, :] - a.centroids[None]) ** 2).sum(axis=2)
    assert np.allclose(d2[np.arange(n), a.labels], d2.min(axis=1))
    for c in np.unique(a.labels):
        assert np.allclose(a.centroids[c], x[a.labels == c].mean(axis=0))
    assert a.inertia == pytest.approx(d2.min(axis=1).sum())


def silhouette_oracle(x, labels):
    out = []
    for i in range(len(x)):
        own = [j for j in range(len(x)) if labels[j] == labels[i] and j != i]
        if not own:
            out.append(0.0)
            continue
        a = np.mean([np.linalg.norm(x[i] - x[j]) for j in own])
        b = min(np.mean([np.linalg.norm(x[i] - x[j]) for j in range(len(x)) if labels[j] == c])
                for c in set(labels) if c != labels[i])
        out.append((b - a) / max(a, b))
    return float(np.mean(out))


def test_silhouette_matches_oracle():
    rng = np.random.default_rng(5)
    for _ in range(10):
        x = rng.normal(size=(12, 3))
        labels = rng.integers(0, 3, size=12)
        labels[:3] = [0, 1, 2]
        assert silhouette(x, labels) == pytest.approx(silhouette_oracle(x, labels), abs=1e-9)


def test_select_k_three_blobs():
    x, _ = blobs([[0, 0], [6, 0], [3, 3 * np.sqrt(3)]], 15, 0.3, 2)
    sel = select_k(x, range(2, 7), seed=1)
    assert sel.k == 3 and not sel.no_clear_structure
    assert [d[0] for d in sel.diagnostics] == [2, 3, 4, 5, 6]
    again = select_k(x, range(2, 7), seed=1)
    assert again.k == sel.k and again.diagnostics == sel.diagnostics


def test_select_k_flags_single_blob(tmp_path):
    x = 0.01 * np.random.default_rng(3).normal(size=(60, 5))
    sel = select_k(x, [2, 3, 4])
    assert all(s < 0.3 for _, _, s in sel.diagnostics) and sel.no_clear_structure
    write_k_diagnostics(sel, tmp_path / "k.tsv")
    assert "no clear structure" in (tmp_path / "k.tsv").read_text()


def ari_oracle(a, b):
    pairs = list(combinations(range(len(a)), 2))
    same_a = np.array([a[i] == a[j] for i, j in pairs])
    same_b = np.array([b[i] == b[j] for i, j in pairs])
    index = float(np.sum(same_a & same_b))
    expected = same_a.sum() * same_b.sum() / len(pairs)
    top = (same_a.sum() + same_b.sum()) / 2
    return (index - expected) / (top - expected)


def test_ari():
    assert adjusted_rand_index([0, 0, 1, 1], [5, 5, 2, 2]) == 1.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.integers(0, 3, size=15), rng.integers(0, 4, size=15)
        assert adjusted_rand_index(a, b) == pytest.approx(ari_oracle(a, b), abs=1e-12)


def test_export(tmp_path):
    vecs = [UserAttentionVector(u, w) for u, w in
            [("a", np.array([0.9, 0.1])), ("b", np.array([0.8, 0.2])), ("c", np.array([0.1, 0.9]))]]
    a = kmeans(np.array([v.weights for v in vecs]), 2)
    export_analysis(a, vecs, ["time", "place"], tmp_path / "x")
    export_analysis(a, vecs, ["time", "place"], tmp_path / "y")
    clusters = (tmp_path / "x" / "clusters.tsv").read_text().splitlines()
    cents = (tmp_path / "x" / "centroids.tsv").read_text().splitlines()
    assert len(clusters) == 4 and len(cents) == 3
    assert cents[0] == "cluster\ttime\tplace"
    for row in cents[1:]:
        assert abs(sum(map(float, row.split("\t")[1:])) - 1) < 1e-6
    for n in ("clusters.tsv", "centroids.tsv", "attention.tsv"):
        assert (tmp_path / "x" / n).read_bytes() == (tmp_path / "y" / n).read_bytes()


YELP_KG = KnowledgeGraph.from_triplets([
    ("r1", "goodformeal", "dinner"), ("r1", "ambience", "casual"), ("r1", "price", "cheap")])


def yelp_profile():
    return AttentionProfile(user=0, factor_attention=np.array([0.2, 0.7, 0.1]),
                            relation_attention=np.array([0.55, 0.3, 0.15]))


def test_dinner_on_a_weekend_evening():
    factors = ["day of week", "time of day", "companion"]
    rels = ["goodformeal", "ambience", "price"]
    e = render_explanation(yelp_profile(), "alice", "r1", YELP_KG, ("weekend", "evening", "alone"),
                           factors, rels)
    assert e.sentence == ("Under day of week = weekend and time of day = evening and companion = alone, "
                          "this is recommended because its goodformeal: dinner matches what matters most "
                          "to you (55.0%), especially given time of day: evening.")
    assert e.relations == [{"relation": "goodformeal", "values": ["dinner"], "weight": 0.55}]
    assert e.factors == [{"factor": "time of day", "condition": "evening", "weight": 0.7}]


def test_item_without_triplets_falls_back_to_context():
    e = render_explanation(yelp_profile(), "alice", "r9", YELP_KG, ("weekend", "evening", "alone"),
                           ["d", "t", "c"], ["goodformeal", "ambience", "price"])
    assert e.relations == [] and "what matters most to you right now (t: evening, 70.0%)" in e.sentence


def test_skips_relations_the_item_lacks():
    kg = KnowledgeGraph.from_triplets([("r2", "price", "cheap")])
    e = render_explanation(yelp_profile(), "u", "r2", kg, ("a", "b", "c"), ["d", "t", "c"],
                           ["goodformeal", "ambience", "price"], top_n=2)
    assert [r["relation"] for r in e.relations] == ["price"]
    assert e.relations[0]["weight"] == 0.15


def test_top_n_zero():
    e = render_explanation(yelp_profile(), "u", "r1", YELP_KG, ("a", "b", "c"), ["d", "t", "c"],
                           ["goodformeal", "ambience", "price"], top_n=0)
    assert e.factors == [] and e.relations == []
    assert e.sentence == "Under d = a and t = b and c = c, this is recommended for you."


def test_write_explanations(tmp_path):
    e = render_explanation(yelp_profile(), "u", "r1", YELP_KG, ("a", "b", "c"), ["d", "t", "c"],
                           ["goodformeal", "ambience", "price"], top_n=2)
    write_explanations([e, e], tmp_path / "e.jsonl")
    lines = (tmp_path / "e.jsonl").read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert rec["relations"][1] == {"relation": "ambience", "values": ["casual"], "weight": 0.3}
    assert "match what matters most to you (55.0%, 30.0%)" in rec["sentence"]
