import numpy as np
import pytest

from cakgcn.synthetic import (PRESETS, SyntheticSpec, benchmark_spec, generate_synthetic, probe_auc,
                              write_synthetic)


def test_same_seed_same_files(tmp_path):
    spec = SyntheticSpec(n_users=20, n_items=30, interactions_per_user=8, seed=11)
    write_synthetic(generate_synthetic(spec), tmp_path / "a")
    write_synthetic(generate_synthetic(spec), tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["interactions.tsv", "kg.tsv", "schema.txt", "synth_spec.txt",
                     "truth_factors.tsv", "truth_relations.tsv"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_different_seed_differs():
    a = generate_synthetic(SyntheticSpec(n_users=10, n_items=20, interactions_per_user=5, seed=0))
    b = generate_synthetic(SyntheticSpec(n_users=10, n_items=20, interactions_per_user=5, seed=1))
    assert a.records != b.records


@pytest.mark.parametrize("bad", [dict(n_users=0), dict(n_items=0), dict(noise=-1.0),
                                 dict(dominant_weight=0.1), dict(top_fraction=0.0)])
def test_degenerate_specs_rejected(bad):
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(**bad))


def test_truth_vectors_are_distributions(small_synth):
    for vec in list(small_synth.factor_truth.values()) + list(small_synth.relation_truth.values()):
        assert np.all(vec >= 0) and abs(vec.sum() - 1.0) < 1e-9
    for user, vec in small_synth.factor_truth.items():
        assert int(np.argmax(vec)) == small_synth.groups[user]


def test_counts_and_kg_shape(small_synth):
    s = small_synth.spec
    assert len(small_synth.records) == s.n_users * s.interactions_per_user
    assert len(small_synth.kg.triplets) == s.n_items * s.n_relations
    keys = {(r.user, r.item, r.situation) for r in small_synth.records}
    assert len(keys) == len(small_synth.records)


def test_noiseless_labels_depend_on_dominant_condition_only():
    spec = SyntheticSpec(n_users=6, n_items=8, interactions_per_user=150, task="rating", noise=0.0,
                         dominant_weight=1.0, seed=4)
    data = generate_synthetic(spec)
    labels = {}
    for r in data.records:
        f = data.groups[r.user]
        key = (r.user, r.item, r.situation[f])
        labels.setdefault(key, set()).add(r.label)
    assert len(labels) < len(data.records)  # some keys really repeat
    assert all(len(v) == 1 for v in labels.values())


def test_ratings_in_scale():
    data = generate_synthetic(SyntheticSpec(n_users=10, n_items=20, interactions_per_user=10, task="rating"))
    assert {r.label for r in data.records} <= {1.0, 2.0, 3.0, 4.0, 5.0}
    assert data.bundle().scale == (1.0, 5.0)


def test_probe_finds_signal():
    data = generate_synthetic(SyntheticSpec(noise=0.1, seed=0))
    assert probe_auc(data) > 0.8


def test_presets():
    assert set(PRESETS) == {"default", "attention", "kg", "frappe"}
    fr = benchmark_spec("frappe")
    assert (fr.n_users, fr.n_items, fr.n_users * fr.interactions_per_user) == (957, 4082, 95700)
    assert benchmark_spec("attention", seed=5).seed == 5
    with pytest.raises(ValueError, match="unknown synthetic preset"):
        benchmark_spec("yelp")
