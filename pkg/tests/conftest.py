import numpy as np
import pytest

from cakgcn import tensor as T
from cakgcn.data import ContextSchema, InteractionRecord, KnowledgeGraph, build_bundle
from cakgcn.synthetic import SyntheticSpec, generate_synthetic


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar f() with respect to the array x (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        old = x[ix]
        x[ix] = old + h
        fp = f()
        x[ix] = old - h
        fm = f()
        x[ix] = old
        g[ix] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def check_grads(build, leaves, tol=1e-4):
    """build() -> scalar Tensor using ``leaves``; compares backward() to central differences."""
    for p in leaves:
        p.grad = None
    out = build()
    out.backward()
    for p in leaves:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)

        def f():
            with T.no_grad():
                return float(build().data)

        num = numeric_grad(f, p.data)
        err = np.abs(analytic - num) / np.maximum(1.0, np.abs(analytic) + np.abs(num))
        assert err.max() < tol, (p.name, err.max())


@pytest.fixture
def tiny_records():
    rows = [
        ("u1", "i1", ("morning", "home"), 1.0),
        ("u1", "i2", ("evening", "work"), 1.0),
        ("u1", "i3", ("morning", "work"), 1.0),
        ("u2", "i2", ("morning", "home"), 1.0),
        ("u2", "i4", ("evening", "home"), 1.0),
        ("u2", "i1", ("evening", "work"), 1.0),
        ("u3", "i3", ("morning", "home"), 1.0),
        ("u3", "i4", ("evening", "work"), 1.0),
        ("u3", "i1", ("morning", "work"), 1.0),
    ]
    return [InteractionRecord(*r) for r in rows]


@pytest.fixture
def tiny_kg():
    return KnowledgeGraph.from_triplets([
        ("i1", "genre", "jazz"), ("i1", "price", "cheap"),
        ("i2", "genre", "rock"), ("i2", "price", "cheap"),
        ("i3", "genre", "jazz"), ("i3", "price", "pricey"),
        ("i4", "genre", "rock"),
    ])


@pytest.fixture
def tiny_bundle(tiny_records, tiny_kg):
    schema = ContextSchema(["time", "place"])
    return build_bundle(tiny_records, schema, "ranking", kg=tiny_kg, seed=0)


@pytest.fixture(scope="session")
def small_synth():
    return generate_synthetic(SyntheticSpec(n_users=30, n_items=40, interactions_per_user=12, seed=3))
