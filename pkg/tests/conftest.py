"""Shared fixtures and slow, independent reference implementations.

The oracles here deliberately avoid the package's compiled feature index:
they loop over assignments as plain dicts and call ``Feature.holds``.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from ktrans.mapping import Correspondence, Mapping
from ktrans.model import Feature, Literal, LogLinearModel, Schema, Variable


def assignments(schema: Schema):
    for vals in itertools.product(*(v.domain for v in schema.variables)):
        yield dict(zip(schema.names, vals))


def slow_energy(model: LogLinearModel, a: dict) -> float:
    return sum(f.weight for f in model.features if f.holds(a))


def slow_distribution(model: LogLinearModel) -> dict[tuple, float]:
    """{value tuple in schema order: probability}."""
    e = {tuple(a.values()): slow_energy(model, a) for a in assignments(model.schema)}
    m = max(e.values())
    z = sum(math.exp(v - m) for v in e.values())
    return {k: math.exp(v - m) / z for k, v in e.items()}


def slow_conditional(model: LogLinearModel, a: dict, var: str) -> float:
    """p(var = a[var] | the rest of a)."""
    scores = {}
    for v in model.schema[var].domain:
        b = dict(a)
        b[var] = v
        scores[v] = slow_energy(model, b)
    m = max(scores.values())
    z = sum(math.exp(s - m) for s in scores.values())
    return math.exp(scores[a[var]] - m) / z


def slow_pll(model: LogLinearModel, rows: list[dict]) -> float:
    return sum(sum(math.log(slow_conditional(model, a, n)) for n in model.schema.names) for a in rows) / len(rows)


def eq1_target_table(src: LogLinearModel, m: Mapping) -> np.ndarray:
    """p(x') = sum_x p(x) prod_i p(c'_i | c_i), target cells with no correspondence uniform."""
    p_src = slow_distribution(src)
    tgt = m.target_schema
    mapped = m.mapped_target_vars()
    n_free = math.prod(tgt[n].size for n in tgt.names if n not in mapped)
    out = np.zeros(tgt.sizes)
    for xs, px in p_src.items():
        x = dict(zip(src.schema.names, xs))
        for idx in itertools.product(*(range(s) for s in tgt.sizes)):
            y = {n: tgt[n].domain[i] for n, i in zip(tgt.names, idx)}
            prob = px / n_free
            for c in m.correspondences:
                r = np.ravel_multi_index([src.schema[n].index(x[n]) for n in c.source_vars], [src.schema[n].size for n in c.source_vars])
                k = np.ravel_multi_index([tgt[n].index(y[n]) for n in c.target_vars], [tgt[n].size for n in c.target_vars])
                prob *= c.table[r, k]
            out[idx] += prob
    return out


def random_model(rng: np.random.Generator, schema: Schema, n_features: int, scale: float = 1.0, max_order: int = 3) -> LogLinearModel:
    feats = []
    for _ in range(n_features):
        k = int(rng.integers(1, min(max_order, len(schema)) + 1))
        vs = rng.choice(len(schema), size=k, replace=False)
        lits = tuple(Literal(schema.variables[j].name, schema.variables[j].domain[rng.integers(schema.variables[j].size)]) for j in sorted(vs))
        feats.append(Feature(lits, float(rng.normal(0, scale))))
    return LogLinearModel(schema, tuple(feats))


def random_table(rng: np.random.Generator, rows: int, cols: int, conc: float = 1.0) -> np.ndarray:
    return rng.dirichlet(np.full(cols, conc), size=rows)


def random_mapping(rng: np.random.Generator, source: Schema, n_target: int, prefix: str = "t") -> Mapping:
    """Random binary target schema; each target variable depends on 1-2 random source variables."""
    target = Schema.binary(*(f"{prefix}{i}" for i in range(n_target)))
    corrs = []
    for name in target.names:
        k = int(rng.integers(1, min(2, len(source)) + 1))
        sv = tuple(source.names[j] for j in sorted(rng.choice(len(source), size=k, replace=False)))
        rows = math.prod(source[n].size for n in sv)
        corrs.append(Correspondence(sv, (name,), random_table(rng, rows, 2) * 0.98 + 0.01))
    return Mapping(source, target, tuple(corrs))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def ab_schema():
    return Schema.binary("A", "B")


@pytest.fixture
def credit_example():
    """The Grad/AgeOver25/GoodCredit knowledge base and its mapping to Student/HighCreditScore."""
    src = Schema.binary("Grad", "Undergrad", "AgeOver25", "GoodCredit")
    tgt = Schema.binary("Student", "HighCreditScore")
    model = LogLinearModel(
        src,
        (
            Feature.of({"Grad": 1, "AgeOver25": 1}, 1.5),
            Feature.of({"AgeOver25": 1, "GoodCredit": 1}, 1.2),
        ),
    )
    p = 1 / (1 + math.exp(-2.2))
    q = 1 / (1 + math.exp(-3.0))
    student = Correspondence.from_function(
        src, tgt, ("Grad", "Undergrad"), ("Student",),
        lambda gu: {(1,): p, (0,): 1 - p} if 1 in gu else {(1,): 1 - p, (0,): p},
    )
    credit = Correspondence.from_function(
        src, tgt, ("GoodCredit",), ("HighCreditScore",),
        lambda g: {(1,): q, (0,): 1 - q} if g == (1,) else {(1,): 1 - q, (0,): q},
    )
    return model, Mapping(src, tgt, (student, credit))


def variable(name, *domain):
    return Variable(name, tuple(domain))


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion(request):
    """``check(ok, detail)`` records the verdict for this test's criterion, then asserts it."""
    name = request.node.function.__doc__.strip().splitlines()[0] if request.node.function.__doc__ else request.node.name

    def check(ok: bool, detail: str) -> None:
        ACCEPTANCE[name] = (bool(ok), detail)
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, detail

    yield check
    ACCEPTANCE.setdefault(name, (False, "did not complete"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
