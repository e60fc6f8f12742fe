"""Discrete log-linear models, datasets, and exact enumeration oracles.

A model is a schema of finite-domain variables plus a list of weighted
conjunctive features; it defines ``p(x) ∝ exp(sum_i w_i f_i(x))``.  Internally
assignments are rows of value *indices*; labels only appear at the API edge.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
from scipy.special import log_softmax, logsumexp

FORMAT_VERSION = 1
MAX_ENUMERATION = 2**20
_CHUNK = 2**15


class ContractError(ValueError):
    """An argument violates an operation's precondition."""


class OracleTooLarge(ContractError):
    """The assignment space exceeds the enumeration cap."""


@dataclass(frozen=True)
class Variable:
    name: str
    domain: tuple

    def __post_init__(self):
        object.__setattr__(self, "domain", tuple(self.domain))
        if len(self.domain) < 2:
            raise ContractError(f"variable {self.name!r} needs at least 2 values")
        if len(set(self.domain)) != len(self.domain):
            raise ContractError(f"variable {self.name!r} has duplicate domain values")

    @property
    def size(self) -> int:
        return len(self.domain)

    def index(self, value) -> int:
        try:
            return self.domain.index(value)
        except ValueError:
            raise ContractError(f"{value!r} is not in the domain of {self.name!r}") from None


@dataclass(frozen=True)
class Schema:
    variables: tuple[Variable, ...]

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise ContractError("duplicate variable names in schema")
        object.__setattr__(self, "_pos", {n: i for i, n in enumerate(names)})

    @classmethod
    def binary(cls, *names: str) -> Schema:
        return cls(tuple(Variable(n, (0, 1)) for n in names))

    def __len__(self) -> int:
        return len(self.variables)

    def __iter__(self) -> Iterator[Variable]:
        return iter(self.variables)

    def __contains__(self, name) -> bool:
        return name in self._pos

    def __getitem__(self, name: str) -> Variable:
        return self.variables[self.position(name)]

    def position(self, name: str) -> int:
        try:
            return self._pos[name]
        except KeyError:
            raise ContractError(f"unknown variable {name!r}") from None

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(v.size for v in self.variables)

    @property
    def n_assignments(self) -> int:
        return math.prod(self.sizes)

    def rename(self, names: Mapping[str, str]) -> Schema:
        return Schema(tuple(Variable(names.get(v.name, v.name), v.domain) for v in self.variables))

    def union(self, other: Schema) -> Schema:
        return Schema(self.variables + other.variables)

    def encode(self, assignment: Mapping[str, Any] | Sequence) -> np.ndarray:
        """Label assignment (dict or positional sequence) -> index row."""
        if isinstance(assignment, Mapping):
            missing = [n for n in self.names if n not in assignment]
            if missing:
                raise ContractError(f"incomplete assignment, missing {missing}")
            values = [assignment[n] for n in self.names]
        else:
            values = list(assignment)
            if len(values) != len(self):
                raise ContractError(f"assignment has {len(values)} values, schema has {len(self)}")
        return np.array([v.index(x) for v, x in zip(self.variables, values)], dtype=np.int64)

    def decode(self, row: Sequence[int]) -> dict[str, Any]:
        return {v.name: v.domain[int(i)] for v, i in zip(self.variables, row)}

    def to_dict(self) -> dict:
        return {"variables": [{"name": v.name, "domain": list(v.domain)} for v in self.variables]}

    @classmethod
    def from_dict(cls, d: Mapping) -> Schema:
        return cls(tuple(Variable(v["name"], tuple(v["domain"])) for v in d["variables"]))


@dataclass(frozen=True)
class Literal:
    var: str
    value: Any


@dataclass(frozen=True)
class Feature:
    """Weighted conjunction of ``var = value`` literals."""

    literals: tuple[Literal, ...]
    weight: float = 0.0

    def __post_init__(self):
        lits = tuple(sorted(self.literals, key=lambda l: l.var))
        if not lits:
            raise ContractError("a feature needs at least one literal")
        if len({l.var for l in lits}) != len(lits):
            raise ContractError("at most one literal per variable in a feature")
        w = float(self.weight)
        if not math.isfinite(w):
            raise ContractError("feature weight must be finite")
        object.__setattr__(self, "literals", lits)
        object.__setattr__(self, "weight", w)

    @classmethod
    def of(cls, lits: Mapping[str, Any], weight: float = 0.0) -> Feature:
        return cls(tuple(Literal(k, v) for k, v in lits.items()), weight)

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(l.var for l in self.literals)

    @property
    def key(self) -> tuple:
        return tuple((l.var, l.value) for l in self.literals)

    def with_weight(self, weight: float) -> Feature:
        return Feature(self.literals, weight)

    def holds(self, assignment: Mapping[str, Any]) -> bool:
        return all(assignment[l.var] == l.value for l in self.literals)


class FeatureIndex:
    """Feature literals compiled to index arrays over one schema.

    Every feature's literals are padded to a common width with a dummy
    always-satisfied column, so satisfaction of many features on many rows is
    one vectorised comparison.  Per-variable blocks hold, for each feature
    touching variable ``j``, its other literals and the value it requires of
    ``j``; those drive Gibbs updates, PLL, and the PLL gradient.
    """

    def __init__(self, schema: Schema, features: Sequence[Feature]):
        self.schema = schema
        self.n_vars = len(schema)
        self.sizes = np.array(schema.sizes, dtype=np.int64)
        self.n_features = len(features)
        pad = self.n_vars
        width = max((len(f.literals) for f in features), default=1)
        lit_vars = np.full((self.n_features, width), pad, dtype=np.int64)
        lit_vals = np.zeros((self.n_features, width), dtype=np.int64)
        touching: list[list[tuple[int, int, list[int], list[int]]]] = [[] for _ in range(self.n_vars)]
        for k, f in enumerate(features):
            vs = [schema.position(l.var) for l in f.literals]
            xs = [schema.variables[p].index(l.value) for p, l in zip(vs, f.literals)]
            lit_vars[k, : len(vs)] = vs
            lit_vals[k, : len(xs)] = xs
            for a, (j, x) in enumerate(zip(vs, xs)):
                touching[j].append((k, x, vs[:a] + vs[a + 1 :], xs[:a] + xs[a + 1 :]))
        self.lit_vars = lit_vars
        self.lit_vals = lit_vals
        self.blocks = []
        for j in range(self.n_vars):
            entries = touching[j]
            w = max((len(e[2]) for e in entries), default=0)
            w = max(w, 1)
            ids = np.array([e[0] for e in entries], dtype=np.int64)
            own = np.array([e[1] for e in entries], dtype=np.int64)
            ov = np.full((len(entries), w), pad, dtype=np.int64)
            ox = np.zeros((len(entries), w), dtype=np.int64)
            for r, e in enumerate(entries):
                ov[r, : len(e[2])] = e[2]
                ox[r, : len(e[3])] = e[3]
            onehot = np.zeros((len(entries), int(self.sizes[j])))
            onehot[np.arange(len(entries)), own] = 1.0
            self.blocks.append(_VarBlock(ids, own, ov, ox, onehot))

    @staticmethod
    def pad(X: np.ndarray) -> np.ndarray:
        X = np.asarray(X)
        return np.concatenate([X, np.zeros((X.shape[0], 1), dtype=X.dtype)], axis=1)

    def satisfied(self, Xp: np.ndarray) -> np.ndarray:
        """(N, K) feature satisfaction for padded rows."""
        return np.all(Xp[:, self.lit_vars] == self.lit_vals, axis=2)

    def energies(self, X: np.ndarray, weights: np.ndarray) -> np.ndarray:
        X = np.asarray(X)
        out = np.empty(X.shape[0])
        for a in range(0, X.shape[0], _CHUNK):
            Xp = self.pad(X[a : a + _CHUNK])
            out[a : a + _CHUNK] = self.satisfied(Xp) @ weights if self.n_features else 0.0
        return out

    def other_satisfied(self, Xp: np.ndarray, j: int) -> np.ndarray:
        b = self.blocks[j]
        return np.all(Xp[:, b.other_vars] == b.other_vals, axis=2)

    def conditional_logits(self, Xp: np.ndarray, j: int, weights: np.ndarray) -> np.ndarray:
        """Unnormalised log p(x_j = v | rest) for every v; shape (N, d_j)."""
        b = self.blocks[j]
        if len(b.ids) == 0:
            return np.zeros((Xp.shape[0], int(self.sizes[j])))
        S = self.other_satisfied(Xp, j)
        return (S * weights[b.ids]) @ b.onehot

    def prepare(self, X: np.ndarray) -> PreparedData:
        """Cache per-variable satisfaction of the other literals for fixed data."""
        Xp = self.pad(np.asarray(X))
        S = [self.other_satisfied(Xp, j).astype(np.float64) for j in range(self.n_vars)]
        return PreparedData(np.asarray(X), S)

    def pll_terms(self, data: PreparedData, weights: np.ndarray) -> np.ndarray:
        """(N, n) matrix of log p(x_j | x_-j)."""
        X = data.X
        N = X.shape[0]
        out = np.empty((N, self.n_vars))
        rows = np.arange(N)
        for j, b in enumerate(self.blocks):
            if len(b.ids) == 0:
                out[:, j] = -math.log(self.sizes[j])
                continue
            logp = log_softmax((data.S[j] * weights[b.ids]) @ b.onehot, axis=1)
            out[:, j] = logp[rows, X[:, j]]
        return out

    def pll_value_and_grad(
        self, data: PreparedData, weights: np.ndarray, var_weights: np.ndarray | None = None
    ) -> tuple[float, np.ndarray]:
        """Summed (weighted) PLL over rows and its gradient wrt feature weights."""
        X = data.X
        N = X.shape[0]
        rows = np.arange(N)
        total = 0.0
        grad = np.zeros(self.n_features)
        for j, b in enumerate(self.blocks):
            c = 1.0 if var_weights is None else float(var_weights[j])
            if len(b.ids) == 0:
                total -= c * N * math.log(self.sizes[j])
                continue
            S = data.S[j]
            logp = log_softmax((S * weights[b.ids]) @ b.onehot, axis=1)
            total += c * logp[rows, X[:, j]].sum()
            resid = -np.exp(logp)
            resid[rows, X[:, j]] += 1.0
            g = np.einsum("nf,nf->f", S, resid[:, b.own_vals])
            np.add.at(grad, b.ids, c * g)
        return total, grad


@dataclass(frozen=True)
class _VarBlock:
    ids: np.ndarray
    own_vals: np.ndarray
    other_vars: np.ndarray
    other_vals: np.ndarray
    onehot: np.ndarray


@dataclass(frozen=True, eq=False)
class PreparedData:
    X: np.ndarray
    S: list


@dataclass(frozen=True, eq=False)
class LogLinearModel:
    schema: Schema
    features: tuple[Feature, ...] = ()

    def __post_init__(self):
        feats = tuple(self.features)
        for f in feats:
            for l in f.literals:
                self.schema[l.var].index(l.value)
        object.__setattr__(self, "features", feats)

    @cached_property
    def index(self) -> FeatureIndex:
        return FeatureIndex(self.schema, self.features)

    @property
    def weights(self) -> np.ndarray:
        return np.array([f.weight for f in self.features], dtype=np.float64)

    def with_weights(self, weights: Sequence[float]) -> LogLinearModel:
        if len(weights) != len(self.features):
            raise ContractError("weight vector length does not match feature count")
        return LogLinearModel(self.schema, tuple(f.with_weight(w) for f, w in zip(self.features, weights)))

    def with_features(self, extra: Iterable[Feature]) -> LogLinearModel:
        return LogLinearModel(self.schema, self.features + tuple(extra))

    def rename(self, names: Mapping[str, str]) -> LogLinearModel:
        feats = tuple(
            Feature(tuple(Literal(names.get(l.var, l.var), l.value) for l in f.literals), f.weight)
            for f in self.features
        )
        return LogLinearModel(self.schema.rename(names), feats)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "schema": self.schema.to_dict(),
            "features": [
                {"literals": [{"var": l.var, "value": l.value} for l in f.literals], "weight": f.weight}
                for f in self.features
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> LogLinearModel:
        _check_version(d)
        schema = Schema.from_dict(d["schema"])
        feats = tuple(
            Feature(tuple(Literal(l["var"], l["value"]) for l in f["literals"]), f.get("weight", 0.0))
            for f in d["features"]
        )
        return cls(schema, feats)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path, **extra) -> None:
        d = self.to_dict()
        d.update(extra)
        Path(path).write_text(json.dumps(d, indent=2, default=_json_default))

    @classmethod
    def load(cls, path) -> LogLinearModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_version(d: Mapping) -> None:
    v = d.get("format_version", FORMAT_VERSION)
    if v != FORMAT_VERSION:
        raise ContractError(f"unsupported format_version {v}")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Complete assignments over a schema, stored as an (N, n) index matrix."""

    schema: Schema
    values: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.values, dtype=np.int64)
        if X.ndim != 2 or X.shape[1] != len(self.schema):
            X = X.reshape(-1, len(self.schema))
        if X.size and (np.any(X < 0) or np.any(X >= np.array(self.schema.sizes))):
            raise ContractError("dataset value index outside its variable's domain")
        X.setflags(write=False)
        object.__setattr__(self, "values", X)

    @classmethod
    def from_assignments(cls, schema: Schema, instances: Iterable, provenance=None) -> Dataset:
        rows = [schema.encode(a) for a in instances]
        X = np.array(rows, dtype=np.int64).reshape(len(rows), len(schema))
        return cls(schema, X, dict(provenance or {}))

    def __len__(self) -> int:
        return self.values.shape[0]

    def instances(self) -> Iterator[dict[str, Any]]:
        for row in self.values:
            yield self.schema.decode(row)

    def subset(self, idx) -> Dataset:
        return Dataset(self.schema, self.values[idx], dict(self.provenance))

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.schema.names)
            doms = [v.domain for v in self.schema.variables]
            for row in self.values:
                w.writerow([doms[j][i] for j, i in enumerate(row)])
        meta = {"format_version": FORMAT_VERSION, "schema": self.schema.to_dict(), "provenance": self.provenance}
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default))

    @classmethod
    def from_csv(cls, path, schema: Schema | None = None) -> Dataset:
        path = Path(path)
        side = Path(str(path) + ".json")
        provenance = {}
        if side.exists():
            meta = json.loads(side.read_text())
            _check_version(meta)
            provenance = meta.get("provenance", {})
            if schema is None and "schema" in meta:
                schema = Schema.from_dict(meta["schema"])
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if schema is None:
            cols = list(zip(*body)) if body else [() for _ in header]
            schema = Schema(tuple(Variable(h, tuple(sorted(set(c)))) for h, c in zip(header, cols)))
        if list(header) != list(schema.names):
            raise ContractError("CSV header does not match schema variable order")
        lookup = [{str(x): i for i, x in enumerate(v.domain)} for v in schema.variables]
        try:
            X = np.array([[lookup[j][s] for j, s in enumerate(r)] for r in body], dtype=np.int64)
        except KeyError as e:
            raise ContractError(f"CSV value {e.args[0]!r} not in schema domain") from None
        return cls(schema, X.reshape(len(body), len(schema)), provenance)


# ---------------------------------------------------------------------------
# exact oracles


def _check_cap(schema: Schema, cap: int) -> None:
    if schema.n_assignments > cap:
        raise OracleTooLarge(f"assignment space {schema.n_assignments} exceeds enumeration cap {cap}")


def iter_assignments(schema: Schema, cap: int = MAX_ENUMERATION) -> Iterator[np.ndarray]:
    """Yield all assignments in row-major order, in chunks of index rows."""
    _check_cap(schema, cap)
    total = schema.n_assignments
    for a in range(0, total, _CHUNK):
        idx = np.arange(a, min(a + _CHUNK, total))
        yield np.stack(np.unravel_index(idx, schema.sizes), axis=1).astype(np.int64)


def all_assignments(schema: Schema, cap: int = MAX_ENUMERATION) -> np.ndarray:
    return np.concatenate(list(iter_assignments(schema, cap)), axis=0)


def energy(model: LogLinearModel, a: Mapping[str, Any] | Sequence) -> float:
    row = model.schema.encode(a)
    return float(model.index.energies(row[None, :], model.weights)[0])


def log_joint_table(model: LogLinearModel, cap: int = MAX_ENUMERATION) -> np.ndarray:
    """Normalised log p over the full space, shaped by domain sizes."""
    w = model.weights
    e = np.concatenate([model.index.energies(X, w) for X in iter_assignments(model.schema, cap)])
    return (e - logsumexp(e)).reshape(model.schema.sizes)


def exact_log_partition(model: LogLinearModel, cap: int = MAX_ENUMERATION) -> float:
    w = model.weights
    e = np.concatenate([model.index.energies(X, w) for X in iter_assignments(model.schema, cap)])
    return float(logsumexp(e))


def exact_marginal(model: LogLinearModel, lit: Literal, cap: int = MAX_ENUMERATION) -> float:
    j = model.schema.position(lit.var)
    v = model.schema.variables[j].index(lit.value)
    p = np.exp(log_joint_table(model, cap))
    return float(np.take(p, v, axis=j).sum())


def marginal_table(model: LogLinearModel, names: Sequence[str], cap: int = MAX_ENUMERATION) -> np.ndarray:
    """Exact joint marginal over ``names`` (axes in the given order)."""
    pos = [model.schema.position(n) for n in names]
    p = np.exp(log_joint_table(model, cap))
    drop = tuple(i for i in range(len(model.schema)) if i not in pos)
    m = p.sum(axis=drop)
    kept = sorted(pos)
    return np.transpose(m, [kept.index(i) for i in pos])


def exact_kl(p: LogLinearModel, q: LogLinearModel, cap: int = MAX_ENUMERATION) -> float:
    if p.schema != q.schema:
        raise ContractError("KL requires both models over the same schema")
    lp = log_joint_table(p, cap)
    lq = log_joint_table(q, cap)
    return max(float(np.sum(np.exp(lp) * (lp - lq))), 0.0)


def kl_table(p_table: np.ndarray, q: LogLinearModel, cap: int = MAX_ENUMERATION) -> float:
    """D_KL[p || q] for an explicit table ``p`` over q's schema."""
    lq = log_joint_table(q, cap)
    mask = p_table > 0
    return float(np.sum(p_table[mask] * (np.log(p_table[mask]) - lq[mask])))


def pll_matrix(model: LogLinearModel, data: Dataset) -> np.ndarray:
    """(N, n) conditional log-likelihoods log p(x_j | x_-j)."""
    if data.schema != model.schema:
        raise ContractError("dataset schema differs from model schema")
    if len(data) == 0:
        raise ContractError("PLL of an empty dataset")
    idx = model.index
    return idx.pll_terms(idx.prepare(data.values), model.weights)


def pll(model: LogLinearModel, data: Dataset) -> float:
    """Pseudo-log-likelihood, mean per instance."""
    return float(pll_matrix(model, data).sum(axis=1).mean())


def enumerate_product(sizes: Sequence[int]) -> Iterator[tuple[int, ...]]:
    return itertools.product(*(range(s) for s in sizes))
