"""Probabilistic schema mappings built from local correspondences.

A correspondence is a conditional table ``p(C' | C)`` between a few source
variables and a few target variables.  Treating target groups as independent
given the source, and each group as depending only on its own source
variables, the product of the tables is the full mapping ``p(X' | X)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections.abc import Mapping as MappingABC
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import (
    FORMAT_VERSION,
    ContractError,
    Feature,
    Literal,
    LogLinearModel,
    Schema,
    Variable,
    _check_version,
    enumerate_product,
    marginal_table,
)

ROW_TOL = 1e-9
ZERO_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class Correspondence:
    """``table[r, c] = p(target config c | source config r)``, configs in row-major order."""

    source_vars: tuple[str, ...]
    target_vars: tuple[str, ...]
    table: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "source_vars", tuple(self.source_vars))
        object.__setattr__(self, "target_vars", tuple(self.target_vars))
        t = np.array(self.table, dtype=np.float64)
        if t.ndim != 2:
            raise ContractError("correspondence table must be 2-D (source configs x target configs)")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @classmethod
    def from_function(cls, source: Schema, target: Schema, source_vars, target_vars, fn) -> Correspondence:
        """Build from ``fn(source_values_tuple) -> {target_values_tuple: prob}``."""
        s_doms = [source[n].domain for n in source_vars]
        t_doms = [target[n].domain for n in target_vars]
        t_cfgs = [tuple(d[i] for d, i in zip(t_doms, c)) for c in enumerate_product([len(d) for d in t_doms])]
        rows = []
        for c in enumerate_product([len(d) for d in s_doms]):
            dist = fn(tuple(d[i] for d, i in zip(s_doms, c)))
            rows.append([float(dist.get(tc, 0.0)) for tc in t_cfgs])
        return cls(tuple(source_vars), tuple(target_vars), np.array(rows))

    def clamped(self, eps: float = ZERO_EPS) -> Correspondence:
        t = np.maximum(self.table, eps)
        return Correspondence(self.source_vars, self.target_vars, t / t.sum(axis=1, keepdims=True))


@dataclass(frozen=True, eq=False)
class Mapping:
    source_schema: Schema
    target_schema: Schema
    correspondences: tuple[Correspondence, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "correspondences", tuple(self.correspondences))

    def mapped_source_vars(self) -> set[str]:
        return {v for c in self.correspondences for v in c.source_vars}

    def mapped_target_vars(self) -> set[str]:
        return {v for c in self.correspondences for v in c.target_vars}

    def correspondences_of(self, source_var: str) -> list[Correspondence]:
        return [c for c in self.correspondences if source_var in c.source_vars]

    def clamped(self, eps: float = ZERO_EPS) -> Mapping:
        return Mapping(self.source_schema, self.target_schema, tuple(c.clamped(eps) for c in self.correspondences))

    def to_dict(self) -> dict:
        out = []
        for c in self.correspondences:
            s_doms = [self.source_schema[n].domain for n in c.source_vars]
            t_doms = [self.target_schema[n].domain for n in c.target_vars]
            t_keys = [_key(tuple(d[i] for d, i in zip(t_doms, tc))) for tc in enumerate_product([len(d) for d in t_doms])]
            rows = []
            for r, sc in enumerate(enumerate_product([len(d) for d in s_doms])):
                given = {n: d[i] for n, d, i in zip(c.source_vars, s_doms, sc)}
                rows.append({"given": given, "dist": {k: float(p) for k, p in zip(t_keys, c.table[r])}})
            out.append({"source_vars": list(c.source_vars), "target_vars": list(c.target_vars), "rows": rows})
        return {
            "format_version": FORMAT_VERSION,
            "source_schema": self.source_schema.to_dict(),
            "target_schema": self.target_schema.to_dict(),
            "correspondences": out,
        }

    @classmethod
    def from_dict(cls, d: MappingABC) -> Mapping:
        _check_version(d)
        src = Schema.from_dict(d["source_schema"])
        tgt = Schema.from_dict(d["target_schema"])
        corrs = []
        for ci, c in enumerate(d["correspondences"]):
            sv, tv = tuple(c["source_vars"]), tuple(c["target_vars"])
            s_doms = [src[n].domain for n in sv]
            t_doms = [tgt[n].domain for n in tv]
            s_cfgs = list(enumerate_product([len(x) for x in s_doms]))
            t_keys = [_key(tuple(x[i] for x, i in zip(t_doms, tc))) for tc in enumerate_product([len(x) for x in t_doms])]
            table = np.full((len(s_cfgs), len(t_keys)), np.nan)
            for row in c["rows"]:
                given = row["given"]
                r = np.ravel_multi_index([x.index(given[n]) for n, x in zip(sv, s_doms)], [len(x) for x in s_doms]) if sv else 0
                dist = {str(k): float(p) for k, p in row["dist"].items()}
                unknown = set(dist) - set(t_keys)
                if unknown:
                    raise ContractError(f"correspondence {ci}: unknown target values {sorted(unknown)}")
                table[r] = [dist.get(k, 0.0) for k in t_keys]
                if abs(table[r].sum() - 1.0) > ROW_TOL:
                    raise ContractError(f"correspondence {ci}, row {given}: probabilities sum to {table[r].sum()!r}")
            if np.isnan(table).any():
                raise ContractError(f"correspondence {ci}: missing rows for some source configurations")
            corrs.append(Correspondence(sv, tv, table))
        return cls(src, tgt, tuple(corrs))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> Mapping:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def binned_correspondence(
    source_var: str, target_var: str, source_edges, target_edges, scale: float = 1.0
) -> Correspondence:
    """Correspondence between two discretisations of one numeric quantity.

    Source bin ``k`` covers ``(source_edges[k], source_edges[k+1]]``; the
    target value is ``scale`` times the source value.  Mass is assumed
    uniform inside each source bin, so ``p(t | k)`` is the overlapping
    length fraction.  Target edges may start at ``-inf`` and end at ``inf``.
    """
    se = np.asarray(source_edges, dtype=np.float64) * scale
    te = np.asarray(target_edges, dtype=np.float64)
    if scale <= 0 or np.any(np.diff(se) <= 0) or np.any(np.diff(te) <= 0):
        raise ContractError("bin edges must be strictly increasing and scale positive")
    lo, hi = se[:-1, None], se[1:, None]
    table = np.clip(np.minimum(hi, te[None, 1:]) - np.maximum(lo, te[None, :-1]), 0.0, None) / (hi - lo)
    if np.any(np.abs(table.sum(axis=1) - 1.0) > ROW_TOL):
        raise ContractError("target bins do not cover every source bin")
    return Correspondence((source_var,), (target_var,), table)


def _key(values: tuple) -> str:
    return ",".join(str(v) for v in values)


def identity_mapping(source: Schema, rename: MappingABC[str, str], noise: float = 0.0) -> Mapping:
    """One-to-one correspondences; each keeps its value w.p. ``1 - noise``, else moves uniformly."""
    target = Schema(tuple(Variable(t, source[s].domain) for s, t in rename.items()))
    corrs = []
    for s, t in rename.items():
        d = source[s].size
        table = np.full((d, d), noise / (d - 1)) if d > 1 else np.ones((1, 1))
        np.fill_diagonal(table, 1.0 - noise)
        corrs.append(Correspondence((s,), (t,), table))
    return Mapping(source, target, tuple(corrs))


@dataclass(frozen=True)
class Diagnostic:
    kind: str
    message: str
    correspondence: int | None = None
    row: int | None = None
    severity: str = "error"


def validate_mapping(m: Mapping) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    owner: dict[str, int] = {}
    for i, c in enumerate(m.correspondences):
        if not c.source_vars or not c.target_vars:
            diags.append(Diagnostic("empty-vars", f"correspondence {i} has an empty variable set", i))
            continue
        bad = [n for n in c.source_vars if n not in m.source_schema] + [n for n in c.target_vars if n not in m.target_schema]
        if bad:
            diags.append(Diagnostic("unknown-variable", f"correspondence {i} references unknown variables {bad}", i))
            continue
        if len(set(c.source_vars)) != len(c.source_vars) or len(set(c.target_vars)) != len(c.target_vars):
            diags.append(Diagnostic("duplicate-variable", f"correspondence {i} repeats a variable", i))
        shape = (
            math.prod(m.source_schema[n].size for n in c.source_vars),
            math.prod(m.target_schema[n].size for n in c.target_vars),
        )
        if c.table.shape != shape:
            diags.append(Diagnostic("shape", f"correspondence {i} table shape {c.table.shape}, expected {shape}", i))
            continue
        for r, row in enumerate(c.table):
            if np.any(row < 0) or not np.all(np.isfinite(row)):
                diags.append(Diagnostic("negative-entry", f"correspondence {i} row {r} has negative or non-finite entries", i, r))
            elif abs(row.sum() - 1.0) > ROW_TOL:
                diags.append(Diagnostic("row-not-normalized", f"correspondence {i} row {r} sums to {row.sum():.12g}", i, r))
        for n in c.target_vars:
            if n in owner:
                diags.append(
                    Diagnostic("overlapping-targets", f"target variable {n!r} appears in correspondences {owner[n]} and {i}", i)
                )
            else:
                owner[n] = i
    for n in m.target_schema.names:
        if n not in owner:
            diags.append(Diagnostic("unmapped-target", f"target variable {n!r} has no correspondence; treated as uniform", severity="warning"))
    return diags


def _raise_on_errors(m: Mapping) -> None:
    errors = [d for d in validate_mapping(m) if d.severity == "error"]
    if errors:
        raise ContractError("invalid mapping: " + "; ".join(d.message for d in errors))


def correspondence_log_weights(c: Correspondence, source: Schema, target: Schema, clamp: bool = False) -> list[Feature]:
    """One feature per joint configuration of ``C ∪ C'`` weighted ``log p(c' | c)``."""
    t = c.table
    if np.any(t <= 0):
        if not clamp:
            raise ContractError("correspondence has zero probabilities; pass clamp=True to smooth them")
        t = c.clamped().table
    s_doms = [source[n].domain for n in c.source_vars]
    t_doms = [target[n].domain for n in c.target_vars]
    feats = []
    for r, sc in enumerate(enumerate_product([len(d) for d in s_doms])):
        s_lits = tuple(Literal(n, d[i]) for n, d, i in zip(c.source_vars, s_doms, sc))
        for k, tc in enumerate(enumerate_product([len(d) for d in t_doms])):
            t_lits = tuple(Literal(n, d[i]) for n, d, i in zip(c.target_vars, t_doms, tc))
            feats.append(Feature(s_lits + t_lits, math.log(t[r, k])))
    return feats


def build_joint_model(src: LogLinearModel, m: Mapping, clamp: bool = False) -> LogLinearModel:
    """Log-linear model of ``p(X) p(X' | X)`` over source and target variables."""
    if src.schema != m.source_schema:
        raise ContractError("source model schema differs from the mapping's source schema")
    _raise_on_errors(m)
    clash = set(m.source_schema.names) & set(m.target_schema.names)
    if clash:
        raise ContractError(f"source and target schemas share variable names {sorted(clash)}")
    feats = list(src.features)
    for c in m.correspondences:
        feats.extend(correspondence_log_weights(c, m.source_schema, m.target_schema, clamp))
    return LogLinearModel(m.source_schema.union(m.target_schema), tuple(feats))


def implied_target_distribution(joint: LogLinearModel, target_schema: Schema) -> np.ndarray:
    """Exact table of p(X') (axes follow ``target_schema`` order)."""
    return marginal_table(joint, target_schema.names)


def source_config_index(c: Correspondence, schema: Schema, X: np.ndarray) -> np.ndarray:
    """Row index into ``c.table`` for each index row of ``X`` over ``schema``."""
    pos = [schema.position(n) for n in c.source_vars]
    sizes = [schema.sizes[p] for p in pos]
    return np.ravel_multi_index(tuple(np.asarray(X)[:, p] for p in pos), sizes)


def target_columns(c: Correspondence, target: Schema) -> tuple[list[int], list[int]]:
    pos = [target.position(n) for n in c.target_vars]
    return pos, [target.sizes[p] for p in pos]
