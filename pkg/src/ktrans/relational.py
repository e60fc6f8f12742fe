"""A small first-order layer: typed predicates, weighted conjunctive clauses, grounding.

Clauses are quantifier-free conjunctions of (possibly negated) atoms whose free
variables are implicitly universal.  Grounding at a set of domain sizes gives
an ordinary :class:`LogLinearModel` over binary ground-atom variables, with one
feature per clause grounding; the tie vector links every ground feature back
to its clause so weights can be learned at the first-order level.
"""

from __future__ import annotations

import itertools
import json
import math
from collections.abc import Iterable, Mapping as MappingABC, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .learning import DTSLParams, PLLBlock, Structure, fit_blocks, grow_tree
from .mapping import Correspondence, Mapping
from .model import (
    FORMAT_VERSION,
    ContractError,
    Dataset,
    Feature,
    Literal,
    LogLinearModel,
    Schema,
    Variable,
    _check_version,
)
from .sampling import SamplerConfig, child_rng, gibbs_sample, map_samples
from .structure import (
    MAX_CLIQUE_CELLS,
    Atom,
    canonical_atoms,
    eliminate_unmapped,
    is_variable,
    structure_to_cliques,
    translate_cliques,
)

MAX_GROUNDINGS = 2**20
BINARY = (0, 1)


@dataclass(frozen=True)
class PredicateDecl:
    name: str
    arg_types: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "arg_types", tuple(self.arg_types))
        if not self.arg_types:
            raise ContractError(f"predicate {self.name!r} needs arity >= 1")


@dataclass(frozen=True)
class RelationalSchema:
    types: tuple[str, ...]
    predicates: tuple[PredicateDecl, ...]

    def __post_init__(self):
        object.__setattr__(self, "types", tuple(self.types))
        object.__setattr__(self, "predicates", tuple(self.predicates))
        names = [p.name for p in self.predicates]
        if len(set(names)) != len(names):
            raise ContractError("duplicate predicate names")
        for p in self.predicates:
            for t in p.arg_types:
                if t not in self.types:
                    raise ContractError(f"predicate {p.name!r} uses undeclared type {t!r}")

    def predicate(self, name: str) -> PredicateDecl:
        for p in self.predicates:
            if p.name == name:
                return p
        raise ContractError(f"unknown predicate {name!r}")

    def to_dict(self) -> dict:
        return {"types": list(self.types), "predicates": [{"name": p.name, "args": list(p.arg_types)} for p in self.predicates]}

    @classmethod
    def from_dict(cls, d: MappingABC) -> RelationalSchema:
        return cls(tuple(d["types"]), tuple(PredicateDecl(p["name"], tuple(p["args"])) for p in d["predicates"]))


@dataclass(frozen=True)
class DomainSizes:
    counts: tuple[tuple[str, int], ...]

    def __post_init__(self):
        c = tuple(sorted((str(k), int(v)) for k, v in dict(self.counts).items()))
        if any(v < 1 for _, v in c):
            raise ContractError("every domain size must be at least 1")
        object.__setattr__(self, "counts", c)

    @classmethod
    def of(cls, counts: MappingABC[str, int] | None = None, **kw) -> DomainSizes:
        return cls(tuple({**(counts or {}), **kw}.items()))

    def __getitem__(self, t: str) -> int:
        try:
            return dict(self.counts)[t]
        except KeyError:
            raise ContractError(f"no domain size for type {t!r}") from None

    def as_dict(self) -> dict[str, int]:
        return dict(self.counts)

    def constants(self, t: str) -> list[str]:
        stem = t[:1].upper() + t[1:]
        return [f"{stem}{i}" for i in range(self[t])]


def constants_heuristic(training_sizes: Sequence[DomainSizes], scalar: float = 0.5) -> DomainSizes:
    """Mean constants per type over training databases, scaled, rounded half up, floor 1."""
    if not training_sizes:
        raise ContractError("need at least one training database")
    if not 0 < scalar <= 1:
        raise ContractError("scalar must lie in (0, 1]")
    types = sorted({t for s in training_sizes for t, _ in s.counts})
    out = {}
    for t in types:
        mean = sum(s[t] for s in training_sizes) / len(training_sizes)
        out[t] = max(1, math.floor(mean * scalar + 0.5))
    return DomainSizes.of(out)


@dataclass(frozen=True)
class FirstOrderFeature:
    """Weighted conjunction of signed atoms; ``(atom, True)`` asserts the atom."""

    atoms: tuple[tuple[Atom, bool], ...]
    weight: float = 0.0

    def __post_init__(self):
        atoms = tuple((a, bool(s)) for a, s in self.atoms)
        if not atoms:
            raise ContractError("a first-order feature needs at least one atom")
        if not math.isfinite(float(self.weight)):
            raise ContractError("weight must be finite")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weight", float(self.weight))

    @classmethod
    def parse(cls, atoms: Iterable[str], weight: float = 0.0) -> FirstOrderFeature:
        out = []
        for s in atoms:
            s = s.strip()
            neg = s.startswith(("!", "¬", "~"))
            out.append((Atom.parse(s[1:] if neg else s), not neg))
        return cls(tuple(out), weight)

    def with_weight(self, w: float) -> FirstOrderFeature:
        return FirstOrderFeature(self.atoms, w)

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(v for a, _ in self.atoms for v in a.variables))

    def key(self) -> frozenset:
        return canonical_atoms(Atom(a.pred if s else "!" + a.pred, a.args) for a, s in self.atoms)

    def __str__(self) -> str:
        return " ^ ".join(("" if s else "!") + str(a) for a, s in self.atoms)


def _var_types(clause_atoms: Iterable[Atom], schema: RelationalSchema) -> dict[str, str]:
    types: dict[str, str] = {}
    for a in clause_atoms:
        decl = schema.predicate(a.pred)
        if len(decl.arg_types) != len(a.args):
            raise ContractError(f"atom {a} has wrong arity")
        for t, ty in zip(a.args, decl.arg_types):
            if is_variable(t):
                if types.setdefault(t, ty) != ty:
                    raise ContractError(f"variable {t!r} used with types {types[t]!r} and {ty!r}")
    return types


@dataclass(frozen=True)
class MLN:
    schema: RelationalSchema
    clauses: tuple[FirstOrderFeature, ...]

    def __post_init__(self):
        object.__setattr__(self, "clauses", tuple(self.clauses))
        for c in self.clauses:
            _var_types((a for a, _ in c.atoms), self.schema)

    @property
    def features(self) -> tuple[FirstOrderFeature, ...]:
        return self.clauses

    def with_weights(self, w: Sequence[float]) -> MLN:
        return MLN(self.schema, tuple(c.with_weight(x) for c, x in zip(self.clauses, w)))

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            **self.schema.to_dict(),
            "clauses": [
                {"weight": c.weight, "atoms": [("" if s else "!") + str(a) for a, s in c.atoms]} for c in self.clauses
            ],
        }

    @classmethod
    def from_dict(cls, d: MappingABC) -> MLN:
        _check_version(d)
        schema = RelationalSchema.from_dict(d)
        return cls(schema, tuple(FirstOrderFeature.parse(c["atoms"], c.get("weight", 0.0)) for c in d["clauses"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> MLN:
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# grounding


def ground_atoms(schema: RelationalSchema, sizes: DomainSizes) -> list[Atom]:
    out = []
    for p in schema.predicates:
        for args in itertools.product(*(sizes.constants(t) for t in p.arg_types)):
            out.append(Atom(p.name, args))
    return out


def ground_schema(schema: RelationalSchema, sizes: DomainSizes) -> Schema:
    return Schema(tuple(Variable(str(a), BINARY) for a in ground_atoms(schema, sizes)))


def predicate_weights(schema: RelationalSchema, sizes: DomainSizes) -> np.ndarray:
    """``1 / g_r`` for every ground atom, in ground-schema order."""
    out = []
    for p in schema.predicates:
        g = math.prod(sizes[t] for t in p.arg_types)
        out.extend([1.0 / g] * g)
    return np.array(out)


def ground_structure(
    clauses: Sequence[FirstOrderFeature], schema: RelationalSchema, sizes: DomainSizes, cap: int = MAX_GROUNDINGS
) -> Structure:
    """Ground every clause; ``ties[k]`` is the index of the clause feature ``k`` came from."""
    total = 0
    feats, ties = [], []
    for ci, c in enumerate(clauses):
        types = _var_types((a for a, _ in c.atoms), schema)
        names = list(types)
        total += math.prod(sizes[types[v]] for v in names)
        if total > cap:
            raise ContractError(f"grounding exceeds the cap of {cap} clause groundings")
        for binding in itertools.product(*(sizes.constants(types[v]) for v in names)):
            env = dict(zip(names, binding))
            lits: dict[str, int] = {}
            ok = True
            for a, sign in c.atoms:
                g = str(Atom(a.pred, tuple(env.get(t, t) for t in a.args)))
                v = 1 if sign else 0
                if lits.setdefault(g, v) != v:
                    ok = False
                    break
            if ok:
                feats.append(Feature(tuple(Literal(k, v) for k, v in lits.items())))
                ties.append(ci)
    return Structure(tuple(feats), tuple(ties))


def ground(mln: MLN, sizes: DomainSizes, cap: int = MAX_GROUNDINGS) -> LogLinearModel:
    st = ground_structure(mln.clauses, mln.schema, sizes, cap)
    return st.to_model(ground_schema(mln.schema, sizes), np.array([c.weight for c in mln.clauses]))


# ---------------------------------------------------------------------------
# databases


@dataclass(frozen=True)
class RelationalDatabase:
    """Closed-world database: every ground atom not listed is false."""

    sizes: DomainSizes
    true_atoms: frozenset[Atom] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "true_atoms", frozenset(self.true_atoms))

    def row(self, schema: RelationalSchema) -> np.ndarray:
        atoms = ground_atoms(schema, self.sizes)
        known = set(atoms)
        extra = [a for a in self.true_atoms if a not in known]
        if extra:
            raise ContractError(f"database mentions atoms outside its domain: {sorted(map(str, extra))[:5]}")
        return np.array([1 if a in self.true_atoms else 0 for a in atoms], dtype=np.int64)

    @classmethod
    def from_row(cls, schema: RelationalSchema, sizes: DomainSizes, row: Sequence[int]) -> RelationalDatabase:
        atoms = ground_atoms(schema, sizes)
        return cls(sizes, frozenset(a for a, v in zip(atoms, row) if v))

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "sizes": self.sizes.as_dict(), "true_atoms": sorted(str(a) for a in self.true_atoms)}

    @classmethod
    def from_dict(cls, d: MappingABC) -> RelationalDatabase:
        _check_version(d)
        return cls(DomainSizes.of(d["sizes"]), frozenset(Atom.parse(s) for s in d["true_atoms"]))


def save_databases(dbs: Sequence[RelationalDatabase], path, provenance: dict | None = None) -> None:
    doc = {"format_version": FORMAT_VERSION, "provenance": provenance or {}, "databases": [d.to_dict() for d in dbs]}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_databases(path) -> list[RelationalDatabase]:
    doc = json.loads(Path(path).read_text())
    _check_version(doc)
    return [RelationalDatabase.from_dict(d) for d in doc["databases"]]


def group_by_sizes(dbs: Sequence[RelationalDatabase]) -> dict[DomainSizes, list[RelationalDatabase]]:
    out: dict[DomainSizes, list[RelationalDatabase]] = {}
    for d in dbs:
        out.setdefault(d.sizes, []).append(d)
    return out


def databases_to_dataset(schema: RelationalSchema, dbs: Sequence[RelationalDatabase]) -> Dataset:
    sizes = {d.sizes for d in dbs}
    if len(sizes) != 1:
        raise ContractError("databases of different sizes cannot share one dataset")
    (s,) = sizes
    return Dataset(ground_schema(schema, s), np.array([d.row(schema) for d in dbs]), {"sizes": s.as_dict()})


def dataset_to_databases(schema: RelationalSchema, sizes: DomainSizes, data: Dataset) -> list[RelationalDatabase]:
    return [RelationalDatabase.from_row(schema, sizes, r) for r in data.values]


# ---------------------------------------------------------------------------
# weighted pseudo-likelihood


def wpll_terms(model: LogLinearModel, db: RelationalDatabase, schema: RelationalSchema) -> dict[str, float]:
    """Per-predicate ``(1/g_r) sum_groundings log p(atom | rest)``."""
    gs = ground_schema(schema, db.sizes)
    if model.schema != gs:
        raise ContractError("model is not grounded over this database's atoms")
    row = db.row(schema)
    idx = model.index
    lp = idx.pll_terms(idx.prepare(row[None, :]), model.weights)[0]
    out, start = {}, 0
    for p in schema.predicates:
        g = math.prod(db.sizes[t] for t in p.arg_types)
        out[p.name] = float(lp[start : start + g].sum() / g)
        start += g
    return out


def wpll(model: LogLinearModel, db: RelationalDatabase, schema: RelationalSchema) -> float:
    return float(sum(wpll_terms(model, db, schema).values()))


def mean_wpll(mln: MLN, dbs: Sequence[RelationalDatabase]) -> tuple[float, dict[str, float]]:
    """Mean WPLL per database, with its per-predicate decomposition."""
    if not dbs:
        raise ContractError("no databases to evaluate")
    totals = {p.name: 0.0 for p in mln.schema.predicates}
    for sizes, group in group_by_sizes(dbs).items():
        gm = ground(mln, sizes)
        for db in group:
            for k, v in wpll_terms(gm, db, mln.schema).items():
                totals[k] += v
    per = {k: v / len(dbs) for k, v in totals.items()}
    return float(sum(per.values())), per


def learn_mln_weights(
    clauses: Sequence[FirstOrderFeature],
    schema: RelationalSchema,
    dbs: Sequence[RelationalDatabase],
    l2: float,
    tol: float = 1e-5,
    max_iters: int = 2000,
) -> MLN:
    """Tied weights maximising mean WPLL per database minus ``l2/2 |w|^2``."""
    if not dbs:
        raise ContractError("cannot learn from zero databases")
    blocks = []
    for sizes, group in group_by_sizes(dbs).items():
        st = ground_structure(clauses, schema, sizes)
        data = databases_to_dataset(schema, group)
        blocks.append(PLLBlock.build(st, data, predicate_weights(schema, sizes)))
    w = fit_blocks(blocks, len(clauses), l2, tol, max_iters)
    return MLN(schema, tuple(c.with_weight(x) for c, x in zip(clauses, w)))


# ---------------------------------------------------------------------------
# structures


def _signed_expansion(atoms: Sequence[Atom]) -> list[FirstOrderFeature]:
    if 2 ** len(atoms) > MAX_CLIQUE_CELLS:
        raise ContractError(f"clique of {len(atoms)} atoms exceeds {MAX_CLIQUE_CELLS} configurations")
    return [FirstOrderFeature(tuple(zip(atoms, signs))) for signs in itertools.product((True, False), repeat=len(atoms))]


def dedupe_clauses(clauses: Iterable[FirstOrderFeature]) -> list[FirstOrderFeature]:
    seen, out = set(), []
    for c in clauses:
        k = c.key()
        if k not in seen:
            seen.add(k)
            out.append(c)
    return out


def empty_mln_structure(schema: RelationalSchema) -> list[FirstOrderFeature]:
    out = []
    for p in schema.predicates:
        out.append(FirstOrderFeature(((Atom(p.name, tuple(f"v{i}" for i in range(len(p.arg_types)))), True),)))
    return out


def clique_clauses(cliques) -> list[FirstOrderFeature]:
    feats = []
    for c in cliques:
        feats.extend(_signed_expansion(sorted(c)))
    return dedupe_clauses(feats)


def translate_mln_structure(mln: MLN, mapping: RelationalMapping, threshold: float = 0.1) -> list[FirstOrderFeature]:
    """First-order cliques -> eliminate unmapped predicates -> rewrite -> signed conjunctions."""
    cliques = structure_to_cliques(mln.clauses, threshold)
    cliques = eliminate_unmapped(cliques, mapping)
    cliques = translate_cliques(cliques, mapping)
    return clique_clauses(cliques)


def _template(decl: PredicateDecl) -> Atom:
    return Atom(decl.name, tuple(f"v{i}" for i in range(len(decl.arg_types))))


def _context_atoms(schema: RelationalSchema, target: PredicateDecl) -> list[Atom]:
    head = _template(target)
    vs = list(zip(head.args, target.arg_types))
    out = []
    for p in schema.predicates:
        pools = [[v for v, t in vs if t == ty] for ty in p.arg_types]
        for args in itertools.product(*pools):
            a = Atom(p.name, args)
            if a != head:
                out.append(a)
    return out


def learn_mln_structure(
    schema: RelationalSchema, dbs: Sequence[RelationalDatabase], params: DTSLParams
) -> list[FirstOrderFeature]:
    """Lifted tree learning: one tree per predicate over its local context atoms.

    Instances are all groundings of ``r(v0..vk)`` with distinct constants per
    type, pooled across databases; candidate tests are the truth values of
    every atom built from the same variables.  Each leaf path and head sign
    becomes a first-order conjunction.
    """
    if not dbs:
        raise ContractError("cannot learn structure from zero databases")
    feats: list[FirstOrderFeature] = []
    for decl in schema.predicates:
        head = _template(decl)
        ctx = _context_atoms(schema, decl)
        rows = []
        for db in dbs:
            for binding in itertools.product(*(db.sizes.constants(t) for t in decl.arg_types)):
                if len(set(binding)) < len(binding):
                    continue
                env = dict(zip(head.args, binding))
                row = [Atom(a.pred, tuple(env[x] for x in a.args)) in db.true_atoms for a in [head] + ctx]
                rows.append(row)
        if not rows:
            feats.extend(_signed_expansion([head])[:1])
            continue
        X = np.array(rows, dtype=np.int64)
        paths = grow_tree(X, 0, [2] * X.shape[1], list(range(1, X.shape[1])), params)
        for path in paths:
            lits = tuple((ctx[i - 1], bool(v)) for i, v in path)
            for sign in (True, False):
                feats.append(FirstOrderFeature(lits + ((head, sign),)))
    return dedupe_clauses(feats)


# ---------------------------------------------------------------------------
# relational mappings


@dataclass(frozen=True, eq=False)
class FirstOrderCorrespondence:
    """Conditional table over truth values of the target atoms given the source atoms."""

    source_atoms: tuple[Atom, ...]
    target_atoms: tuple[Atom, ...]
    table: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "source_atoms", tuple(self.source_atoms))
        object.__setattr__(self, "target_atoms", tuple(self.target_atoms))
        t = np.array(self.table, dtype=np.float64)
        if t.shape != (2 ** len(self.source_atoms), 2 ** len(self.target_atoms)):
            raise ContractError("first-order correspondence table has the wrong shape")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)


@dataclass(frozen=True, eq=False)
class RelationalMapping:
    source: RelationalSchema
    target: RelationalSchema
    correspondences: tuple[FirstOrderCorrespondence, ...]

    def __post_init__(self):
        object.__setattr__(self, "correspondences", tuple(self.correspondences))

    def mapped_source_vars(self) -> set[str]:
        return {a.pred for c in self.correspondences for a in c.source_atoms}

    def expand(self, sizes: DomainSizes) -> Mapping:
        """Per-grounding propositional mapping between the two ground schemas."""
        src = ground_schema(self.source, sizes)
        tgt = ground_schema(self.target, sizes)
        corrs = []
        for c in self.correspondences:
            types = _var_types(c.source_atoms, self.source)
            for v, t in _var_types(c.target_atoms, self.target).items():
                if types.setdefault(v, t) != t:
                    raise ContractError(f"variable {v!r} has inconsistent types across the correspondence")
            names = list(types)
            for binding in itertools.product(*(sizes.constants(types[v]) for v in names)):
                env = dict(zip(names, binding))
                s = [str(Atom(a.pred, tuple(env.get(x, x) for x in a.args))) for a in c.source_atoms]
                t = [str(Atom(a.pred, tuple(env.get(x, x) for x in a.args))) for a in c.target_atoms]
                if len(set(s)) == len(s) and len(set(t)) == len(t):
                    corrs.append(Correspondence(tuple(s), tuple(t), c.table))
        return Mapping(src, tgt, tuple(corrs))

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "source": self.source.to_dict(),
            "target": self.target.to_dict(),
            "correspondences": [
                {"source_atoms": [str(a) for a in c.source_atoms], "target_atoms": [str(a) for a in c.target_atoms], "table": c.table.tolist()}
                for c in self.correspondences
            ],
        }

    @classmethod
    def from_dict(cls, d: MappingABC) -> RelationalMapping:
        _check_version(d)
        return cls(
            RelationalSchema.from_dict(d["source"]),
            RelationalSchema.from_dict(d["target"]),
            tuple(
                FirstOrderCorrespondence(tuple(map(Atom.parse, c["source_atoms"])), tuple(map(Atom.parse, c["target_atoms"])), c["table"])
                for c in d["correspondences"]
            ),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> RelationalMapping:
        return cls.from_dict(json.loads(Path(path).read_text()))


def sample_databases(mln: MLN, sizes: DomainSizes, cfg: SamplerConfig) -> list[RelationalDatabase]:
    data = gibbs_sample(ground(mln, sizes), cfg)
    return dataset_to_databases(mln.schema, sizes, data)


def sample_knowledge_databases(
    mln: MLN, mapping: RelationalMapping, sizes: DomainSizes, cfg: SamplerConfig
) -> list[RelationalDatabase]:
    """N source databases from the grounded source knowledge, one target draw each."""
    src = gibbs_sample(ground(mln, sizes), cfg)
    Y = map_samples(mapping.expand(sizes), src.values, child_rng(cfg.seed, 1))
    return [RelationalDatabase.from_row(mapping.target, sizes, r) for r in Y]


def translate_databases(
    mapping: RelationalMapping, dbs: Sequence[RelationalDatabase], n_total: int, seed: int
) -> list[RelationalDatabase]:
    """``ceil(n_total / N_S)`` target draws per source database, cut to ``n_total``."""
    if not dbs:
        raise ContractError("cannot translate zero databases")
    reps = math.ceil(n_total / len(dbs))
    order = [db for _ in range(reps) for db in dbs][:n_total]
    out = []
    expanded: dict[DomainSizes, Mapping] = {}
    for k, db in enumerate(order):
        m = expanded.setdefault(db.sizes, mapping.expand(db.sizes))
        y = map_samples(m, db.row(mapping.source)[None, :], child_rng(seed, 1, k))[0]
        out.append(RelationalDatabase.from_row(mapping.target, db.sizes, y))
    return out
