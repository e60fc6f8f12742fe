"""Heuristic translation of a source structure into the target schema.

Cliques of variables (or of first-order atoms) are first rid of every
variable the mapping does not mention, by merging the cliques that contain
it two at a time; each remaining variable is then replaced by the target
variables of every correspondence it takes part in.
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Iterable, Mapping as MappingABC, Sequence
from dataclasses import dataclass

from .learning import Structure
from .mapping import Mapping
from .model import ContractError, Feature, Literal, LogLinearModel, Schema

MAX_CLIQUE_CELLS = 4096

Clique = frozenset


@dataclass(frozen=True, order=True)
class Atom:
    """``pred(args)``; lowercase-initial arguments are logical variables, others constants."""

    pred: str
    args: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "args", tuple(self.args))

    def __str__(self) -> str:
        return f"{self.pred}({','.join(self.args)})"

    @classmethod
    def parse(cls, text: str) -> Atom:
        text = text.strip()
        name, _, rest = text.partition("(")
        if not rest.endswith(")"):
            raise ContractError(f"malformed atom {text!r}")
        args = tuple(a.strip() for a in rest[:-1].split(",") if a.strip())
        return cls(name.strip(), args)

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(a for a in self.args if is_variable(a))


def is_variable(term: str) -> bool:
    return term[:1].islower() or term[:1] == "_"


def _walk(t: str, s: dict[str, str]) -> str:
    while is_variable(t) and t in s:
        t = s[t]
    return t


def unify(a: Atom, b: Atom, subst: dict[str, str] | None = None, types: MappingABC[str, str] | None = None):
    """Most general unifier extending ``subst``, or ``None``.

    Variables of ``a`` are bound in preference to those of ``b``.
    """
    if a.pred != b.pred or len(a.args) != len(b.args):
        return None
    s = dict(subst or {})
    for x, y in zip(a.args, b.args):
        x, y = _walk(x, s), _walk(y, s)
        if x == y:
            continue
        if types is not None and is_variable(x) and is_variable(y) and types.get(x) != types.get(y):
            return None
        if is_variable(x):
            s[x] = y
        elif is_variable(y):
            s[y] = x
        else:
            return None
    return s


def unify_atoms(a: Atom, b: Atom, types: MappingABC[str, str] | None = None) -> list[dict[str, str]]:
    """All most general unifiers (resolved to ground terms); empty when none exists."""
    s = unify(a, b, types=types)
    return [] if s is None else [{v: _walk(v, s) for v in s}]


def substitute(atom: Atom, s: MappingABC[str, str]) -> Atom:
    return Atom(atom.pred, tuple(_walk(t, s) if is_variable(t) else t for t in atom.args))


def rename_apart(atoms: Iterable[Atom], suffix: str) -> list[Atom]:
    return [Atom(a.pred, tuple(t + suffix if is_variable(t) else t for t in a.args)) for a in atoms]


def canonical_atoms(atoms: Iterable[Atom]) -> frozenset[Atom]:
    """Rename logical variables to ``v0, v1, ...`` in a deterministic order."""
    atoms = sorted(set(atoms), key=lambda a: (a.pred, len(a.args), tuple(not is_variable(t) for t in a.args), str(a)))
    names: dict[str, str] = {}
    out = []
    for a in atoms:
        args = []
        for t in a.args:
            if is_variable(t):
                names.setdefault(t, f"v{len(names)}")
                args.append(names[t])
            else:
                args.append(t)
        out.append(Atom(a.pred, tuple(args)))
    return frozenset(out)


# ---------------------------------------------------------------------------
# cliques


def _is_relational(cliques: Sequence[Clique]) -> bool:
    return any(isinstance(x, Atom) for c in cliques for x in c)


def _key(x) -> str:
    return x.pred if isinstance(x, Atom) else x


def _sort_key(c: Clique) -> tuple:
    return (len(c), sorted(str(x) for x in c))


def _canonical(cliques: Iterable[Clique]) -> list[Clique]:
    out = set()
    for c in cliques:
        if not c:
            continue
        out.add(canonical_atoms(c) if any(isinstance(x, Atom) for x in c) else frozenset(c))
    return sorted(out, key=_sort_key)


def structure_to_cliques(model, threshold: float = 0.0) -> list[Clique]:
    """Variable sets (or atom sets) of features whose |weight| exceeds ``threshold``."""
    feats = model.features if hasattr(model, "features") else model
    out = []
    for f in feats:
        if abs(f.weight) > threshold:
            if hasattr(f, "atoms"):
                out.append(frozenset(a for a, _ in f.atoms))
            else:
                out.append(frozenset(f.variables))
    return _canonical(out)


def _merge(a: Clique, b: Clique, p: str) -> list[Clique]:
    if not _is_relational([a, b]):
        return [frozenset(x for x in a | b if x != p)]
    b2 = rename_apart(b, "_m")
    out = []
    for x in (x for x in a if x.pred == p):
        for y in (y for y in b2 if y.pred == p):
            s = unify(x, y)
            if s is None:
                continue
            out.append(frozenset(substitute(z, s) for z in list(a) + b2 if z.pred != p))
    return out


def eliminate_unmapped(cliques: Sequence[Clique], mapped: Iterable[str] | Mapping) -> list[Clique]:
    """Remove unmapped variables (or predicates) by pairwise clique merging.

    Variables are eliminated fewest-containing-cliques first, ties by name.
    Only the original cliques containing the variable are paired; a lone
    clique is reinserted with the variable dropped.
    """
    keep = mapped.mapped_source_vars() if hasattr(mapped, "mapped_source_vars") else set(mapped)
    cl = _canonical(cliques)
    while True:
        counts: dict[str, int] = {}
        for c in cl:
            for k in {_key(x) for x in c}:
                if k not in keep:
                    counts[k] = counts.get(k, 0) + 1
        if not counts:
            return cl
        p = min(counts, key=lambda k: (counts[k], k))
        phi_p = [c for c in cl if any(_key(x) == p for x in c)]
        rest = [c for c in cl if not any(_key(x) == p for x in c)]
        merged: list[Clique] = []
        if len(phi_p) == 1:
            merged.append(frozenset(x for x in phi_p[0] if _key(x) != p))
        for a, b in itertools.combinations(phi_p, 2):
            merged.extend(_merge(a, b, p))
        cl = _canonical(rest + merged)


def _candidates_propositional(x: str, mapping: Mapping) -> list[frozenset]:
    cands = [frozenset(c.target_vars) for c in mapping.correspondences_of(x)]
    if not cands:
        raise ContractError(f"variable {x!r} has no correspondence; eliminate it first")
    return list(dict.fromkeys(cands))


def _candidates_relational(x: Atom, mapping) -> list[frozenset]:
    cands = []
    for i, corr in enumerate(mapping.correspondences):
        src = rename_apart(corr.source_atoms, f"_c{i}")
        tgt = rename_apart(corr.target_atoms, f"_c{i}")
        for s_atom in src:
            s = unify(s_atom, x)
            if s is not None:
                cands.append(frozenset(substitute(t, s) for t in tgt))
    if not cands:
        raise ContractError(f"atom {x} has no correspondence; eliminate it first")
    return list(dict.fromkeys(cands))


def translate_cliques(cliques: Sequence[Clique], mapping) -> list[Clique]:
    """Cartesian product of each clique member's correspondences, flattened."""
    out = []
    for c in _canonical(cliques):
        members = sorted(c, key=str)
        if _is_relational([c]):
            options = [_candidates_relational(x, mapping) for x in members]
        else:
            options = [_candidates_propositional(x, mapping) for x in members]
        for combo in itertools.product(*options):
            out.append(frozenset().union(*combo))
    return _canonical(out)


def clique_features(clique: Clique, schema: Schema) -> list[Feature]:
    """All conjunctions over the clique's joint domain, weights zero."""
    names = sorted(clique)
    doms = [schema[n].domain for n in names]
    if math.prod(len(d) for d in doms) > MAX_CLIQUE_CELLS:
        raise ContractError(f"clique {names} exceeds {MAX_CLIQUE_CELLS} joint configurations")
    return [Feature(tuple(Literal(n, v) for n, v in zip(names, vals))) for vals in itertools.product(*doms)]


def translate_structure(model: LogLinearModel, mapping: Mapping, threshold: float = 0.1) -> Structure:
    cliques = structure_to_cliques(model, threshold)
    cliques = eliminate_unmapped(cliques, mapping)
    cliques = translate_cliques(cliques, mapping)
    feats = [f for c in cliques for f in clique_features(c, mapping.target_schema)]
    return Structure.from_features(feats)
