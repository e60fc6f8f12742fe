"""Reproducible desk-scale stand-ins for the NBA-style and University-style tasks.

Propositional tasks: a pairwise source MRF over binned numeric attributes.
Target attributes are the same quantities in other units, binned by equal
frequency instead of equal width.  The mapping is computed the usual way, by
assuming values are spread uniformly inside each source bin; the true data
process instead draws the within-bin position from a Beta distribution, so
the mapping is realistically (mildly) wrong.

Relational tasks: a university-flavoured source MLN over people, courses and
papers, with a target schema that renames predicates and swaps argument
orders.  True target data uses sharper correspondences than the mapping
handed to the translation methods.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .learning import Structure
from .mapping import Correspondence, Mapping, binned_correspondence
from .model import ContractError, Dataset, Feature, Literal, LogLinearModel, Schema, Variable
from .relational import (
    MLN,
    DomainSizes,
    FirstOrderCorrespondence,
    FirstOrderFeature,
    PredicateDecl,
    RelationalDatabase,
    RelationalMapping,
    RelationalSchema,
    clique_clauses,
    empty_mln_structure,
    sample_databases,
    save_databases,
    translate_databases,
)
from .sampling import SamplerConfig, child_rng, gibbs_sample, map_samples, translate_dataset
from .structure import Atom, clique_features, structure_to_cliques, translate_cliques

ATTRIBUTES = ("height", "weight", "age", "salary")
UNITS = (39.3701, 2.20462, 1.0, 0.001)


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "propositional"
    seed: int = 0
    # propositional
    n_vars: int = 4
    domain_size: int = 5
    granularity: str = "width-vs-frequency"  # or "same"
    mapping_noise: float = 0.05
    within_bin_shape: float = 3.0
    population_shift: float = 0.5
    n_source: int = 1000
    n_target: int = 1000
    # relational
    n_train_dbs: int = 8
    n_test_dbs: int = 3
    person_range: tuple[int, int] = (6, 8)
    course_range: tuple[int, int] = (3, 4)
    paper_range: tuple[int, int] = (3, 4)
    assumed_fidelity: float = 0.85
    true_fidelity: float = 0.95
    scalar: float = 0.5


@dataclass(eq=False)
class SyntheticTask:
    """Task bundle; ``truth`` records the generating parameters."""

    spec: TaskSpec
    source_model: object
    mapping: object
    source_train: object
    source_test: object
    target_train: object
    target_test: object
    translated_source_test: object
    manual_structure: object
    truth: dict = field(default_factory=dict)
    training_sizes: list = field(default_factory=list)

    @property
    def relational(self) -> bool:
        return self.spec.kind == "relational"

    def objects(self) -> dict:
        return {
            "source_model": self.source_model,
            "mapping": self.mapping,
            "source_data": self.source_train,
            "target_data": self.target_train,
            "manual_structure": self.manual_structure,
            "target_test": self.target_test,
            "translated_source_test": self.translated_source_test,
            "target_schema": self.mapping.target if self.relational else None,
        }

    def save(self, directory) -> dict:
        """Write every artefact plus a matching experiment config; returns the config."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.source_model.save(d / "source_model.json")
        self.mapping.save(d / "mapping.json")
        if self.relational:
            ext = "json"
            tgt_schema = self.mapping.target.to_dict()
            src_schema = self.mapping.source.to_dict()
            save_databases(self.source_train, d / "source_train.json", {"schema": src_schema})
            save_databases(self.source_test, d / "source_test.json", {"schema": src_schema})
            save_databases(self.target_train, d / "target_train.json", {"schema": tgt_schema})
            save_databases(self.target_test, d / "target_test.json", {"schema": tgt_schema})
            save_databases(self.translated_source_test, d / "translated_source_test.json", {"schema": tgt_schema})
            self.manual_structure.save(d / "manual_structure.json")
        else:
            ext = "csv"
            self.source_train.to_csv(d / "source_train.csv")
            self.source_test.to_csv(d / "source_test.csv")
            self.target_train.to_csv(d / "target_train.csv")
            self.target_test.to_csv(d / "target_test.csv")
            self.translated_source_test.to_csv(d / "translated_source_test.csv")
            LogLinearModel(self.mapping.target_schema, self.manual_structure.features).save(d / "manual_structure.json")
        cfg = {
            "mode": self.spec.kind,
            "source_model": "source_model.json",
            "mapping": "mapping.json",
            "source_data": f"source_train.{ext}",
            "target_data": f"target_train.{ext}",
            "manual_structure": "manual_structure.json",
            "evaluation": {"target_test": f"target_test.{ext}", "translated_source_test": f"translated_source_test.{ext}"},
            "seed": self.spec.seed,
        }
        if self.relational:
            cfg["relational"] = {"scalar": self.spec.scalar, "training_sizes": [s.as_dict() for s in self.training_sizes]}
        (d / "config.json").write_text(json.dumps(cfg, indent=2))
        (d / "truth.json").write_text(json.dumps({"spec": asdict(self.spec), **self.truth}, indent=2, default=str))
        return cfg


def make_synthetic_task(spec: TaskSpec) -> SyntheticTask:
    if spec.kind == "propositional":
        return _propositional_task(spec)
    if spec.kind == "relational":
        return _relational_task(spec)
    raise ContractError(f"unknown task kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# propositional


def _names(n: int) -> list[str]:
    return [ATTRIBUTES[i] if i < len(ATTRIBUTES) else f"attr{i}" for i in range(n)]


def _units(n: int) -> list[float]:
    return [UNITS[i] if i < len(UNITS) else 1.0 for i in range(n)]


def _source_model(spec: TaskSpec, rng: np.random.Generator) -> LogLinearModel:
    d = spec.domain_size
    names = _names(spec.n_vars)
    schema = Schema(tuple(Variable(n, tuple(f"b{k}" for k in range(d))) for n in names))
    feats = []
    for n in names:
        bump = rng.normal(0, 0.6, size=d)
        for k in range(d):
            feats.append(Feature((Literal(n, f"b{k}"),), bump[k]))
    edges = [(i, i + 1) for i in range(spec.n_vars - 1)]
    if spec.n_vars > 2:
        edges.append((0, spec.n_vars - 1))
    for i, j in edges:
        s = rng.uniform(0.5, 0.9) * rng.choice([-1.0, 1.0])
        for a in range(d):
            for b in range(d):
                dist = abs(a - b) if s > 0 else abs(a - (d - 1 - b))
                feats.append(Feature((Literal(names[i], f"b{a}"), Literal(names[j], f"b{b}")), -abs(s) * dist))
    return LogLinearModel(schema, tuple(feats))


def _propositional_task(spec: TaskSpec) -> SyntheticTask:
    rng = child_rng(spec.seed, 100)
    d = spec.domain_size
    src_model = _source_model(spec, rng)
    names = _names(spec.n_vars)
    tnames = [f"{n}_t" for n in names]
    tgt_schema = Schema(tuple(Variable(n, tuple(f"t{k}" for k in range(d))) for n in tnames))
    cfg = SamplerConfig(20000, seed=spec.seed * 7 + 1, burn_in=200, thin=5)
    ref = gibbs_sample(src_model, cfg).values
    alpha = spec.within_bin_shape

    def latent(X, r):
        return (X + r.beta(alpha, alpha, size=X.shape)) / d

    if spec.granularity == "same":
        perms = [rng.permutation(d) for _ in names]
        tables = []
        for p in perms:
            t = np.zeros((d, d))
            t[np.arange(d), p] = 1.0
            tables.append(t)
        cuts = None
    elif spec.granularity == "width-vs-frequency":
        lat = latent(ref, child_rng(spec.seed, 101))
        cuts = [np.quantile(lat[:, j], np.arange(1, d) / d) for j in range(spec.n_vars)]
        edges = np.linspace(0.0, 1.0, d + 1)
        tables = [
            binned_correspondence("s", "t", edges, np.concatenate([[-np.inf], c * u, [np.inf]]), u).table
            for c, u in zip(cuts, _units(spec.n_vars))
        ]
        perms = None
    else:
        raise ContractError(f"unknown granularity {spec.granularity!r}")
    noise = spec.mapping_noise
    tables = [(1 - noise) * t + noise / d for t in tables]
    corrs = tuple(Correspondence((s,), (t,), tab) for s, t, tab in zip(names, tnames, tables))
    mapping = Mapping(src_model.schema, tgt_schema, corrs)

    def true_target(X, r):
        if cuts is None:
            Y = np.stack([perms[j][X[:, j]] for j in range(spec.n_vars)], axis=1)
        else:
            lat = latent(X, r)
            Y = np.stack([np.searchsorted(cuts[j], lat[:, j]) for j in range(spec.n_vars)], axis=1)
        flip = r.random(Y.shape) < noise
        return np.where(flip, r.integers(0, d, size=Y.shape), Y)

    src = gibbs_sample(src_model, SamplerConfig(spec.n_source, seed=spec.seed * 7 + 2))
    # the target population differs from the source one in its marginals
    shifted = LogLinearModel(
        src_model.schema,
        tuple(f.with_weight(f.weight + (rng.normal(0, spec.population_shift) if len(f.literals) == 1 else 0.0)) for f in src_model.features),
    )
    hidden = gibbs_sample(shifted, SamplerConfig(spec.n_target, seed=spec.seed * 7 + 3))
    tgt = Dataset(tgt_schema, true_target(hidden.values, child_rng(spec.seed, 102)), {"generator": "synthetic-target", "seed": spec.seed})
    n_tr_s = spec.n_source * 4 // 5
    n_tr_t = spec.n_target * 4 // 5
    source_train, source_test = src.subset(slice(0, n_tr_s)), src.subset(slice(n_tr_s, None))
    target_train, target_test = tgt.subset(slice(0, n_tr_t)), tgt.subset(slice(n_tr_t, None))
    translated = translate_dataset(mapping, source_test, len(source_test), seed=spec.seed * 7 + 4)
    cliques = structure_to_cliques(src_model, 0.0)
    manual = Structure.from_features(f for c in translate_cliques(cliques, mapping) for f in clique_features(c, tgt_schema))
    truth = {
        "cuts": [c.tolist() for c in cuts] if cuts is not None else None,
        "source_model": src_model.to_dict(),
        "target_population_model": shifted.to_dict(),
    }
    return SyntheticTask(spec, src_model, mapping, source_train, source_test, target_train, target_test, translated, manual, truth)


# ---------------------------------------------------------------------------
# relational

SOURCE_SCHEMA = RelationalSchema(
    ("person", "course", "paper"),
    (
        PredicateDecl("Professor", ("person",)),
        PredicateDecl("AdvisedBy", ("person", "person")),
        PredicateDecl("TaughtBy", ("course", "person")),
        PredicateDecl("Publication", ("paper", "person")),
    ),
)

TARGET_SCHEMA = RelationalSchema(
    ("person", "course", "paper"),
    (
        PredicateDecl("Faculty", ("person",)),
        PredicateDecl("Advises", ("person", "person")),
        PredicateDecl("Teaches", ("person", "course")),
        PredicateDecl("Author", ("person", "paper")),
    ),
)

_SOURCE_CLAUSES = (
    (["Professor(x)"], -0.5),
    (["AdvisedBy(x,y)"], -1.5),
    (["TaughtBy(c,x)"], -1.0),
    (["Publication(p,x)"], -1.0),
    (["AdvisedBy(x,y)", "Professor(y)"], 1.5),
    (["AdvisedBy(x,y)", "Professor(x)"], -1.5),
    (["TaughtBy(c,x)", "Professor(x)"], 1.2),
    (["Publication(p,x)", "Professor(x)"], 0.6),
    (["Publication(p,x)", "Publication(p,y)", "AdvisedBy(x,y)"], 1.0),
)

_PAIRS = (("Professor(x)", "Faculty(x)"), ("AdvisedBy(x,y)", "Advises(y,x)"), ("TaughtBy(c,x)", "Teaches(x,c)"), ("Publication(p,x)", "Author(x,p)"))


def university_mapping(fidelity: float, false_positive: float = 0.05) -> RelationalMapping:
    table = np.array([[1 - false_positive, false_positive], [1 - fidelity, fidelity]])
    corrs = tuple(FirstOrderCorrespondence((Atom.parse(s),), (Atom.parse(t),), table) for s, t in _PAIRS)
    return RelationalMapping(SOURCE_SCHEMA, TARGET_SCHEMA, corrs)


def _relational_task(spec: TaskSpec) -> SyntheticTask:
    rng = child_rng(spec.seed, 200)
    scale = rng.uniform(0.8, 1.2, size=len(_SOURCE_CLAUSES))
    mln = MLN(SOURCE_SCHEMA, tuple(FirstOrderFeature.parse(a, w * s) for (a, w), s in zip(_SOURCE_CLAUSES, scale)))
    given = university_mapping(spec.assumed_fidelity, 0.1)
    true_map = university_mapping(spec.true_fidelity, 0.03)

    def sizes():
        return DomainSizes.of(
            person=int(rng.integers(spec.person_range[0], spec.person_range[1] + 1)),
            course=int(rng.integers(spec.course_range[0], spec.course_range[1] + 1)),
            paper=int(rng.integers(spec.paper_range[0], spec.paper_range[1] + 1)),
        )

    def draw(n, tag):
        out = []
        for i in range(n):
            s = sizes()
            out.extend(sample_databases(mln, s, SamplerConfig(1, seed=spec.seed * 1000 + tag * 100 + i, burn_in=200, n_chains=1)))
        return out

    source_train = draw(spec.n_train_dbs, 1)
    source_test = draw(spec.n_test_dbs, 2)
    hidden = draw(spec.n_train_dbs + spec.n_test_dbs, 3)
    target_all = []
    for k, db in enumerate(hidden):
        m = true_map.expand(db.sizes)
        y = map_samples(m, db.row(SOURCE_SCHEMA)[None, :], child_rng(spec.seed, 201, k))[0]
        target_all.append(RelationalDatabase.from_row(TARGET_SCHEMA, db.sizes, y))
    target_train, target_test = target_all[: spec.n_train_dbs], target_all[spec.n_train_dbs :]
    translated = translate_databases(given, source_test, len(source_test), seed=spec.seed * 7 + 4)
    cliques = structure_to_cliques(mln.clauses, 0.0)
    manual = MLN(TARGET_SCHEMA, tuple(clique_clauses(translate_cliques(cliques, given))) + tuple(empty_mln_structure(TARGET_SCHEMA)))
    truth = {"source_mln": mln.to_dict(), "true_mapping": true_map.to_dict()}
    return SyntheticTask(
        spec, mln, given, source_train, source_test, target_train, target_test, translated, manual, truth,
        training_sizes=[db.sizes for db in source_train],
    )
