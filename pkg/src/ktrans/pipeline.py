"""Experiment runner: the seven-method matrix, evaluation, tuning and run directories.

Methods are named ``<structure>-<data>``.  Structure is ES (singletons only),
LS (learned by trees), TS (translated from the source model) or MS (manual).
Data is KS (samples drawn from source knowledge through the mapping), DS
(translated source data) or DT (target data).  Knowledge-only methods are run
behind an access guard that refuses to open any training dataset.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import time
from collections.abc import Callable, Mapping as MappingABC, Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .learning import DTSLParams, LearnConfig, Structure, empty_structure, learn_structure_dtsl, learn_weights
from .mapping import Mapping
from .model import ContractError, Dataset, LogLinearModel, pll
from .relational import (
    MLN,
    DomainSizes,
    RelationalMapping,
    RelationalSchema,
    constants_heuristic,
    dedupe_clauses,
    empty_mln_structure,
    learn_mln_structure,
    learn_mln_weights,
    load_databases,
    mean_wpll,
    sample_knowledge_databases,
    save_databases,
    translate_databases,
    translate_mln_structure,
)
from .sampling import SamplerConfig, child_rng, sample_knowledge, translate_dataset
from .structure import translate_structure

log = logging.getLogger(__name__)

METHODS = ("ES-KS", "LS-KS", "TS-KS", "LS-DS", "MS-DS", "LS-DT", "MS-DT")
KNOWLEDGE_ONLY = frozenset({"ES-KS", "LS-KS", "TS-KS"})
TRAINING_DATA = frozenset({"source_data", "target_data"})
REQUIRED = {
    "ES-KS": ("source_model", "mapping"),
    "LS-KS": ("source_model", "mapping"),
    "TS-KS": ("source_model", "mapping"),
    "LS-DS": ("mapping", "source_data"),
    "MS-DS": ("mapping", "source_data", "manual_structure"),
    "LS-DT": ("target_data",),
    "MS-DT": ("target_data", "manual_structure"),
}
NOTES = {
    "pll": "mean per instance (propositional) or per database (relational, weighted by 1/groundings)",
    "samples": "K_S methods draw one target sample per source sample; D_S methods draw ceil(N/N_S) per source instance",
}


class MissingInputError(ContractError):
    """A method's required input is not configured or does not exist."""


class DataAccessError(RuntimeError):
    """A knowledge-only method tried to open a training dataset."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SamplerSettings:
    burn_in: int = 1000
    thin: int = 10
    n_chains: int = 100

    def config(self, n: int, seed: int) -> SamplerConfig:
        return SamplerConfig(n, burn_in=self.burn_in, thin=self.thin, seed=seed, n_chains=self.n_chains)


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "propositional"
    source_model: str | None = None
    mapping: str | None = None
    source_data: str | None = None
    target_data: str | None = None
    manual_structure: str | None = None
    target_test: str | None = None
    translated_source_test: str | None = None
    methods: tuple[str, ...] = METHODS
    n_samples: tuple[int, ...] = (1000,)
    seed: int = 0
    learn: LearnConfig = field(default_factory=LearnConfig)
    tune: bool = True
    l2_grid: tuple[float, ...] = (1e-4, 1e-3, 1e-2, 1e-1)
    threshold: float = 0.1
    threshold_grid: tuple[float, ...] = (0.1,)
    dtsl_prior_grid: tuple[float, ...] = (1.0, 3.0)
    cv_folds: int = 4
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    relational_prior_std: float = 10.0
    scalar: float = 0.5
    training_sizes: tuple[DomainSizes, ...] = ()
    base_dir: str = "."

    def __post_init__(self):
        if self.mode not in ("propositional", "relational"):
            raise ContractError(f"mode must be propositional or relational, not {self.mode!r}")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "n_samples", tuple(int(n) for n in self.n_samples))
        object.__setattr__(self, "l2_grid", tuple(float(x) for x in self.l2_grid))
        object.__setattr__(self, "threshold_grid", tuple(float(x) for x in self.threshold_grid))
        object.__setattr__(self, "dtsl_prior_grid", tuple(float(x) for x in self.dtsl_prior_grid))
        object.__setattr__(self, "training_sizes", tuple(self.training_sizes))
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ContractError(f"unknown methods {bad}; expected a subset of {list(METHODS)}")
        if not self.n_samples or min(self.n_samples) < 1:
            raise ContractError("n_samples must list positive sample counts")
        if self.relational_prior_std <= 0 or self.scalar <= 0:
            raise ContractError("relational prior std and scalar must be positive")

    def path(self, name: str) -> Path | None:
        p = getattr(self, name)
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "source_model": self.source_model,
            "mapping": self.mapping,
            "source_data": self.source_data,
            "target_data": self.target_data,
            "manual_structure": self.manual_structure,
            "evaluation": {"target_test": self.target_test, "translated_source_test": self.translated_source_test},
            "methods": list(self.methods),
            "n_samples": list(self.n_samples),
            "seed": self.seed,
            "learn": asdict(self.learn),
            "tune": self.tune,
            "l2_grid": list(self.l2_grid),
            "threshold": self.threshold,
            "threshold_grid": list(self.threshold_grid),
            "dtsl_prior_grid": list(self.dtsl_prior_grid),
            "cv_folds": self.cv_folds,
            "sampler": asdict(self.sampler),
            "relational": {
                "prior_std": self.relational_prior_std,
                "scalar": self.scalar,
                "training_sizes": [s.as_dict() for s in self.training_sizes],
            },
        }

    @classmethod
    def from_dict(cls, d: MappingABC, base_dir=".") -> ExperimentConfig:
        known = {
            "mode", "source_model", "mapping", "source_data", "target_data", "manual_structure", "evaluation",
            "methods", "n_samples", "seed", "learn", "tune", "l2_grid", "threshold", "threshold_grid",
            "dtsl_prior_grid", "cv_folds", "sampler", "relational",
        }
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys {sorted(unknown)}")
        kw: dict = {k: d[k] for k in ("mode", "source_model", "mapping", "source_data", "target_data", "manual_structure",
                                       "methods", "seed", "tune", "l2_grid", "threshold", "threshold_grid", "dtsl_prior_grid", "cv_folds") if k in d}
        ev = d.get("evaluation") or {}
        kw["target_test"] = ev.get("target_test")
        kw["translated_source_test"] = ev.get("translated_source_test")
        if "n_samples" in d:
            n = d["n_samples"]
            kw["n_samples"] = tuple(n) if isinstance(n, (list, tuple)) else (n,)
        if "learn" in d:
            lc = dict(d["learn"])
            dt = DTSLParams(**lc.pop("dtsl", {}))
            kw["learn"] = LearnConfig(dtsl=dt, **lc)
        if "sampler" in d:
            kw["sampler"] = SamplerSettings(**d["sampler"])
        rel = d.get("relational") or {}
        if "prior_std" in rel:
            kw["relational_prior_std"] = float(rel["prior_std"])
        if "scalar" in rel:
            kw["scalar"] = float(rel["scalar"])
        kw["training_sizes"] = tuple(DomainSizes.of(s) for s in rel.get("training_sizes", ()))
        return cls(base_dir=str(base_dir), **kw)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    def digest(self) -> str:
        return _hash(self.to_dict())


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def digest_of(obj) -> str:
    return obj.digest() if hasattr(obj, "digest") else _hash(obj.to_dict())


# ---------------------------------------------------------------------------
# guarded inputs


class Inputs:
    """Lazily loaded experiment inputs with an access log and a data guard.

    ``objects`` supplies in-memory values keyed like the config fields; a
    key present there is never loaded from disk.
    """

    def __init__(self, cfg: ExperimentConfig, objects: MappingABC | None = None):
        self.cfg = cfg
        self._objects = dict(objects or {})
        self._cache: dict = {}
        self.accessed: list[str] = []
        self._forbidden: frozenset = frozenset()

    def available(self, name: str) -> bool:
        if self._objects.get(name) is not None:
            return True
        p = self.cfg.path(name)
        return p is not None and p.exists()

    def forbid(self, names) -> None:
        self._forbidden = frozenset(names)

    def get(self, name: str):
        if name in self._forbidden:
            raise DataAccessError(f"knowledge-only method attempted to read {name!r}")
        if name not in self.accessed:
            self.accessed.append(name)
        if self._objects.get(name) is not None:
            return self._objects[name]
        if name not in self._cache:
            p = self.cfg.path(name)
            if p is None or not p.exists():
                raise MissingInputError(f"input {name!r} is required but {'not configured' if p is None else f'missing at {p}'}")
            self._cache[name] = self._load(name, p)
        return self._cache[name]

    def _load(self, name: str, p: Path):
        rel = self.cfg.mode == "relational"
        if name == "source_model":
            return MLN.load(p) if rel else LogLinearModel.load(p)
        if name == "mapping":
            return RelationalMapping.load(p) if rel else Mapping.load(p)
        if name == "manual_structure":
            return MLN.load(p) if rel else Structure.from_model(LogLinearModel.load(p))
        if rel:
            doc = json.loads(p.read_text())
            if "schema" in doc.get("provenance", {}):
                self._objects.setdefault(f"{name}_schema", RelationalSchema.from_dict(doc["provenance"]["schema"]))
            return load_databases(p)
        return Dataset.from_csv(p)

    def target_schema(self, method: str):
        """Target schema, taken from the mapping when the method may use it, else from target data."""
        if "mapping" in REQUIRED[method]:
            m = self.get("mapping")
            return m.target if isinstance(m, RelationalMapping) else m.target_schema
        data = self.get("target_data")
        if self.cfg.mode == "relational":
            s = self._objects.get("target_schema") or self._objects.get("target_data_schema")
            if s is None:
                raise MissingInputError("relational target data must carry its schema (provenance.schema)")
            return s
        return data.schema


# ---------------------------------------------------------------------------
# tuning


def fold_indices(n: int, n_folds: int, seed: int) -> list[np.ndarray]:
    perm = child_rng(seed, 7).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, n_folds)]


def cross_validate(
    n_rows: int,
    grid: Sequence[MappingABC],
    fit: Callable[[np.ndarray, MappingABC], object],
    score: Callable[[object, np.ndarray], float],
    n_folds: int = 4,
    seed: int = 0,
    min_rows: int = 1,
) -> tuple[dict, list[float]]:
    """Grid point with the best mean held-out score; ties go to the larger ``l2``.

    ``fit(train_idx, params)`` returns a model and ``score(model, test_idx)``
    its held-out score (higher is better).
    """
    grid = [dict(g) for g in grid]
    if not grid:
        raise ContractError("hyperparameter grid is empty")
    if len(grid) == 1:
        return grid[0], [math.nan]
    if n_rows < n_folds * min_rows:
        raise ContractError(f"cross-validation needs at least {n_folds * min_rows} rows, got {n_rows}")
    folds = fold_indices(n_rows, n_folds, seed)
    scores = []
    for params in grid:
        s = 0.0
        for k in range(n_folds):
            test = folds[k]
            train = np.concatenate([folds[i] for i in range(n_folds) if i != k])
            s += score(fit(train, params), test)
        scores.append(s / n_folds)
    order = sorted(range(len(grid)), key=lambda i: (round(scores[i], 10), grid[i].get("l2", 0.0)), reverse=True)
    return grid[order[0]], scores


# ---------------------------------------------------------------------------
# knowledge samples (optionally cached)


def _cache_path(kind: str, *parts) -> Path | None:
    root = os.environ.get("KT_CACHE_DIR")
    if not root:
        return None
    key = _hash([kind, *parts])
    ext = "json" if kind == "relational" else "csv"
    return Path(root) / f"ks-{kind}-{key}.{ext}"


def knowledge_samples(cfg: ExperimentConfig, inputs: Inputs, n: int):
    src, m = inputs.get("source_model"), inputs.get("mapping")
    scfg = cfg.sampler.config(n, cfg.seed)
    if cfg.mode == "relational":
        if not cfg.training_sizes:
            raise MissingInputError("relational knowledge sampling needs relational.training_sizes")
        sizes = constants_heuristic(cfg.training_sizes, cfg.scalar)
        cp = _cache_path("relational", digest_of(src), digest_of(m), cfg.seed, n, asdict(cfg.sampler), sizes.as_dict())
        if cp is not None and cp.exists():
            return load_databases(cp)
        dbs = sample_knowledge_databases(src, m, sizes, scfg)
        if cp is not None:
            cp.parent.mkdir(parents=True, exist_ok=True)
            save_databases(dbs, cp, {"method": "K_S-sampling", "sizes": sizes.as_dict()})
        return dbs
    cp = _cache_path("propositional", digest_of(src), digest_of(m), cfg.seed, n, asdict(cfg.sampler))
    if cp is not None and cp.exists():
        return Dataset.from_csv(cp)
    data = sample_knowledge(src, m, scfg)
    if cp is not None:
        cp.parent.mkdir(parents=True, exist_ok=True)
        data.to_csv(cp)
    return data


def _training_data(method: str, cfg: ExperimentConfig, inputs: Inputs, n: int):
    kind = method.split("-")[1]
    if kind == "KS":
        return knowledge_samples(cfg, inputs, n)
    if kind == "DS":
        m, src = inputs.get("mapping"), inputs.get("source_data")
        if cfg.mode == "relational":
            return translate_databases(m, src, n, cfg.seed)
        return translate_dataset(m, src, n, cfg.seed)
    return inputs.get("target_data")


# ---------------------------------------------------------------------------
# method runners


@dataclass(eq=False)
class RunResult:
    method: str
    model: object
    report: dict

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        if isinstance(self.model, MLN):
            self.model.save(d / "model.json")
        else:
            self.model.save(d / "model.json", learn_config=self.report.get("learn_config"))
        (d / "report.json").write_text(dump_report(self.report))


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def _propositional_structures(method: str, cfg: ExperimentConfig, inputs: Inputs, schema) -> dict:
    """Fixed structures keyed by threshold (TS) or a single entry; ``None`` means learn per fit."""
    kind = method.split("-")[0]
    if kind == "ES":
        return {None: empty_structure(schema)}
    if kind == "MS":
        st = inputs.get("manual_structure")
        return {None: st if isinstance(st, Structure) else Structure.from_model(st)}
    if kind == "TS":
        src, m = inputs.get("source_model"), inputs.get("mapping")
        thetas = cfg.threshold_grid if cfg.tune else (cfg.threshold,)
        return {t: translate_structure(src, m, t) for t in thetas}
    return {None: None}


def _run_propositional(method: str, cfg: ExperimentConfig, inputs: Inputs, data: Dataset) -> tuple[LogLinearModel, dict]:
    structs = _propositional_structures(method, cfg, inputs, data.schema)

    def fit(d: Dataset, params) -> LogLinearModel:
        lc = replace(cfg.learn, l2_prior=params["l2"])
        st = structs[params.get("threshold")]
        if st is None:
            st = learn_structure_dtsl(d, replace(lc, dtsl=replace(lc.dtsl, prior=params["dtsl_prior"])))
        return learn_weights(st, d, lc)

    l2s = cfg.l2_grid if cfg.tune else (cfg.learn.l2_prior,)
    if None in structs and structs[None] is None:
        priors = cfg.dtsl_prior_grid if cfg.tune else (cfg.learn.dtsl.prior,)
        grid = [{"l2": l2, "dtsl_prior": p} for p in priors for l2 in l2s]
    else:
        grid = [{"l2": l2} if t is None else {"l2": l2, "threshold": t} for t in structs for l2 in l2s]
    best, scores = cross_validate(
        len(data), grid,
        lambda idx, p: fit(data.subset(idx), p),
        lambda model, idx: pll(model, data.subset(idx)),
        cfg.cv_folds, cfg.seed, cfg.learn.dtsl.mincount,
    )
    model = fit(data, best)
    tuning = {"selected": best, "grid": grid, "cv_scores": [None if math.isnan(s) else s for s in scores]}
    return model, tuning


def _run_relational(method: str, cfg: ExperimentConfig, inputs: Inputs, dbs: list) -> tuple[MLN, dict]:
    schema = inputs.target_schema(method)
    kind = method.split("-")[0]
    if kind == "ES":
        clauses = empty_mln_structure(schema)
    elif kind == "TS":
        clauses = translate_mln_structure(inputs.get("source_model"), inputs.get("mapping"), cfg.threshold)
        clauses = dedupe_clauses(list(clauses) + empty_mln_structure(schema))
    elif kind == "MS":
        st = inputs.get("manual_structure")
        clauses = list(st.clauses if isinstance(st, MLN) else st)
    else:
        clauses = learn_mln_structure(schema, dbs, cfg.learn.dtsl)
    # a Gaussian prior with std sigma on the WPLL summed over databases
    l2 = 1.0 / (cfg.relational_prior_std**2 * len(dbs))
    mln = learn_mln_weights(clauses, schema, dbs, l2, cfg.learn.gradient_tolerance, cfg.learn.max_iters)
    return mln, {"selected": {"prior_std": cfg.relational_prior_std, "threshold": cfg.threshold}, "l2_per_database": l2}


def check_inputs(method: str, inputs: Inputs) -> None:
    missing = [n for n in REQUIRED[method] if not inputs.available(n)]
    if missing:
        raise MissingInputError(f"{method} needs {', '.join(missing)}, which {'is' if len(missing) == 1 else 'are'} absent")


def run_method(method: str, cfg: ExperimentConfig, n_samples: int | None = None, inputs: Inputs | None = None) -> RunResult:
    """Train one method and evaluate it on whichever held-out sets are configured."""
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}")
    inputs = inputs or Inputs(cfg)
    n = cfg.n_samples[0] if n_samples is None else int(n_samples)
    check_inputs(method, inputs)
    if method in KNOWLEDGE_ONLY:
        inputs.forbid(TRAINING_DATA)
    try:
        data = _training_data(method, cfg, inputs, n)
        if cfg.mode == "relational":
            model, tuning = _run_relational(method, cfg, inputs, data)
        else:
            model, tuning = _run_propositional(method, cfg, inputs, data)
    finally:
        inputs.forbid(())
    training_inputs = list(inputs.accessed)
    tests = {}
    for name in ("target_test", "translated_source_test"):
        if inputs.available(name):
            tests[name] = inputs.get(name)
        elif getattr(cfg, name) is not None:
            raise MissingInputError(f"evaluation input {name!r} missing at {cfg.path(name)}")
    report = {
        "method": method,
        "mode": cfg.mode,
        "n_samples": n if method.endswith(("KS", "DS")) else None,
        "n_training": len(data),
        "seed": cfg.seed,
        "config_hash": cfg.digest(),
        "model_hash": digest_of(model),
        "n_features": len(model.clauses) if isinstance(model, MLN) else len(model.features),
        "tuning": tuning,
        "learn_config": asdict(cfg.learn),
        "inputs_read": training_inputs,
        "notes": NOTES,
        "metrics": evaluate(model, **tests)["metrics"],
    }
    return RunResult(method, model, report)


def evaluate(model, target_test=None, translated_source_test=None) -> dict:
    """PLL (or WPLL, with per-predicate terms) on each supplied held-out set."""
    out = {}
    for name, data in (("target_test", target_test), ("translated_source_test", translated_source_test)):
        if data is None:
            continue
        if isinstance(model, MLN):
            total, per = mean_wpll(model, data)
            out[name] = {"wpll": total, "per_predicate": per, "n": len(data)}
        else:
            if data.schema != model.schema:
                raise ContractError(f"{name} schema differs from the model schema")
            out[name] = {"pll": pll(model, data), "n": len(data)}
    return {"metrics": out}


def headline(metrics: MappingABC, name: str) -> float | None:
    m = metrics.get(name)
    if m is None:
        return None
    return m["wpll"] if "wpll" in m else m["pll"]


# ---------------------------------------------------------------------------
# run directories


def summary_table(results: Sequence[RunResult], ns: Sequence[int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "metric"] + [f"N={n}" for n in ns])
    by = {(r.method, r.report["_N"]): r for r in results}
    methods = list(dict.fromkeys(r.method for r in results))
    for method in methods:
        for metric in ("target_test", "translated_source_test"):
            row = []
            for n in ns:
                r = by.get((method, n))
                v = None if r is None else headline(r.report["metrics"], metric)
                row.append("" if v is None else f"{v:.6f}")
            if any(row):
                w.writerow([method, metric] + row)
    return buf.getvalue()


def run_pipeline(cfg: ExperimentConfig, out_dir, inputs: Inputs | None = None) -> list[RunResult]:
    """Every configured method at every N; target-data methods are run once and shared across N."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "log.txt", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    root = logging.getLogger("ktrans")
    root.addHandler(handler)
    prev = root.level
    root.setLevel(logging.INFO)
    results = []
    try:
        log.info("config %s: methods=%s N=%s", cfg.digest(), list(cfg.methods), list(cfg.n_samples))
        single = len(cfg.methods) == 1 and len(cfg.n_samples) == 1
        for method in cfg.methods:
            shared = None
            for n in cfg.n_samples:
                t0 = time.perf_counter()
                if method.endswith("DT") and shared is not None:
                    res = RunResult(method, shared.model, dict(shared.report))
                else:
                    res = run_method(method, cfg, n, Inputs(cfg, inputs._objects) if inputs else None)
                    shared = res
                res.report["_N"] = n
                results.append(res)
                log.info("%s N=%d done in %.2fs: %s", method, n, time.perf_counter() - t0, json.dumps(res.report["metrics"], sort_keys=True))
                if not single:
                    clean = RunResult(method, res.model, {k: v for k, v in res.report.items() if k != "_N"})
                    clean.save(out / f"{method}_N{n}")
        if single:
            r = results[0]
            RunResult(r.method, r.model, {k: v for k, v in r.report.items() if k != "_N"}).save(out)
        (out / "summary.csv").write_text(summary_table(results, cfg.n_samples))
        if not single:
            doc = {
                "config_hash": cfg.digest(),
                "config": cfg.to_dict(),
                "runs": [{**{k: v for k, v in r.report.items() if k != "_N"}, "N": r.report["_N"]} for r in results],
            }
            (out / "report.json").write_text(dump_report(doc))
        log.info("wrote %s", out)
    finally:
        root.removeHandler(handler)
        root.setLevel(prev)
        handler.close()
    return results
