"""Command-line entry point: ``ktrans <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .learning import ConvergenceError, Structure, empty_structure, learn_structure_dtsl, learn_weights
from .mapping import Mapping
from .model import ContractError, Dataset, LogLinearModel
from .pipeline import (
    DataAccessError,
    ExperimentConfig,
    evaluate,
    dump_report,
    run_pipeline,
)
from .relational import (
    MLN,
    DomainSizes,
    RelationalMapping,
    RelationalSchema,
    empty_mln_structure,
    ground,
    learn_mln_structure,
    learn_mln_weights,
    load_databases,
    sample_databases,
    sample_knowledge_databases,
    save_databases,
    translate_mln_structure,
)
from .sampling import SamplerConfig, gibbs_sample, sample_knowledge
from .structure import translate_structure
from .synthetic import TaskSpec, make_synthetic_task

log = logging.getLogger("ktrans")


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _is_mln(doc: dict) -> bool:
    return "clauses" in doc


def _load_model(path):
    doc = _read_json(path)
    return MLN.from_dict(doc) if _is_mln(doc) else LogLinearModel.from_dict(doc)


def _load_mapping(path):
    doc = _read_json(path)
    return RelationalMapping.from_dict(doc) if "source" in doc else Mapping.from_dict(doc)


def _load_data(path):
    """CSV datasets are propositional; JSON database lists are relational."""
    if str(path).endswith(".json"):
        doc = _read_json(path)
        schema = doc.get("provenance", {}).get("schema")
        return load_databases(path), (RelationalSchema.from_dict(schema) if schema else None)
    return Dataset.from_csv(path), None


def parse_sizes(text: str) -> DomainSizes:
    """``person=3,course=2`` -> DomainSizes."""
    try:
        pairs = [item.split("=") for item in text.split(",") if item.strip()]
        return DomainSizes.of({k.strip(): int(v) for k, v in pairs})
    except ValueError:
        raise ContractError(f"bad --sizes {text!r}; expected type=count,...") from None


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return replace(cfg, seed=args.seed) if args.seed is not None else cfg


def _sampler(cfg: ExperimentConfig, args, n: int) -> SamplerConfig:
    s = cfg.sampler
    return SamplerConfig(
        n,
        burn_in=s.burn_in if args.burn_in is None else args.burn_in,
        thin=s.thin if args.thin is None else args.thin,
        n_chains=s.n_chains if args.chains is None else args.chains,
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_translate(args) -> None:
    src, m = _load_model(args.source_model), _load_mapping(args.mapping)
    if isinstance(src, MLN):
        clauses = translate_mln_structure(src, m, args.threshold)
        MLN(m.target, tuple(clauses) + tuple(empty_mln_structure(m.target))).save(args.out)
        print(f"{len(clauses)} translated clauses -> {args.out}")
    else:
        st = translate_structure(src, m, args.threshold)
        LogLinearModel(m.target_schema, st.features).save(args.out)
        print(f"{len(st)} translated features -> {args.out}")


def cmd_learn(args) -> None:
    cfg = _config(args)
    data, rschema = _load_data(args.data)
    if rschema is not None or isinstance(data, list):
        if args.structure:
            st = _load_model(args.structure)
            clauses, rschema = list(st.clauses), st.schema
        elif rschema is None:
            raise ContractError("relational data without a schema needs --structure")
        elif args.empty:
            clauses = empty_mln_structure(rschema)
        else:
            clauses = learn_mln_structure(rschema, data, cfg.learn.dtsl)
        std = args.l2 if args.l2 is not None else cfg.relational_prior_std
        mln = learn_mln_weights(clauses, rschema, data, 1.0 / (std**2 * len(data)), cfg.learn.gradient_tolerance, cfg.learn.max_iters)
        mln.save(args.out)
        print(f"learned {len(mln.clauses)} weights from {len(data)} databases -> {args.out}")
        return
    lc = cfg.learn if args.l2 is None else replace(cfg.learn, l2_prior=args.l2)
    if args.structure:
        st = Structure.from_model(LogLinearModel.load(args.structure))
    elif args.empty:
        st = empty_structure(data.schema)
    else:
        st = learn_structure_dtsl(data, lc)
    model = learn_weights(st, data, lc)
    model.save(args.out, learn_config={"l2_prior": lc.l2_prior, "gradient_tolerance": lc.gradient_tolerance})
    print(f"learned {len(model.features)} weights from {len(data)} instances -> {args.out}")


def cmd_sample(args) -> None:
    cfg = _config(args)
    model = _load_model(args.model)
    scfg = _sampler(cfg, args, args.n)
    if isinstance(model, MLN):
        if not args.sizes:
            raise ContractError("sampling an MLN needs --sizes")
        sizes = parse_sizes(args.sizes)
        if args.mapping:
            m = _load_mapping(args.mapping)
            dbs = sample_knowledge_databases(model, m, sizes, scfg)
            save_databases(dbs, args.out, {"method": "K_S-sampling", "schema": m.target.to_dict()})
        else:
            dbs = sample_databases(model, sizes, scfg)
            save_databases(dbs, args.out, {"method": "gibbs", "schema": model.schema.to_dict()})
        print(f"{len(dbs)} databases -> {args.out}")
        return
    data = sample_knowledge(model, _load_mapping(args.mapping), scfg) if args.mapping else gibbs_sample(model, scfg)
    data.to_csv(args.out)
    print(f"{len(data)} instances -> {args.out}")


def cmd_ground(args) -> None:
    mln = MLN.load(args.mln)
    gm = ground(mln, parse_sizes(args.sizes))
    gm.save(args.out)
    print(f"{len(gm.schema)} ground atoms, {len(gm.features)} ground features -> {args.out}")


def cmd_eval(args) -> None:
    model = _load_model(args.model)
    tests = {}
    for key, path in (("target_test", args.target_test), ("translated_source_test", args.translated_source_test)):
        if path:
            tests[key] = _load_data(path)[0]
    if not tests:
        raise ContractError("eval needs --target-test and/or --translated-source-test")
    report = evaluate(model, **tests)
    text = dump_report(report)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_synth(args) -> None:
    spec = TaskSpec(
        kind=args.kind,
        seed=0 if args.seed is None else args.seed,
        mapping_noise=args.noise,
        granularity=args.granularity,
        scalar=args.scalar,
    )
    cfg = make_synthetic_task(spec).save(args.out)
    print(f"{spec.kind} task -> {args.out} ({len(cfg)} config entries)")


def cmd_pipeline(args) -> None:
    if not args.config:
        raise ContractError("pipeline needs --config")
    cfg = _config(args)
    if args.methods:
        cfg = replace(cfg, methods=tuple(args.methods))
    if args.n_samples:
        cfg = replace(cfg, n_samples=tuple(args.n_samples))
    results = run_pipeline(cfg, args.out)
    print(f"{len(results)} runs -> {args.out}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ktrans", description="Probabilistic knowledge translation between schemas.")
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    p.add_argument("--config", default=None, help="experiment config JSON")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("translate", help="translate a source structure into the target schema")
    s.add_argument("--source-model", required=True)
    s.add_argument("--mapping", required=True)
    s.add_argument("--threshold", type=float, default=0.1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("learn", help="learn weights (and optionally structure) from data")
    s.add_argument("--data", required=True, help="CSV dataset or JSON database list")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--structure", help="model/MLN JSON whose features are kept (weights relearned)")
    g.add_argument("--empty", action="store_true", help="singleton features only")
    s.add_argument("--l2", type=float, default=None, help="L2 coefficient (relational: prior std)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_learn)

    s = sub.add_parser("sample", help="Gibbs-sample a model, optionally through a mapping")
    s.add_argument("--model", required=True)
    s.add_argument("--mapping")
    s.add_argument("-n", type=int, required=True)
    s.add_argument("--sizes", help="domain sizes for MLNs, e.g. person=3,course=2")
    s.add_argument("--burn-in", type=int, default=None)
    s.add_argument("--thin", type=int, default=None)
    s.add_argument("--chains", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("ground", help="ground an MLN over explicit domain sizes")
    s.add_argument("--mln", required=True)
    s.add_argument("--sizes", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ground)

    s = sub.add_parser("eval", help="PLL / WPLL of a model on held-out data")
    s.add_argument("--model", required=True)
    s.add_argument("--target-test")
    s.add_argument("--translated-source-test")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic task bundle and its config")
    s.add_argument("--kind", choices=("propositional", "relational"), default="propositional")
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--granularity", choices=("width-vs-frequency", "same"), default="width-vs-frequency")
    s.add_argument("--scalar", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pipeline", help="run the method matrix from --config into a run directory")
    s.add_argument("--methods", nargs="+")
    s.add_argument("--n-samples", type=int, nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ContractError, ConvergenceError, DataAccessError, FileNotFoundError, KeyError, json.JSONDecodeError) as e:
        print(f"ktrans: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
