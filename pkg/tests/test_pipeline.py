import json
import math

import numpy as np
import pytest

from ktrans import pipeline
from ktrans.learning import LearnConfig, Structure, learn_weights
from ktrans.mapping import validate_mapping
from ktrans.model import ContractError, Dataset, Feature, LogLinearModel, Schema, log_joint_table, pll
from ktrans.pipeline import (
    TRAINING_DATA,
    DataAccessError,
    ExperimentConfig,
    Inputs,
    MissingInputError,
    SamplerSettings,
    cross_validate,
    evaluate,
    fold_indices,
    knowledge_samples,
    run_method,
    run_pipeline,
)
from ktrans.relational import constants_heuristic, ground
from ktrans.structure import clique_features
from ktrans.synthetic import TaskSpec, make_synthetic_task

FAST = SamplerSettings(burn_in=50, thin=2, n_chains=50)


@pytest.fixture(scope="module")
def prop_task():
    return make_synthetic_task(TaskSpec(n_vars=3, domain_size=3, n_source=500, n_target=500, seed=4))


@pytest.fixture(scope="module")
def rel_task():
    return make_synthetic_task(TaskSpec(kind="relational", n_train_dbs=4, n_test_dbs=2, person_range=(4, 5), seed=2))


@pytest.fixture
def task_dir(tmp_path, prop_task):
    prop_task.save(tmp_path)
    return tmp_path


def quick_config(path, **overrides):
    d = json.loads(path.read_text())
    d.update({"sampler": {"burn_in": 50, "thin": 2, "n_chains": 50}, "n_samples": [400], "l2_grid": [1e-3, 1e-1]})
    d.update(overrides)
    return ExperimentConfig.from_dict(d, base_dir=path.parent)


def test_es_ks_has_only_singletons(task_dir):
    cfg = quick_config(task_dir / "config.json")
    res = run_method("ES-KS", cfg)
    assert all(len(f.literals) == 1 for f in res.model.features)
    assert res.report["inputs_read"] == ["source_model", "mapping"]
    assert set(res.report["metrics"]) == {"target_test", "translated_source_test"}


def test_knowledge_methods_run_without_any_dataset(task_dir):
    for name in ("source_train.csv", "target_train.csv", "source_test.csv"):
        (task_dir / name).unlink()
    cfg = quick_config(task_dir / "config.json", methods=["ES-KS", "LS-KS", "TS-KS"])
    for m in cfg.methods:
        rep = run_method(m, cfg).report
        assert not TRAINING_DATA & set(rep["inputs_read"])
    for m in ("LS-DS", "MS-DS", "LS-DT", "MS-DT"):
        with pytest.raises(MissingInputError, match="source_data|target_data"):
            run_method(m, cfg)


def test_guard_stops_a_knowledge_method_reading_data(task_dir, monkeypatch):
    cfg = quick_config(task_dir / "config.json")
    real = pipeline.knowledge_samples

    def peeking(cfg, inputs, n):
        inputs.get("target_data")
        return real(cfg, inputs, n)

    monkeypatch.setattr(pipeline, "knowledge_samples", peeking)
    with pytest.raises(DataAccessError):
        run_method("TS-KS", cfg)
    # the guard is lifted afterwards, so data methods still work on the same inputs
    inputs = Inputs(cfg)
    inputs.forbid(TRAINING_DATA)
    with pytest.raises(DataAccessError):
        inputs.get("source_data")
    inputs.forbid(())
    assert len(inputs.get("source_data")) == 400


def test_missing_evaluation_file_is_an_error(task_dir):
    (task_dir / "target_test.csv").unlink()
    with pytest.raises(MissingInputError, match="target_test"):
        run_method("ES-KS", quick_config(task_dir / "config.json"))


def test_null_evaluation_paths_skip_metrics(task_dir):
    cfg = quick_config(task_dir / "config.json", evaluation={"target_test": None, "translated_source_test": None})
    assert run_method("ES-KS", cfg).report["metrics"] == {}


def test_ls_dt_recovers_true_pll(rng):
    schema = Schema.binary("A", "B", "C", "D")
    true = LogLinearModel(schema, (
        Feature.of({"A": 1, "B": 1}, 1.4), Feature.of({"B": 1, "C": 0}, -1.0), Feature.of({"C": 1, "D": 1}, 0.9), Feature.of({"D": 1}, -0.5),
    ))
    p = np.exp(log_joint_table(true)).ravel()
    X = np.stack(np.unravel_index(rng.choice(len(p), size=12_000, p=p), schema.sizes), axis=1)
    train, test = Dataset(schema, X[:10_000]), Dataset(schema, X[10_000:])
    cfg = ExperimentConfig(methods=("LS-DT",), target_test="t")
    res = run_method("LS-DT", cfg, inputs=Inputs(cfg, {"target_data": train, "target_test": test}))
    assert res.report["metrics"]["target_test"]["pll"] == pytest.approx(pll(true, test), abs=0.05)


def test_uniform_model_pll():
    s = Schema.binary("A", "B", "C")
    data = Dataset(s, np.array([[0, 1, 0], [1, 1, 1], [0, 0, 0], [1, 0, 1]]))
    got = evaluate(LogLinearModel(s), target_test=data)["metrics"]["target_test"]
    assert got == {"pll": pytest.approx(-3 * math.log(2), abs=1e-12), "n": 4}
    with pytest.raises(ContractError):
        evaluate(LogLinearModel(Schema.binary("Z")), target_test=data)


def test_run_directory_is_reproducible(task_dir, tmp_path):
    cfg = quick_config(task_dir / "config.json", methods=["ES-KS", "TS-KS", "LS-DT"], n_samples=[200, 400])
    outs = [tmp_path / "run1", tmp_path / "run2"]
    for o in outs:
        run_pipeline(cfg, o)
    a, b = outs
    for rel in ("report.json", "summary.csv", "TS-KS_N400/model.json", "TS-KS_N400/report.json", "LS-DT_N200/model.json"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    assert (a / "log.txt").exists()
    rows = (a / "summary.csv").read_text().splitlines()
    assert rows[0] == "method,metric,N=200,N=400"
    assert len(rows) == 1 + 3 * 2
    doc = json.loads((a / "report.json").read_text())
    dt = [r for r in doc["runs"] if r["method"] == "LS-DT"]
    assert dt[0]["model_hash"] == dt[1]["model_hash"]


def test_single_run_writes_top_level_files(task_dir, tmp_path):
    cfg = quick_config(task_dir / "config.json", methods=["ES-KS"])
    run_pipeline(cfg, tmp_path / "one")
    for name in ("model.json", "report.json", "summary.csv", "log.txt"):
        assert (tmp_path / "one" / name).exists()
    model = json.loads((tmp_path / "one" / "model.json").read_text())
    assert "learn_config" in model


def test_config_round_trip_and_unknown_keys(task_dir):
    cfg = quick_config(task_dir / "config.json")
    back = ExperimentConfig.from_dict(cfg.to_dict(), base_dir=task_dir)
    assert back.digest() == cfg.digest() and back == cfg
    with pytest.raises(ContractError, match="unknown config keys"):
        ExperimentConfig.from_dict({"mode": "propositional", "l2": 10})
    with pytest.raises(ContractError):
        ExperimentConfig(methods=("XS-KS",))


def test_cross_validation_singleton_grid():
    best, scores = cross_validate(3, [{"l2": 0.5}], lambda i, p: None, lambda m, i: 0.0)
    assert best == {"l2": 0.5} and math.isnan(scores[0])
    with pytest.raises(ContractError):
        cross_validate(10, [], lambda i, p: None, lambda m, i: 0.0)


def test_cross_validation_prefers_large_l2_on_tiny_data(rng):
    # eight noisy rows, a saturated structure: tiny l2 overfits badly
    schema = Schema.binary("A", "B", "C")
    data = Dataset(schema, rng.integers(0, 2, size=(8, 3)))
    st = Structure.from_features(clique_features(frozenset(schema.names), schema))
    best, scores = cross_validate(
        len(data), [{"l2": 1e-4}, {"l2": 10.0}],
        lambda idx, p: learn_weights(st, data.subset(idx), LearnConfig(l2_prior=p["l2"])),
        lambda m, idx: pll(m, data.subset(idx)),
    )
    assert best == {"l2": 10.0}
    assert scores[1] > scores[0]


def test_cross_validation_ties_go_to_larger_l2():
    best, _ = cross_validate(8, [{"l2": 0.1}, {"l2": 1.0}, {"l2": 0.01}], lambda i, p: None, lambda m, i: -1.0)
    assert best == {"l2": 1.0}


def test_folds_are_deterministic_partitions():
    a, b = fold_indices(103, 4, 5), fold_indices(103, 4, 5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert sorted(np.concatenate(a).tolist()) == list(range(103))
    assert not all(np.array_equal(x, y) for x, y in zip(a, fold_indices(103, 4, 6)))


def test_cache_dir_reuses_samples(task_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("KT_CACHE_DIR", str(tmp_path / "cache"))
    cfg = quick_config(task_dir / "config.json")
    first = knowledge_samples(cfg, Inputs(cfg), 300)
    assert len(list((tmp_path / "cache").glob("*.csv"))) == 1
    second = knowledge_samples(cfg, Inputs(cfg), 300)
    np.testing.assert_array_equal(first.values, second.values)
    knowledge_samples(cfg, Inputs(cfg), 301)
    assert len(list((tmp_path / "cache").glob("*.csv"))) == 2


def test_permutation_tables_without_noise():
    task = make_synthetic_task(TaskSpec(n_vars=3, domain_size=4, granularity="same", mapping_noise=0.0, n_source=50, n_target=50))
    for c in task.mapping.correspondences:
        assert set(np.unique(c.table)) == {0.0, 1.0}
        np.testing.assert_array_equal(c.table.sum(axis=0), 1.0)
        np.testing.assert_array_equal(c.table.sum(axis=1), 1.0)


def test_nba_shaped_bundle_is_valid(prop_task, tmp_path):
    task = make_synthetic_task(TaskSpec(n_source=100, n_target=100))
    assert len(task.mapping.correspondences) == 4
    assert validate_mapping(task.mapping) == []
    cfg = task.save(tmp_path)
    assert ExperimentConfig.from_dict(cfg, base_dir=tmp_path).mode == "propositional"
    with pytest.raises(ContractError):
        make_synthetic_task(TaskSpec(kind="tabular"))


def test_university_grounds_within_cap(rel_task):
    sizes = constants_heuristic(rel_task.training_sizes, 0.5)
    assert ground(rel_task.source_model, sizes).schema.n_assignments > 0
    assert len(ground(rel_task.manual_structure, sizes).features) > 0
    for db in rel_task.target_test:
        ground(rel_task.manual_structure, db.sizes)


def test_relational_report_terms_sum_to_total(rel_task):
    cfg = ExperimentConfig(
        mode="relational", methods=("TS-KS",), n_samples=(20,), sampler=FAST, target_test="t", translated_source_test="s",
        training_sizes=tuple(rel_task.training_sizes),
    )
    res = run_method("TS-KS", cfg, inputs=Inputs(cfg, rel_task.objects()))
    for name in ("target_test", "translated_source_test"):
        m = res.report["metrics"][name]
        assert m["wpll"] == pytest.approx(sum(m["per_predicate"].values()), abs=1e-12)
        assert set(m["per_predicate"]) == {"Faculty", "Advises", "Teaches", "Author"}
    assert res.report["tuning"]["l2_per_database"] == pytest.approx(1 / (100 * 20))


def test_relational_bundle_round_trip(rel_task, tmp_path):
    rel_task.save(tmp_path)
    cfg = ExperimentConfig.load(tmp_path / "config.json")
    cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "methods": ["LS-DT"]}, base_dir=tmp_path)
    res = run_method("LS-DT", cfg)
    assert res.report["n_training"] == 4
    assert res.report["metrics"]["target_test"]["n"] == 2
