import json

import pytest

from ktrans.cli import main, parse_sizes
from ktrans.model import ContractError, Dataset, LogLinearModel
from ktrans.relational import MLN, load_databases


@pytest.fixture(scope="module")
def prop_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("prop")
    assert main(["--seed", "3", "synth", "--out", str(d)]) == 0
    cfg = json.loads((d / "config.json").read_text())
    cfg.update({"sampler": {"burn_in": 30, "thin": 2, "n_chains": 50}, "n_samples": [300], "l2_grid": [0.01], "dtsl_prior_grid": [3.0]})
    (d / "config.json").write_text(json.dumps(cfg))
    return d


@pytest.fixture(scope="module")
def rel_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("rel")
    assert main(["synth", "--kind", "relational", "--out", str(d)]) == 0
    return d


def test_parse_sizes():
    assert parse_sizes("person=3, course=2").as_dict() == {"course": 2, "person": 3}
    with pytest.raises(ContractError):
        parse_sizes("person:3")


def test_translate_learn_eval(prop_dir, tmp_path, capsys):
    d = prop_dir
    st = tmp_path / "ts.json"
    assert main(["translate", "--source-model", str(d / "source_model.json"), "--mapping", str(d / "mapping.json"), "--out", str(st)]) == 0
    assert len(LogLinearModel.load(st).features) > 0
    model = tmp_path / "model.json"
    assert main(["learn", "--data", str(d / "target_train.csv"), "--structure", str(st), "--l2", "0.01", "--out", str(model)]) == 0
    assert main(["learn", "--data", str(d / "target_train.csv"), "--out", str(tmp_path / "ls.json")]) == 0
    capsys.readouterr()
    assert main(["eval", "--model", str(model), "--target-test", str(d / "target_test.csv"), "--out", str(tmp_path / "r.json")]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads((tmp_path / "r.json").read_text())
    assert printed["metrics"]["target_test"]["pll"] < 0


def test_sample_through_mapping(prop_dir, tmp_path):
    out = tmp_path / "ks.csv"
    args = ["--seed", "1", "sample", "--model", str(prop_dir / "source_model.json"), "--mapping", str(prop_dir / "mapping.json"),
            "-n", "200", "--burn-in", "20", "--thin", "1", "--out", str(out)]
    assert main(args) == 0
    data = Dataset.from_csv(out)
    assert len(data) == 200 and data.schema.names[0].endswith("_t")
    assert main(args[:-1] + [str(tmp_path / "again.csv")]) == 0
    assert (tmp_path / "again.csv").read_bytes() == out.read_bytes()


def test_pipeline_subcommand(prop_dir, tmp_path):
    out = tmp_path / "run"
    assert main(["--config", str(prop_dir / "config.json"), "pipeline", "--methods", "ES-KS", "LS-DT", "--out", str(out)]) == 0
    for name in ("report.json", "summary.csv", "log.txt", "ES-KS_N300/model.json"):
        assert (out / name).exists()
    assert main(["pipeline", "--out", str(out)]) == 1


def test_relational_ground_sample_learn(rel_dir, tmp_path):
    g = tmp_path / "g.json"
    assert main(["ground", "--mln", str(rel_dir / "source_model.json"), "--sizes", "person=2,course=1,paper=1", "--out", str(g)]) == 0
    assert len(LogLinearModel.load(g).schema) == 2 + 4 + 2 + 2
    dbs = tmp_path / "dbs.json"
    assert main(["sample", "--model", str(rel_dir / "source_model.json"), "--mapping", str(rel_dir / "mapping.json"), "-n", "5",
                 "--sizes", "person=3,course=2,paper=2", "--burn-in", "20", "--out", str(dbs)]) == 0
    assert len(load_databases(dbs)) == 5
    model = tmp_path / "mln.json"
    assert main(["learn", "--data", str(dbs), "--empty", "--out", str(model)]) == 0
    assert len(MLN.load(model).clauses) == 4
    assert main(["eval", "--model", str(model), "--target-test", str(rel_dir / "target_test.json")]) == 0


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["eval", "--model", str(tmp_path / "nope.json"), "--target-test", "x.csv"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["ground", "--mln", str(bad), "--sizes", "person=1", "--out", str(tmp_path / "o.json")]) == 1
    assert "ktrans: error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["frobnicate"])
