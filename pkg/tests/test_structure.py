import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_model
from ktrans.learning import LearnConfig, empty_structure, learn_weights
from ktrans.mapping import Correspondence, Mapping, build_joint_model, identity_mapping, implied_target_distribution
from ktrans.model import ContractError, Feature, LogLinearModel, Schema, Variable, kl_table
from ktrans.sampling import SamplerConfig, sample_knowledge
from ktrans.structure import (
    Atom,
    clique_features,
    eliminate_unmapped,
    structure_to_cliques,
    translate_cliques,
    translate_structure,
    unify_atoms,
)

F = frozenset


def test_cliques_threshold_filter(ab_schema):
    m = LogLinearModel(Schema.binary("A", "B", "C"), (Feature.of({"A": 1, "B": 1}, 2.2), Feature.of({"B": 0, "C": 1}, 0.05)))
    assert structure_to_cliques(m, 0.0) == [F({"A", "B"}), F({"B", "C"})]
    assert structure_to_cliques(m, math.inf) == []
    assert structure_to_cliques(m, 0.1) == [F({"A", "B"})]


def test_duplicate_variable_sets_collapse():
    m = LogLinearModel(Schema.binary("A", "B"), (Feature.of({"A": 1, "B": 1}, 1.0), Feature.of({"A": 0, "B": 1}, -1.0)))
    assert structure_to_cliques(m) == [F({"A", "B"})]


def test_credit_example_elimination_and_substitution(credit_example):
    model, m = credit_example
    cliques = structure_to_cliques(model)
    assert cliques == [F({"AgeOver25", "GoodCredit"}), F({"AgeOver25", "Grad"})]
    elim = eliminate_unmapped(cliques, m)
    assert elim == [F({"Grad", "GoodCredit"})]
    assert translate_cliques(elim, m) == [F({"Student", "HighCreditScore"})]
    s = translate_structure(model, m, threshold=0.1)
    assert {f.variables for f in s.features} == {("HighCreditScore", "Student")}
    assert len(s) == 4


def test_no_unmapped_is_identity():
    cl = [F({"A", "B"}), F({"C"})]
    assert eliminate_unmapped(cl, {"A", "B", "C"}) == [F({"C"}), F({"A", "B"})]


def test_lone_clique_keeps_other_members():
    assert eliminate_unmapped([F({"P", "A"})], {"A"}) == [F({"A"})]
    assert eliminate_unmapped([F({"P"})], {"A"}) == []


def test_chain_with_unmapped_middle():
    s = Schema.binary("A", "B", "C")
    m = LogLinearModel(s, (Feature.of({"A": 1, "B": 1}, 1.0), Feature.of({"B": 1, "C": 1}, 1.0)))
    mapping = Mapping(s, Schema.binary("A2", "C2"), (
        Correspondence(("A",), ("A2",), [[0.9, 0.1], [0.1, 0.9]]),
        Correspondence(("C",), ("C2",), [[0.9, 0.1], [0.1, 0.9]]),
    ))
    s_out = translate_structure(m, mapping, threshold=0.0)
    assert {f.variables for f in s_out.features} == {("A2", "C2")}


def test_two_candidates_give_two_cliques():
    src = Schema.binary("A", "B")
    tgt = Schema.binary("T", "U", "V")
    eye = [[0.9, 0.1], [0.1, 0.9]]
    m = Mapping(src, tgt, (Correspondence(("A",), ("T",), eye), Correspondence(("A",), ("U",), eye), Correspondence(("B",), ("V",), eye)))
    assert translate_cliques([F({"A", "B"})], m) == [F({"T", "V"}), F({"U", "V"})]
    with pytest.raises(ContractError):
        translate_cliques([F({"A", "Z"})], m)


def test_many_to_one_value_correspondence_keeps_arity():
    src = Schema((Variable("h", (0, 1, 2, 3)), Variable("w", (0, 1))))
    tgt = Schema((Variable("h2", (0, 1)), Variable("w2", (0, 1))))
    m = Mapping(src, tgt, (
        Correspondence(("h",), ("h2",), [[0.9, 0.1], [0.7, 0.3], [0.3, 0.7], [0.1, 0.9]]),
        Correspondence(("w",), ("w2",), [[0.9, 0.1], [0.1, 0.9]]),
    ))
    assert translate_cliques([F({"h", "w"})], m) == [F({"h2", "w2"})]


def test_clique_feature_expansion_guard():
    s = Schema((Variable("A", tuple(range(70))), Variable("B", tuple(range(70)))))
    assert len(clique_features(F({"A"}), s)) == 70
    with pytest.raises(ContractError):
        clique_features(F({"A", "B"}), s)


def test_unification_examples():
    assert unify_atoms(Atom.parse("Grad(x)"), Atom.parse("Grad(y)")) == [{"x": "y"}]
    assert unify_atoms(Atom.parse("Grad(x)"), Atom.parse("Student(y)")) == []
    assert unify_atoms(Atom.parse("Advise(x, y)"), Atom.parse("Advise(z, z)")) == [{"x": "z", "y": "z"}]
    assert unify_atoms(Atom.parse("Advise(Ann, y)"), Atom.parse("Advise(Bob, z)")) == []
    assert unify_atoms(Atom.parse("P(x)"), Atom.parse("P(y)"), types={"x": "person", "y": "course"}) == []


def test_relational_elimination_joins_on_shared_variable():
    # Grad(x) ^ Emp(x) and Emp(y) ^ Rich(y), Emp unmapped: the merge keeps x and y identified
    cl = [F({Atom.parse("Grad(x)"), Atom.parse("Emp(x)")}), F({Atom.parse("Emp(y)"), Atom.parse("Rich(y)")})]
    out = eliminate_unmapped(cl, {"Grad", "Rich"})
    assert len(out) == 1
    (c,) = out
    assert {a.pred for a in c} == {"Grad", "Rich"}
    assert len({a.args for a in c}) == 1


def letter_cliques():
    return st.lists(st.frozensets(st.sampled_from("ABCDEFG"), min_size=1, max_size=3), min_size=1, max_size=6)


@settings(max_examples=200, deadline=None)
@given(letter_cliques(), st.frozensets(st.sampled_from("ABCDEFG")), st.randoms())
def test_elimination_properties(cliques, mapped, rnd):
    out = eliminate_unmapped(cliques, mapped)
    assert all(x in mapped for c in out for x in c)
    shuffled = list(cliques)
    rnd.shuffle(shuffled)
    assert eliminate_unmapped(shuffled, mapped) == out


@settings(max_examples=200, deadline=None)
@given(letter_cliques(), st.sampled_from("ABCDEFG"))
def test_single_merge_size_bound(cliques, p):
    mapped = set("ABCDEFG") - {p}
    sizes = sorted((len(c) for c in cliques), reverse=True)
    bound = sizes[0] + (sizes[1] if len(sizes) > 1 else 0) - 1
    for c in eliminate_unmapped(cliques, mapped):
        assert len(c) <= max(bound, max(sizes))


def test_identity_mapping_gives_isomorphic_structure(rng):
    s = Schema((Variable("A", (0, 1, 2)), Variable("B", (0, 1)), Variable("C", (0, 1)), Variable("D", (0, 1))))
    ren = {"A": "a", "B": "b", "C": "c", "D": "d"}
    for _ in range(10):
        m = random_model(rng, s, 5)
        out = translate_structure(m, identity_mapping(s, ren), threshold=0.0)
        got = {F(f.variables) for f in out.features}
        assert got == {F(ren[v] for v in c) for c in structure_to_cliques(m)}


def test_translated_structure_beats_empty_structure(rng):
    s = Schema.binary("A", "B", "C", "D")
    ren = {"A": "a", "B": "b", "C": "c", "D": "d"}
    m = identity_mapping(s, ren, noise=0.02)
    for k in range(3):
        src = LogLinearModel(s, (
            Feature.of({"A": 1, "B": 1}, 1.5 + 0.3 * k), Feature.of({"B": 1, "C": 0}, -1.2), Feature.of({"C": 1, "D": 1}, 1.0),
        ))
        truth = implied_target_distribution(build_joint_model(src, m), m.target_schema)
        data = sample_knowledge(src, m, SamplerConfig(5000, burn_in=100, thin=2, seed=k))
        cfg = LearnConfig(l2_prior=1e-3)
        ts = learn_weights(translate_structure(src, m), data, cfg)
        es = learn_weights(empty_structure(m.target_schema), data, cfg)
        assert kl_table(truth, ts) <= kl_table(truth, es)
