"""Import mined knowledge (weighted rules, conditional models) as log-linear models."""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .model import (
    ContractError,
    Feature,
    Literal,
    LogLinearModel,
    Schema,
    log_joint_table,
)

CLAMP_EPS = 1e-6
U_MODES = ("half", "uniform-cells")


def log_odds_weight(p_rule: float, u_rule: float, clamp: bool = False) -> float:
    """Weight of a rule with confidence ``p_rule`` relative to its chance rate ``u_rule``."""
    p, u = float(p_rule), float(u_rule)
    if clamp:
        p = min(max(p, CLAMP_EPS), 1 - CLAMP_EPS)
        u = min(max(u, CLAMP_EPS), 1 - CLAMP_EPS)
    for x in (p, u):
        if not 0.0 < x < 1.0:
            raise ContractError(f"degenerate probability {x}; pass clamp=True for hard rules")
    return math.log(p / (1 - p)) - math.log(u / (1 - u))


@dataclass(frozen=True)
class Rule:
    antecedent: tuple[Literal, ...]
    consequent: tuple[Literal, ...]
    confidence: float

    def __post_init__(self):
        object.__setattr__(self, "antecedent", tuple(self.antecedent))
        object.__setattr__(self, "consequent", tuple(self.consequent))
        if not self.consequent:
            raise ContractError("rule consequent is empty")
        a = {l.var for l in self.antecedent}
        c = {l.var for l in self.consequent}
        if len(a) != len(self.antecedent) or len(c) != len(self.consequent):
            raise ContractError("a variable appears twice on one side of a rule")
        if a & c:
            raise ContractError("antecedent and consequent share variables")

    @classmethod
    def of(cls, antecedent: Mapping, consequent: Mapping, confidence: float) -> Rule:
        return cls(
            tuple(Literal(k, v) for k, v in antecedent.items()),
            tuple(Literal(k, v) for k, v in consequent.items()),
            confidence,
        )


def uniform_rate(rule: Rule, schema: Schema) -> float:
    """Fraction of cells where the implication holds under a uniform distribution."""
    for l in rule.antecedent + rule.consequent:
        schema[l.var].index(l.value)
    pa = math.prod(1.0 / schema[l.var].size for l in rule.antecedent)
    pc = math.prod(1.0 / schema[l.var].size for l in rule.consequent)
    return 1.0 - pa * (1.0 - pc)


def rule_weight(rule: Rule, schema: Schema, u_mode: str = "half", clamp: bool = False) -> float:
    if u_mode == "half":
        u = 0.5
    elif u_mode == "uniform-cells":
        u = uniform_rate(rule, schema)
    else:
        raise ContractError(f"unknown u_mode {u_mode!r}; expected one of {U_MODES}")
    return log_odds_weight(rule.confidence, u, clamp=clamp)


def rule_to_features(rule: Rule, schema: Schema, u_mode: str = "half", clamp: bool = False) -> list[Feature]:
    """Compile ``antecedent -> consequent`` into mutually exclusive conjunctions.

    The satisfied cells of the implication are split into the disjoint cases
    "first i-1 antecedent literals hold, literal i takes another value" plus
    the single case "antecedent and consequent all hold".  Exactly one of the
    returned features fires whenever the rule is satisfied, so their common
    weight reproduces the rule's indicator.
    """
    w = rule_weight(rule, schema, u_mode, clamp)
    feats = []
    prefix: list[Literal] = []
    for lit in rule.antecedent:
        for v in schema[lit.var].domain:
            if v != lit.value:
                feats.append(Feature(tuple(prefix) + (Literal(lit.var, v),), w))
        prefix.append(lit)
    feats.append(Feature(rule.antecedent + rule.consequent, w))
    return feats


def rules_to_model(
    schema: Schema, rules: Iterable[Rule], u_mode: str = "half", clamp: bool = False
) -> LogLinearModel:
    feats = []
    for r in rules:
        feats.extend(rule_to_features(r, schema, u_mode, clamp))
    return LogLinearModel(schema, tuple(feats))


def tree_to_rules(leaves: Iterable[tuple[Mapping, Mapping]], target: str) -> list[Rule]:
    """A decision tree for ``target`` as a rule set, one rule per (leaf, predicted value).

    ``leaves`` yields ``(path, distribution)`` pairs: the tests on the way to
    the leaf and the leaf's ``{value: probability}``.
    """
    rules = []
    for path, dist in leaves:
        for value, p in dist.items():
            rules.append(Rule.of(path, {target: value}, p))
    return rules


def _parse_literals(items) -> tuple[Literal, ...]:
    out = []
    for it in items:
        if isinstance(it, Mapping):
            out.append(Literal(it["var"], it["value"]))
        else:
            var, value = it
            out.append(Literal(var, value))
    return tuple(out)


def load_rules(path) -> list[Rule]:
    """Read a JSON list of ``{antecedent, consequent, confidence}`` records."""
    raw = json.loads(Path(path).read_text())
    if isinstance(raw, Mapping):
        raw = raw["rules"]
    return [Rule(_parse_literals(r.get("antecedent", [])), _parse_literals(r["consequent"]), r["confidence"]) for r in raw]


@dataclass(frozen=True)
class ConditionalModel:
    """A log-linear p(targets | evidence): features are normalised per evidence value."""

    schema: Schema
    evidence_vars: tuple[str, ...]
    features: tuple[Feature, ...]

    def __post_init__(self):
        object.__setattr__(self, "evidence_vars", tuple(self.evidence_vars))
        object.__setattr__(self, "features", tuple(self.features))
        for n in self.evidence_vars:
            self.schema.position(n)
        if len(set(self.evidence_vars)) != len(self.evidence_vars):
            raise ContractError("duplicate evidence variables")

    @property
    def target_vars(self) -> tuple[str, ...]:
        ev = set(self.evidence_vars)
        return tuple(n for n in self.schema.names if n not in ev)


def conditional_to_joint(cm: ConditionalModel) -> LogLinearModel:
    """Joint model with a uniform prior over the evidence.

    Adds one calibration feature per configuration of the evidence variables
    the features mention, weighted ``-log Z(evidence)``, so that every
    evidence configuration ends up with equal mass.
    """
    touched = [n for n in cm.evidence_vars if any(n in f.variables for f in cm.features)]
    targets = cm.target_vars
    sub_schema = Schema(tuple(cm.schema[n] for n in touched + list(targets)))
    if not touched:
        return LogLinearModel(cm.schema, cm.features)
    lt = log_joint_table(LogLinearModel(sub_schema, cm.features))
    log_z = logsumexp(lt, axis=tuple(range(len(touched), len(sub_schema))))
    log_z = log_z - log_z.max()
    calib = []
    for cfg in np.ndindex(*log_z.shape):
        lits = tuple(Literal(n, cm.schema[n].domain[i]) for n, i in zip(touched, cfg))
        calib.append(Feature(lits, -float(log_z[cfg])))
    return LogLinearModel(cm.schema, cm.features + tuple(calib))
