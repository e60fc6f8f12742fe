"""Weight learning by L2-penalised pseudo-likelihood and tree-based structure learning."""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .model import (
    ContractError,
    Dataset,
    Feature,
    FeatureIndex,
    Literal,
    LogLinearModel,
    PreparedData,
    Schema,
    all_assignments,
)

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    """Optimiser stopped short of stationarity; ``best`` holds the last iterate."""

    def __init__(self, message: str, best=None, grad_norm: float = math.inf):
        super().__init__(message)
        self.best = best
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class DTSLParams:
    kappa: float = 1.0  # Dirichlet pseudo-count for leaf distributions
    prior: float = 3.0  # penalty in nats per extra leaf parameter
    mincount: int = 10  # minimum rows in every non-empty child


@dataclass(frozen=True)
class LearnConfig:
    l2_prior: float = 0.01
    max_iters: int = 2000
    gradient_tolerance: float = 1e-5
    dtsl: DTSLParams = field(default_factory=DTSLParams)

    def __post_init__(self):
        if not self.l2_prior > 0 or self.max_iters < 1 or not self.gradient_tolerance > 0:
            raise ContractError("l2_prior, max_iters and gradient_tolerance must be positive")
        if self.dtsl.kappa <= 0 or self.dtsl.prior < 0 or self.dtsl.mincount < 1:
            raise ContractError("invalid DTSL parameters")


@dataclass(frozen=True)
class Structure:
    """Feature skeleton; ``ties[k]`` names the shared parameter of feature ``k``."""

    features: tuple[Feature, ...]
    ties: tuple[int, ...] | None = None

    def __post_init__(self):
        feats = tuple(f.with_weight(0.0) for f in self.features)
        object.__setattr__(self, "features", feats)
        if self.ties is not None:
            ties = tuple(int(t) for t in self.ties)
            if len(ties) != len(feats):
                raise ContractError("ties must have one entry per feature")
            object.__setattr__(self, "ties", ties)

    def __len__(self) -> int:
        return len(self.features)

    @property
    def n_params(self) -> int:
        if self.ties is None:
            return len(self.features)
        return max(self.ties, default=-1) + 1

    def tie_array(self) -> np.ndarray:
        return np.arange(len(self.features)) if self.ties is None else np.array(self.ties, dtype=np.int64)

    def feature_weights(self, params: np.ndarray) -> np.ndarray:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ContractError(f"expected {self.n_params} weights, got {params.shape}")
        return params[self.tie_array()] if len(self.features) else np.zeros(0)

    def to_model(self, schema: Schema, params: np.ndarray) -> LogLinearModel:
        w = self.feature_weights(params)
        return LogLinearModel(schema, tuple(f.with_weight(x) for f, x in zip(self.features, w)))

    @classmethod
    def from_model(cls, model: LogLinearModel) -> Structure:
        return cls(model.features)

    @classmethod
    def from_features(cls, feats: Iterable[Feature]) -> Structure:
        """Deduplicate by literal set, keeping first occurrence order."""
        seen, out = set(), []
        for f in feats:
            if f.key not in seen:
                seen.add(f.key)
                out.append(f)
        return cls(tuple(out))


def empty_structure(schema: Schema) -> Structure:
    """Marginal-only skeleton: one feature per non-reference value of each variable."""
    return Structure(tuple(Feature((Literal(v.name, x),)) for v in schema for x in v.domain[1:]))


# ---------------------------------------------------------------------------
# objective


@dataclass(eq=False)
class PLLBlock:
    """One dataset compiled against one structure, ready for repeated evaluation."""

    index: FeatureIndex
    data: PreparedData
    ties: np.ndarray
    var_weights: np.ndarray | None = None

    @classmethod
    def build(cls, structure: Structure, data: Dataset, var_weights=None) -> PLLBlock:
        if len(data) == 0:
            raise ContractError("cannot evaluate PLL on an empty dataset")
        idx = FeatureIndex(data.schema, structure.features)
        vw = None if var_weights is None else np.asarray(var_weights, dtype=np.float64)
        return cls(idx, idx.prepare(data.values), structure.tie_array(), vw)

    @property
    def n_rows(self) -> int:
        return self.data.X.shape[0]

    def value_and_grad(self, params: np.ndarray) -> tuple[float, np.ndarray]:
        w = params[self.ties] if len(self.ties) else np.zeros(0)
        total, g = self.index.pll_value_and_grad(self.data, w, self.var_weights)
        return total, np.bincount(self.ties, weights=g, minlength=len(params)) if len(self.ties) else np.zeros(len(params))


def penalised_objective(blocks: Sequence[PLLBlock], params: np.ndarray, l2: float) -> tuple[float, np.ndarray]:
    """Mean PLL per instance over all blocks minus ``l2/2 * |w|^2``, and its gradient."""
    n = sum(b.n_rows for b in blocks)
    val, grad = 0.0, np.zeros(len(params))
    for b in blocks:
        v, g = b.value_and_grad(params)
        val += v
        grad += g
    return val / n - 0.5 * l2 * float(params @ params), grad / n - l2 * params


def _check_dims(structure: Structure, weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (structure.n_params,):
        raise ContractError(f"weights have shape {w.shape}, structure needs ({structure.n_params},)")
    return w


def pll_objective(structure: Structure, weights, data: Dataset, l2: float, var_weights=None) -> float:
    w = _check_dims(structure, weights)
    return penalised_objective([PLLBlock.build(structure, data, var_weights)], w, l2)[0]


def pll_gradient(structure: Structure, weights, data: Dataset, l2: float, var_weights=None) -> np.ndarray:
    w = _check_dims(structure, weights)
    return penalised_objective([PLLBlock.build(structure, data, var_weights)], w, l2)[1]


def fit_blocks(
    blocks: Sequence[PLLBlock], n_params: int, l2: float, tol: float = 1e-5, max_iters: int = 2000
) -> np.ndarray:
    """Maximise the penalised mean PLL from zero; returns the parameter vector."""
    if n_params == 0:
        return np.zeros(0)

    def neg(p):
        v, g = penalised_objective(blocks, p, l2)
        return -v, -g

    x0 = np.zeros(n_params)
    res = minimize(
        neg, x0, jac=True, method="L-BFGS-B",
        options={"maxiter": max_iters, "gtol": tol * 0.05, "ftol": 1e-15, "maxcor": 30},
    )
    x = res.x
    gnorm = float(np.max(np.abs(neg(x)[1])))
    if gnorm >= tol:
        # L-BFGS can stall in its line search near the optimum; polish with full BFGS
        res2 = minimize(neg, x, jac=True, method="BFGS", options={"gtol": tol * 0.05, "maxiter": max_iters})
        x = res2.x
        gnorm = float(np.max(np.abs(neg(x)[1])))
    if gnorm >= tol:
        raise ConvergenceError(f"gradient max-norm {gnorm:.3g} after {res.nit} iterations", best=x, grad_norm=gnorm)
    log.debug("PLL fit: %d params, %d iterations, |g|=%.2e", n_params, res.nit, gnorm)
    return x


def learn_weights(structure: Structure, data: Dataset, cfg: LearnConfig, var_weights=None) -> LogLinearModel:
    """Stationary point of the penalised PLL (concave, so the global optimum)."""
    if len(data) == 0:
        raise ContractError("cannot learn from an empty dataset")
    for f in structure.features:
        for lit in f.literals:
            data.schema[lit.var].index(lit.value)
    if len(structure) == 0:
        return LogLinearModel(data.schema, ())
    block = PLLBlock.build(structure, data, var_weights)
    try:
        params = fit_blocks([block], structure.n_params, cfg.l2_prior, cfg.gradient_tolerance, cfg.max_iters)
    except ConvergenceError as e:
        e.best = structure.to_model(data.schema, e.best)
        raise
    return structure.to_model(data.schema, params)


def learn_weights_exact(structure: Structure, data: Dataset, l2: float, tol: float = 1e-7) -> LogLinearModel:
    """Penalised maximum likelihood by enumeration; a cross-check for small models."""
    idx = FeatureIndex(data.schema, structure.features)
    tie = structure.tie_array()
    X_all = all_assignments(data.schema)
    F_all = idx.satisfied(idx.pad(X_all)).astype(np.float64)
    emp = idx.satisfied(idx.pad(data.values)).mean(axis=0)

    def neg(p):
        w = p[tie]
        e = F_all @ w
        lz = logsumexp(e)
        q = np.exp(e - lz)
        val = emp @ w - lz - 0.5 * l2 * p @ p
        g = np.bincount(tie, weights=emp - q @ F_all, minlength=len(p)) - l2 * p
        return -val, -g

    res = minimize(neg, np.zeros(structure.n_params), jac=True, method="L-BFGS-B", options={"gtol": tol, "ftol": 1e-15, "maxiter": 5000})
    return structure.to_model(data.schema, res.x)


# ---------------------------------------------------------------------------
# decision-tree structure learning


@dataclass
class _Node:
    rows: np.ndarray
    path: tuple[tuple[int, int], ...]
    split: int | None = None
    children: dict[int, _Node] = field(default_factory=dict)


def _leaf_ll(counts: np.ndarray, kappa: float) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = (counts + kappa) / (n + kappa * len(counts))
    return float(counts @ np.log(p))


def grow_tree(
    X: np.ndarray, target: int, sizes: Sequence[int], candidates: Sequence[int], params: DTSLParams
) -> list[tuple[tuple[int, int], ...]]:
    """Greedy multiway probabilistic tree for column ``target``; returns leaf paths.

    A split on column ``i`` is accepted when the log-likelihood gain of the
    smoothed leaf distributions exceeds ``prior`` times the number of extra
    leaf parameters, and every non-empty child keeps ``mincount`` rows.
    """
    d = int(sizes[target])
    y = X[:, target]
    leaves = []
    stack = [_Node(np.arange(X.shape[0]), ())]
    while stack:
        node = stack.pop()
        yr = y[node.rows]
        base = _leaf_ll(np.bincount(yr, minlength=d), params.kappa)
        used = {v for v, _ in node.path}
        best, best_score = None, 0.0
        for i in candidates:
            if i in used or i == target:
                continue
            k = int(sizes[i])
            joint = np.bincount(X[node.rows, i] * d + yr, minlength=k * d).reshape(k, d)
            n_child = joint.sum(axis=1)
            nonempty = n_child > 0
            if nonempty.sum() < 2 or np.any(n_child[nonempty] < params.mincount):
                continue
            gain = sum(_leaf_ll(joint[v], params.kappa) for v in np.flatnonzero(nonempty)) - base
            score = gain - params.prior * (nonempty.sum() - 1) * (d - 1)
            if score > best_score + 1e-12:
                best, best_score = i, score
        if best is None:
            leaves.append(node.path)
            continue
        xs = X[node.rows, best]
        for v in range(int(sizes[best]) - 1, -1, -1):
            rows = node.rows[xs == v]
            if len(rows):
                stack.append(_Node(rows, node.path + ((best, v),)))
    return sorted(leaves)


def learn_structure_dtsl(data: Dataset, cfg: LearnConfig) -> Structure:
    """Per-variable trees; every (leaf path, predicted value) becomes a conjunctive feature."""
    if len(data) == 0:
        raise ContractError("cannot learn structure from an empty dataset")
    schema = data.schema
    X = data.values
    sizes = schema.sizes
    feats = []
    for j, var in enumerate(schema.variables):
        others = [i for i in range(len(schema)) if i != j]
        for path in grow_tree(X, j, sizes, others, cfg.dtsl):
            lits = tuple(Literal(schema.variables[i].name, schema.variables[i].domain[v]) for i, v in path)
            for val in var.domain:
                feats.append(Feature(lits + (Literal(var.name, val),)))
    return Structure.from_features(feats)
