"""Gibbs sampling of log-linear models and sampling through a mapping."""

from __future__ import annotations

import math
from collections.abc import Mapping as MappingABC
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from .mapping import Mapping, _raise_on_errors, source_config_index, target_columns
from .model import ContractError, Dataset, FeatureIndex, LogLinearModel


def child_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based stream derived from ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), *keys])))


@dataclass(frozen=True)
class SamplerConfig:
    n_samples: int
    burn_in: int = 1000
    thin: int = 10
    seed: int = 0
    init: str = "uniform-random"
    n_chains: int = 100

    def __post_init__(self):
        if self.n_samples < 1:
            raise ContractError("n_samples must be positive")
        if self.burn_in < 0:
            raise ContractError("burn_in must be non-negative")
        if self.thin < 1 or self.n_chains < 1:
            raise ContractError("thin and n_chains must be positive")
        if self.init != "uniform-random":
            raise ContractError(f"unsupported init {self.init!r}")


def _var_tables(idx: FeatureIndex, w: np.ndarray) -> list[np.ndarray | None]:
    """Per-variable (F_j, d_j) matrices mapping satisfied features to value logits."""
    return [b.onehot * w[b.ids][:, None] if len(b.ids) else None for b in idx.blocks]


def _sweep(idx: FeatureIndex, Xp: np.ndarray, tables, rng: np.random.Generator) -> None:
    C = Xp.shape[0]
    U = rng.random((idx.n_vars, C))
    for j in range(idx.n_vars):
        d = int(idx.sizes[j])
        u = U[j]
        W = tables[j]
        if W is None:
            Xp[:, j] = np.minimum((u * d).astype(np.int64), d - 1)
            continue
        b = idx.blocks[j]
        L = np.all(Xp[:, b.other_vars] == b.other_vals, axis=2) @ W
        if d == 2:
            Xp[:, j] = u * (1.0 + np.exp(L[:, 0] - L[:, 1])) < 1.0
            continue
        L -= L.max(axis=1, keepdims=True)
        c = np.cumsum(np.exp(L), axis=1)
        Xp[:, j] = np.minimum((c < (u * c[:, -1])[:, None]).sum(axis=1), d - 1)


def gibbs_sample(model: LogLinearModel, cfg: SamplerConfig) -> Dataset:
    """Single-site Gibbs in schema order, run as independent vectorised chains.

    Chains are interleaved: kept draw ``t`` of every chain precedes draw
    ``t + 1`` of any chain; the result is truncated to ``cfg.n_samples``.
    """
    idx = model.index
    tables = _var_tables(idx, model.weights)
    rng = child_rng(cfg.seed, 0)
    C = min(cfg.n_chains, cfg.n_samples)
    rounds = math.ceil(cfg.n_samples / C)
    sizes = idx.sizes
    Xp = np.zeros((C, idx.n_vars + 1), dtype=np.int64)
    Xp[:, :-1] = np.minimum((rng.random((C, idx.n_vars)) * sizes).astype(np.int64), sizes - 1)
    out = np.empty((rounds, C, idx.n_vars), dtype=np.int64)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(cfg.burn_in):
            _sweep(idx, Xp, tables, rng)
        for r in range(rounds):
            for _ in range(cfg.thin):
                _sweep(idx, Xp, tables, rng)
            out[r] = Xp[:, :-1]
    X = out.reshape(rounds * C, idx.n_vars)[: cfg.n_samples]
    prov = {"method": "gibbs", "model_hash": model.digest(), **asdict(cfg)}
    return Dataset(model.schema, X, prov)


def map_samples(m: Mapping, X_src: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one target row per source row from ``prod_i p(C'_i | C_i)``."""
    X_src = np.asarray(X_src)
    N = X_src.shape[0]
    tgt = m.target_schema
    sizes = np.array(tgt.sizes)
    Y = np.minimum((rng.random((N, len(tgt))) * sizes).astype(np.int64), sizes - 1)
    for c in m.correspondences:
        rows = source_config_index(c, m.source_schema, X_src)
        cdf = np.cumsum(c.table, axis=1)[rows]
        u = rng.random(N)
        k = np.minimum((cdf < u[:, None]).sum(axis=1), c.table.shape[1] - 1)
        pos, dims = target_columns(c, tgt)
        for p, col in zip(pos, np.unravel_index(k, dims)):
            Y[:, p] = col
    return Y


def sample_target_given_source(m: Mapping, src_instance: MappingABC[str, Any], seed: int) -> dict[str, Any]:
    _raise_on_errors(m)
    x = m.source_schema.encode(src_instance)[None, :]
    return m.target_schema.decode(map_samples(m, x, child_rng(seed, 1))[0])


def translate_dataset(m: Mapping, src_data: Dataset, n_total: int, seed: int) -> Dataset:
    """Data translation: ``ceil(n_total / N_S)`` target draws per source instance.

    Rounds over the whole source set are stacked (round 0 covers every
    instance once, then round 1, ...) and the result is cut to ``n_total``.
    """
    if len(src_data) == 0:
        raise ContractError("cannot translate an empty dataset")
    if n_total < 1:
        raise ContractError("n_total must be positive")
    if src_data.schema != m.source_schema:
        raise ContractError("dataset schema differs from the mapping's source schema")
    _raise_on_errors(m)
    n_s = len(src_data)
    reps = math.ceil(n_total / n_s)
    X = np.tile(src_data.values, (reps, 1))[:n_total]
    Y = map_samples(m, X, child_rng(seed, 1))
    prov = {"method": "D_S-translation", "seed": seed, "n_total": n_total, "draws_per_instance": reps, "source": dict(src_data.provenance)}
    return Dataset(m.target_schema, Y, prov)


def sample_knowledge(model: LogLinearModel, m: Mapping, cfg: SamplerConfig) -> Dataset:
    """Knowledge-only target sample: N source draws, one target draw each."""
    if model.schema != m.source_schema:
        raise ContractError("source model schema differs from the mapping's source schema")
    _raise_on_errors(m)
    src = gibbs_sample(model, cfg)
    Y = map_samples(m, src.values, child_rng(cfg.seed, 1))
    prov = {"method": "K_S-sampling", "mapping_hash": m.digest(), **src.provenance}
    return Dataset(m.target_schema, Y, prov)
