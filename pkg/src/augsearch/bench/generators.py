"""Deterministic synthetic corpora for the benchmarks."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..relation import KEY, NUMERIC, Column, Relation


@dataclass
class SyntheticSpec:
    rows: int = 100_000
    features: int = 3
    key_domain: int = 30
    aug_rows: int = 100_000
    phi_rate: float = 10.0        # rate of the exponential behind phi = min(1, 1/Exp)
    nonlinear: bool = False
    planted: int = 100            # predictive augmentations present in the planted corpus
    corpus_size: int = 100
    validation_rows: int = 10_000
    alpha: float = 0.0
    seed: int = 0

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def key_array(ints) -> np.ndarray:
    """Integer key values in the string form used by key columns."""
    return np.asarray(ints).astype(np.int64).astype(str).astype(object)


def relation(name: str, numeric: Dict[str, np.ndarray], keys: Dict[str, np.ndarray]) -> Relation:
    schema, data = [], {}
    for k, v in keys.items():
        schema.append(Column(k, KEY, 0))
        data[k] = key_array(v)
    for n, v in numeric.items():
        schema.append(Column(n, NUMERIC, 0))
        data[n] = np.asarray(v, dtype=np.float64)
    return Relation(name, schema, data)


# -- factorized-augmentation micro benchmarks ------------------------------

@dataclass
class MicroFixtures:
    base: Relation            # T[f1..fk, y, j]
    horizontal: Relation      # D^h, same schema as T
    vertical: Relation        # D^v[j, f]


def _micro_table(name: str, rng, rows: int, features: int, domain: int) -> Relation:
    num = {f"f{i + 1}": rng.random(rows) for i in range(features)}
    num["y"] = rng.random(rows)
    return relation(name, num, {"j": rng.integers(0, domain, rows)})


def gen_micro(spec: SyntheticSpec) -> MicroFixtures:
    """Random ``T[f1, f2, f3, y, j]`` plus a union-compatible ``D^h`` and a
    join-compatible ``D^v[j, f]``."""
    rng = np.random.default_rng(spec.seed)
    base = _micro_table("T", rng, spec.rows, spec.features, spec.key_domain)
    horiz = _micro_table("Dh", rng, spec.aug_rows, spec.features, spec.key_domain)
    vert = relation("Dv", {"f": rng.random(spec.aug_rows)}, {"j": rng.integers(0, spec.key_domain, spec.aug_rows)})
    return MicroFixtures(base, horiz, vert)


def gen_chain(rows: int, domain: int, seed: int = 0) -> Tuple[Relation, Relation, Relation]:
    """Three-table chain ``R1[A, B, x, y]``, ``R2[B, C, f1]``, ``R3[C, D, f2]``.

    ``R1`` carries one numeric feature because a request needs at least one.
    """
    rng = np.random.default_rng(seed)
    r1 = relation("R1", {"x": rng.random(rows), "y": rng.random(rows)},
                  {"A": rng.integers(0, domain, rows), "B": rng.integers(0, domain, rows)})
    r2 = relation("R2", {"f1": rng.random(rows)},
                  {"B": rng.integers(0, domain, rows), "C": rng.integers(0, domain, rows)})
    r3 = relation("R3", {"f2": rng.random(rows)},
                  {"C": rng.integers(0, domain, rows), "D": rng.integers(0, domain, rows)})
    return r1, r2, r3


# -- planted augmentations -------------------------------------------------

N_KEYS = 10


@dataclass
class PlantedCorpus:
    train: Relation
    validation: Relation
    tables: List[Tuple[Relation, bool]]      # (table, predictive?)
    truth: Dict[str, np.ndarray]             # f_i over the key domain
    omniscient: List[str]                    # names of the predictive tables present
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)


def draw_phi(rng, rate: float, size: int) -> np.ndarray:
    return np.minimum(1.0, 1.0 / rng.exponential(1.0 / rate, size))


def gen_planted(spec: SyntheticSpec) -> PlantedCorpus:
    """Request table ``R[y, J1..J10, f1]`` with hidden features ``f_i`` over
    key ``J_i``; train is the lowest of 11 partitions of ``f1`` and the other
    10 are union candidates; 90 join candidates are noisy copies of
    ``f2..f10`` mixed with weight ``phi``.  ``spec.planted`` of these 100
    predictive tables are kept and the corpus is filled up to
    ``spec.corpus_size`` with random union or join tables."""
    rng = np.random.default_rng(spec.seed)
    n, dom = spec.rows, spec.key_domain
    truth = {f"f{i}": rng.random(dom) for i in range(1, N_KEYS + 1)}
    J = {f"j{i}_key": rng.integers(0, dom, n) for i in range(1, N_KEYS + 1)}
    F = {i: truth[f"f{i}"][J[f"j{i}_key"]] for i in range(1, N_KEYS + 1)}
    y = sum((F[i] ** 2 if spec.nonlinear else F[i]) for i in F)
    n_val = min(spec.validation_rows, n // 2)
    perm = rng.permutation(n)
    val_idx, rest = perm[:n_val], perm[n_val:]
    order = rest[np.argsort(F[1][rest], kind="stable")]
    chunks = np.array_split(order, 11)

    def rows_of(idx, name):
        return relation(name, {"f1": F[1][idx], "y": y[idx]}, {k: v[idx] for k, v in J.items()})

    train = rows_of(chunks[0], "train")
    validation = rows_of(val_idx, "validation")
    predictive: List[Relation] = [rows_of(c, f"part{p:02d}") for p, c in enumerate(chunks[1:], 1)]
    keys = np.arange(dom)
    for i in range(2, N_KEYS + 1):
        phi = draw_phi(rng, spec.phi_rate, 10)
        for v in range(10):
            c = phi[v] * truth[f"f{i}"] + (1 - phi[v]) * rng.random(dom)
            predictive.append(relation(f"noisy_f{i}_{v}", {f"c{i}": c}, {f"j{i}_key": keys}))
    pick = sorted(rng.choice(len(predictive), size=min(spec.planted, len(predictive)), replace=False))
    tables = [(predictive[p], True) for p in pick]
    n_rand = max(0, spec.corpus_size - len(tables))
    m = len(chunks[1])
    for d in range(n_rand):
        if rng.random() < 0.1:
            rel = relation(f"random_union_{d:03d}", {"f1": rng.random(m), "y": rng.random(m) * N_KEYS},
                           {k: rng.integers(0, dom, m) for k in J})
        else:
            i = int(rng.integers(1, N_KEYS + 1))
            rel = relation(f"random_join_{d:03d}", {"r": rng.random(dom)}, {f"j{i}_key": keys})
        tables.append((rel, False))
    return PlantedCorpus(train, validation, tables, truth, [t.name for t, ok in tables if ok], spec)


# -- request-cache workload ------------------------------------------------

@dataclass
class CacheUser:
    train: Relation
    tables: List[Relation]
    truth: List[str]


def gen_cache_users(users: int = 20, candidates: int = 30, rows: int = 2000, domain: int = 500,
                    seed: int = 0) -> List[CacheUser]:
    """Users in schema-sharing pairs.  Each user needs two joins (on its
    keys ``a`` and ``b``) to reach R² = 1; its candidates use a key range
    disjoint from every other user's, so a partner's cached plan cannot
    help."""
    rng = np.random.default_rng(seed)
    out = []
    for u in range(users):
        pair = u // 2
        lo = u * domain
        ka, kb = rng.integers(lo, lo + domain, rows), rng.integers(lo, lo + domain, rows)
        ga, gb = rng.normal(size=domain), rng.normal(size=domain)
        x = rng.normal(size=rows)
        y = x + ga[ka - lo] + gb[kb - lo]
        train = relation(f"user{u:02d}", {f"x_p{pair}": x, "y": y},
                         {f"a_p{pair}_key": ka, f"b_p{pair}_key": kb})
        keys = np.arange(lo, lo + domain)
        true_a = relation(f"u{u:02d}_true_a", {f"ga_{u}": ga}, {"key": keys})
        true_b = relation(f"u{u:02d}_true_b", {f"gb_{u}": gb}, {"key": keys})
        tables = [true_a, true_b]
        for c in range(candidates - 2):
            tables.append(relation(f"u{u:02d}_noise_{c:03d}", {f"n{c}": rng.normal(size=domain)}, {"key": keys}))
        out.append(CacheUser(train, tables, [true_a.name, true_b.name]))
    return out


def zipf_sequence(n_users: int, length: int, alpha: float, seed: int = 0) -> np.ndarray:
    """User indices drawn by inverse CDF from one fixed stream of uniforms,
    so sequences for different ``alpha`` are coupled."""
    u = np.random.default_rng(seed).random(length)
    w = 1.0 / np.arange(1, n_users + 1) ** alpha
    cdf = np.cumsum(w) / w.sum()
    return np.minimum(np.searchsorted(cdf, u, side="right"), n_users - 1)
