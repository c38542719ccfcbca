"""Small random corpora with a random valid plan, for oracle comparisons."""

from __future__ import annotations

import numpy as np

from augsearch.corpus import Corpus
from augsearch.relation import KEY, NUMERIC, Relation


def _keys(rng, n, domain, null_rate=0.1):
    vals = np.array([f"v{int(x)}" for x in rng.integers(0, domain, n)], dtype=object)
    vals[rng.random(n) < null_rate] = None
    return vals


def random_case(seed: int, max_tables: int = 6, max_rows: int = 50, max_features: int = 5):
    """Returns ``(user, corpus, raws, horizontals, verticals)``; the plan
    lists are in application order and name corpus entries, ``raws`` maps
    those names to the unprocessed relations."""
    rng = np.random.default_rng(seed)
    domain = int(rng.integers(3, 9))
    n = int(rng.integers(20, max_rows + 1))
    nf = int(rng.integers(1, 3))
    cols = {f"f{i}": rng.normal(size=n) * rng.uniform(0.5, 3) + rng.normal() for i in range(nf)}
    cols["k0"] = _keys(rng, n, domain)
    cols["k1"] = _keys(rng, n, domain)
    user_rel = Relation.from_columns("user", {**cols, "y": np.zeros(n)},
                                     {"k0": KEY, "k1": KEY})
    corpus = Corpus()
    raws = {}
    horizontals, verticals = [], []
    budget = max_features - nf - 1  # features left for joined tables
    n_tables = int(rng.integers(1, max_tables))
    plan_keys = ["k0", "k1"]
    signal = [0.7 * user_rel["f0"]]
    for t in range(n_tables):
        rows = int(rng.integers(5, max_rows + 1))
        if not verticals and rng.random() < 0.3:
            hc = {f"f{i}": rng.normal(size=rows) * 2 + 1 for i in range(nf) if rng.random() < 0.85}
            hc["k0"] = _keys(rng, rows, domain)
            if rng.random() < 0.5:
                hc["k1"] = _keys(rng, rows, domain)
            hc["y"] = rng.normal(size=rows)
            rel = Relation.from_columns(f"h{t}", hc, {"k0": KEY, "k1": KEY})
            corpus.register(rel, "RAW")
            raws[rel.name] = rel
            horizontals.append(rel.name)
            continue
        if budget <= 0:
            break
        m = int(rng.integers(1, min(2, budget) + 1))
        budget -= m
        vc = {f"g{i}": rng.normal(size=rows) * rng.uniform(0.5, 2) + rng.normal() for i in range(m)}
        vc["key"] = _keys(rng, rows, domain, 0.05)
        if rng.random() < 0.5:
            vc["k2"] = _keys(rng, rows, domain)
        rel = Relation.from_columns(f"d{t}", vc, {"key": KEY, "k2": KEY})
        corpus.register(rel, "RAW")
        raws[rel.name] = rel
        pk = plan_keys[int(rng.integers(0, len(plan_keys)))]
        verticals.append((rel.name, "key", pk))
        plan_keys += [f"{rel.name}.key"] + ([f"{rel.name}.k2"] if "k2" in vc else [])
    y = signal[0] + rng.normal(size=n)
    user_rel = Relation.from_columns("user", {**cols, "y": y}, {"k0": KEY, "k1": KEY})
    return user_rel, corpus, raws, horizontals, verticals


def _key_strings(ints):
    return np.array([f"k{int(x)}" for x in ints], dtype=object)


def noise_case(seed: int, n: int = 150, domain: int = 20):
    """User table with a weak signal and a corpus of pure-noise tables that
    are all joinable (on ``k``) or unionable."""
    rng = np.random.default_rng(seed)
    ku = rng.integers(0, domain, n)
    f0 = rng.normal(size=n)
    user = Relation.from_columns("user", {"f0": f0, "f1": rng.normal(size=n), "k": _key_strings(ku),
                                          "y": 0.5 * f0 + rng.normal(size=n)}, {"k": KEY})
    corpus = Corpus()
    for t in range(int(rng.integers(2, 7))):
        rows = int(rng.integers(20, 120))
        if rng.random() < 0.3:
            rel = Relation.from_columns(f"noise_union_{t}", {
                "f0": rng.normal(size=rows), "f1": rng.normal(size=rows),
                "k": _key_strings(rng.integers(0, domain, rows)), "y": rng.normal(size=rows) * 2}, {"k": KEY})
        else:
            cols = {f"g{i}": rng.normal(size=rows) for i in range(int(rng.integers(1, 4)))}
            cols["k"] = _key_strings(rng.integers(0, domain, rows))
            rel = Relation.from_columns(f"noise_join_{t}", cols, {"k": KEY})
        corpus.register(rel, "RAW")
    return user, corpus


def access_case(seed: int, n: int = 120, domain: int = 25):
    """User table whose target depends on joinable features, plus a useful
    union table; every corpus entry gets a random access label.  Returns
    ``(user, corpus, labels)``."""
    rng = np.random.default_rng(seed)
    ku = rng.integers(0, domain, n)
    signal = [rng.normal(size=domain) for _ in range(3)]
    f0 = rng.normal(size=n)
    y = f0 + sum(s[ku] for s in signal) + 0.1 * rng.normal(size=n)
    user = Relation.from_columns("user", {"f0": f0, "k": _key_strings(ku), "y": y}, {"k": KEY})
    corpus = Corpus()
    labels = {}
    names = ["AA", "BB", "CC"]
    for i, s in enumerate(signal):
        rel = Relation.from_columns(f"join_{names[i]}", {"v": s, "k": _key_strings(np.arange(domain))}, {"k": KEY})
        labels[rel.name] = ["RAW", "MD", "API"][int(rng.integers(0, 3))]
        corpus.register(rel, labels[rel.name])
    m = 400
    ku2 = rng.integers(0, domain, m)
    g0 = rng.normal(size=m)
    extra = Relation.from_columns("union_more", {"f0": g0, "k": _key_strings(ku2),
                                                 "y": g0 + sum(s[ku2] for s in signal) + 0.1 * rng.normal(size=m)},
                                  {"k": KEY})
    labels[extra.name] = ["RAW", "MD", "API"][int(rng.integers(0, 3))]
    corpus.register(extra, labels[extra.name])
    return user, corpus, labels
