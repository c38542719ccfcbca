import numpy as np
import pytest

from augsearch.corpus import Corpus
from augsearch.discovery import (AugmentationCandidate, DiscoveryProfile, PlanProfile, containment,
                                 find_candidates, minhash, normalize_name, profile)
from augsearch.relation import KEY, AccessLabel, Relation


def ids(lo, hi):
    return [f"id{i}" for i in range(lo, hi)]


def test_normalize_name():
    assert normalize_name("Zip_Code ") == "zipcode"
    assert normalize_name("Color=Red") == "color=Red"


def test_minhash_is_deterministic():
    a = minhash(ids(0, 500))
    b = minhash(list(reversed(ids(0, 500))) + [None])
    assert np.array_equal(a[0], b[0]) and a[1] == b[1] == 500
    assert containment(*a, *b) == 1.0


def test_disjoint_sets_estimate_low():
    ests = []
    for t in range(100):
        a = minhash(ids(t * 10_000, t * 10_000 + 1000))
        b = minhash(ids(t * 10_000 + 5000, t * 10_000 + 6000))
        ests.append(containment(*a, *b))
    assert max(ests) < 0.1


def test_half_containment_calibration():
    errs = []
    for t in range(100):
        base = t * 10_000
        a = minhash(ids(base, base + 1000))            # half of a lies in b
        b = minhash(ids(base + 500, base + 1500))
        errs.append(abs(containment(*a, *b) - 0.5))
    assert max(errs) <= 0.15


def test_empty_column():
    sig, n = minhash([None, None])
    assert n == 0
    assert containment(sig, n, *minhash(ids(0, 5))) == 0.0


def test_profile_bytes_round_trip():
    r = Relation.from_columns("t", {"k": ids(0, 20), "x": np.arange(20.0)}, {"k": KEY})
    p = profile(r)
    q = DiscoveryProfile.from_bytes(p.to_bytes())
    assert q.fingerprint == p.fingerprint and q.numeric == p.numeric
    assert np.array_equal(q.keys["k"][0], p.keys["k"][0])
    assert p.numeric["x"] == (0.0, 19.0, 9.5)


def test_candidate_invariant():
    with pytest.raises(ValueError):
        AugmentationCandidate("vertical", "d", 1.0)
    with pytest.raises(ValueError):
        AugmentationCandidate("horizontal", "d", 1.0, join_key="k")


def plan_for(rel, target="y"):
    p = profile(rel)
    return PlanProfile(p.keys, p.fingerprint, target)


def small_corpus():
    c = Corpus()
    c.register(Relation.from_columns("join_raw", {"k": ids(0, 50), "g": np.arange(50.0)}, {"k": KEY}), "RAW")
    c.register(Relation.from_columns("join_md", {"k": ids(0, 50), "h": np.arange(50.0) ** 2}, {"k": KEY}), "MD")
    c.register(Relation.from_columns("same_schema", {"k": ids(900, 950), "x": np.ones(50) + np.arange(50),
                                                     "y": np.arange(50.0)}, {"k": KEY}), "RAW")
    c.register(Relation.from_columns("elsewhere", {"k": ids(500, 550), "z": np.arange(50.0)}, {"k": KEY}), "RAW")
    return c


USER = Relation.from_columns("user", {"k": ids(0, 40), "x": np.arange(40.0), "y": np.arange(40.0) * 2},
                             {"k": KEY})


def test_find_candidates_examples():
    c = small_corpus()
    found = find_candidates(c.index, plan_for(USER), AccessLabel.RAW, True)
    got = {(x.kind, x.dataset) for x in found}
    assert ("vertical", "join_raw") in got
    assert ("horizontal", "same_schema") in got
    assert ("vertical", "join_md") not in got  # MD entry, RAW requested
    assert all(x.dataset != "elsewhere" for x in found)
    v = next(x for x in found if x.dataset == "join_raw")
    assert abs(v.score - 1.0) <= 0.15 and v.join_key == "k" and v.plan_key == "k"
    md = find_candidates(c.index, plan_for(USER), AccessLabel.MD, False)
    assert {x.kind for x in md} == {"horizontal"}


def test_find_candidates_sorted_and_deterministic():
    c = small_corpus()
    a = find_candidates(c.index, plan_for(USER), AccessLabel.API, True)
    b = find_candidates(c.index, plan_for(USER), AccessLabel.API, True)
    assert a == b
    keyed = [(not x.name_match, -x.score) for x in a]
    assert keyed == sorted(keyed)


def test_used_entries_are_excluded():
    c = small_corpus()
    p = plan_for(USER)
    p.used = frozenset({"join_raw"})
    assert all(x.dataset != "join_raw" for x in find_candidates(c.index, p, AccessLabel.RAW, True))


@pytest.mark.parametrize("seed", range(10))
def test_access_filter_randomized(seed):
    rng = np.random.default_rng(seed)
    c = Corpus()
    labels = {}
    for i in range(8):
        lab = AccessLabel(int(rng.integers(0, 3)))
        name = f"d{i}"
        cols = {"k": ids(0, 40), "v": rng.normal(size=40)} if i % 2 else {"k": ids(0, 40), "x": rng.normal(size=40),
                                                                          "y": rng.normal(size=40)}
        c.register(Relation.from_columns(name, cols, {"k": KEY}), lab)
        labels[name] = lab
    for floor in AccessLabel:
        for x in find_candidates(c.index, plan_for(USER), floor, floor == AccessLabel.RAW):
            assert labels[x.dataset] <= floor
            assert floor == AccessLabel.RAW or x.kind == "horizontal"


def test_precision_recall_on_planted_corpus():
    rng = np.random.default_rng(0)
    user = Relation.from_columns("user", {"cust_id": ids(0, 300), "x": rng.normal(size=300),
                                          "y": rng.normal(size=300)}, {"cust_id": KEY})
    c = Corpus()
    truth = set()
    for i in range(10):  # joinable: cover most of the user's keys
        lo = int(rng.integers(0, 20))
        c.register(Relation.from_columns(f"join{i}", {"cust_id": ids(lo, 300 + lo + 50), "f": rng.normal(size=350)},
                                         {"cust_id": KEY}), "RAW")
        truth.add(f"join{i}")
    for i in range(5):  # unionable
        c.register(Relation.from_columns(f"union{i}", {"cust_id": ids(5000, 5100), "x": rng.normal(size=100),
                                                       "y": rng.normal(size=100)}, {"cust_id": KEY}), "RAW")
        truth.add(f"union{i}")
    for i in range(15):  # distractors: low overlap or foreign schema
        lo = int(rng.integers(250, 2000))
        c.register(Relation.from_columns(f"noise{i}", {"cust_id": ids(lo, lo + 300), "q": rng.normal(size=300)},
                                         {"cust_id": KEY}), "RAW")
    found = {x.dataset for x in find_candidates(c.index, plan_for(user), AccessLabel.RAW, True)}
    tp = len(found & truth)
    assert tp / len(truth) >= 0.9
    assert tp / max(1, len(found)) >= 0.8
