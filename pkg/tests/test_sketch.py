import numpy as np
import pytest

from augsearch.gram import FeatureSpace, GramRing, SpaceMismatch
from augsearch.grouped import GroupedGram
from augsearch.relation import DataError, KEY, Relation
from augsearch.sketch import (KeyedGram, SketchSet, build_sketches, estimate_shape, fold_ids, join_push,
                              union_push, update_sketches)


def table(seed, rows=30, domain=5, feats=("a", "b"), key="k", null_rate=0.0):
    rng = np.random.default_rng(seed)
    cols = {f: rng.normal(size=rows) for f in feats}
    keys = np.array([f"v{x}" for x in rng.integers(0, domain, rows)], dtype=object)
    keys[rng.random(rows) < null_rate] = None
    cols[key] = keys
    return Relation.from_columns(f"t{seed}", cols, {key: KEY})


def test_fold_ids_deterministic():
    a = fold_ids(1000, 10, seed=3)
    assert np.array_equal(a, fold_ids(1000, 10, seed=3))
    assert set(a.tolist()) == set(range(10))
    assert not np.array_equal(a, fold_ids(1000, 10, seed=4))


@pytest.mark.parametrize("seed", range(5))
def test_fold_sums_reproduce_global(seed):
    r = table(seed, rows=40)
    sk = build_sketches(r, fold_count=4, seed=seed)
    total = sk.folds[0].global_gram
    for f in sk.folds[1:]:
        total = total + f.global_gram
    assert total.allclose(sk.global_gram)
    for k, kg in sk.keyed.items():
        merged = GroupedGram.concat([f.keyed[k] for f in sk.folds]).regroup([k])
        assert merged.total().allclose(kg.total())
        assert len(merged) == len(kg)


def test_four_rows_two_folds():
    r = Relation.from_columns("t", {"x": [1.0, 2.0, 3.0, 4.0]})
    sk = build_sketches(r, fold_count=2)
    assert (sk.folds[0].global_gram + sk.folds[1].global_gram).allclose(sk.global_gram)


def test_keyed_domain_size_and_counts():
    r = Relation.from_columns("t", {"x": [1.0, 2.0, 3.0, 4.0, 5.0], "k": ["a", "b", "c", "a", None]}, {"k": KEY})
    sk = build_sketches(r)
    kg = sk.keyed["k"]
    assert kg.domain_size == 3
    assert kg.c.sum() == r.row_count  # the null group is kept
    view = sk.join_view("k")
    assert view.is_reweighted() and view.domain_size == 3 and len(view) == 3
    np.testing.assert_allclose(view.groups["a"].s, [2.5])


def test_build_errors():
    with pytest.raises(DataError):
        build_sketches(Relation.from_columns("t", {"k": ["a"]}, {"k": KEY}))
    with pytest.raises(DataError):
        build_sketches(Relation.from_columns("t", {"x": [1.0, 2.0]}), fold_count=3)


def test_union_push_example_tables():
    space = FeatureSpace(("B", "C"))
    g = union_push(GramRing.from_rows([[1, 3], [2, 4]], space), GramRing.from_rows([[3, 3], [5, 4]], space))
    iB, iC = space.index("B"), space.index("C")
    assert g.c == 4
    assert g.Q[iB, iB] == 39 and g.s[iB] == 11 and g.Q[iB, iC] == 40 and g.s[iC] == 14
    assert union_push(g, GramRing.zero(space)).allclose(g)
    with pytest.raises(SpaceMismatch):
        union_push(g, GramRing.zero(FeatureSpace(("B",))))


@pytest.mark.parametrize("seed", range(5))
def test_union_push_matches_stacked_rows(seed):
    a, b = table(seed, rows=50), table(seed + 100, rows=50)
    sa, sb = build_sketches(a), build_sketches(b)
    stacked = np.vstack([a.matrix(["a", "b"]), b.matrix(["a", "b"])])
    assert union_push(sa.global_gram, sb.global_gram).allclose(GramRing.from_rows(stacked, sa.space))


def materialized_left_join(plan: Relation, cand: Relation, feats):
    """Weighted rows of plan LEFT JOIN cand: a plan row matching n candidate
    rows expands to n rows of weight 1/n; unmatched rows get zeros."""
    rows, weights = [], []
    for i in range(plan.row_count):
        base = [plan["a"][i], plan["b"][i]]
        hits = np.flatnonzero(cand["k"] == plan["k"][i]) if plan["k"][i] is not None else []
        if len(hits) == 0:
            rows.append(base + [0.0] * len(feats))
            weights.append(1.0)
        for j in hits:
            rows.append(base + [cand[f][j] for f in feats])
            weights.append(1.0 / len(hits))
    return np.array(rows), np.array(weights)


@pytest.mark.parametrize("seed", range(10))
def test_join_push_matches_materialized_join(seed):
    plan = table(seed, rows=30, domain=5, null_rate=0.1)
    cand = table(seed + 50, rows=int(np.random.default_rng(seed).integers(3, 30)), domain=6, feats=("g",))
    kp = build_sketches(plan).keyed["k"]
    kc = build_sketches(cand).join_view("k").rename_features({"g": "D.g"})
    got = join_push(kp, kc)
    rows, w = materialized_left_join(plan, cand, ["g"])  # columns a, b, D.g
    space = FeatureSpace(("a", "b", "D.g"))  # sorted: D.g, a, b
    assert got.allclose(GramRing.from_rows(rows[:, [2, 0, 1]], space, weights=w))
    assert got.c == plan.row_count


def test_join_push_without_matches_adds_zero_features():
    plan = table(1, rows=10, domain=3)
    cand = Relation.from_columns("c", {"g": [1.0, 2.0], "k": ["zz", "yy"]}, {"k": KEY})
    kp = build_sketches(plan).keyed["k"]
    got = join_push(kp, build_sketches(cand).join_view("k"))
    assert got.allclose(kp.total().align(FeatureSpace(("a", "b", "g"))))


def test_join_push_single_key_hand_example():
    space = FeatureSpace(("x",))
    plan = KeyedGram("k", np.array(["v"], dtype=object), np.array([3.0]), np.array([[6.0]]),
                     np.array([[[14.0]]]), space)  # rows x = 1, 2, 3
    cand = KeyedGram("k", np.array(["v"], dtype=object), np.array([1.0]), np.array([[0.5]]),
                     np.array([[[0.25]]]), FeatureSpace(("f",)))
    got = join_push(plan, cand)
    expect = GramRing.from_rows([[0.5, 1], [0.5, 2], [0.5, 3]], FeatureSpace(("f", "x")))
    assert got.allclose(expect)


def test_join_push_rejects_unweighted():
    kp = build_sketches(table(0)).keyed["k"]
    raw = build_sketches(table(1, feats=("g",))).keyed["k"]
    with pytest.raises(ValueError):
        join_push(kp, raw)


@pytest.mark.parametrize("seed", range(3))
def test_bytes_round_trip(seed):
    sk = build_sketches(table(seed, rows=25, null_rate=0.2), fold_count=3, seed=seed)
    back = SketchSet.from_bytes(sk.to_bytes())
    assert back.allclose(sk)
    assert back.fold_count == 3
    assert back.keyed["k"].domain_size == sk.keyed["k"].domain_size


def test_update_insert_delete():
    base, extra = table(0, rows=20), table(1, rows=8)
    sk = build_sketches(base)
    empty = extra.take(np.arange(0))
    both = Relation.from_columns("t", {n: np.concatenate([base[n], extra[n]]) for n in base.names}, {"k": KEY})
    ins = update_sketches(sk, extra, empty)
    assert ins.global_gram.allclose(sk.global_gram + GramRing.from_rows(extra.matrix(["a", "b"]), sk.space))
    assert ins.allclose(build_sketches(both))
    assert update_sketches(ins, empty, extra).allclose(sk)
    gone = update_sketches(sk, empty, base)
    assert gone.global_gram.allclose(GramRing.zero(sk.space))
    assert len(gone.keyed["k"]) == 0


def test_estimate_shape():
    assert estimate_shape(100, 4, "vertical", 999, 2).rows == 100
    assert estimate_shape(100, 4, "vertical", 999, 2).cols == 6
    assert estimate_shape(100, 4, "horizontal", 30, 4).rows == 130
