import numpy as np
import pytest

from augsearch.corpus import Corpus
from augsearch.discovery import AugmentationCandidate
from augsearch.plan import AugmentationStep, PlanState, materialize, prepare_rows, prepare_user
from augsearch.relation import CATEGORICAL, KEY, DataError, Relation

from equivalence import build_states, case_errors
from randomcorpus import random_case


@pytest.mark.parametrize("seed", range(25))
def test_plans_match_brute_force(seed):
    assert all(v <= 1e-8 for v in case_errors(seed).values())


@pytest.mark.parametrize("seed", range(5))
def test_plans_match_brute_force_with_heavier_ridge(seed):
    assert all(v <= 1e-8 for v in case_errors(seed, lam=0.5).values())


def simple():
    rng = np.random.default_rng(0)
    user = Relation.from_columns("user", {"k": [f"id{i % 10}" for i in range(40)], "x": rng.normal(size=40),
                                          "y": rng.normal(size=40)}, {"k": KEY})
    c = Corpus()
    c.register(Relation.from_columns("side", {"k": [f"id{i % 12}" for i in range(36)], "g": rng.normal(size=36)},
                                     {"k": KEY}), "RAW")
    c.register(Relation.from_columns("more", {"k": [f"id{i}" for i in range(20)], "x": rng.normal(size=20),
                                              "y": rng.normal(size=20)}, {"k": KEY}), "RAW")
    return prepare_user(user, "y"), c


def test_prepare_user():
    u, _ = simple()
    assert u.features == ["x"] and u.keys == ["k"] and u.task == "regression"
    assert abs(u.relation["x"].mean()) < 1e-9
    with pytest.raises(DataError):
        prepare_user(u.relation, "absent")
    bad = Relation.from_columns("u", {"x": [1.0, 2.0], "y": ["a", "b"]}, {"y": CATEGORICAL})
    with pytest.raises(DataError):
        prepare_user(bad, "y")


def test_prepare_rows_replays_statistics():
    u, _ = simple()
    raw = Relation.from_columns("v", {"k": ["id1"], "x": [np.nan], "y": [3.0]}, {"k": KEY})
    out = prepare_rows(u, raw)
    assert out["x"][0] == 0.0 and out["y"][0] == 3.0
    with pytest.raises(DataError):
        prepare_rows(u, Relation.from_columns("v", {"y": [1.0]}))


def test_materialize_row_counts():
    u, c = simple()
    st = PlanState(u, c, folds=4)
    st = st.extend(AugmentationStep("horizontal", "more"))
    st = st.extend(AugmentationStep("vertical", "side", "k", "k"))
    m = materialize(st)
    assert m.row_count == 40 + 20
    matched = np.array([int(k[2:]) < 12 for k in m["k"]])
    assert np.array_equal(~np.isnan(m["side.g"]), matched)  # unmatched rows keep NaN
    unmatched = PlanState(u, c, folds=4).extend(AugmentationStep("vertical", "side", "k", "k"))
    assert materialize(unmatched).row_count == 40


def test_horizontal_after_vertical_rejected():
    u, c = simple()
    st = PlanState(u, c, folds=4).extend(AugmentationStep("vertical", "side", "k", "k"))
    with pytest.raises(ValueError):
        st.extend(AugmentationStep("horizontal", "more"))
    with pytest.raises(ValueError):
        st.candidate_parts(AugmentationCandidate("horizontal", "more", 1.0))
    with pytest.raises(ValueError):
        st.extend(AugmentationStep("vertical", "side", "k", "k"))


def test_unknown_keys_rejected():
    u, c = simple()
    st = PlanState(u, c, folds=4)
    with pytest.raises(KeyError):
        st.extend(AugmentationStep("vertical", "side", "nope", "k"))
    with pytest.raises(KeyError):
        st.extend(AugmentationStep("vertical", "side", "k", "nope"))


def test_fold_count_checks():
    u, c = simple()
    with pytest.raises(ValueError):
        PlanState(u, c, folds=1)
    with pytest.raises(DataError):
        PlanState(u, c, folds=41)


def test_estimate_shape_tracks_plan():
    u, c = simple()
    st = PlanState(u, c, folds=4)
    assert st.estimate_shape(AugmentationCandidate("horizontal", "more", 1.0)).rows == 60
    v = st.estimate_shape(AugmentationCandidate("vertical", "side", 1.0, "k", "k"))
    assert v.rows == 40 and v.cols == 2  # x plus side.g; the target is not a feature


def test_evaluate_candidate_equals_extended_state():
    u, c = simple()
    st = PlanState(u, c, folds=4)
    cand = AugmentationCandidate("vertical", "side", 1.0, "k", "k")
    assert abs(st.evaluate(cand).r2 - st.extend(cand).evaluate().r2) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_reuse_and_recompute_agree(seed):
    user, corpus, _, hs, vs = random_case(seed)
    a, b = build_states(user, corpus, hs, vs)
    for ga, gb in zip(a.totals(), b.totals()):
        assert ga.allclose(gb)
    assert a.plan_keys() == b.plan_keys()
