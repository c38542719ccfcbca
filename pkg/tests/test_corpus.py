import numpy as np
import pytest

from augsearch.corpus import Corpus, CorpusError
from augsearch.relation import CATEGORICAL, KEY, DataError, Relation
from augsearch.sketch import build_sketches


def raw_table(name="sales", rows=40, seed=0):
    rng = np.random.default_rng(seed)
    return Relation.from_columns(name, {"k": [f"id{i % 13}" for i in range(rows)], "x": rng.normal(size=rows) * 5 + 2,
                                        "c": rng.choice(["a", "b", "c"], rows).astype(object)},
                                 {"k": KEY, "c": CATEGORICAL})


def test_register_preprocesses_and_sketches():
    c = Corpus()
    e = c.register(raw_table(), "MD")
    assert e.label.name == "MD" and "sales" in c and len(c) == 1
    assert set(e.features) == {"x", "c=a", "c=b", "c=c"}
    assert abs(e.relation["x"].mean()) < 1e-9
    assert e.sketches.allclose(build_sketches(e.relation, fold_count=1))
    assert e.keys == ["k"]


def test_persistence_round_trip(tmp_path):
    c = Corpus.open(tmp_path / "corpus")
    c.register(raw_table(), "RAW")
    c.register(raw_table("other", seed=1), "API")
    back = Corpus.open(tmp_path / "corpus", create=False)
    assert back.names() == ["other", "sales"]
    for name in back.names():
        a, b = c.get(name), back.get(name)
        assert a.label == b.label and a.row_count == b.row_count
        assert a.sketches.allclose(b.sketches)
        assert b.relation.equals(a.relation)
        assert np.array_equal(a.profile.keys["k"][0], b.profile.keys["k"][0])


def test_open_missing_directory(tmp_path):
    with pytest.raises(CorpusError):
        Corpus.open(tmp_path / "absent", create=False)


def test_name_collision_leaves_corpus_unchanged(tmp_path):
    c = Corpus.open(tmp_path)
    first = c.register(raw_table(), "RAW")
    before = sorted(p.name for p in tmp_path.iterdir())
    with pytest.raises(CorpusError):
        c.register(raw_table(seed=5), "API")
    assert c.get("sales") is first
    assert sorted(p.name for p in tmp_path.iterdir()) == before


def test_invalid_name_rejected():
    with pytest.raises(CorpusError):
        Corpus().register(raw_table("../evil"), "RAW")


def test_remove(tmp_path):
    c = Corpus.open(tmp_path)
    c.register(raw_table(), "RAW")
    v = c.version
    c.remove("sales")
    assert "sales" not in c and not (tmp_path / "sales").exists() and c.version > v
    with pytest.raises(CorpusError):
        c.remove("sales")


@pytest.mark.parametrize("seed", range(5))
def test_update_matches_recompute(tmp_path, seed):
    c = Corpus.open(tmp_path)
    e = c.register(raw_table(seed=seed), "RAW")
    stored = e.relation
    rng = np.random.default_rng(seed)
    drop = stored.take(np.sort(rng.choice(stored.row_count, 5, replace=False)))
    extra = raw_table(rows=7, seed=seed + 100)  # raw layout: replayed through the stored statistics
    new = c.update("sales", extra, drop)
    assert new.row_count == stored.row_count - 5 + 7
    assert new.sketches.allclose(build_sketches(new.relation, fold_count=1))
    assert Corpus.open(tmp_path).get("sales").sketches.allclose(new.sketches)


def test_update_rejects_absent_rows_and_bad_schema():
    c = Corpus()
    e = c.register(raw_table(), "RAW")
    ghost = e.relation.take(np.array([0]))
    ghost = Relation.from_columns("g", {n: (ghost[n] + 999 if n == "x" else ghost[n]) for n in ghost.names},
                                  {"k": KEY})
    empty = e.relation.take(np.arange(0))
    with pytest.raises(DataError):
        c.update("sales", empty, ghost)
    with pytest.raises(DataError):
        c.update("sales", Relation.from_columns("z", {"q": [1.0]}), empty)
    assert c.get("sales") is e
