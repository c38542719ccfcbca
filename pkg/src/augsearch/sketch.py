"""Pre-computed per-table aggregates and the union / join pushdown operators."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .gram import FeatureSpace, GramRing, SpaceMismatch, _mirror_upper
from .grouped import PART, GroupedGram, _permutation
from .relation import KEY, NUMERIC, DataError, Relation

_MAGIC = b"SKETCHv1"
REWEIGHT_TOL = 1e-9


class KeyedGram(GroupedGram):
    """Annotations grouped by one join-key column.

    ``None`` keys (SQL nulls) are kept as a separate group so that group
    counts still add up to the source row count; they never match a join.
    """

    def __init__(self, key: str, values, c, S, Q, space: FeatureSpace):
        super().__init__({key: np.asarray(values, dtype=object)}, c, S, Q, space)
        self.key = key

    @classmethod
    def of(cls, g: GroupedGram, key: Optional[str] = None) -> "KeyedGram":
        key = key or next(iter(g.keys))
        return cls(key, g.keys[key], g.c, g.S, g.Q, g.space)

    @property
    def values(self) -> np.ndarray:
        return self.keys[self.key]

    @property
    def domain_size(self) -> int:
        return int(sum(v is not None for v in self.values))

    @property
    def groups(self) -> Dict[object, GramRing]:
        return {v: self.group(i) for i, v in enumerate(self.values)}

    def index(self) -> pd.Index:
        idx = self.__dict__.get("_index")
        if idx is None:
            idx = pd.Index(self.values)
            self._index = idx
        return idx

    def reweighted(self) -> "KeyedGram":
        """Drop the null group and scale every group to count 1."""
        g = self.drop_null(self.key)
        if len(g) and np.any(g.c <= 0):
            raise ZeroDivisionError("key group with non-positive count")
        f = 1.0 / g.c if len(g) else g.c
        return KeyedGram(self.key, g.keys[self.key], np.ones(len(g)), g.S * f[:, None],
                         g.Q * f[:, None, None], g.space)

    def is_reweighted(self, tol: float = REWEIGHT_TOL) -> bool:
        return bool(np.all(np.abs(self.c - 1.0) <= tol))

    def rename_key(self, name: str) -> "KeyedGram":
        out = KeyedGram(name, self.values, self.c, self.S, self.Q, self.space)
        if "_index" in self.__dict__:
            out._index = self._index
        return out

    def rename_features(self, mapping: dict) -> "KeyedGram":
        return KeyedGram.of(self.rename(features=mapping), self.key)


@dataclass
class FoldSketch:
    global_gram: GramRing
    keyed: Dict[str, KeyedGram]


@dataclass
class SketchSet:
    global_gram: GramRing
    keyed: Dict[str, KeyedGram]
    folds: List[FoldSketch]
    fold_assignment: Optional[np.ndarray]
    seed: int
    _views: Dict[str, KeyedGram] = field(default_factory=dict, repr=False)

    @property
    def space(self) -> FeatureSpace:
        return self.global_gram.space

    @property
    def fold_count(self) -> int:
        return len(self.folds)

    def join_view(self, key: str) -> KeyedGram:
        """Re-weighted keyed aggregate used as the right side of joins."""
        v = self._views.get(key)
        if v is None:
            v = self.keyed[key].reweighted()
            self._views[key] = v
        return v

    @property
    def nbytes(self) -> int:
        m = len(self.space)
        rec = 1 + m + m * (m + 1) // 2
        groups = 1 + sum(len(k) for k in self.keyed.values())
        return 8 * rec * groups * (1 + (len(self.folds) if len(self.folds) > 1 else 0))

    # -- persistence --------------------------------------------------------

    def to_bytes(self) -> bytes:
        names = list(self.space.names)
        m = len(names)
        iu = np.triu_indices(m)
        header = {"features": names, "seed": int(self.seed), "fold_count": self.fold_count,
                  "keys": {k: _json_keys(self.keyed[k].values) for k in sorted(self.keyed)},
                  "fold_keys": []}
        recs = [_record(self.global_gram.c, self.global_gram.s, self.global_gram.Q, iu)]
        for k in sorted(self.keyed):
            kg = self.keyed[k]
            recs.append(_records(kg, iu))
        if self.fold_count > 1:
            for fs in self.folds:
                header["fold_keys"].append({k: _json_keys(fs.keyed[k].values) for k in sorted(fs.keyed)})
                recs.append(_record(fs.global_gram.c, fs.global_gram.s, fs.global_gram.Q, iu))
                for k in sorted(fs.keyed):
                    recs.append(_records(fs.keyed[k], iu))
        body = np.concatenate([np.atleast_2d(r) for r in recs]).astype("<f8").tobytes()
        assign = b""
        if self.fold_assignment is not None and self.fold_count > 1:
            header["assignment_rows"] = int(len(self.fold_assignment))
            assign = np.asarray(self.fold_assignment, dtype="<i4").tobytes()
        hdr = json.dumps(header, separators=(",", ":")).encode("utf-8")
        return b"".join([_MAGIC, struct.pack("<I", len(hdr)), hdr, struct.pack("<Q", len(body)), body, assign])

    @classmethod
    def from_bytes(cls, data: bytes) -> "SketchSet":
        if data[:8] != _MAGIC:
            raise ValueError("not a sketch file")
        (hlen,) = struct.unpack_from("<I", data, 8)
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        pos = 12 + hlen
        (blen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        space = FeatureSpace(tuple(header["features"]))
        m = len(space)
        width = 1 + m + m * (m + 1) // 2
        body = np.frombuffer(data, dtype="<f8", count=blen // 8, offset=pos).reshape(-1, width)
        pos += blen
        cur = [0]

        def take(n):
            block = body[cur[0]:cur[0] + n]
            cur[0] += n
            return block

        def keyed_from(keys_json):
            out = {}
            for k, vals in keys_json.items():
                vals = _unjson_keys(vals)
                c, S, Q = _unpack(take(len(vals)), m)
                out[k] = KeyedGram(k, vals, c, S, Q, space)
            return out

        c, S, Q = _unpack(take(1), m)
        glob = GramRing(c[0], S[0], Q[0], space)
        keyed = keyed_from(header["keys"])
        folds = []
        for fk in header["fold_keys"]:
            c, S, Q = _unpack(take(1), m)
            folds.append(FoldSketch(GramRing(c[0], S[0], Q[0], space), keyed_from(fk)))
        assign = None
        if "assignment_rows" in header:
            assign = np.frombuffer(data, dtype="<i4", count=header["assignment_rows"], offset=pos).astype(np.int64)
        if not folds:
            folds = [FoldSketch(glob, keyed)]
        return cls(glob, keyed, folds, assign, header["seed"])

    def allclose(self, other: "SketchSet", rtol: float = 1e-9) -> bool:
        if not self.global_gram.allclose(other.global_gram, rtol=rtol):
            return False
        if sorted(self.keyed) != sorted(other.keyed) or self.fold_count != other.fold_count:
            return False
        pairs = [(self.keyed, other.keyed)] + [(a.keyed, b.keyed) for a, b in zip(self.folds, other.folds)]
        for a_map, b_map in pairs:
            for k in a_map:
                if not keyed_allclose(a_map[k], b_map[k], rtol):
                    return False
        return all(a.global_gram.allclose(b.global_gram, rtol=rtol) for a, b in zip(self.folds, other.folds))


def keyed_allclose(a: KeyedGram, b: KeyedGram, rtol: float = 1e-9) -> bool:
    ga, gb = a.groups, b.groups
    if set(ga) != set(gb):
        return False
    return all(ga[v].allclose(gb[v], rtol=rtol) for v in ga)


def _json_keys(values) -> list:
    return [None if v is None else str(v) for v in values]


def _unjson_keys(values) -> np.ndarray:
    out = np.empty(len(values), dtype=object)
    out[:] = values
    return out


def _record(c, s, Q, iu):
    return np.concatenate([[c], s, Q[iu]])


def _records(g: GroupedGram, iu):
    if len(g) == 0:
        return np.zeros((0, 1 + len(g.space) + len(iu[0])))
    return np.concatenate([g.c[:, None], g.S, g.Q[:, iu[0], iu[1]]], axis=1)


def _unpack(block: np.ndarray, m: int):
    c = block[:, 0].copy()
    S = block[:, 1:1 + m].copy()
    Q = np.zeros((len(block), m, m))
    iu0, iu1 = np.triu_indices(m)
    Q[:, iu0, iu1] = block[:, 1 + m:]
    Q[:, iu1, iu0] = block[:, 1 + m:]
    return c, S, Q


# -- construction -----------------------------------------------------------

def fold_ids(n: int, fold_count: int, seed: int = 0) -> np.ndarray:
    """Deterministic fold of each row index (splitmix64 finaliser, mod F)."""
    with np.errstate(over="ignore"):
        z = np.arange(n, dtype=np.uint64) + np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z % np.uint64(fold_count)).astype(np.int64)


def feature_names(r: Relation) -> List[str]:
    return r.names_of(NUMERIC)


def build_sketches(r: Relation, fold_count: int = 1, seed: int = 0,
                   features: Optional[Sequence[str]] = None,
                   keys: Optional[Sequence[str]] = None) -> SketchSet:
    """Global, keyed and per-fold gram aggregates of a preprocessed relation.

    Keyed groups are stored with their raw counts (so that incremental
    updates stay additive); :meth:`SketchSet.join_view` gives the
    re-weighted form used in joins.
    """
    features = list(features) if features is not None else feature_names(r)
    keys = list(keys) if keys is not None else r.names_of(KEY)
    if not features:
        raise DataError(f"{r.name}: no numeric features to sketch")
    if fold_count < 1:
        raise ValueError("fold_count must be at least 1")
    if fold_count > r.row_count:
        raise DataError(f"{r.name}: {fold_count} folds requested for {r.row_count} rows")
    space = FeatureSpace(tuple(features))
    X = r.matrix(list(space.names))
    glob = GramRing.from_rows(X, space)
    if fold_count == 1:
        keyed = {k: KeyedGram.of(GroupedGram.from_rows(X, space, {k: r[k]}), k) for k in keys}
        return SketchSet(glob, keyed, [FoldSketch(glob, keyed)], None, seed)
    assign = fold_ids(r.row_count, fold_count, seed)
    per_fold_keyed: List[Dict[str, KeyedGram]] = [{} for _ in range(fold_count)]
    keyed = {}
    for k in keys:
        both = GroupedGram.from_rows(X, space, {PART: assign, k: r[k]})
        keyed[k] = KeyedGram.of(both.regroup([k]), k)
        part = both.keys[PART].astype(np.int64)
        for f in range(fold_count):
            per_fold_keyed[f][k] = KeyedGram.of(both.take(np.flatnonzero(part == f)).drop_keys([PART]), k)
    fg = GroupedGram.from_rows(X, space, {PART: assign}).by_part(fold_count)
    folds = [FoldSketch(fg[f], per_fold_keyed[f]) for f in range(fold_count)]
    return SketchSet(glob, keyed, folds, assign, seed)


def update_sketches(old: SketchSet, inserted: Relation, deleted: Relation) -> SketchSet:
    """Incremental maintenance: add inserted rows, subtract deleted rows."""
    if old.fold_count > 1:
        raise ValueError("incremental update is only defined for unfolded sketches")
    space = old.space
    names = list(space.names)
    glob = old.global_gram
    if inserted.row_count:
        glob = glob + GramRing.from_rows(inserted.matrix(names), space)
    if deleted.row_count:
        glob = glob - GramRing.from_rows(deleted.matrix(names), space)
    if glob.c <= 0.5:
        glob = GramRing.zero(space)
    keyed = {}
    for k, kg in old.keyed.items():
        parts = [kg]
        if inserted.row_count:
            parts.append(KeyedGram.of(GroupedGram.from_rows(inserted.matrix(names), space, {k: inserted[k]}), k))
        if deleted.row_count:
            d = GroupedGram.from_rows(deleted.matrix(names), space, {k: deleted[k]})
            parts.append(GroupedGram(d.keys, -d.c, -d.S, -d.Q, space))
        merged = GroupedGram.concat(parts).regroup([k])
        keep = np.flatnonzero(merged.c > 0.5)  # counts are integral before re-weighting
        keyed[k] = KeyedGram.of(merged.take(keep), k)
    return SketchSet(glob, keyed, [FoldSketch(glob, keyed)], None, old.seed)


# -- pushdown ---------------------------------------------------------------

def union_push(plan: GramRing, cand: GramRing) -> GramRing:
    """Gram of ``plan UNION ALL cand``: the annotations add."""
    if plan.space != cand.space:
        raise SpaceMismatch(f"union of {plan.space.names} and {cand.space.names}; align first")
    return plan + cand


def join_push(plan_keyed: KeyedGram, cand_keyed: KeyedGram) -> GramRing:
    """Gram of ``plan LEFT JOIN cand`` from the two keyed aggregates.

    Each plan group multiplies with the matching (re-weighted) candidate
    group, or with the mean-imputation annotation ``(1, 0, 0)`` when the key
    is absent or null.
    """
    if not isinstance(plan_keyed, KeyedGram) or not isinstance(cand_keyed, KeyedGram):
        raise TypeError("join_push expects keyed aggregates")
    if not cand_keyed.is_reweighted():
        raise ValueError("candidate keyed aggregate is not re-weighted")
    if len(plan_keyed.keys) != 1 or len(cand_keyed.keys) != 1:
        raise ValueError("join keys must be single columns")
    right = cand_keyed.rename_key("__rk__")
    out = plan_keyed.join(plan_keyed.key, right, "__rk__", keep_right_keys=False)
    return out.total()


def match_index(plan_values: np.ndarray, cand: KeyedGram) -> np.ndarray:
    """Position of each plan key value in ``cand`` (-1 when absent/null)."""
    if len(cand) == 0:
        return np.full(len(plan_values), -1, dtype=np.int64)
    idx = cand.index().get_indexer(pd.Index(plan_values, dtype=object))
    return idx.astype(np.int64)


def join_push_parts(plan_keyed: GroupedGram, key: str, cand: KeyedGram,
                    plan_totals: List[GramRing], nparts: int) -> List[GramRing]:
    """Per-partition left-join gram for a re-weighted candidate.

    ``plan_keyed`` is grouped by ``(PART, key)`` and ``plan_totals`` are the
    per-partition plan annotations (their group sums).  Because every
    candidate group has count 1, the plan block of the product equals the
    plan totals and only the candidate and cross blocks need the key loop:
    ``s2 = sum c_p s_d``, ``Q22 = sum c_p Q_d``, ``Q12 = sum s_p s_d^T``.
    """
    if not cand.space.disjoint(plan_keyed.space):
        raise SpaceMismatch("candidate features overlap the plan")
    codes, uniques = plan_keyed.key_codes(key)
    pos = match_index(uniques, cand)[codes]
    hit = np.flatnonzero(pos >= 0)
    m1, m2 = len(plan_keyed.space), len(cand.space)
    part = np.asarray(plan_keyed.keys[PART], dtype=np.int64)[hit]
    W = sp.csr_matrix((np.ones(len(hit)), (part, np.arange(len(hit)))), shape=(nparts, len(hit)))
    ci = plan_keyed.c[hit]
    Si = plan_keyed.S[hit]
    di = pos[hit]
    Sd = cand.S[di]
    s2 = np.asarray(W @ (ci[:, None] * Sd)).reshape(nparts, m2)
    Q22 = np.asarray(W @ (ci[:, None] * cand.Q[di].reshape(len(hit), m2 * m2))).reshape(nparts, m2, m2)
    Q12 = np.asarray(W @ (Si[:, :, None] * Sd[:, None, :]).reshape(len(hit), m1 * m2)).reshape(nparts, m1, m2)
    space, perm = _permutation(plan_keyed.space.names + cand.space.names)
    out = []
    for p in range(nparts):
        t = plan_totals[p]
        s = np.concatenate([t.s, s2[p]])
        Q = np.empty((m1 + m2, m1 + m2))
        Q[:m1, :m1] = t.Q
        Q[m1:, m1:] = Q22[p]
        Q[:m1, m1:] = Q12[p]
        Q[m1:, :m1] = Q12[p].T
        # Unmatched plan groups contribute (c, s, 0) exactly like t's share.
        out.append(GramRing(t.c, s[perm], _mirror_upper(Q[np.ix_(perm, perm)]), space))
    return out


@dataclass(frozen=True)
class Shape:
    rows: int
    cols: int


def estimate_shape(rows: float, cols: int, kind: str, cand_rows: float = 0, cand_cols: int = 0) -> Shape:
    """Shape of the augmented table from semi-ring counts: a left join keeps
    the plan cardinality, a union adds the candidate count."""
    if kind == "vertical":
        return Shape(int(round(rows)), cols + cand_cols)
    return Shape(int(round(rows + cand_rows)), cols)
