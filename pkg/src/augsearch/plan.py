"""Factorized state of an augmentation plan.

The plan's training data is never materialized during search.  A
:class:`PlanState` keeps, per partition (cross-validation fold, train-only
union rows, optional validation set), the plan gram and the gram grouped
by each join key the plan exposes.  Joined tables form a tree rooted at
the base table (user rows plus unioned rows); keyed aggregates are
computed by passing re-weighted messages up and down that tree.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import discovery
from .discovery import AugmentationCandidate, PlanProfile, normalize_name
from .gram import FeatureSpace, GramRing
from .grouped import PART, GroupedGram
from .proxy import DEFAULT_LAMBDA, EvalResult, cross_validate
from .relation import (KEY, NUMERIC, Column, DataError, PreprocessStats, Relation, preprocess, replay)
from .sketch import Shape, fold_ids, join_push_parts

FOLDS = 10
HORIZONTAL = "horizontal"
VERTICAL = "vertical"


# -- user table -------------------------------------------------------------

@dataclass
class UserTable:
    """The request's training table in plan coordinates.

    Features are preprocessed like corpus tables; the target stays in its
    raw units so predictions need no back-transform.
    """
    raw_schema: List[Column]
    relation: Relation
    stats: PreprocessStats
    target: str
    features: List[str]
    keys: List[str]
    task: str

    @property
    def fingerprint(self) -> frozenset:
        return frozenset((normalize_name(c.name), c.dtype if c.name != self.target else NUMERIC)
                         for c in self.raw_schema)

    def base_affine(self) -> Dict[str, tuple]:
        aff = {k: v for k, v in self.stats.affine().items() if k in self.features}
        aff[self.target] = (0.0, 1.0)
        return aff


def _numeric_target(r: Relation, target: str) -> np.ndarray:
    v = r[target]
    if v.dtype != object:
        return np.asarray(v, dtype=np.float64)
    y = pd.to_numeric(pd.Series(v, dtype=object), errors="coerce").to_numpy(dtype=np.float64)
    if np.isnan(y[[x is not None for x in v]]).any():
        raise DataError(f"target {target!r} is not numeric")
    return y


def prepare_user(train: Relation, target: str, one_hot_max: int = 20) -> UserTable:
    if target not in train:
        raise DataError(f"target column {target!r} not in {train.names}")
    y = _numeric_target(train, target)
    keep = np.flatnonzero(~np.isnan(y))
    if len(keep) == 0:
        raise DataError("target column has no values")
    rest_names = [n for n in train.names if n != target]
    rest = Relation(train.name, [c for c in train.schema if c.name != target],
                    {n: train[n][keep] for n in rest_names})
    processed, stats = preprocess(rest, one_hot_max)
    features = processed.names_of(NUMERIC)
    if not features:
        raise DataError("training table has no usable numeric features")
    schema = processed.schema + [Column(target, NUMERIC, 0)]
    data = dict(processed.data)
    data[target] = y[keep]
    rel = Relation(train.name, schema, data)
    task = "classification" if set(np.unique(y[keep])) <= {0.0, 1.0} else "regression"
    return UserTable(list(train.schema), rel, stats, target, features, processed.names_of(KEY), task)


def prepare_rows(user: UserTable, r: Relation, with_target: bool = True) -> Relation:
    """Replay the user preprocessing on new rows (validation or inference)."""
    cols = [c.name for c in user.raw_schema if c.name != user.target]
    missing = [c for c in cols if c not in r]
    if missing:
        raise DataError(f"input lacks columns {missing}")
    rel = replay(r, user.stats)
    if not with_target:
        return rel
    if user.target not in r:
        raise DataError(f"input lacks target {user.target!r}")
    y = _numeric_target(r, user.target)
    keep = np.flatnonzero(~np.isnan(y))
    data = {n: rel[n][keep] for n in rel.names}
    data[user.target] = y[keep]
    schema = [Column(c.name, c.dtype) for c in rel.schema] + [Column(user.target, NUMERIC)]
    return Relation(r.name, schema, data).take(np.arange(len(keep)))


# -- plan steps -------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationStep:
    kind: str
    dataset: str
    join_key: Optional[str] = None   # dataset column
    plan_key: Optional[str] = None   # plan column joined against
    cv: Optional[float] = None       # CV R² when the step was accepted

    @classmethod
    def of(cls, cand: AugmentationCandidate, cv: Optional[float] = None) -> "AugmentationStep":
        return cls(cand.kind, cand.dataset, cand.join_key, cand.plan_key, cv)

    def to_json(self) -> dict:
        return {"kind": self.kind, "dataset": self.dataset, "join_key": self.join_key,
                "plan_key": self.plan_key, "cv_r2": self.cv}

    @classmethod
    def from_json(cls, d: dict) -> "AugmentationStep":
        return cls(d["kind"], d["dataset"], d.get("join_key"), d.get("plan_key"), d.get("cv_r2"))


@dataclass
class _Table:
    X: np.ndarray                 # rows x base features (base space order)
    keys: Dict[str, np.ndarray]   # base key -> values
    part: np.ndarray
    holdout: bool = False


@dataclass(frozen=True)
class _Node:
    dataset: str
    key: str          # dataset column used to join
    attach: str       # plan key it joins to
    attach_col: str   # same, as a column of the parent dataset ("" for the base)
    parent: Optional[int]

    @property
    def keyname(self) -> str:
        return f"{self.dataset}.{self.key}"


@dataclass
class _UnionMap:
    features: Dict[str, str]      # candidate gram feature -> base feature
    offset: np.ndarray
    scale: np.ndarray
    keys: Dict[str, Optional[str]]  # base key -> candidate key column


def _unique(seq):
    out = []
    for x in seq:
        if x not in out:
            out.append(x)
    return out


class PlanState:
    """Partitioned, factorized aggregates of the current plan."""

    def __init__(self, user: UserTable, corpus, folds: int = FOLDS, seed: int = 0,
                 validation: Optional[Relation] = None):
        if folds < 2:
            raise ValueError("plan state needs at least two folds")
        n = user.relation.row_count
        if n < folds:
            raise DataError(f"{n} training rows cannot be split into {folds} folds")
        self.user = user
        self.corpus = corpus
        self.folds = folds
        self.seed = seed
        self.nparts = folds + 2
        self.base_space = FeatureSpace(tuple(user.features + [user.target]))
        self.space = self.base_space
        self.steps: List[AugmentationStep] = []
        self.nodes: List[_Node] = []
        names = list(self.base_space.names)
        tables = [_Table(user.relation.matrix(names), {k: user.relation[k] for k in user.keys},
                         fold_ids(n, folds, seed))]
        if validation is not None and validation.row_count:
            tables.append(_Table(validation.matrix(names), {k: validation[k] for k in user.keys},
                                 np.full(validation.row_count, folds + 1, dtype=np.int64), holdout=True))
        self.tables = tables
        self._base_memo: Dict[tuple, GroupedGram] = {}
        self._reset()

    def _reset(self):
        self._msgs: Dict[int, GroupedGram] = {}
        self._ctx: Dict[int, GroupedGram] = {}
        self._keyed: Dict[str, GroupedGram] = {}
        self._totals: Optional[List[GramRing]] = None
        self._union_maps: Dict[str, _UnionMap] = {}
        self._key_sigs: Dict[str, tuple] = {}

    def _clone(self) -> "PlanState":
        new = object.__new__(PlanState)
        new.__dict__.update(self.__dict__)
        new.steps = list(self.steps)
        new.nodes = list(self.nodes)
        new.tables = list(self.tables)
        new._reset()
        return new

    # -- plan shape ---------------------------------------------------------

    @property
    def target(self) -> str:
        return self.user.target

    @property
    def has_vertical(self) -> bool:
        return bool(self.nodes)

    def used(self) -> frozenset:
        return frozenset(s.dataset for s in self.steps)

    def plan_keys(self) -> List[str]:
        keys = list(self.user.keys)
        for nd in self.nodes:
            keys += [f"{nd.dataset}.{k}" for k in self.corpus.get(nd.dataset).keys]
        return keys

    def _key_owner(self, key: str) -> Tuple[Optional[int], str]:
        if key in self.user.keys:
            return None, key
        for i, nd in enumerate(self.nodes):
            pre = nd.dataset + "."
            if key.startswith(pre) and key[len(pre):] in self.corpus.get(nd.dataset).keys:
                return i, key[len(pre):]
        raise KeyError(f"{key!r} is not a key of the plan")

    def _children(self, parent: Optional[int]) -> List[int]:
        return [i for i, nd in enumerate(self.nodes) if nd.parent == parent]

    def train_rows(self) -> float:
        t = self.totals()
        return float(sum(t[p].c for p in range(self.folds + 1)))

    def estimate_shape(self, cand: AugmentationCandidate) -> Shape:
        cols = len(self.space) - 1
        rows = self.train_rows()
        entry = self.corpus.get(cand.dataset)
        if cand.kind == VERTICAL:
            return Shape(int(round(rows)), cols + len(entry.sketches.space))
        return Shape(int(round(rows + entry.sketches.global_gram.c)), cols)

    # -- base table groupings ----------------------------------------------

    def _base_grouped(self, cols) -> GroupedGram:
        cols = tuple(_unique(cols))
        hit = self._base_memo.get(cols)
        if hit is None:
            parts = []
            for t in self.tables:
                keyvals = {}
                for c in cols:
                    if c == PART:
                        keyvals[c] = t.part
                    elif c in t.keys:
                        keyvals[c] = t.keys[c]
                    else:
                        keyvals[c] = np.full(len(t.part), None, dtype=object)
                parts.append(GroupedGram.from_rows(t.X, self.base_space, keyvals))
            hit = parts[0] if len(parts) == 1 else GroupedGram.concat(parts).regroup(list(cols))
            self._base_memo[cols] = hit
        return hit

    def _pgrouped(self, node: _Node, cols) -> GroupedGram:
        """Dataset aggregates by its columns, with plan (prefixed) names."""
        entry = self.corpus.get(node.dataset)
        cols = tuple(_unique(cols))
        memo_key = ("prefixed", cols, node.dataset)
        hit = entry._memo.get(memo_key)
        if hit is None:
            g = entry.grouped(cols)
            hit = g.rename(features={n: f"{node.dataset}.{n}" for n in g.space.names},
                           keys={c: f"{node.dataset}.{c}" for c in cols})
            entry._memo[memo_key] = hit
        return hit

    # -- message passing ----------------------------------------------------

    def _message(self, i: int) -> GroupedGram:
        """Subtree of node ``i`` grouped by its join key, re-weighted."""
        hit = self._msgs.get(i)
        if hit is None:
            nd = self.nodes[i]
            kids = self._children(i)
            g = self._pgrouped(nd, [nd.key] + [self.nodes[c].attach_col for c in kids])
            for c in kids:
                g = g.join(self.nodes[c].attach, self._message(c), self.nodes[c].keyname, keep_right_keys=False)
            hit = g.regroup([nd.keyname]).reweight_by(nd.keyname)
            self._msgs[i] = hit
        return hit

    def _join_children(self, g: GroupedGram, kids: Sequence[int]) -> GroupedGram:
        for c in kids:
            g = g.join(self.nodes[c].attach, self._message(c), self.nodes[c].keyname, keep_right_keys=False)
        return g

    def _context(self, i: int) -> GroupedGram:
        """Everything outside node ``i``'s subtree, grouped by (part, attach key)."""
        hit = self._ctx.get(i)
        if hit is None:
            nd = self.nodes[i]
            if nd.parent is None:
                sibs = [c for c in self._children(None) if c != i]
                g = self._base_grouped([PART, nd.attach] + [self.nodes[s].attach for s in sibs])
                hit = self._join_children(g, sibs).regroup([PART, nd.attach])
            else:
                par = self.nodes[nd.parent]
                sibs = [c for c in self._children(nd.parent) if c != i]
                h = self._pgrouped(par, [par.key, nd.attach_col] + [self.nodes[s].attach_col for s in sibs])
                h = self._join_children(h, sibs)
                h = h.regroup(_unique([par.keyname, nd.attach])).reweight_by(par.keyname)
                g = self._context(nd.parent).join(par.attach, h, par.keyname, keep_right_keys=True)
                hit = g.regroup([PART, nd.attach])
            self._ctx[i] = hit
        return hit

    def keyed(self, key: str) -> GroupedGram:
        """Plan gram grouped by (partition, ``key``)."""
        hit = self._keyed.get(key)
        if hit is None:
            owner, col = self._key_owner(key)
            if owner is None:
                roots = self._children(None)
                g = self._base_grouped([PART, key] + [self.nodes[r].attach for r in roots])
                hit = self._join_children(g, roots).regroup([PART, key])
            else:
                nd = self.nodes[owner]
                kids = self._children(owner)
                h = self._pgrouped(nd, [nd.key, col] + [self.nodes[c].attach_col for c in kids])
                h = self._join_children(h, kids)
                h = h.regroup(_unique([nd.keyname, key])).reweight_by(nd.keyname)
                g = self._context(owner).join(nd.attach, h, nd.keyname, keep_right_keys=True)
                hit = g.regroup([PART, key])
            self._keyed[key] = hit
        return hit

    def totals(self) -> List[GramRing]:
        """Plan gram of each partition."""
        if self._totals is None:
            roots = self._children(None)
            g = self._base_grouped([PART] + [self.nodes[r].attach for r in roots])
            g = self._join_children(g, roots)
            self._totals = g.regroup([PART]).by_part(self.nparts)
        return self._totals

    # -- horizontal mapping -------------------------------------------------

    def union_map(self, dataset: str) -> _UnionMap:
        hit = self._union_maps.get(dataset)
        if hit is not None:
            return hit
        entry = self.corpus.get(dataset)
        base_aff = self.user.base_affine()
        cand_aff = entry.stats.affine()
        by_norm = {}
        for n in cand_aff:
            by_norm.setdefault(normalize_name(n), n)
        in_gram = set(entry.sketches.space.names)
        names = list(self.base_space.names)
        offset = np.zeros(len(names))
        scale = np.zeros(len(names))
        feats = {}
        for i, b in enumerate(names):
            c = by_norm.get(normalize_name(b))
            if c is None:
                continue
            mu_b, sd_b = base_aff[b]
            mu_c, sd_c = cand_aff[c]
            offset[i] = (mu_c - mu_b) / sd_b
            if c in in_gram:
                scale[i] = sd_c / sd_b
                feats[c] = b
        ckeys = {normalize_name(k): k for k in entry.keys}
        keys = {k: ckeys.get(normalize_name(k)) for k in self.user.keys}
        hit = _UnionMap(feats, offset, scale, keys)
        self._union_maps[dataset] = hit
        return hit

    def _mapped_global(self, dataset: str) -> GramRing:
        um = self.union_map(dataset)
        g = self.corpus.get(dataset).sketches.global_gram
        g = g.project(list(um.features)).rename(um.features).align(self.base_space)
        return g.affine(um.offset, um.scale)

    def _mapped_table(self, dataset: str) -> _Table:
        um = self.union_map(dataset)
        r = self.corpus.get(dataset).relation
        names = list(self.base_space.names)
        X = np.tile(um.offset, (r.row_count, 1))
        inv = {b: c for c, b in um.features.items()}
        for i, b in enumerate(names):
            if b in inv:
                X[:, i] += um.scale[i] * r[inv[b]]
        keys = {k: (r[c] if c is not None else np.full(r.row_count, None, dtype=object))
                for k, c in um.keys.items()}
        return _Table(X, keys, np.full(r.row_count, self.folds, dtype=np.int64))

    def _mapped_keyed(self, dataset: str, key: str) -> GroupedGram:
        um = self.union_map(dataset)
        entry = self.corpus.get(dataset)
        ck = um.keys.get(key)
        if ck is not None:
            g = entry.sketches.keyed[ck]
            g = GroupedGram({key: g.keys[ck]}, g.c, g.S, g.Q, g.space)
        else:
            g = GroupedGram.single(entry.sketches.global_gram, {key: None})
        g = g.project(list(um.features)).rename(features=um.features).align(self.base_space)
        g = g.affine(um.offset, um.scale)
        return g.with_key(PART, np.full(len(g), self.folds, dtype=np.int64))

    # -- candidate evaluation ----------------------------------------------

    def candidate_parts(self, cand: AugmentationCandidate) -> List[GramRing]:
        """Per-partition grams of the plan with ``cand`` applied (no
        materialization)."""
        if cand.kind == HORIZONTAL:
            if self.has_vertical:
                raise ValueError("horizontal augmentation after a vertical one")
            parts = list(self.totals())
            parts[self.folds] = parts[self.folds] + self._mapped_global(cand.dataset)
            return parts
        entry = self.corpus.get(cand.dataset)
        view = entry.prefixed_view(cand.join_key, cand.dataset)
        return join_push_parts(self.keyed(cand.plan_key), cand.plan_key, view, self.totals(), self.nparts)

    def evaluate(self, cand: Optional[AugmentationCandidate] = None, lam: float = DEFAULT_LAMBDA) -> EvalResult:
        parts = self.totals() if cand is None else self.candidate_parts(cand)
        return cross_validate(parts, self.target, self.folds, lam)

    # -- extension ----------------------------------------------------------

    def extend(self, step, reuse: bool = True, parts: Optional[List[GramRing]] = None) -> "PlanState":
        """New state with ``step`` applied.

        With ``reuse`` the new plan gram and the keyed aggregates for the
        join key and for the new table's keys are derived from this state's
        keyed aggregate on the join key; other keyed aggregates are
        recomputed lazily, re-using messages of untouched subtrees.
        """
        if isinstance(step, AugmentationCandidate):
            step = AugmentationStep.of(step)
        entry = self.corpus.get(step.dataset)
        if step.dataset in self.used():
            raise ValueError(f"{step.dataset} is already part of the plan")
        new = self._clone()
        new.steps.append(step)
        if step.kind == HORIZONTAL:
            if self.has_vertical:
                raise ValueError("horizontal augmentation after a vertical one")
            new.tables.append(self._mapped_table(step.dataset))
            new._base_memo = {}
            if reuse:
                new._totals = parts if parts is not None else self.candidate_parts(
                    AugmentationCandidate(HORIZONTAL, step.dataset, 1.0))
                for k, g in self._keyed.items():
                    add = self._mapped_keyed(step.dataset, k)
                    new._keyed[k] = GroupedGram.concat([g, add]).regroup([PART, k])
            return new
        if step.join_key not in entry.keys:
            raise KeyError(f"{step.dataset} has no key column {step.join_key!r}")
        owner, col = self._key_owner(step.plan_key)
        node = _Node(step.dataset, step.join_key, step.plan_key, "" if owner is None else col, owner)
        new.nodes.append(node)
        new.space = self.space.union(FeatureSpace(tuple(f"{step.dataset}.{n}" for n in entry.sketches.space.names)))
        if not reuse:
            new._base_memo = {}
            return new
        idx = len(new.nodes) - 1
        ancestors = set()
        p = owner
        while p is not None:
            ancestors.add(p)
            p = self.nodes[p].parent
        new._msgs = {i: m for i, m in self._msgs.items() if i not in ancestors}
        K = self.keyed(step.plan_key)
        cand = AugmentationCandidate(VERTICAL, step.dataset, 1.0, step.join_key, step.plan_key)
        new._totals = parts if parts is not None else self.candidate_parts(cand)
        new._ctx[idx] = K
        view = entry.prefixed_view(step.join_key, step.dataset).rename_key(node.keyname)
        new._keyed[step.plan_key] = K.join(step.plan_key, view, node.keyname,
                                           keep_right_keys=False).regroup([PART, step.plan_key])
        for col in entry.keys:
            j = f"{step.dataset}.{col}"
            h = new._pgrouped(node, [node.key, col]).regroup(_unique([node.keyname, j])).reweight_by(node.keyname)
            new._keyed[j] = K.join(step.plan_key, h, node.keyname, keep_right_keys=True).regroup([PART, j])
        return new

    @classmethod
    def build(cls, user: UserTable, corpus, steps: Sequence[AugmentationStep], folds: int = FOLDS,
              seed: int = 0, validation: Optional[Relation] = None, reuse: bool = True) -> "PlanState":
        st = cls(user, corpus, folds, seed, validation)
        for s in steps:
            st = st.extend(s, reuse=reuse)
        return st

    # -- discovery input ----------------------------------------------------

    def profile(self, k: int) -> PlanProfile:
        sigs = {}
        for key in self.plan_keys():
            hit = self._key_sigs.get(key)
            if hit is None:
                owner, col = self._key_owner(key)
                if owner is None:
                    vals = np.concatenate([t.keys[key] for t in self.tables if not t.holdout])
                    hit = discovery.minhash(vals, k)
                else:
                    hit = self.corpus.get(self.nodes[owner].dataset).profile.keys[col]
                self._key_sigs[key] = hit
            sigs[key] = hit
        return PlanProfile(sigs, self.user.fingerprint, self.target, self.used())


# -- materialization -----------------------------------------------------------

def _averaged(entry, node: _Node) -> pd.DataFrame:
    """Per join-key means of the dataset features (first value for other
    key columns), prefixed with the dataset name."""
    r = entry.relation
    df = pd.DataFrame({f"{node.dataset}.{c}": r[c] for c in r.names})
    kcol = node.keyname
    df = df[df[kcol].notna()]
    feats = [f"{node.dataset}.{c}" for c in entry.features]
    others = [f"{node.dataset}.{c}" for c in entry.keys if c != node.key]
    agg = {f: "mean" for f in feats}
    agg.update({o: "first" for o in others})
    return df.groupby(kcol, sort=False, dropna=True).agg(agg).reset_index()


def materialize(state: PlanState, include_validation: bool = False) -> Relation:
    """Physically apply the plan: unions, then left joins.

    Unmatched rows keep NaN in the joined features (no imputation); a
    table with several rows per key contributes its per-key mean, so the
    row count equals the base row count.
    """
    names = list(state.base_space.names)
    frames = []
    for t in state.tables:
        if t.holdout and not include_validation:
            continue
        d = {n: t.X[:, i] for i, n in enumerate(names)}
        for k in state.user.keys:
            d[k] = t.keys[k]
        frames.append(pd.DataFrame(d))
    df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=names)
    df = join_nodes(df, state.nodes, state.corpus)
    return _to_relation(state, df)


def nodes_for(steps: Sequence[AugmentationStep], user_keys: Sequence[str], corpus) -> List[_Node]:
    """Join tree of the vertical steps of a plan."""
    nodes: List[_Node] = []
    for st in steps:
        if st.kind != VERTICAL:
            continue
        if st.plan_key in user_keys:
            nodes.append(_Node(st.dataset, st.join_key, st.plan_key, "", None))
            continue
        for i, nd in enumerate(nodes):
            pre = nd.dataset + "."
            if st.plan_key.startswith(pre) and st.plan_key[len(pre):] in corpus.get(nd.dataset).keys:
                nodes.append(_Node(st.dataset, st.join_key, st.plan_key, st.plan_key[len(pre):], i))
                break
        else:
            raise KeyError(f"{st.plan_key!r} is not a key of the plan")
    return nodes


def join_nodes(df: pd.DataFrame, nodes: Sequence[_Node], corpus) -> pd.DataFrame:
    for nd in nodes:
        right = _averaged(corpus.get(nd.dataset), nd)
        if nd.attach == nd.keyname:
            raise ValueError("node cannot attach to its own key")
        df = df.merge(right, how="left", left_on=nd.attach, right_on=nd.keyname, sort=False)
        if nd.keyname in df.columns:
            # The join column itself: keep the matched value, None otherwise.
            df[nd.keyname] = df[nd.keyname].where(df[nd.keyname].notna(), None)
    return df


def _to_relation(state: PlanState, df: pd.DataFrame) -> Relation:
    schema, data = [], {}
    keys = set(state.plan_keys())
    for n in list(state.space.names) + state.plan_keys():
        if n not in df.columns:
            continue
        if n in keys:
            v = df[n].to_numpy(dtype=object)
            v = np.array([None if (x is None or (isinstance(x, float) and np.isnan(x))) else x for x in v],
                         dtype=object)
            schema.append(Column(n, KEY))
        else:
            v = df[n].to_numpy(dtype=np.float64)
            schema.append(Column(n, NUMERIC))
        data[n] = v
    rel = Relation("augmented", schema, data)
    return rel.take(np.arange(rel.row_count))
