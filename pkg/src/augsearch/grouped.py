"""Batches of gram annotations grouped by key columns.

A :class:`GroupedGram` holds one annotation per group as stacked arrays
``c (g,)``, ``S (g, m)`` and ``Q (g, m, m)`` plus the key values of each
group.  Null key values (``None``) form groups of their own that never
match in a join.  The partition column used for cross-validation is the
integer key ``PART``.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .gram import FeatureSpace, GramRing, SpaceMismatch, _mirror_upper

PART = "__part__"

# Row blocks are grouped in chunks to bound the size of the pairwise
# product buffer (n x m(m+1)/2).
_CHUNK_CELLS = 8_000_000


def factorize(cols: Sequence[np.ndarray]):
    """Group codes for the tuple of columns; nulls are ordinary values here.

    Returns ``(codes, first)`` where ``first[k]`` is the index of the first
    row of group ``k``.  Group ids follow first appearance.
    """
    n = len(cols[0]) if cols else 0
    if not cols:
        return np.zeros(n, dtype=np.int64), np.zeros(min(n, 1), dtype=np.int64)
    codes = None
    for col in cols:
        c, u = pd.factorize(col, use_na_sentinel=False)
        c = c.astype(np.int64)
        if codes is None:
            codes = c
        else:
            codes, _ = pd.factorize(codes * (len(u) + 1) + c)
            codes = codes.astype(np.int64)
    g = int(codes.max()) + 1 if n else 0
    first = np.full(g, n, dtype=np.int64)
    np.minimum.at(first, codes, np.arange(n, dtype=np.int64))
    return codes, first


def _indicator(codes: np.ndarray, g: int) -> sp.csr_matrix:
    n = len(codes)
    return sp.csr_matrix((np.ones(n), (codes, np.arange(n))), shape=(g, n))


def _permutation(names: Sequence[str]):
    space = FeatureSpace(tuple(names))
    order = {n: i for i, n in enumerate(names)}
    perm = np.array([order[n] for n in space.names], dtype=np.intp)
    return space, perm


def mul_batch(c1, S1, Q1, c2, S2, Q2):
    """Vectorised semi-ring product over aligned group arrays (block layout:
    left features first)."""
    N, m1 = S1.shape
    m2 = S2.shape[1]
    c = c1 * c2
    S = np.concatenate([c2[:, None] * S1, c1[:, None] * S2], axis=1)
    Q = np.empty((N, m1 + m2, m1 + m2))
    Q[:, :m1, :m1] = c2[:, None, None] * Q1
    Q[:, m1:, m1:] = c1[:, None, None] * Q2
    cross = S1[:, :, None] * S2[:, None, :]
    Q[:, :m1, m1:] = cross
    Q[:, m1:, :m1] = cross.transpose(0, 2, 1)
    return c, S, Q


class GroupedGram:
    def __init__(self, keys: Dict[str, np.ndarray], c, S, Q, space: FeatureSpace):
        self.keys = dict(keys)
        self.c = np.asarray(c, dtype=np.float64)
        g = len(self.c)
        m = len(space)
        self.S = np.asarray(S, dtype=np.float64).reshape(g, m)
        self.Q = np.asarray(Q, dtype=np.float64).reshape(g, m, m)
        self.space = space
        for k, v in self.keys.items():
            if len(v) != g:
                raise ValueError(f"key column {k} has {len(v)} values for {g} groups")
        self._codes: Dict[str, tuple] = {}

    def __len__(self) -> int:
        return len(self.c)

    def __repr__(self) -> str:
        return f"GroupedGram(keys={list(self.keys)}, groups={len(self)}, m={len(self.space)})"

    # -- construction -------------------------------------------------------

    @classmethod
    def from_rows(cls, X: np.ndarray, space: FeatureSpace, keys: Dict[str, np.ndarray],
                  weights: Optional[np.ndarray] = None) -> "GroupedGram":
        X = np.asarray(X, dtype=np.float64)
        n, m = X.shape
        if m != len(space):
            raise SpaceMismatch(f"row width {m} does not match space of size {len(space)}")
        names = list(keys)
        codes, first = factorize([keys[k] for k in names])
        g = len(first)
        out_keys = {k: np.asarray(keys[k])[first] for k in names}
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
        A = _indicator(codes, g)
        c = A @ w
        Xw = X * w[:, None]
        S = np.asarray(A @ Xw).reshape(g, m)
        iu0, iu1 = np.triu_indices(m)
        Qu = np.zeros((g, len(iu0)))
        step = max(1, _CHUNK_CELLS // max(1, len(iu0)))
        for lo in range(0, n, step):
            hi = min(n, lo + step)
            P = Xw[lo:hi, iu0] * X[lo:hi, iu1]
            Qu += np.asarray(A[:, lo:hi] @ P).reshape(g, len(iu0))
        Q = np.zeros((g, m, m))
        Q[:, iu0, iu1] = Qu
        Q[:, iu1, iu0] = Qu
        return cls(out_keys, c, S, Q, space)

    @classmethod
    def concat(cls, parts: List["GroupedGram"]) -> "GroupedGram":
        parts = [p for p in parts if p is not None]
        space = parts[0].space
        names = list(parts[0].keys)
        for p in parts[1:]:
            if p.space != space or set(p.keys) != set(names):
                raise SpaceMismatch("cannot concatenate grouped grams with different layout")
        keys = {k: np.concatenate([p.keys[k] for p in parts]) for k in names}
        return cls(keys, np.concatenate([p.c for p in parts]),
                   np.concatenate([p.S for p in parts]),
                   np.concatenate([p.Q for p in parts]), space)

    @classmethod
    def single(cls, g: GramRing, keys: Dict[str, object]) -> "GroupedGram":
        m = len(g.space)
        kv = {k: np.array([v], dtype=object if not isinstance(v, (int, np.integer)) else np.int64)
              for k, v in keys.items()}
        return cls(kv, [g.c], g.s.reshape(1, m), g.Q.reshape(1, m, m), g.space)

    # -- accessors ----------------------------------------------------------

    def group(self, i: int) -> GramRing:
        return GramRing(self.c[i], self.S[i], self.Q[i], self.space)

    def total(self) -> GramRing:
        return GramRing(self.c.sum(), self.S.sum(axis=0), _mirror_upper(self.Q.sum(axis=0)), self.space)

    def key_codes(self, name: str):
        """``(codes, uniques)`` for one key column, cached."""
        hit = self._codes.get(name)
        if hit is None:
            codes, uniq = pd.factorize(self.keys[name], use_na_sentinel=False)
            hit = (codes.astype(np.int64), np.asarray(uniq, dtype=object))
            self._codes[name] = hit
        return hit

    def take(self, idx) -> "GroupedGram":
        idx = np.asarray(idx)
        return GroupedGram({k: v[idx] for k, v in self.keys.items()},
                           self.c[idx], self.S[idx], self.Q[idx], self.space)

    # -- transforms ---------------------------------------------------------

    def regroup(self, names: Sequence[str]) -> "GroupedGram":
        names = list(names)
        if not names:
            t = self.total()
            return GroupedGram({}, [t.c], t.s[None], t.Q[None], self.space)
        codes, first = factorize([self.keys[k] for k in names])
        g = len(first)
        A = _indicator(codes, g)
        m = len(self.space)
        c = A @ self.c
        S = np.asarray(A @ self.S).reshape(g, m)
        Q = np.asarray(A @ self.Q.reshape(len(self), m * m)).reshape(g, m, m)
        return GroupedGram({k: self.keys[k][first] for k in names}, c, S, Q, self.space)

    def by_part(self, nparts: int) -> List[GramRing]:
        """Sum groups per partition id into ``nparts`` annotations."""
        part = np.asarray(self.keys[PART], dtype=np.int64)
        m = len(self.space)
        A = sp.csr_matrix((np.ones(len(part)), (part, np.arange(len(part)))), shape=(nparts, len(part)))
        c = A @ self.c
        S = np.asarray(A @ self.S).reshape(nparts, m)
        Q = np.asarray(A @ self.Q.reshape(len(self), m * m)).reshape(nparts, m, m)
        return [GramRing(c[p], S[p], _mirror_upper(Q[p]), self.space) for p in range(nparts)]

    def reweight_by(self, name: str) -> "GroupedGram":
        """Scale every group so that each value of ``name`` has total count 1."""
        codes, _ = self.key_codes(name)
        tot = np.bincount(codes, weights=self.c)
        denom = tot[codes]
        if np.any(denom == 0):
            raise ZeroDivisionError("key group with zero count")
        f = 1.0 / denom
        return GroupedGram(self.keys, self.c * f, self.S * f[:, None], self.Q * f[:, None, None], self.space)

    def rename(self, features: Optional[dict] = None, keys: Optional[dict] = None) -> "GroupedGram":
        features = features or {}
        keys = keys or {}
        names = [features.get(n, n) for n in self.space.names]
        space, perm = _permutation(names)
        return GroupedGram({keys.get(k, k): v for k, v in self.keys.items()},
                           self.c, self.S[:, perm], self.Q[:, perm][:, :, perm], space)

    def with_key(self, name: str, values) -> "GroupedGram":
        keys = dict(self.keys)
        keys[name] = np.asarray(values) if not np.isscalar(values) else np.full(len(self), values)
        return GroupedGram(keys, self.c, self.S, self.Q, self.space)

    def drop_keys(self, names) -> "GroupedGram":
        return GroupedGram({k: v for k, v in self.keys.items() if k not in set(names)},
                           self.c, self.S, self.Q, self.space)

    def project(self, names: Sequence[str]) -> "GroupedGram":
        sub = FeatureSpace(tuple(names))
        idx = self.space.indices(sub.names)
        return GroupedGram(self.keys, self.c, self.S[:, idx], self.Q[:, idx][:, :, idx], sub)

    def align(self, target: FeatureSpace) -> "GroupedGram":
        if not self.space.issubset(target):
            raise SpaceMismatch(f"{sorted(set(self.space.names) - set(target.names))} not in target")
        if target == self.space:
            return self
        idx = target.indices(self.space.names)
        g, m = len(self), len(target)
        S = np.zeros((g, m))
        Q = np.zeros((g, m, m))
        S[:, idx] = self.S
        Q[:, idx[:, None], idx[None, :]] = self.Q
        return GroupedGram(self.keys, self.c, S, Q, target)

    def affine(self, offset, scale) -> "GroupedGram":
        """Per-group annotation after ``x -> offset + scale * x``."""
        a = np.asarray(offset, dtype=np.float64)
        b = np.asarray(scale, dtype=np.float64)
        bS = self.S * b
        c = self.c
        S = c[:, None] * a + bS
        Q = (c[:, None, None] * np.outer(a, a)
             + a[None, :, None] * bS[:, None, :]
             + bS[:, :, None] * a[None, None, :]
             + self.Q * np.outer(b, b))
        return GroupedGram(self.keys, c, S, Q, self.space)

    def drop_null(self, name: str) -> "GroupedGram":
        vals = self.keys[name]
        keep = np.array([v is not None and not (isinstance(v, float) and np.isnan(v)) for v in vals], dtype=bool)
        return self if keep.all() else self.take(np.flatnonzero(keep))

    # -- joins --------------------------------------------------------------

    def join(self, lkey: str, right: "GroupedGram", rkey: str, keep_right_keys: bool = True) -> "GroupedGram":
        """Left join on ``self[lkey] == right[rkey]`` multiplying annotations.

        Unmatched (and null-keyed) left groups are multiplied by the
        imputation annotation ``(1, 0, 0)`` over the right feature space,
        i.e. the right features take their (standardized) mean.  With
        ``keep_right_keys`` the right key columns (``rkey`` included) are
        carried over, ``None`` where unmatched.
        """
        if not self.space.disjoint(right.space):
            overlap = sorted(set(self.space.names) & set(right.space.names))
            raise SpaceMismatch(f"join would duplicate features {overlap}")
        li, ri = _match(self.keys[lkey], right.keys[rkey])
        matched = ri >= 0
        rsafe = np.where(matched, ri, 0)
        m2 = len(right.space)
        if len(right):
            c2 = np.where(matched, right.c[rsafe], 1.0)
            S2 = np.where(matched[:, None], right.S[rsafe], 0.0)
            Q2 = np.where(matched[:, None, None], right.Q[rsafe], 0.0)
        else:
            c2 = np.ones(len(li))
            S2 = np.zeros((len(li), m2))
            Q2 = np.zeros((len(li), m2, m2))
        c, S, Q = mul_batch(self.c[li], self.S[li], self.Q[li], c2, S2, Q2)
        space, perm = _permutation(self.space.names + right.space.names)
        keys = {k: v[li] for k, v in self.keys.items()}
        if keep_right_keys:
            for k, v in right.keys.items():
                if k in keys:
                    continue
                col = np.empty(len(li), dtype=object)
                col[:] = None
                if len(right):
                    picked = v[rsafe]
                    col[matched] = picked[matched]
                keys[k] = col
        return GroupedGram(keys, c, S[:, perm], Q[:, perm][:, :, perm], space)


def _is_null_array(vals: np.ndarray) -> np.ndarray:
    return pd.isna(pd.Series(vals, dtype=object)).to_numpy()


def _match(lvals: np.ndarray, rvals: np.ndarray):
    """Left-join index pairs; ``ri == -1`` marks unmatched left rows.
    Output preserves left order; multiple right matches are adjacent."""
    n = len(lvals)
    lnull = _is_null_array(lvals)
    rnull = _is_null_array(rvals)
    right = pd.DataFrame({"k": pd.Series(rvals, dtype=object)[~rnull].to_numpy(),
                          "ri": np.flatnonzero(~rnull)})
    left = pd.DataFrame({"k": pd.Series(lvals, dtype=object).to_numpy(), "li": np.arange(n)})
    left.loc[lnull, "k"] = "\x00__null__"
    if right["k"].is_unique:
        idx = pd.Index(right["k"]).get_indexer(left["k"])
        ri = np.where(idx >= 0, right["ri"].to_numpy()[np.maximum(idx, 0)], -1)
        ri[lnull] = -1
        return np.arange(n), ri.astype(np.int64)
    merged = left.merge(right, on="k", how="left", sort=False)
    li = merged["li"].to_numpy(dtype=np.int64)
    ri = merged["ri"].fillna(-1).to_numpy(dtype=np.int64)
    ri[lnull[li]] = -1
    return li, ri
