"""Gram-matrix semi-ring.

An annotation is a triple ``(c, s, Q)``: a (real-valued) tuple count, the
per-feature sums and the matrix of pairwise product sums.  Addition is
element-wise and corresponds to union / group-by; multiplication combines
annotations over disjoint feature sets and corresponds to a join.

All values are immutable; arrays are marked read-only on construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

_MAGIC = b"GRAM"


class SpaceMismatch(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpace:
    """Ordered, canonical (sorted) set of feature names."""

    names: tuple

    def __post_init__(self):
        names = tuple(sorted(self.names))
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate feature names in {names}")
        object.__setattr__(self, "names", names)

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name) -> bool:
        return name in self._index

    def __iter__(self):
        return iter(self.names)

    @property
    def _index(self) -> dict:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {n: i for i, n in enumerate(self.names)}
            object.__setattr__(self, "_idx", idx)
        return idx

    def index(self, name: str) -> int:
        return self._index[name]

    def indices(self, names: Iterable[str]) -> np.ndarray:
        return np.array([self._index[n] for n in names], dtype=np.intp)

    def union(self, other: "FeatureSpace") -> "FeatureSpace":
        return FeatureSpace(tuple(set(self.names) | set(other.names)))

    def issubset(self, other: "FeatureSpace") -> bool:
        return all(n in other for n in self.names)

    def disjoint(self, other: "FeatureSpace") -> bool:
        return not (set(self.names) & set(other.names))


EMPTY = FeatureSpace(())


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def _mirror_upper(Q: np.ndarray) -> np.ndarray:
    """Exactly symmetric copy built from the upper triangle."""
    up = np.triu(Q)
    return up + np.triu(Q, 1).swapaxes(-1, -2)


class GramRing:
    """A single gram-matrix annotation over a :class:`FeatureSpace`."""

    __slots__ = ("c", "s", "Q", "space")

    def __init__(self, c: float, s, Q, space: FeatureSpace):
        m = len(space)
        s = _frozen(s).reshape(m)
        Q = _frozen(Q).reshape(m, m)
        self.c = float(c)
        self.s = s
        self.Q = Q
        self.space = space

    # -- construction -------------------------------------------------------

    @classmethod
    def zero(cls, space: FeatureSpace = EMPTY) -> "GramRing":
        m = len(space)
        return cls(0.0, np.zeros(m), np.zeros((m, m)), space)

    @classmethod
    def one(cls, space: FeatureSpace = EMPTY) -> "GramRing":
        m = len(space)
        return cls(1.0, np.zeros(m), np.zeros((m, m)), space)

    @classmethod
    def from_rows(cls, rows, space: FeatureSpace, weights=None) -> "GramRing":
        """Aggregate a row block ``rows`` (n x m).  Optional per-row weights
        scale each row's annotation (used for re-weighted joins)."""
        X = np.asarray(rows, dtype=np.float64)
        m = len(space)
        if X.size == 0:
            X = X.reshape(0, m)
        if X.ndim != 2 or X.shape[1] != m:
            raise SpaceMismatch(f"row width {X.shape} does not match space of size {m}")
        if weights is None:
            c = X.shape[0]
            s = X.sum(axis=0)
            Q = X.T @ X
        else:
            w = np.asarray(weights, dtype=np.float64)
            c = w.sum()
            s = w @ X
            Q = (X * w[:, None]).T @ X
        return cls(c, s, _mirror_upper(Q), space)

    # -- algebra ------------------------------------------------------------

    def _check_same(self, other: "GramRing"):
        if self.space != other.space:
            raise SpaceMismatch(f"{self.space.names} != {other.space.names}")

    def __add__(self, other: "GramRing") -> "GramRing":
        self._check_same(other)
        return GramRing(self.c + other.c, self.s + other.s, self.Q + other.Q, self.space)

    def __sub__(self, other: "GramRing") -> "GramRing":
        # Not a semi-ring operation; used only for incremental deletes.
        self._check_same(other)
        return GramRing(self.c - other.c, self.s - other.s, self.Q - other.Q, self.space)

    def __mul__(self, other: "GramRing") -> "GramRing":
        a, b = self, other
        if not a.space.disjoint(b.space):
            overlap = sorted(set(a.space.names) & set(b.space.names))
            raise SpaceMismatch(f"cannot multiply overlapping feature spaces: {overlap}")
        m1 = len(a.space)
        names = a.space.names + b.space.names
        s = np.concatenate([b.c * a.s, a.c * b.s])
        Q = np.empty((len(names), len(names)))
        Q[:m1, :m1] = b.c * a.Q
        Q[m1:, m1:] = a.c * b.Q
        cross = np.outer(a.s, b.s)
        Q[:m1, m1:] = cross
        Q[m1:, :m1] = cross.T
        out = FeatureSpace(names)
        perm = np.argsort(np.array(names, dtype=object), kind="stable") if names else np.zeros(0, int)
        return GramRing(a.c * b.c, s[perm], Q[np.ix_(perm, perm)], out)

    def __repr__(self) -> str:
        return f"GramRing(c={self.c:g}, m={len(self.space)}, space={list(self.space.names)})"

    # -- layout -------------------------------------------------------------

    def align(self, target: FeatureSpace) -> "GramRing":
        """Embed into a larger space; absent features get zero sums."""
        if not self.space.issubset(target):
            missing = sorted(set(self.space.names) - set(target.names))
            raise SpaceMismatch(f"features {missing} not in target space")
        if target == self.space:
            return self
        idx = target.indices(self.space.names)
        m = len(target)
        s = np.zeros(m)
        Q = np.zeros((m, m))
        s[idx] = self.s
        Q[np.ix_(idx, idx)] = self.Q
        return GramRing(self.c, s, Q, target)

    def project(self, names: Sequence[str]) -> "GramRing":
        """Marginalise onto a subset of features."""
        sub = FeatureSpace(tuple(names))
        idx = self.space.indices(sub.names)
        return GramRing(self.c, self.s[idx], self.Q[np.ix_(idx, idx)], sub)

    def rename(self, mapping: dict) -> "GramRing":
        names = [mapping.get(n, n) for n in self.space.names]
        out = FeatureSpace(tuple(names))
        perm = np.array([names.index(n) for n in out.names], dtype=np.intp)
        return GramRing(self.c, self.s[perm], self.Q[np.ix_(perm, perm)], out)

    def affine(self, offset, scale) -> "GramRing":
        """Annotation of the same rows after ``x -> offset + scale * x``."""
        a = np.asarray(offset, dtype=np.float64)
        b = np.asarray(scale, dtype=np.float64)
        bs = b * self.s
        Q = self.c * np.outer(a, a) + np.outer(a, bs) + np.outer(bs, a) + self.Q * np.outer(b, b)
        return GramRing(self.c, self.c * a + bs, _mirror_upper(Q), self.space)

    def reweight(self) -> "GramRing":
        if self.c == 0:
            raise ZeroDivisionError("cannot re-weight an annotation with zero count")
        return GramRing(1.0, self.s / self.c, self.Q / self.c, self.space)

    # -- comparison / io ----------------------------------------------------

    def allclose(self, other: "GramRing", rtol: float = 1e-9, atol: float = 1e-12) -> bool:
        if self.space != other.space:
            return False
        scale = max(1.0, abs(self.c), float(np.abs(self.Q).max(initial=0.0)),
                    float(np.abs(self.s).max(initial=0.0)))
        tol = atol + rtol * scale
        return (abs(self.c - other.c) <= tol
                and bool(np.all(np.abs(self.s - other.s) <= tol))
                and bool(np.all(np.abs(self.Q - other.Q) <= tol)))

    def to_bytes(self) -> bytes:
        m = len(self.space)
        parts = [_MAGIC, struct.pack("<I", m)]
        for n in self.space.names:
            raw = n.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
        iu = np.triu_indices(m)
        body = np.concatenate([[self.c], self.s, self.Q[iu]]).astype("<f8")
        parts.append(body.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "GramRing":
        g, _ = cls._read(memoryview(data), 0)
        return g

    @classmethod
    def _read(cls, buf, pos: int):
        if bytes(buf[pos:pos + 4]) != _MAGIC:
            raise ValueError("not a gram record")
        (m,) = struct.unpack_from("<I", buf, pos + 4)
        pos += 8
        names = []
        for _ in range(m):
            (ln,) = struct.unpack_from("<H", buf, pos)
            names.append(bytes(buf[pos + 2:pos + 2 + ln]).decode("utf-8"))
            pos += 2 + ln
        n_vals = 1 + m + m * (m + 1) // 2
        vals = np.frombuffer(buf, dtype="<f8", count=n_vals, offset=pos)
        pos += 8 * n_vals
        Q = np.zeros((m, m))
        Q[np.triu_indices(m)] = vals[1 + m:]
        return cls(vals[0], vals[1:1 + m], _mirror_upper(Q), FeatureSpace(tuple(names))), pos


def zero(space: FeatureSpace = EMPTY) -> GramRing:
    return GramRing.zero(space)


def one(space: FeatureSpace = EMPTY) -> GramRing:
    return GramRing.one(space)


def add(a: GramRing, b: GramRing) -> GramRing:
    return a + b


def sub(a: GramRing, b: GramRing) -> GramRing:
    return a - b


def mul(a: GramRing, b: GramRing) -> GramRing:
    return a * b


def from_rows(rows, space: FeatureSpace, weights=None) -> GramRing:
    return GramRing.from_rows(rows, space, weights)


def align(g: GramRing, target: FeatureSpace) -> GramRing:
    return g.align(target)


def reweight(g: GramRing) -> GramRing:
    return g.reweight()


def total(grams: Iterable[GramRing], space: FeatureSpace) -> GramRing:
    out = GramRing.zero(space)
    for g in grams:
        out = out + g
    return out
