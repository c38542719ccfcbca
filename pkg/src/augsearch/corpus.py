"""Registered tables with their sketches, profiles and access labels.

On disk a corpus is a directory with one subdirectory per entry holding
``rows.csv`` (preprocessed rows), ``metadata.json``, ``sketches.bin`` and
``profile.bin``.  Mutations take an exclusive lock on ``.lock``.
"""

from __future__ import annotations

import contextlib
import fcntl
import json
import os
import re
import shutil
import tempfile
from collections import Counter
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import numpy as np

from . import discovery
from .grouped import GroupedGram
from .relation import (KEY, NUMERIC, AccessLabel, Column, DataError, PreprocessStats, Relation,
                       preprocess, read_csv_typed, replay, write_csv)
from .sketch import KeyedGram, SketchSet, build_sketches, update_sketches

_NAME = re.compile(r"^[A-Za-z0-9_][A-Za-z0-9_.\-]*$")


class CorpusError(Exception):
    pass


class CorpusEntry:
    """One registered table.  ``relation`` holds preprocessed rows and is
    loaded lazily for entries read from disk."""

    def __init__(self, name: str, label: AccessLabel, stats: PreprocessStats, raw_schema: List[Column],
                 sketches: SketchSet, profile: discovery.DiscoveryProfile,
                 relation: Optional[Relation] = None, stored_schema: Optional[List[Column]] = None,
                 path: Optional[Path] = None, row_count: Optional[int] = None):
        self.name = name
        self.label = AccessLabel.parse(label)
        self.stats = stats
        self.raw_schema = list(raw_schema)
        self.sketches = sketches
        self.profile = profile
        self._relation = relation
        self.stored_schema = list(stored_schema if stored_schema is not None else relation.schema)
        self.path = path
        self.row_count = row_count if row_count is not None else relation.row_count
        self._memo: Dict[tuple, object] = {}

    def __repr__(self) -> str:
        return f"CorpusEntry({self.name!r}, {self.label.name}, rows={self.row_count})"

    @property
    def relation(self) -> Relation:
        if self._relation is None:
            self._relation = read_csv_typed(self.path / "rows.csv", self.name, self.stored_schema)
        return self._relation

    @property
    def features(self) -> List[str]:
        return [c.name for c in self.stored_schema if c.dtype == NUMERIC]

    @property
    def keys(self) -> List[str]:
        return [c.name for c in self.stored_schema if c.dtype == KEY]

    def grouped(self, cols) -> GroupedGram:
        """Gram aggregates grouped by several key columns (memoized)."""
        cols = tuple(cols)
        hit = self._memo.get(("grouped", cols))
        if hit is None:
            if len(cols) == 1 and cols[0] in self.sketches.keyed:
                hit = self.sketches.keyed[cols[0]]
            else:
                r = self.relation
                names = list(self.sketches.space.names)
                hit = GroupedGram.from_rows(r.matrix(names), self.sketches.space, {c: r[c] for c in cols})
            self._memo[("grouped", cols)] = hit
        return hit

    def prefixed_view(self, key: str, prefix: str) -> KeyedGram:
        """Re-weighted keyed aggregate with features renamed ``prefix.col``."""
        hit = self._memo.get(("view", key, prefix))
        if hit is None:
            v = self.sketches.join_view(key)
            hit = v.rename_features({n: f"{prefix}.{n}" for n in v.space.names})
            self._memo[("view", key, prefix)] = hit
        return hit

    def metadata(self) -> dict:
        return {
            "name": self.name,
            "label": self.label.name,
            "schema": self.stats.to_json(),
            "row_count": self.row_count,
            "stored_schema": [{"name": c.name, "dtype": c.dtype} for c in self.stored_schema],
            "raw_schema": [{"name": c.name, "dtype": c.dtype} for c in self.raw_schema],
        }


def build_entry(r: Relation, label, stats: Optional[PreprocessStats] = None,
                raw_schema: Optional[List[Column]] = None, one_hot_max: int = 20,
                k: int = discovery.K_HASHES) -> CorpusEntry:
    """Preprocess (unless ``stats`` is given), sketch and profile a table."""
    label = AccessLabel.parse(label)
    if stats is None:
        raw_schema = r.schema
        r, stats = preprocess(r, one_hot_max)
    elif raw_schema is None:
        raw_schema = [Column(t.name, t.dtype) for t in stats.columns]
    if r.row_count == 0:
        raise DataError(f"{r.name}: no rows")
    sk = build_sketches(r, fold_count=1)
    prof = discovery.profile(r, k=k, raw_schema=raw_schema)
    return CorpusEntry(r.name, label, stats, raw_schema, sk, prof, relation=r)


class Corpus:
    """In-memory view of a corpus, optionally backed by a directory."""

    def __init__(self, root: Optional[os.PathLike] = None, k: int = discovery.K_HASHES):
        self.root = Path(root) if root is not None else None
        self.k = k
        self.entries: Dict[str, CorpusEntry] = {}
        self._index: Optional[discovery.DiscoveryIndex] = None
        self.version = 0

    # -- read side ----------------------------------------------------------

    @classmethod
    def open(cls, root: os.PathLike, create: bool = True) -> "Corpus":
        root = Path(root)
        if not root.exists():
            if not create:
                raise CorpusError(f"corpus directory {root} does not exist")
            root.mkdir(parents=True)
        c = cls(root)
        for sub in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")):
            meta_path = sub / "metadata.json"
            if not meta_path.exists():
                continue
            c.entries[sub.name] = _load_entry(sub)
        ks = {e.profile.k for e in c.entries.values()}
        if len(ks) > 1:
            raise CorpusError(f"mixed MinHash signature lengths in corpus: {sorted(ks)}")
        if ks:
            c.k = ks.pop()
        return c

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[CorpusEntry]:
        return iter(self.entries[n] for n in sorted(self.entries))

    def get(self, name: str) -> CorpusEntry:
        try:
            return self.entries[name]
        except KeyError:
            raise CorpusError(f"unknown corpus entry {name!r}") from None

    def names(self) -> List[str]:
        return sorted(self.entries)

    @property
    def index(self) -> discovery.DiscoveryIndex:
        if self._index is None:
            self._index = discovery.DiscoveryIndex(self, self.k)
        return self._index

    # -- write side ---------------------------------------------------------

    @contextlib.contextmanager
    def lock(self):
        if self.root is None:
            yield
            return
        fh = open(self.root / ".lock", "a+")
        try:
            fcntl.flock(fh, fcntl.LOCK_EX)
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)
            fh.close()

    def _changed(self):
        self._index = None
        self.version += 1

    def register(self, r: Relation, label, stats: Optional[PreprocessStats] = None,
                 raw_schema: Optional[List[Column]] = None) -> CorpusEntry:
        """Preprocess, sketch, profile and persist ``r``.  All or nothing."""
        name = r.name
        if not _NAME.match(name or ""):
            raise CorpusError(f"invalid entry name {name!r}")
        if name in self.entries:
            raise CorpusError(f"corpus already has an entry named {name!r}")
        entry = build_entry(r, label, stats, raw_schema, k=self.k)
        with self.lock():
            if self.root is not None:
                if (self.root / name).exists():
                    raise CorpusError(f"corpus already has an entry named {name!r}")
                _persist(entry, self.root)
            self.entries[name] = entry
        self._changed()
        return entry

    def remove(self, name: str) -> None:
        self.get(name)
        with self.lock():
            if self.root is not None:
                shutil.rmtree(self.root / name)
            del self.entries[name]
        self._changed()

    def update(self, name: str, inserted: Relation, deleted: Relation) -> CorpusEntry:
        """Insert and delete rows, maintaining sketches incrementally.

        Inputs may be in the stored (preprocessed) layout or in the raw
        layout of the registered table, in which case the recorded
        preprocessing is replayed.  Stored statistics are not refit.
        """
        old = self.get(name)
        ins = self._stored_layout(old, inserted)
        dele = self._stored_layout(old, deleted)
        current = old.relation
        rows = _row_tuples(current)
        pool = Counter(rows)
        drop = Counter(_row_tuples(dele))
        for t, n in drop.items():
            if pool[t] < n:
                raise DataError(f"{name}: deleted row {t} is not present")
        keep, seen = [], Counter()
        for i, t in enumerate(rows):
            if seen[t] < drop[t]:
                seen[t] += 1
                continue
            keep.append(i)
        kept = current.take(np.array(keep, dtype=np.int64))
        data = {n: np.concatenate([kept[n], ins[n]]) for n in current.names}
        new_rel = Relation(name, [Column(c.name, c.dtype) for c in current.schema], data)
        new_rel = new_rel.take(np.arange(new_rel.row_count))
        sk = update_sketches(old.sketches, ins, dele)
        prof = discovery.profile(new_rel, k=self.k, raw_schema=old.raw_schema)
        entry = CorpusEntry(name, old.label, old.stats, old.raw_schema, sk, prof, relation=new_rel)
        with self.lock():
            if self.root is not None:
                _persist(entry, self.root, replace=True)
            self.entries[name] = entry
        self._changed()
        return entry

    @staticmethod
    def _stored_layout(entry: CorpusEntry, r: Relation) -> Relation:
        stored = [(c.name, c.dtype) for c in entry.stored_schema]
        if [(c.name, c.dtype) for c in r.schema] == stored:
            return r
        if sorted(c.name for c in r.schema) == sorted(c.name for c in entry.raw_schema):
            out = replay(r, entry.stats)
            if [(c.name, c.dtype) for c in out.schema] == stored:
                return out
        raise DataError(f"{entry.name}: schema {r.names} does not match the registered table")


def _row_tuples(r: Relation) -> List[tuple]:
    cols = [r[n].tolist() for n in r.names]
    return list(zip(*cols)) if cols else []


def _persist(entry: CorpusEntry, root: Path, replace: bool = False) -> None:
    tmp = Path(tempfile.mkdtemp(prefix=f".{entry.name}.", dir=root))
    try:
        write_csv(entry.relation, tmp / "rows.csv")
        (tmp / "sketches.bin").write_bytes(entry.sketches.to_bytes())
        (tmp / "profile.bin").write_bytes(entry.profile.to_bytes())
        (tmp / "metadata.json").write_text(json.dumps(entry.metadata(), indent=1, sort_keys=True))
        final = root / entry.name
        if replace and final.exists():
            old = root / f".{entry.name}.old"
            shutil.rmtree(old, ignore_errors=True)
            final.rename(old)
            tmp.rename(final)
            shutil.rmtree(old)
        else:
            tmp.rename(final)
        entry.path = final
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _load_entry(path: Path) -> CorpusEntry:
    meta = json.loads((path / "metadata.json").read_text())
    stored = [Column(c["name"], c["dtype"]) for c in meta["stored_schema"]]
    raw = [Column(c["name"], c["dtype"]) for c in meta["raw_schema"]]
    sk = SketchSet.from_bytes((path / "sketches.bin").read_bytes())
    prof = discovery.DiscoveryProfile.from_bytes((path / "profile.bin").read_bytes())
    return CorpusEntry(meta["name"], meta["label"], PreprocessStats.from_json(meta["schema"]), raw, sk, prof,
                       stored_schema=stored, path=path, row_count=meta["row_count"])
