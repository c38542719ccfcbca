"""Column profiles and join / union candidate lookup.

Join candidates are found by MinHash containment of key-value sets, union
candidates by syntactic schema matching on normalized column names.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .relation import KEY, NUMERIC, AccessLabel, Relation

K_HASHES = 128
TAU_JOIN = 0.7
TAU_UNION = 0.8
PROFILE_SEED = 0x5EED
_MAGIC = b"PROFv1\x00\x00"
_EMPTY_SLOT = np.iinfo(np.uint64).max


def normalize_name(name: str) -> str:
    """Lowercase alphanumerics only; one-hot suffixes ``=value`` are kept."""
    if "=" in name:
        col, _, val = name.partition("=")
        return re.sub(r"[^0-9a-z]", "", col.lower()) + "=" + val
    return re.sub(r"[^0-9a-z]", "", name.lower())


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _hash_values(values: Iterable) -> np.ndarray:
    vals = pd.unique(np.array([str(v) for v in values if v is not None], dtype=object))
    if len(vals) == 0:
        return np.zeros(0, dtype=np.uint64)
    return pd.util.hash_array(np.asarray(vals, dtype=object), categorize=False)


def minhash(values: Iterable, k: int = K_HASHES, seed: int = PROFILE_SEED) -> Tuple[np.ndarray, int]:
    """``(signature, distinct_count)`` of the non-null values (as strings)."""
    h = _hash_values(values)
    sig = np.full(k, _EMPTY_SLOT, dtype=np.uint64)
    if len(h) == 0:
        return sig, 0
    salts = _mix(np.arange(1, k + 1, dtype=np.uint64) * np.uint64(0x9E3779B97F4A7C15) + np.uint64(seed))
    block = max(1, 2_000_000 // k)
    for lo in range(0, len(h), block):
        part = _mix(h[lo:lo + block][:, None] ^ salts[None, :])
        sig = np.minimum(sig, part.min(axis=0))
    return sig, int(len(h))


def containment(sig_a, n_a: int, sig_b, n_b: int) -> float:
    """Estimated |A ∩ B| / |A| from two MinHash signatures."""
    if n_a == 0 or n_b == 0:
        return 0.0
    j = float(np.mean(np.asarray(sig_a) == np.asarray(sig_b)))
    return float(min(1.0, j * (n_a + n_b) / ((1.0 + j) * n_a)))


@dataclass
class DiscoveryProfile:
    k: int
    seed: int
    keys: Dict[str, Tuple[np.ndarray, int]]
    fingerprint: frozenset  # {(normalized name, dtype)}
    numeric: Dict[str, Tuple[float, float, float]] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        names = sorted(self.keys)
        header = {"k": self.k, "seed": self.seed,
                  "keys": [[n, self.keys[n][1]] for n in names],
                  "fingerprint": sorted([list(p) for p in self.fingerprint]),
                  "numeric": {n: list(v) for n, v in sorted(self.numeric.items())}}
        hdr = json.dumps(header, separators=(",", ":")).encode("utf-8")
        sigs = b"".join(np.asarray(self.keys[n][0], dtype="<u8").tobytes() for n in names)
        return _MAGIC + struct.pack("<I", len(hdr)) + hdr + sigs

    @classmethod
    def from_bytes(cls, data: bytes) -> "DiscoveryProfile":
        if data[:8] != _MAGIC:
            raise ValueError("not a profile file")
        (hlen,) = struct.unpack_from("<I", data, 8)
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        pos = 12 + hlen
        k = header["k"]
        keys = {}
        for name, distinct in header["keys"]:
            sig = np.frombuffer(data, dtype="<u8", count=k, offset=pos).astype(np.uint64)
            pos += 8 * k
            keys[name] = (sig, int(distinct))
        return cls(k, header["seed"], keys, frozenset(tuple(p) for p in header["fingerprint"]),
                   {n: tuple(v) for n, v in header["numeric"].items()})


def profile(r: Relation, k: int = K_HASHES, seed: int = PROFILE_SEED,
            raw_schema: Optional[Sequence] = None) -> DiscoveryProfile:
    """Profile a typed relation.

    ``raw_schema`` (pre-preprocessing columns) is used for the schema
    fingerprint when ``r`` has already been preprocessed.
    """
    keys = {c: minhash(r[c], k, seed) for c in r.names_of(KEY)}
    cols = raw_schema if raw_schema is not None else r.schema
    fp = frozenset((normalize_name(c.name), c.dtype) for c in cols)
    numeric = {}
    for c in r.names_of(NUMERIC):
        v = r[c]
        v = v[~np.isnan(v)]
        if len(v):
            numeric[c] = (float(v.min()), float(v.max()), float(v.mean()))
    return DiscoveryProfile(k, seed, keys, fp, numeric)


@dataclass(frozen=True)
class AugmentationCandidate:
    kind: str  # "horizontal" | "vertical"
    dataset: str
    score: float
    join_key: Optional[str] = None   # column of the candidate dataset
    plan_key: Optional[str] = None   # plan column it joins to
    name_match: bool = False         # key names agree (always true for unions)

    def __post_init__(self):
        if (self.kind == "vertical") != (self.join_key is not None):
            raise ValueError("vertical candidates need a join key, horizontal ones must not have one")


@dataclass
class PlanProfile:
    """What discovery needs to know about the current plan."""
    keys: Dict[str, Tuple[np.ndarray, int]]  # plan key name -> signature
    fingerprint: frozenset                   # union schema of the base table
    target: str
    used: frozenset = frozenset()


class DiscoveryIndex:
    """Stacked key signatures of every corpus entry for vectorised lookup."""

    def __init__(self, entries: Iterable, k: int = K_HASHES):
        rows, owners, cols, distinct = [], [], [], []
        self.labels: Dict[str, AccessLabel] = {}
        self.fingerprints: Dict[str, frozenset] = {}
        for e in entries:
            self.labels[e.name] = e.label
            self.fingerprints[e.name] = e.profile.fingerprint
            if e.profile.k != k:
                raise ValueError(f"{e.name}: profile has {e.profile.k} hashes, index expects {k}")
            for col, (sig, n) in sorted(e.profile.keys.items()):
                rows.append(sig)
                owners.append(e.name)
                cols.append(col)
                distinct.append(n)
        self.k = k
        self.sigs = np.vstack(rows) if rows else np.zeros((0, k), dtype=np.uint64)
        self.owners = np.array(owners, dtype=object)
        self.cols = np.array(cols, dtype=object)
        self.distinct = np.array(distinct, dtype=np.float64)

    def containment(self, sig: np.ndarray, n: int) -> np.ndarray:
        if n == 0 or len(self.sigs) == 0:
            return np.zeros(len(self.sigs))
        j = (self.sigs == sig[None, :]).mean(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            est = j * (n + self.distinct) / ((1.0 + j) * n)
        est[self.distinct == 0] = 0.0
        return np.clip(est, 0.0, 1.0)


def find_candidates(index: DiscoveryIndex, plan: PlanProfile, min_return: AccessLabel,
                    vertical_allowed: bool, horizontal_allowed: bool = True,
                    tau_join: float = TAU_JOIN, tau_union: float = TAU_UNION) -> List[AugmentationCandidate]:
    """Join and union candidates for the plan, honoring the access filter."""
    out: List[AugmentationCandidate] = []
    allowed = {n for n, l in index.labels.items() if l <= min_return and n not in plan.used}
    if horizontal_allowed and plan.fingerprint:
        tgt = normalize_name(plan.target)
        for name in sorted(allowed):
            fp = index.fingerprints[name]
            if not any(p[0] == tgt for p in fp):
                continue
            cover = len(plan.fingerprint & fp) / len(plan.fingerprint)
            if cover >= tau_union:
                out.append(AugmentationCandidate("horizontal", name, float(cover), name_match=True))
    if vertical_allowed:
        ok = np.array([o in allowed for o in index.owners], dtype=bool)
        for pk in sorted(plan.keys):
            sig, n = plan.keys[pk]
            est = index.containment(sig, n)
            base = normalize_name(pk.rsplit(".", 1)[-1])
            for i in np.flatnonzero(ok & (est >= tau_join)):
                out.append(AugmentationCandidate("vertical", index.owners[i], float(est[i]),
                                                 join_key=index.cols[i], plan_key=pk,
                                                 name_match=normalize_name(index.cols[i]) == base))
    # Value overlap alone cannot tell apart keys drawn from one shared domain
    # (e.g. integer ids), so name agreement ranks first.
    out.sort(key=lambda c: (not c.name_match, -c.score, c.dataset, c.plan_key or "", c.join_key or ""))
    return out
