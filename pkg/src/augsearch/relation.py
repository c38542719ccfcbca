"""Typed column-major relations: CSV ingestion, typing and preprocessing."""

from __future__ import annotations

import csv
import enum
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

NUMERIC = "numeric"
CATEGORICAL = "categorical"
KEY = "key"
DTYPES = (NUMERIC, CATEGORICAL, KEY)

NULL_TOKENS = frozenset({"", "na", "n/a", "nan", "null", "none"})
DEFAULT_KEY_SUFFIXES = ("id", "key", "code", "zip", "year", "date")
NUMERIC_FRACTION = 0.99
KEY_DISTINCT_RATIO = 0.5
KEY_MIN_VALUES = 20  # distinct ratios of tiny samples say nothing about keys
ONE_HOT_MAX = 20


class DataError(ValueError):
    """Input data cannot be ingested or does not match expectations."""


class AccessLabel(enum.IntEnum):
    RAW = 0
    MD = 1
    API = 2

    @classmethod
    def parse(cls, text) -> "AccessLabel":
        if isinstance(text, AccessLabel):
            return text
        try:
            return cls[str(text).strip().upper()]
        except KeyError:
            raise ValueError(f"invalid access label {text!r}; expected raw, md or api") from None

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Column:
    name: str
    dtype: str
    null_count: int = 0


class Relation:
    """A named table stored column-major.

    Numeric columns are float64 arrays with NaN for nulls; categorical and
    key columns are object arrays of ``str`` with ``None`` for nulls.
    """

    def __init__(self, name: str, schema: List[Column], data: Dict[str, np.ndarray]):
        names = [c.name for c in schema]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate column names in {name}: {names}")
        lengths = {len(data[n]) for n in names}
        if len(lengths) > 1:
            raise DataError(f"ragged columns in {name}: {lengths}")
        self.name = name
        self.schema = list(schema)
        self.data = {n: data[n] for n in names}
        self.row_count = lengths.pop() if lengths else 0

    def __repr__(self) -> str:
        return f"Relation({self.name!r}, rows={self.row_count}, cols={self.names})"

    @property
    def names(self) -> List[str]:
        return [c.name for c in self.schema]

    def column(self, name: str) -> Column:
        for c in self.schema:
            if c.name == name:
                return c
        raise KeyError(name)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.data[name]

    def __contains__(self, name: str) -> bool:
        return name in self.data

    def names_of(self, dtype: str) -> List[str]:
        return [c.name for c in self.schema if c.dtype == dtype]

    def matrix(self, names) -> np.ndarray:
        if not names:
            return np.zeros((self.row_count, 0))
        return np.column_stack([np.asarray(self.data[n], dtype=np.float64) for n in names])

    def take(self, idx, name: Optional[str] = None) -> "Relation":
        idx = np.asarray(idx)
        data = {n: v[idx] for n, v in self.data.items()}
        return Relation(name or self.name, _recount(self.schema, data), data)

    def with_name(self, name: str) -> "Relation":
        return Relation(name, self.schema, self.data)

    def equals(self, other: "Relation") -> bool:
        if self.names != other.names or [c.dtype for c in self.schema] != [c.dtype for c in other.schema]:
            return False
        for n in self.names:
            a, b = self.data[n], other.data[n]
            if a.dtype == object or b.dtype == object:
                if list(a) != list(b):
                    return False
            elif not np.array_equal(a, b, equal_nan=True):
                return False
        return True

    @classmethod
    def from_columns(cls, name: str, columns: Dict[str, object], dtypes: Optional[Dict[str, str]] = None) -> "Relation":
        """Build a relation from in-memory columns; dtypes default to numeric."""
        dtypes = dtypes or {}
        schema, data = [], {}
        for n, values in columns.items():
            dt = dtypes.get(n, NUMERIC)
            if dt == NUMERIC:
                arr = np.asarray(values, dtype=np.float64)
            else:
                arr = np.array([_norm_token(v, dt) for v in values], dtype=object)
            data[n] = arr
            schema.append(Column(n, dt, _null_count(arr)))
        return cls(name, schema, data)


def _null_count(arr: np.ndarray) -> int:
    if arr.dtype == object:
        return int(sum(v is None for v in arr))
    return int(np.isnan(arr).sum())


def _recount(schema, data):
    return [Column(c.name, c.dtype, _null_count(data[c.name])) for c in schema]


def _norm_token(v, dtype: str):
    if v is None:
        return None
    if isinstance(v, float) and math.isnan(v):
        return None
    if dtype == KEY:
        return normalize_key(v)
    s = str(v).strip()
    return None if s.lower() in NULL_TOKENS else s


def normalize_key(v) -> Optional[str]:
    """Canonical string form for join-key values: integral numbers lose
    any fractional zeros so ``7``, ``7.0`` and ``"7"`` all compare equal."""
    if v is None:
        return None
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        if math.isnan(v):
            return None
        return str(int(v)) if float(v).is_integer() else repr(float(v))
    s = str(v).strip()
    if s.lower() in NULL_TOKENS:
        return None
    try:
        f = float(s)
    except ValueError:
        return s
    if math.isfinite(f) and f.is_integer() and abs(f) < 2**63:
        return str(int(f))
    return s


def _normalize_key_array(raw: np.ndarray) -> np.ndarray:
    """Vectorised :func:`normalize_key` over an array of CSV tokens."""
    s = pd.Series(raw, dtype=object).str.strip()
    out = s.where(~s.str.lower().isin(NULL_TOKENS), None)
    num = pd.to_numeric(out, errors="coerce")
    integral = num.notna() & np.isfinite(num) & (num == np.floor(num)) & (num.abs() < 2**53)
    if integral.any():
        out = out.copy()
        out[integral] = num[integral].astype(np.int64).astype(str)
    arr = out.to_numpy(dtype=object)
    arr[pd.isna(arr)] = None
    return arr


def _name_tokens(name: str) -> List[str]:
    spaced = re.sub(r"([a-z0-9])([A-Z])", r"\1 \2", name)
    return [t for t in re.split(r"[^A-Za-z0-9]+", spaced.lower()) if t]


def is_key_name(name: str, suffixes=DEFAULT_KEY_SUFFIXES) -> bool:
    tokens = _name_tokens(name)
    return bool(tokens) and tokens[-1] in suffixes


def infer_dtype(name: str, raw: np.ndarray, key_suffixes=DEFAULT_KEY_SUFFIXES) -> str:
    """Typing rules: numeric when >= 99% of non-null tokens parse as numbers;
    key-candidate when integer- or string-valued with distinct ratio >= 0.5,
    or when the name ends in a key-like token; otherwise categorical.  The
    distinct-ratio rule needs at least ``KEY_MIN_VALUES`` non-null values."""
    s = pd.Series(raw, dtype=object).str.strip()
    non_null = s[~s.str.lower().isin(NULL_TOKENS)]
    if is_key_name(name, key_suffixes):
        return KEY
    if len(non_null) == 0:
        return CATEGORICAL
    num = pd.to_numeric(non_null, errors="coerce")
    frac = float(num.notna().mean())
    distinct_ratio = non_null.nunique() / len(non_null) if len(non_null) >= KEY_MIN_VALUES else 0.0
    if frac >= NUMERIC_FRACTION:
        vals = num.dropna().to_numpy()
        integer_valued = bool(np.all(vals == np.floor(vals)))
        if integer_valued and distinct_ratio >= KEY_DISTINCT_RATIO:
            return KEY
        return NUMERIC
    if distinct_ratio >= KEY_DISTINCT_RATIO:
        return KEY
    return CATEGORICAL


def _typed(raw: np.ndarray, dtype: str) -> np.ndarray:
    if dtype == NUMERIC:
        s = pd.Series(raw, dtype=object).str.strip()
        return pd.to_numeric(s, errors="coerce").to_numpy(dtype=np.float64)
    if dtype == KEY:
        return _normalize_key_array(raw)
    s = pd.Series(raw, dtype=object).str.strip()
    arr = s.where(~s.str.lower().isin(NULL_TOKENS), None).to_numpy(dtype=object)
    arr[pd.isna(arr)] = None
    return arr


def ingest(path, name: str, force: Optional[Dict[str, str]] = None,
           key_suffixes=DEFAULT_KEY_SUFFIXES) -> Relation:
    """Read a CSV file with a header row into a typed :class:`Relation`.

    ``force`` overrides the inferred dtype of specific columns (the request
    target is always forced numeric)."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(1)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if not head:
        raise DataError(f"{path} is empty")
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            header = [h.strip() for h in next(csv.reader(fh))]
        df = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    except (pd.errors.ParserError, UnicodeDecodeError, pd.errors.EmptyDataError, StopIteration) as e:
        raise DataError(f"cannot parse {path}: {e}") from e
    if len(set(header)) != len(header):
        raise DataError(f"duplicate column names in {path}: {header}")
    if len(df) == 0:
        raise DataError(f"{path} has no data rows")
    df.columns = header
    force = force or {}
    schema, data = [], {}
    for col in header:
        raw = df[col].to_numpy(dtype=object)
        dtype = force.get(col) or infer_dtype(col, raw, key_suffixes)
        arr = _typed(raw, dtype)
        data[col] = arr
        schema.append(Column(col, dtype, _null_count(arr)))
    return Relation(name, schema, data)


def retype(r: Relation, col: str, dtype: str) -> Relation:
    """Re-type one column (e.g. force the target to be numeric)."""
    cur = r.column(col)
    if cur.dtype == dtype:
        return r
    arr = r[col]
    if dtype == NUMERIC:
        if arr.dtype == object:
            new = pd.to_numeric(pd.Series(arr, dtype=object), errors="coerce").to_numpy(dtype=np.float64)
        else:
            new = arr
    else:
        new = np.array([_norm_token(v, dtype) for v in arr], dtype=object)
    data = dict(r.data)
    data[col] = new
    schema = [Column(c.name, dtype, _null_count(new)) if c.name == col else c for c in r.schema]
    return Relation(r.name, schema, data)


# -- preprocessing ---------------------------------------------------------

@dataclass
class ColumnTransform:
    """How one input column was transformed; enough to replay it."""
    name: str
    dtype: str
    action: str  # standardize | onehot | key | drop-zero-variance | drop-cardinality | drop-empty
    mean: float = 0.0
    std: float = 1.0
    impute: object = None
    categories: List[str] = field(default_factory=list)

    def outputs(self) -> List[str]:
        if self.action == "standardize":
            return [self.name]
        if self.action == "onehot":
            return [onehot_name(self.name, v) for v in self.categories]
        return []


def onehot_name(col: str, value: str) -> str:
    return f"{col}={value}"


@dataclass
class PreprocessStats:
    columns: List[ColumnTransform]

    def by_name(self) -> Dict[str, ColumnTransform]:
        return {t.name: t for t in self.columns}

    def affine(self) -> Dict[str, tuple]:
        """Output feature -> (mean, std) such that raw = mean + std * stored.
        One-hot indicators are stored raw, i.e. (0, 1)."""
        out = {}
        for t in self.columns:
            if t.action == "standardize":
                out[t.name] = (t.mean, t.std)
            elif t.action == "onehot":
                for n in t.outputs():
                    out[n] = (0.0, 1.0)
            elif t.action == "drop-zero-variance":
                out[t.name] = (t.mean, 0.0)
        return out

    def to_json(self) -> list:
        return [
            {"name": t.name, "dtype": t.dtype, "mean": t.mean, "std": t.std,
             "impute": t.impute, "action": t.action, "categories": list(t.categories)}
            for t in self.columns
        ]

    @classmethod
    def from_json(cls, items: list) -> "PreprocessStats":
        return cls([ColumnTransform(d["name"], d["dtype"], d.get("action", "standardize"),
                                    float(d.get("mean") or 0.0), float(d.get("std") if d.get("std") is not None else 1.0),
                                    d.get("impute"), list(d.get("categories", [])))
                    for d in items])


# Optional extra feature transforms (PCA, polynomial, ...) keyed by name.
# Nothing is registered by default.
TRANSFORMS: Dict[str, Callable[[Relation], Relation]] = {}


def preprocess(r: Relation, one_hot_max: int = ONE_HOT_MAX) -> tuple:
    """Impute, standardize and one-hot encode a typed relation.

    Returns ``(relation, stats)``.  Numeric columns are mean-imputed and
    scaled to mean 0 / population stddev 1; zero-variance numerics are
    dropped.  Categoricals are mode-imputed and one-hot encoded when their
    cardinality is at most ``one_hot_max``, otherwise dropped.  Key columns
    pass through unchanged.
    """
    transforms = []
    schema, data = [], {}
    for col in r.schema:
        v = r[col.name]
        if col.dtype == KEY:
            transforms.append(ColumnTransform(col.name, KEY, "key"))
            schema.append(col)
            data[col.name] = v
        elif col.dtype == NUMERIC:
            ok = ~np.isnan(v)
            if not ok.any():
                transforms.append(ColumnTransform(col.name, NUMERIC, "drop-empty"))
                continue
            mean = float(v[ok].mean())
            filled = np.where(ok, v, mean)
            std = float(np.sqrt(np.mean((filled - mean) ** 2)))
            if std <= 1e-12 * max(1.0, abs(mean)):
                transforms.append(ColumnTransform(col.name, NUMERIC, "drop-zero-variance", mean, 0.0, mean))
                continue
            transforms.append(ColumnTransform(col.name, NUMERIC, "standardize", mean, std, mean))
            schema.append(Column(col.name, NUMERIC, 0))
            data[col.name] = (filled - mean) / std
        else:
            present = [x for x in v if x is not None]
            if not present:
                transforms.append(ColumnTransform(col.name, CATEGORICAL, "drop-empty"))
                continue
            counts = pd.Series(present, dtype=object).value_counts(sort=False)
            mode = str(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0])
            cats = sorted(counts.index.astype(str))
            if len(cats) > one_hot_max:
                transforms.append(ColumnTransform(col.name, CATEGORICAL, "drop-cardinality", impute=mode))
                continue
            t = ColumnTransform(col.name, CATEGORICAL, "onehot", impute=mode, categories=cats)
            transforms.append(t)
            filled = np.array([mode if x is None else x for x in v], dtype=object)
            for cat, out in zip(cats, t.outputs()):
                schema.append(Column(out, NUMERIC, 0))
                data[out] = (filled == cat).astype(np.float64)
    return Relation(r.name, schema, data), PreprocessStats(transforms)


def replay(r: Relation, stats: PreprocessStats, strict: bool = True) -> Relation:
    """Apply recorded transforms to new rows (e.g. inference inputs).
    Columns named in ``stats`` but absent from ``r`` are skipped unless
    ``strict``."""
    schema, data = [], {}
    n = r.row_count
    for t in stats.columns:
        if t.name not in r:
            if strict:
                raise DataError(f"input is missing column {t.name!r}")
            continue
        v = r[t.name]
        if t.action == "key":
            if v.dtype != object:
                v = np.array([normalize_key(x) for x in v], dtype=object)
            schema.append(Column(t.name, KEY, _null_count(v)))
            data[t.name] = v
        elif t.action == "standardize":
            if v.dtype == object:
                v = pd.to_numeric(pd.Series(v, dtype=object), errors="coerce").to_numpy(dtype=np.float64)
            filled = np.where(np.isnan(v), t.mean, v)
            schema.append(Column(t.name, NUMERIC, 0))
            data[t.name] = (filled - t.mean) / t.std
        elif t.action == "onehot":
            vals = np.array([t.impute if x is None else str(x) for x in v], dtype=object)
            for cat, out in zip(t.categories, t.outputs()):
                schema.append(Column(out, NUMERIC, 0))
                data[out] = (vals == cat).astype(np.float64)
    if not schema:
        data = {}
    rel = Relation(r.name, schema, data)
    if not schema:
        rel.row_count = n
    return rel


# -- persistence -----------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(r: Relation, path) -> None:
    """Write rows with shortest round-trip float formatting (bit exact)."""
    cols = [r[n] for n in r.names]
    conv = []
    for c in cols:
        if c.dtype == object:
            conv.append(["" if v is None else v for v in c])
        else:
            conv.append([_fmt(float(v)) for v in c.tolist()])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(r.names)
        w.writerows(zip(*conv))


def read_csv_typed(path, name: str, schema: List[Column]) -> Relation:
    df = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    data = {}
    for c in schema:
        raw = df[c.name].to_numpy(dtype=object)
        if c.dtype == NUMERIC:
            data[c.name] = np.array([float(x) if x != "" else np.nan for x in raw], dtype=np.float64)
        else:
            arr = raw.copy()
            arr[arr == ""] = None
            data[c.name] = arr
    return Relation(name, _recount(schema, data), data)
