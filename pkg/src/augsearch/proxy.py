"""Ridge-regression proxy model trained and scored from gram annotations."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.linalg

from .gram import GramRing

DEFAULT_LAMBDA = 1e-4


class ModelError(ValueError):
    pass


@dataclass
class ProxyModel:
    """``y ≈ theta[0] + sum_i theta[1+i] * x_i`` over ``features``.

    The solve happens on analytically standardized features; ``theta`` is
    expressed in the coordinates of the training gram.  ``standardizer``
    maps each feature to the (mean, std) used during the solve.
    """
    target: str
    features: List[str]
    theta: np.ndarray
    standardizer: Dict[str, tuple]
    lam: float = DEFAULT_LAMBDA
    task: str = "regression"
    flags: List[str] = field(default_factory=list)
    residual: float = 0.0  # normal-equation residual in standardized units

    @property
    def intercept(self) -> float:
        return float(self.theta[0])

    @property
    def coef(self) -> np.ndarray:
        return self.theta[1:]

    @property
    def degenerate(self) -> bool:
        return "pinv" in self.flags

    def to_json(self) -> dict:
        return {"target": self.target, "features": list(self.features),
                "theta": [float(t) for t in self.theta],
                "standardizer": {k: [float(v[0]), float(v[1])] for k, v in self.standardizer.items()},
                "lambda": self.lam, "task": self.task, "flags": list(self.flags)}

    @classmethod
    def from_json(cls, d: dict) -> "ProxyModel":
        return cls(d["target"], list(d["features"]), np.asarray(d["theta"], dtype=np.float64),
                   {k: tuple(v) for k, v in d["standardizer"].items()}, d.get("lambda", DEFAULT_LAMBDA),
                   d.get("task", "regression"), list(d.get("flags", [])))


@dataclass
class EvalResult:
    r2: float          # NaN marks an undefined R² (zero target variance)
    sse: float
    sst: float
    n: float
    accuracy: Optional[float] = None
    degenerate: bool = False

    @property
    def defined(self) -> bool:
        return not math.isnan(self.r2)

    def to_json(self) -> dict:
        return {"r2": None if math.isnan(self.r2) else self.r2, "sse": self.sse, "sst": self.sst,
                "n": self.n, "accuracy": self.accuracy}


def solve_ridge(A: np.ndarray, b: np.ndarray, lam: float = 0.0):
    """Solve ``(A + lam I) x = b`` by Cholesky; pseudo-inverse if that fails.
    Returns ``(x, used_pinv)``."""
    M = A + lam * np.eye(len(A))
    try:
        cf = scipy.linalg.cho_factor(M, lower=True, check_finite=True)
        x = scipy.linalg.cho_solve(cf, b)
        if np.all(np.isfinite(x)):
            return x, False
    except (np.linalg.LinAlgError, ValueError):
        pass
    return np.linalg.pinv(M) @ b, True


def _moments(g: GramRing, names: Sequence[str]):
    idx = g.space.indices(names)
    s = g.s[idx]
    Q = g.Q[np.ix_(idx, idx)]
    mu = s / g.c
    Qc = Q - np.outer(s, s) / g.c
    return mu, Qc


def train(g: GramRing, target: str, lam: float = DEFAULT_LAMBDA, features: Optional[Sequence[str]] = None,
          task: str = "regression") -> ProxyModel:
    """Fit ridge regression from a gram annotation.

    Features are standardized analytically from ``g`` (mean ``s/c``,
    population variance ``Q_ii/c - mean²``); the penalty acts on the
    per-row standardized normal equations ``(Z'Z/c + lam I) beta = Z'y/c``.
    Features with zero variance in ``g`` get a zero coefficient.
    """
    if target not in g.space:
        raise ModelError(f"target {target!r} not in feature space")
    if g.c <= 0:
        raise ModelError("cannot train on an empty gram")
    feats = [n for n in (features if features is not None else g.space.names) if n != target]
    names = feats + [target]
    mu, Qc = _moments(g, names)
    m = len(feats)
    var = np.maximum(np.diag(Qc)[:m] / g.c, 0.0)
    sd = np.sqrt(var)
    live = sd > 1e-12 * np.maximum(1.0, np.abs(mu[:m]))
    flags = []
    if g.c <= m:
        flags.append("underdetermined")
    beta = np.zeros(m)
    resid = 0.0
    if live.any():
        L = np.flatnonzero(live)
        scale = sd[L]
        A = Qc[np.ix_(L, L)] / np.outer(scale, scale) / g.c
        b = Qc[L, m] / scale / g.c
        x, used_pinv = solve_ridge(A, b, lam)
        if used_pinv:
            flags.append("pinv")
        r = (A + lam * np.eye(len(L))) @ x - b
        resid = float(np.max(np.abs(r)) / max(np.max(np.abs(b)), 1e-300)) if len(b) else 0.0
        beta[L] = x / scale
    intercept = mu[m] - float(beta @ mu[:m])
    std = {f: (float(mu[i]), float(sd[i]) if live[i] else 1.0) for i, f in enumerate(feats)}
    return ProxyModel(target, feats, np.concatenate([[intercept], beta]), std, lam, task, flags, resid)


def evaluate(model: ProxyModel, g_val: GramRing) -> EvalResult:
    """SSE / SST / R² of ``model`` on the rows summarised by ``g_val``.

    Computed in centered form, ``SSE = v'Qc v + c (v'mu - theta0)²`` with
    ``v = (-coef, 1)``, which avoids cancellation on large offsets.
    """
    if g_val.c <= 0:
        raise ModelError("empty validation gram")
    missing = [f for f in model.features + [model.target] if f not in g_val.space]
    if missing:
        raise ModelError(f"validation gram lacks {missing}")
    names = model.features + [model.target]
    mu, Qc = _moments(g_val, names)
    v = np.concatenate([-model.coef, [1.0]])
    bias = float(v @ mu) - model.intercept
    sse = max(float(v @ Qc @ v) + g_val.c * bias * bias, 0.0)
    sst = max(float(Qc[-1, -1]), 0.0)
    r2 = 1.0 - sse / sst if sst > 1e-12 * max(1.0, g_val.c * mu[-1] ** 2) else float("nan")
    return EvalResult(r2, sse, sst, g_val.c, degenerate=model.degenerate)


def cross_validate(parts: Sequence[GramRing], target: str, folds: int, lam: float = DEFAULT_LAMBDA,
                   features: Optional[Sequence[str]] = None) -> EvalResult:
    """Cross-validated score from per-partition grams.

    ``parts[0:folds]`` are the user folds, ``parts[folds]`` holds rows
    that only ever train (unioned candidates) and ``parts[folds + 1]``,
    when non-empty, is a dedicated validation set.  With a validation set
    the model trains on everything else and is scored once; otherwise the
    result is the count-weighted mean of the per-fold R².
    """
    train_only = parts[folds]
    holdout = parts[folds + 1] if len(parts) > folds + 1 else None
    if holdout is not None and holdout.c > 0:
        tr = train_only
        for p in parts[:folds]:
            tr = tr + p
        model = train(tr, target, lam, features)
        return evaluate(model, holdout)
    live = [f for f in range(folds) if parts[f].c > 0]
    if len(live) < 2:
        raise ModelError("cross-validation needs at least two non-empty folds")
    num = den = sse = sst = n = 0.0
    degenerate = False
    for f in live:
        tr = train_only
        for p in range(folds):
            if p != f:
                tr = tr + parts[p]
        model = train(tr, target, lam, features)
        res = evaluate(model, parts[f])
        degenerate |= res.degenerate
        sse += res.sse
        sst += res.sst
        n += res.n
        if res.defined:
            num += res.n * res.r2
            den += res.n
    r2 = num / den if den > 0 else float("nan")
    return EvalResult(r2, sse, sst, n, degenerate=degenerate)


def predict(model: ProxyModel, rows) -> np.ndarray:
    """Apply the model to rows laid out in ``model.features`` order."""
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != len(model.features):
        raise ModelError(f"expected {len(model.features)} columns, got {X.shape[1]}")
    yhat = model.intercept + X @ model.coef
    if model.task == "classification":
        return (yhat >= 0.5).astype(np.float64)
    return yhat


def accuracy(model: ProxyModel, rows, y) -> float:
    pred = predict(model, rows)
    return float(np.mean(pred == np.asarray(y, dtype=np.float64)))


def save_model(model: ProxyModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_json(), fh, indent=1, sort_keys=True)


def load_model(path) -> ProxyModel:
    with open(path) as fh:
        return ProxyModel.from_json(json.load(fh))
