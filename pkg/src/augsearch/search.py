"""Greedy augmentation search with request caching and a training-cost model."""

from __future__ import annotations

import json
import math
import os
import shlex
import subprocess
import tempfile
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import nnls

from .config import EngineConfig
from .discovery import AugmentationCandidate, containment, find_candidates, normalize_name
from .plan import (HORIZONTAL, VERTICAL, AugmentationStep, PlanState, UserTable, join_nodes, materialize,
                   nodes_for, prepare_rows, prepare_user)
from .proxy import EvalResult, ModelError, ProxyModel, cross_validate, predict, train
from .relation import AccessLabel, DataError, PreprocessStats, Relation, write_csv
from .gram import GramRing

LINEAR = "linear"
ANY = "any"


class SearchError(Exception):
    pass


# -- request / plan types ------------------------------------------------------

@dataclass
class Request:
    budget_seconds: float
    train: Relation
    target: str
    model_class: str = LINEAR
    return_labels: frozenset = frozenset({AccessLabel.RAW})
    validation: Optional[Relation] = None

    def __post_init__(self):
        self.return_labels = frozenset(AccessLabel.parse(x) for x in self.return_labels)
        if not self.return_labels:
            raise DataError("return labels must not be empty")
        if self.target not in self.train:
            raise DataError(f"target {self.target!r} not in training table")
        if self.model_class not in (LINEAR, ANY):
            raise DataError(f"model class must be {LINEAR!r} or {ANY!r}")
        if not self.budget_seconds > 0:
            raise DataError("budget must be positive")

    @property
    def min_return(self) -> AccessLabel:
        return min(self.return_labels)


def schema_fingerprint(r: Relation, target: str) -> Tuple:
    cols = tuple(sorted((normalize_name(c.name), c.dtype) for c in r.schema if c.name != target))
    return (normalize_name(target),) + cols


@dataclass
class AugmentationPlan:
    steps: List[AugmentationStep]
    base_schema: Tuple
    target: str

    def datasets(self) -> List[str]:
        return [s.dataset for s in self.steps]

    def to_json(self) -> dict:
        return {"target": self.target, "base_schema": [list(x) if isinstance(x, tuple) else x
                                                       for x in self.base_schema],
                "steps": [s.to_json() for s in self.steps]}


@dataclass
class SearchOutcome:
    plan: AugmentationPlan
    proxy: ProxyModel
    cv: EvalResult
    baseline: EvalResult
    t_data: float
    t_md_estimate: float
    materialized: Optional[Relation] = None
    cache_hit: bool = False
    budget_exhausted: bool = False
    handoff_early: bool = False
    t_md_actual: Optional[float] = None
    trace: List[dict] = field(default_factory=list)
    state: Optional[PlanState] = None
    user: Optional[UserTable] = None
    return_labels: frozenset = frozenset()

    def metrics(self) -> dict:
        return {"t_data": self.t_data, "t_md_estimate": self.t_md_estimate, "t_md_actual": self.t_md_actual,
                "baseline_cv_r2": _num(self.baseline.r2), "final_cv_r2": _num(self.cv.r2),
                "cache_hit": self.cache_hit, "budget_exhausted": self.budget_exhausted,
                "handoff_early": self.handoff_early, "steps": len(self.plan.steps),
                "iterations": len(self.trace)}


def _num(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


# -- cost model ----------------------------------------------------------------

TrainerSpec = Union[Callable, Sequence[str], str]


@dataclass
class CostModel:
    """Predicted seconds for one downstream training on an ``n x m`` table:
    ``a n m^2 + b n m + c`` with non-negative coefficients, hence monotone."""
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    safety_factor: float = 1.5
    trainings: int = 5

    def predict(self, n: float, m: float) -> float:
        return self.a * n * m * m + self.b * n * m + self.c

    def reserve(self, n: float, m: float) -> float:
        """Seconds to hold back for the downstream trainer."""
        return self.safety_factor * self.trainings * self.predict(n, m)

    def to_json(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c, "safety_factor": self.safety_factor,
                "trainings": self.trainings}

    @classmethod
    def from_json(cls, d: dict) -> "CostModel":
        return cls(d["a"], d["b"], d["c"], d.get("safety_factor", 1.5), d.get("trainings", 5))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "CostModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def _synthetic_table(n: int, m: int, seed: int) -> pd.DataFrame:
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, m))
    df = pd.DataFrame(X, columns=[f"x{i}" for i in range(m)])
    df["y"] = X.sum(axis=1) + rng.normal(size=n)
    return df


def run_trainer(trainer: TrainerSpec, df: pd.DataFrame, target: str) -> None:
    """Run a downstream trainer: a callable ``f(frame, target)`` or a shell
    command where ``{input}`` and ``{target}`` are substituted."""
    if callable(trainer):
        trainer(df, target)
        return
    args = shlex.split(trainer) if isinstance(trainer, str) else list(trainer)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "train.csv")
        df.to_csv(path, index=False)
        args = [a.replace("{input}", path).replace("{target}", target) for a in args]
        subprocess.run(args, check=True, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)


def time_trainer(trainer: TrainerSpec, n: int, m: int, seed: int = 0) -> float:
    df = _synthetic_table(n, m, seed)
    t0 = time.perf_counter()
    run_trainer(trainer, df, "y")
    return time.perf_counter() - t0


def fit_cost_model(trainer: TrainerSpec, grid: Sequence[Tuple[int, int]], safety_factor: float = 1.5,
                   trainings: int = 5, seed: int = 0) -> CostModel:
    """Time ``trainer`` on synthetic tables over ``grid`` and fit the model
    by non-negative least squares."""
    rows, times = [], []
    failures = 0
    for i, (n, m) in enumerate(grid):
        try:
            t = time_trainer(trainer, n, m, seed + i)
        except Exception:
            failures += 1
            continue
        rows.append([n * m * m, n * m, 1.0])
        times.append(t)
    if failures * 2 > len(grid) or not rows:
        raise SearchError(f"downstream trainer failed on {failures} of {len(grid)} grid points")
    A = np.asarray(rows, dtype=np.float64)
    y = np.asarray(times)
    # Column scaling keeps NNLS well conditioned.
    scale = np.maximum(np.abs(A).max(axis=0), 1e-300)
    coef, _ = nnls(A / scale, y)
    coef = coef / scale
    return CostModel(float(coef[0]), float(coef[1]), float(coef[2]), safety_factor, trainings)


# -- request cache -------------------------------------------------------------

class RequestCache:
    """Two-level LRU: schema fingerprint -> up to ``plans`` recent plans."""

    def __init__(self, capacity: int = 64, plans: int = 1):
        self.capacity = capacity
        self.plans = plans
        self._data: "OrderedDict[Tuple, List[AugmentationPlan]]" = OrderedDict()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._data)

    def schemas(self) -> List[Tuple]:
        """Fingerprints from least to most recently used."""
        return list(self._data)

    def lookup(self, fp) -> List[AugmentationPlan]:
        return list(self._data.get(fp, []))

    def touch(self, fp) -> None:
        if fp in self._data:
            self._data.move_to_end(fp)

    def insert(self, fp, plan: AugmentationPlan) -> None:
        if self.capacity <= 0:
            return
        plans = [p for p in self._data.pop(fp, []) if p.steps != plan.steps]
        self._data[fp] = ([plan] + plans)[: self.plans]
        while len(self._data) > self.capacity:
            self._data.popitem(last=False)

    def discard(self, fp, plan: AugmentationPlan) -> None:
        plans = [p for p in self._data.get(fp, []) if p is not plan]
        if plans:
            self._data[fp] = plans
        else:
            self._data.pop(fp, None)


def _plan_allowed(plan: AugmentationPlan, corpus, min_return: AccessLabel) -> Optional[bool]:
    """None if the plan references a missing entry, else whether the access
    rules permit it."""
    for s in plan.steps:
        if s.dataset not in corpus:
            return None
        if corpus.get(s.dataset).label > min_return:
            return False
        if s.kind == VERTICAL and min_return > AccessLabel.RAW:
            return False
    return True


def _joins_apply(plan: AugmentationPlan, state: PlanState, corpus, tau_join: float) -> bool:
    """Whether every join of the plan on a base-table key passes the
    discovery containment threshold for this table."""
    base_keys = set(state.plan_keys())
    prof = None
    for s in plan.steps:
        if s.kind != VERTICAL or s.plan_key not in base_keys:
            continue
        if prof is None:
            prof = state.profile(corpus.index.k)
        sig, n = prof.keys[s.plan_key]
        csig, cn = corpus.get(s.dataset).profile.keys[s.join_key]
        if containment(sig, n, csig, cn) < tau_join:
            return False
    return True


def evaluate_cached(state: PlanState, baseline: EvalResult, fp, cache: RequestCache, corpus,
                    min_return: AccessLabel, delta: float, lam: float, tau_join: float = 0.7):
    """Most recent cached plan that improves on ``baseline`` by at least
    ``delta``: ``(plan, state, result)`` or None.  Plans whose joins do not
    match this table's keys are skipped without evaluation."""
    for plan in cache.lookup(fp):
        ok = _plan_allowed(plan, corpus, min_return)
        if ok is None:
            cache.discard(fp, plan)
            continue
        if not ok:
            continue
        try:
            if not _joins_apply(plan, state, corpus, tau_join):
                continue
        except KeyError:
            continue
        try:
            st = state
            for s in plan.steps:
                st = st.extend(s)
            res = cross_validate(st.totals(), st.target, st.folds, lam)
        except (KeyError, ValueError, ModelError):
            continue
        if res.defined and not res.degenerate and res.r2 - baseline.r2 >= delta:
            cache.hits += 1
            cache.touch(fp)
            return plan, st, res
    cache.misses += 1
    return None


# -- the search loop -----------------------------------------------------------

def _better(res: EvalResult, cand: AugmentationCandidate, best) -> bool:
    if best is None:
        return True
    b_res, b_cand = best[0], best[1]
    if res.r2 != b_res.r2:
        return res.r2 > b_res.r2
    if cand.score != b_cand.score:
        return cand.score > b_cand.score
    return cand.dataset < b_cand.dataset


def final_model(state: PlanState, lam: float) -> ProxyModel:
    parts = state.totals()
    g = parts[0]
    for p in parts[1:state.folds + 1]:
        g = g + p
    return train(g, state.target, lam, task=state.user.task)


class Engine:
    """Binds a corpus, configuration, cache and optional cost model."""

    def __init__(self, corpus, config: Optional[EngineConfig] = None, cache: Optional[RequestCache] = None,
                 cost_model: Optional[CostModel] = None, trainer: Optional[TrainerSpec] = None):
        self.corpus = corpus
        self.config = (config or EngineConfig()).validate()
        self.cache = cache if cache is not None else RequestCache(self.config.cache_schemas,
                                                                  self.config.cache_plans)
        self.cost_model = cost_model
        self.trainer = trainer

    def handle_request(self, req: Request, log: Optional[Callable[[str], None]] = None) -> SearchOutcome:
        cfg = self.config
        t0 = time.perf_counter()
        deadline = t0 + req.budget_seconds
        search_deadline = deadline
        if cfg.search_fraction is not None:
            search_deadline = t0 + cfg.search_fraction * req.budget_seconds
        gating = req.model_class != LINEAR and self.cost_model is not None

        def reserve(rows, cols) -> float:
            return self.cost_model.reserve(rows, cols) if gating else 0.0

        user = prepare_user(req.train, req.target, cfg.one_hot_max)
        val = prepare_rows(user, req.validation) if req.validation is not None else None
        state = PlanState(user, self.corpus, cfg.folds, cfg.seed, val)
        baseline = cross_validate(state.totals(), state.target, state.folds, cfg.lam)
        current = baseline
        min_r = req.min_return
        vertical_allowed = min_r == AccessLabel.RAW
        fp = schema_fingerprint(req.train, req.target)
        cache_hit = False
        found = evaluate_cached(state, baseline, fp, self.cache, self.corpus, min_r, cfg.delta, cfg.lam,
                                cfg.tau_join)
        if found is not None:
            _, state, current = found
            cache_hit = True
        trace: List[dict] = []
        exhausted = early = False
        index = self.corpus.index
        while True:
            now = time.perf_counter()
            shape_rows, shape_cols = state.train_rows(), len(state.space) - 1
            if now >= min(search_deadline, deadline - reserve(shape_rows, shape_cols)):
                exhausted = now >= search_deadline
                early = not exhausted
                break
            if current.defined and 1.0 - current.r2 < cfg.delta:
                break  # no candidate can gain delta on a near-perfect fit
            cands = find_candidates(index, state.profile(index.k), min_r, vertical_allowed,
                                    horizontal_allowed=not state.has_vertical,
                                    tau_join=cfg.tau_join, tau_union=cfg.tau_union)[: cfg.candidate_cap]
            best = None
            evaluated = skipped = 0
            stop = False
            for cand in cands:
                now = time.perf_counter()
                if now >= min(search_deadline, deadline - reserve(shape_rows, shape_cols)):
                    stop = True
                    break
                if gating:
                    sh = state.estimate_shape(cand)
                    if deadline - now < reserve(sh.rows, sh.cols):
                        skipped += 1
                        continue
                try:
                    parts = state.candidate_parts(cand)
                    res = cross_validate(parts, state.target, state.folds, cfg.lam)
                except (ModelError, ValueError, KeyError):
                    continue
                evaluated += 1
                if not res.defined or res.degenerate:
                    continue
                if _better(res, cand, best):
                    best = (res, cand, parts)
            gain = (best[0].r2 - current.r2) if best is not None and current.defined else (
                best[0].r2 if best is not None else float("-inf"))
            entry = {"iteration": len(trace) + 1, "candidates": len(cands), "evaluated": evaluated,
                     "skipped_cost": skipped, "best_gain": _num(gain) if best else None,
                     "best": best[1].dataset if best else None,
                     "elapsed": time.perf_counter() - t0, "accepted": False}
            trace.append(entry)
            if log:
                log(f"iter {entry['iteration']}: {len(cands)} candidates, {evaluated} evaluated, "
                    f"best gain {gain:.4f} ({entry['best']}), {entry['elapsed']:.2f}s")
            if best is None or gain < cfg.delta:
                if stop:
                    exhausted = time.perf_counter() >= search_deadline
                    early = not exhausted
                elif skipped:
                    early = True  # the budget ruled out candidates we could not score
                break
            if gating:
                sh = state.estimate_shape(best[1])
                if deadline - time.perf_counter() < reserve(sh.rows, sh.cols):
                    early = True
                    break
            res, cand, parts = best
            state = state.extend(AugmentationStep.of(cand, res.r2), parts=parts)
            current = res
            entry["accepted"] = True
            if stop:
                exhausted = time.perf_counter() >= search_deadline
                early = not exhausted
                break

        proxy = final_model(state, cfg.lam)
        t_data = time.perf_counter() - t0
        rows, cols = state.train_rows(), len(state.space) - 1
        t_md_est = self.cost_model.reserve(rows, cols) if (self.cost_model is not None
                                                           and req.model_class != LINEAR) else 0.0
        steps = list(state.steps)
        if steps and steps[-1].cv is None:
            # Steps restored from the cache carry no acceptance score.
            last = steps[-1]
            steps[-1] = AugmentationStep(last.kind, last.dataset, last.join_key, last.plan_key, current.r2)
        plan = AugmentationPlan(steps, fp, req.target)
        materialized = None
        if req.model_class != LINEAR or AccessLabel.RAW in req.return_labels:
            materialized = materialize(state)
        t_md_actual = None
        if req.model_class != LINEAR and self.trainer is not None:
            # The trainer sees the modeled columns, matching the cost model's shape.
            frame = pd.DataFrame({n: materialized[n] for n in materialized.names if n in state.space})
            t1 = time.perf_counter()
            n_train = self.cost_model.trainings if self.cost_model is not None else cfg.trainings
            for _ in range(n_train):
                run_trainer(self.trainer, frame, req.target)
            t_md_actual = time.perf_counter() - t1
        if plan.steps:
            self.cache.insert(fp, AugmentationPlan([AugmentationStep(s.kind, s.dataset, s.join_key, s.plan_key)
                                                    for s in plan.steps], fp, req.target))
        return SearchOutcome(plan, proxy, current, baseline, t_data, t_md_est, materialized, cache_hit,
                             exhausted, early, t_md_actual, trace, state, user, req.return_labels)


def handle_request(req: Request, corpus, config: Optional[EngineConfig] = None, **kw) -> SearchOutcome:
    return Engine(corpus, config, **kw).handle_request(req)


# -- result bundle and prediction ---------------------------------------------

def plan_document(outcome: SearchOutcome) -> dict:
    doc = outcome.plan.to_json()
    doc["user"] = {"raw_schema": [[c.name, c.dtype] for c in outcome.user.raw_schema],
                   "stats": outcome.user.stats.to_json(), "task": outcome.user.task}
    doc["baseline_cv_r2"] = _num(outcome.baseline.r2)
    doc["final_cv_r2"] = _num(outcome.cv.r2)
    return doc


def write_bundle(outcome: SearchOutcome, out_dir) -> List[str]:
    """Write the artifacts permitted by the request's return labels."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    labels = outcome.return_labels

    def dump(name, obj):
        (out / name).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
        written.append(name)

    if AccessLabel.RAW in labels:
        dump("plan.json", plan_document(outcome))
        if outcome.materialized is not None:
            write_csv(outcome.materialized, out / "augmented.csv")
            written.append("augmented.csv")
    if AccessLabel.MD in labels:
        dump("model.json", outcome.proxy.to_json())
    if AccessLabel.API in labels:
        dump("predictor.json", {"plan": plan_document(outcome), "model": outcome.proxy.to_json()})
    dump("metrics.json", outcome.metrics())
    return written


def load_predictor(bundle_dir) -> Tuple[dict, ProxyModel]:
    b = Path(bundle_dir)
    if (b / "predictor.json").exists():
        d = json.loads((b / "predictor.json").read_text())
        return d["plan"], ProxyModel.from_json(d["model"])
    if (b / "plan.json").exists() and (b / "model.json").exists():
        return json.loads((b / "plan.json").read_text()), ProxyModel.from_json(
            json.loads((b / "model.json").read_text()))
    raise DataError(f"{bundle_dir} has neither predictor.json nor plan.json + model.json")


def predict_rows(plan_doc: dict, model: ProxyModel, rows: Relation, corpus) -> np.ndarray:
    """Replay the plan's joins on new rows and apply the model.  Joined
    features of unmatched rows take the mean (0 after standardization)."""
    from .relation import Column, replay
    stats = PreprocessStats.from_json(plan_doc["user"]["stats"])
    raw_cols = [n for n, _ in plan_doc["user"]["raw_schema"] if n != plan_doc["target"]]
    missing = [c for c in raw_cols if c not in rows]
    if missing:
        raise DataError(f"input lacks columns {missing}")
    rel = replay(rows, stats)
    steps = [AugmentationStep.from_json(s) for s in plan_doc["steps"]]
    user_keys = [t.name for t in stats.columns if t.action == "key"]
    for s in steps:
        if s.dataset not in corpus:
            raise DataError(f"plan references missing corpus entry {s.dataset!r}")
    df = pd.DataFrame({n: rel[n] for n in rel.names})
    df["__row"] = np.arange(rows.row_count)
    df = join_nodes(df, nodes_for(steps, user_keys, corpus), corpus)
    X = np.column_stack([df[f].to_numpy(dtype=np.float64) if f in df.columns else np.zeros(len(df))
                         for f in model.features]) if model.features else np.zeros((len(df), 0))
    X = np.where(np.isnan(X), 0.0, X)
    return predict(model, X)
