"""Timed experiments.  Each writes ``<name>.csv`` and ``<name>.json`` (the
summary, including the generator parameters and seed needed to replay it)."""

from __future__ import annotations

import csv
import json
import statistics
import time
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np

from ..config import EngineConfig
from ..corpus import Corpus
from ..gram import FeatureSpace, GramRing
from ..plan import HORIZONTAL, VERTICAL, AugmentationStep, PlanState, prepare_rows, prepare_user
from ..proxy import cross_validate, evaluate, train
from ..relation import preprocess
from ..search import Engine, Request, RequestCache
from ..sketch import build_sketches, join_push, union_push
from . import generators as gen

DESK_ROWS = 100_000


def timed(fn: Callable[[], object], reps: int = 5, warmup: int = 1, inner: int = 1) -> float:
    """Median seconds per call over ``reps`` timed batches of ``inner`` calls."""
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter() - t0) / inner)
    return statistics.median(samples)


def pearson(x, y) -> float:
    return float(np.corrcoef(np.asarray(x, float), np.asarray(y, float))[0, 1])


def _scaled(values, scale) -> List[int]:
    return [max(10, int(round(v * scale))) for v in values]


# -- factorized augmentation ------------------------------------------------

def horiz_scaling(scale: float = 1.0, seed: int = 0, reps: int = 5) -> Dict:
    """Union evaluation from the candidate's pre-computed sketch vs.
    preprocessing and aggregating the candidate's rows at request time."""
    rows = []
    base_rows = _scaled([DESK_ROWS], scale)[0]
    for n in _scaled([100_000, 200_000, 300_000, 400_000], scale):
        fx = gen.gen_micro(gen.SyntheticSpec(rows=base_rows, aug_rows=n, seed=seed))
        T, _ = preprocess(fx.base)
        D, _ = preprocess(fx.horizontal)
        names = ["f1", "f2", "f3", "y"]
        space = FeatureSpace(tuple(names))
        XT = T.matrix(list(space.names))
        gT = GramRing.from_rows(XT, space)
        gD = build_sketches(D, features=names, keys=[]).global_gram

        def pre():
            return train(union_push(gT, gD), "y")

        def naive():
            Dn, _ = preprocess(fx.horizontal)
            return train(union_push(gT, GramRing.from_rows(Dn.matrix(list(space.names)), space)), "y")

        assert pre().theta.shape == naive().theta.shape
        rows.append({"aug_rows": n, "precomputed_s": timed(pre, reps, inner=50), "naive_s": timed(naive, reps)})
    return {"rows": rows}


def _keyed_base(fx: gen.MicroFixtures):
    T, _ = preprocess(fx.base)
    return build_sketches(T, keys=["j"]).keyed["j"]


def _vertical_times(fx: gen.MicroFixtures, reps: int) -> Dict:
    plan = _keyed_base(fx)
    D, _ = preprocess(fx.vertical)
    view = build_sketches(D, keys=["j"]).join_view("j").rename_features({"f": "Dv.f"})

    def pre():
        return train(join_push(plan, view), "y")

    def naive():
        v = build_sketches(D, keys=["j"]).join_view("j").rename_features({"f": "Dv.f"})
        return train(join_push(plan, v), "y")

    return {"precomputed_s": timed(pre, reps), "naive_s": timed(naive, reps)}


def vert_scaling(scale: float = 1.0, seed: int = 0, reps: int = 5) -> Dict:
    rows = []
    base_rows = _scaled([DESK_ROWS], scale)[0]
    for n in _scaled([100_000, 200_000, 300_000, 400_000], scale):
        fx = gen.gen_micro(gen.SyntheticSpec(rows=base_rows, aug_rows=n, key_domain=30, seed=seed))
        rows.append({"aug_rows": n, "key_domain": 30, **_vertical_times(fx, reps)})
    return {"rows": rows}


def key_domain_scaling(scale: float = 1.0, seed: int = 0, reps: int = 5) -> Dict:
    rows = []
    n = _scaled([400_000], scale)[0]
    for dom in _scaled([20_000, 40_000, 60_000, 80_000], scale):
        fx = gen.gen_micro(gen.SyntheticSpec(rows=n, aug_rows=n, key_domain=dom, seed=seed))
        rows.append({"aug_rows": n, "key_domain": dom, **_vertical_times(fx, reps)})
    r = pearson([x["key_domain"] for x in rows], [x["precomputed_s"] for x in rows])
    return {"rows": rows, "pearson_precomputed": r}


def precompute_cost(scale: float = 1.0, seed: int = 0, reps: int = 5) -> Dict:
    rows = []
    for n in _scaled([100_000, 200_000, 300_000, 400_000], scale):
        fx = gen.gen_micro(gen.SyntheticSpec(rows=n, features=3, seed=seed))
        rel = fx.base.take(np.arange(n))
        rel = type(rel)(rel.name, [c for c in rel.schema if c.name != "y"], {k: v for k, v in rel.data.items() if k != "y"})
        t0 = time.perf_counter()
        P, _ = preprocess(rel)
        t_pre = time.perf_counter() - t0
        rows.append({"rows": n, "columns": len(rel.names), "preprocess_s": t_pre,
                     "build_sketches_s": timed(lambda: build_sketches(P), reps)})
    r = pearson([x["rows"] for x in rows], [x["build_sketches_s"] for x in rows])
    return {"rows": rows, "pearson": r}


def plan_sharing(scale: float = 1.0, seed: int = 0, reps: int = 5) -> Dict:
    """Keyed aggregates of ``R1 ⋈B R2 ⋈C R3`` for A, B, C, D, derived from
    the aggregates of ``R1 ⋈B R2`` vs. computed from scratch."""
    n = _scaled([DESK_ROWS], scale)[0]
    dom = _scaled([20_000], scale)[0]
    r1, r2, r3 = gen.gen_chain(n, dom, seed)
    corpus = Corpus()
    corpus.register(r2, "RAW")
    corpus.register(r3, "RAW")
    user = prepare_user(r1, "y")
    s1 = AugmentationStep(VERTICAL, "R2", "B", "B")
    s2 = AugmentationStep(VERTICAL, "R3", "C", "R2.C")
    wanted = ["A", "B", "R2.C", "R3.D"]
    P = PlanState.build(user, corpus, [s1], folds=10, seed=seed)
    for k in ["A", "B", "R2.C"]:
        P.keyed(k)
    P.totals()

    def reuse():
        st = P.extend(s2, reuse=True)
        return [st.keyed(k) for k in wanted]

    def recompute():
        st = PlanState.build(user, corpus, [s1, s2], folds=10, seed=seed, reuse=False)
        return [st.keyed(k) for k in wanted]

    a, b = reuse(), recompute()
    agree = all(x.total().allclose(y.total(), rtol=1e-8) and len(x) == len(y) for x, y in zip(a, b))
    t_reuse, t_re = timed(reuse, reps), timed(recompute, reps)
    return {"rows": [{"rows": n, "key_domain": dom, "reuse_s": t_reuse, "recompute_s": t_re,
                      "speedup": t_re / t_reuse}], "aggregates_agree": agree}


# -- planted augmentations ---------------------------------------------------

def planted_corpus(pc: gen.PlantedCorpus) -> Corpus:
    corpus = Corpus()
    for rel, _ in pc.tables:
        corpus.register(rel, "RAW")
    return corpus


def _fit_score(train_cols: List[Dict[str, np.ndarray]], val_cols: Dict[str, np.ndarray], lam: float) -> float:
    names = sorted(val_cols)
    Xtr = np.vstack([np.column_stack([d[c] for c in names]) for d in train_cols])
    mu = np.nanmean(Xtr, axis=0)
    Xtr = np.where(np.isnan(Xtr), mu, Xtr)
    Xv = np.column_stack([val_cols[c] for c in names])
    Xv = np.where(np.isnan(Xv), mu, Xv)
    space = FeatureSpace(tuple(names))
    model = train(GramRing.from_rows(Xtr, space), "y", lam)
    return evaluate(model, GramRing.from_rows(Xv, space)).r2


def omniscient_joins_r2(pc: gen.PlantedCorpus, lam: float = 1e-4) -> float:
    """Linear model on the training rows joined with every ground-truth
    feature table ``F_i``, scored on the validation rows."""
    def design(rel):
        cols = {"f1": rel["f1"], "y": rel["y"]}
        for i in range(2, gen.N_KEYS + 1):
            cols[f"f{i}"] = pc.truth[f"f{i}"][rel[f"j{i}_key"].astype(np.int64)]
        return cols
    return _fit_score([design(pc.train)], design(pc.validation), lam)


def omniscient_all_r2(pc: gen.PlantedCorpus, lam: float = 1e-4) -> float:
    """Linear model on the training rows plus every predictive union table,
    with every predictive join table applied, scored on the validation rows."""
    preds = [t for t, ok in pc.tables if ok]
    unions = [t for t in preds if "y" in t]
    joins = [t for t in preds if "y" not in t]

    def design(rel):
        cols = {"f1": rel["f1"], "y": rel["y"]}
        for t in joins:
            key = t.names_of("key")[0]
            feat = t.names_of("numeric")[0]
            lookup = dict(zip(t[key], t[feat]))
            cols[t.name] = np.array([lookup.get(k, np.nan) for k in rel[key]], dtype=np.float64)
        return cols
    return _fit_score([design(r) for r in [pc.train] + unions], design(pc.validation), lam)


def planted_run(spec: gen.SyntheticSpec, budget: float = 600.0, delta: float = 0.02) -> Dict:
    pc = gen.gen_planted(spec)
    corpus = planted_corpus(pc)
    engine = Engine(corpus, EngineConfig(delta=delta, seed=spec.seed))
    t0 = time.perf_counter()
    out = engine.handle_request(Request(budget, pc.train, "y", validation=pc.validation))
    elapsed = time.perf_counter() - t0
    return {"planted": spec.planted, "nonlinear": spec.nonlinear, "baseline_r2": out.baseline.r2,
            "final_r2": out.cv.r2, "omniscient_joins_r2": omniscient_joins_r2(pc),
            "omniscient_all_r2": omniscient_all_r2(pc) if pc.omniscient else out.baseline.r2,
            "steps": len(out.plan.steps),
            "predictive_steps": sum(s.dataset in pc.omniscient for s in out.plan.steps),
            "seconds": elapsed, "plan": [s.dataset for s in out.plan.steps]}


def planted_search(scale: float = 1.0, seed: int = 0, planted=(0, 1, 5, 10, 50, 100),
                   modes=(False, True)) -> Dict:
    rows = []
    n = _scaled([DESK_ROWS], scale)[0]
    for nonlinear in modes:
        for k in planted:
            spec = gen.SyntheticSpec(rows=n, key_domain=max(10, n // 100), planted=k,
                                     validation_rows=max(10, n // 10), nonlinear=nonlinear, seed=seed)
            r = planted_run(spec)
            r.pop("plan")
            rows.append(r)
    return {"rows": rows}


# -- request cache ---------------------------------------------------------------

def cache_corpus(users: List[gen.CacheUser]) -> Corpus:
    corpus = Corpus()
    for u in users:
        for t in u.tables:
            corpus.register(t, "RAW")
    return corpus


def cache_engine(corpus: Corpus, capacity: int = 5) -> Engine:
    cfg = EngineConfig(cache_schemas=capacity, cache_plans=1)
    return Engine(corpus, cfg, cache=RequestCache(capacity, 1))


def run_sequence(engine: Engine, users: List[gen.CacheUser], seq) -> float:
    t0 = time.perf_counter()
    for i in seq:
        engine.handle_request(Request(600.0, users[int(i)].train, "y"))
    return time.perf_counter() - t0


def cache_zipf(scale: float = 1.0, seed: int = 0, alphas=(0, 2, 4, 7), length: int = 50,
               compare: bool = True) -> Dict:
    """Runtime of a Zipf-distributed request sequence with a 5-schema cache
    (and, with ``compare``, without any cache)."""
    n_users = 20
    users = gen.gen_cache_users(n_users, candidates=max(4, int(30 * scale)), rows=max(200, int(2000 * scale)),
                                seed=seed)
    corpus = cache_corpus(users)
    rows = []
    for a in alphas:
        seq = gen.zipf_sequence(n_users, length, a, seed)
        eng = cache_engine(corpus, 5)
        t_cache = run_sequence(eng, users, seq)
        row = {"alpha": a, "distinct_users": int(len(set(seq.tolist()))), "hits": eng.cache.hits,
               "misses": eng.cache.misses, "with_cache_s": t_cache}
        if compare:
            t_plain = run_sequence(cache_engine(corpus, 0), users, seq)
            row.update(without_cache_s=t_plain, reduction=1 - t_cache / t_plain)
        rows.append(row)
    return {"rows": rows}


EXPERIMENTS = {
    "horiz-scaling": horiz_scaling,
    "vert-scaling": vert_scaling,
    "key-domain-scaling": key_domain_scaling,
    "precompute-cost": precompute_cost,
    "plan-sharing": plan_sharing,
    "planted-search": planted_search,
    "cache-zipf": cache_zipf,
}


def run_experiment(name: str, scale: float = 1.0, seed: int = 0, out_dir=".") -> Path:
    if name not in EXPERIMENTS:
        raise KeyError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    result = EXPERIMENTS[name](scale=scale, seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = result["rows"]
    with open(out / f"{name}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    summary = {"experiment": name, "scale": scale, "seed": seed,
               "spec": gen.SyntheticSpec(seed=seed).to_json(), **result}
    (out / f"{name}.json").write_text(json.dumps(summary, indent=1, default=float) + "\n")
    return out / f"{name}.csv"
