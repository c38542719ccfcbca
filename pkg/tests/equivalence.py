"""Compare a factorized plan against the brute-force oracle on one random case."""

from __future__ import annotations

import numpy as np

import oracle
from randomcorpus import random_case

from augsearch.plan import AugmentationStep, PlanState, prepare_user
from augsearch.proxy import DEFAULT_LAMBDA, cross_validate, evaluate, train

FOLDS = 10


def _rel(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(1.0, float(np.abs(b).max(initial=0.0)))
    return float(np.abs(a - b).max(initial=0.0)) / scale


def build_states(user, corpus, hs, vs):
    u = prepare_user(user, "y")
    st = PlanState(u, corpus, folds=FOLDS)
    for h in hs:
        st = st.extend(AugmentationStep("horizontal", h))
    for d, k, pk in vs:
        st = st.extend(AugmentationStep("vertical", d, k, pk))
    return st, PlanState.build(u, corpus, st.steps, folds=FOLDS, reuse=False)


def case_errors(seed: int, lam: float = DEFAULT_LAMBDA) -> dict:
    """Worst relative error per quantity (gram, theta, sse, cv) for one case."""
    user, corpus, raws, hs, vs = random_case(seed)
    reuse, recompute = build_states(user, corpus, hs, vs)
    plan, cols = oracle.expand(user, "y", [raws[h] for h in hs], [(raws[d], k, pk) for d, k, pk in vs], FOLDS)
    feats = sorted(c for c in cols if c != "y")
    err = {"gram": 0.0, "theta": 0.0, "sse": 0.0, "cv": 0.0}
    for st in (reuse, recompute):
        parts = st.totals()
        for p in range(FOLDS + 1):
            c, s, Q, names = oracle.gram(plan, cols, p)
            g = parts[p]
            assert list(g.space.names) == names
            scale = max(1.0, float(np.abs(Q).max(initial=0.0)))
            e = max(abs(g.c - c), float(np.abs(g.s - s).max(initial=0.0)),
                    float(np.abs(g.Q - Q).max(initial=0.0))) / scale
            err["gram"] = max(err["gram"], e)
        for f in range(FOLDS):
            val = plan[plan["__part"] == f]
            if val["__w"].sum() <= 0:
                continue
            tr = plan[(plan["__part"] != f) & (plan["__part"] <= FOLDS)]
            b0, beta = oracle.fit(tr[feats].to_numpy(float), tr["y"].to_numpy(float),
                                  tr["__w"].to_numpy(float), lam)
            g_tr = parts[FOLDS]
            for p in range(FOLDS):
                if p != f:
                    g_tr = g_tr + parts[p]
            model = train(g_tr, "y", lam)
            assert model.features == feats
            err["theta"] = max(err["theta"], _rel(model.theta, np.concatenate([[b0], beta])))
            sse, _ = oracle.score(b0, beta, val[feats].to_numpy(float), val["y"].to_numpy(float),
                                  val["__w"].to_numpy(float))
            err["sse"] = max(err["sse"], _rel(evaluate(model, parts[f]).sse, sse))
        r_lib = cross_validate(parts, "y", FOLDS, lam).r2
        r_ora = oracle.cross_validate(plan, cols, "y", FOLDS, lam)
        err["cv"] = max(err["cv"], _rel(r_lib, r_ora))
    return err
