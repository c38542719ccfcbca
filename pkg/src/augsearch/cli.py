"""``augsearch`` command line: corpus administration, requests, prediction
replay and benchmarks.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import CORPUS_ENV, ConfigError, EngineConfig, load_config
from .corpus import Corpus, CorpusError
from .proxy import ModelError
from .relation import NUMERIC, AccessLabel, DataError, ingest
from .search import SearchError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _label(text: str) -> AccessLabel:
    try:
        return AccessLabel.parse(text)
    except (ValueError, KeyError):
        raise argparse.ArgumentTypeError(f"invalid access label {text!r} (raw, md or api)") from None


def _labels(text: str) -> frozenset:
    parts = [p for p in text.split(",") if p.strip()]
    if not parts:
        raise argparse.ArgumentTypeError("at least one return label is required")
    return frozenset(_label(p.strip()) for p in parts)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="augsearch", description="Budgeted data augmentation search over a sketched corpus.")
    p.add_argument("--corpus", help=f"corpus directory (default: ${CORPUS_ENV})")
    p.add_argument("--config", help="flat key = value config file")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    up = sub.add_parser("upload", help="register a CSV table")
    up.add_argument("path")
    up.add_argument("--name", help="entry name (default: file stem)")
    up.add_argument("--label", type=_label, default=AccessLabel.RAW, help="raw, md or api")

    upd = sub.add_parser("update", help="insert and delete rows of an entry")
    upd.add_argument("name")
    upd.add_argument("--insert", help="CSV of rows to add")
    upd.add_argument("--delete", help="CSV of rows to remove")

    rm = sub.add_parser("remove", help="delete an entry")
    rm.add_argument("name")

    rq = sub.add_parser("request", help="search for augmentations of a training table")
    rq.add_argument("train")
    rq.add_argument("--target", required=True)
    rq.add_argument("--budget-secs", type=float, default=60.0)
    rq.add_argument("--model", choices=["linear", "any"], default="linear")
    rq.add_argument("--return", dest="labels", type=_labels, default=frozenset({AccessLabel.RAW}),
                    help="comma separated subset of raw,md,api")
    rq.add_argument("--validation", help="CSV holdout used instead of train-side folds")
    rq.add_argument("--out", default="bundle", help="result bundle directory")
    rq.add_argument("--seed", type=int)
    rq.add_argument("--search-fraction", type=float)
    rq.add_argument("--trainer", help="downstream trainer command; {input} and {target} are substituted")

    pr = sub.add_parser("predict", help="apply a result bundle to new rows")
    pr.add_argument("bundle")
    pr.add_argument("input")
    pr.add_argument("output")

    sub.add_parser("list", help="list corpus entries")
    ins = sub.add_parser("inspect", help="summarize one entry")
    ins.add_argument("name")

    fc = sub.add_parser("fit-cost", help="time a downstream trainer and fit the cost model")
    fc.add_argument("--trainer", required=True)
    fc.add_argument("--out", required=True)
    fc.add_argument("--grid", default="1000x4,4000x4,1000x16,4000x16,8000x8",
                    help="comma separated ROWSxCOLS points")

    from .bench import EXPERIMENTS
    bn = sub.add_parser("bench", help="run a benchmark experiment")
    bn.add_argument("experiment", choices=sorted(EXPERIMENTS))
    bn.add_argument("--scale", type=float, default=1.0)
    bn.add_argument("--seed", type=int, default=0)
    bn.add_argument("--out", default="bench-out")
    return p


def _config(args) -> EngineConfig:
    return load_config(args.config, args.corpus)


def _corpus(cfg: EngineConfig, create: bool = False) -> Corpus:
    if not cfg.corpus_dir:
        raise UsageError(f"no corpus directory: pass --corpus or set ${CORPUS_ENV}")
    return Corpus.open(cfg.corpus_dir, create=create)


def cmd_upload(args, out) -> int:
    cfg = _config(args)
    name = args.name or Path(args.path).stem
    t0 = time.perf_counter()
    rel = ingest(args.path, name)
    t1 = time.perf_counter()
    corpus = _corpus(cfg, create=True)
    entry = corpus.register(rel, args.label)
    t2 = time.perf_counter()
    print(f"registered {entry.name} ({entry.label.name}, {entry.row_count} rows, "
          f"{len(entry.features)} features, keys {entry.keys})", file=out)
    print(f"ingest {t1 - t0:.3f}s  preprocess+sketch+profile {t2 - t1:.3f}s  "
          f"sketch bytes {entry.sketches.nbytes}", file=out)
    return EXIT_OK


def cmd_update(args, out) -> int:
    if not args.insert and not args.delete:
        raise UsageError("update needs --insert and/or --delete")
    cfg = _config(args)
    corpus = _corpus(cfg)
    old = corpus.get(args.name)
    empty = None

    def load(path):
        return ingest(path, args.name, force={c.name: c.dtype for c in old.raw_schema})

    ins = load(args.insert) if args.insert else None
    dele = load(args.delete) if args.delete else None
    if ins is None or dele is None:
        empty = (ins if ins is not None else dele).take(np.arange(0))
    t0 = time.perf_counter()
    entry = corpus.update(args.name, ins if ins is not None else empty, dele if dele is not None else empty)
    print(f"updated {entry.name}: {entry.row_count} rows ({time.perf_counter() - t0:.3f}s)", file=out)
    return EXIT_OK


def cmd_remove(args, out) -> int:
    corpus = _corpus(_config(args))
    corpus.remove(args.name)
    print(f"removed {args.name}", file=out)
    return EXIT_OK


def cmd_request(args, out) -> int:
    from .search import CostModel, Engine, Request, write_bundle

    cfg = _config(args).with_overrides(seed=args.seed, search_fraction=args.search_fraction)
    corpus = _corpus(cfg)
    train = ingest(args.train, "train", force={args.target: NUMERIC})
    val = ingest(args.validation, "validation", force={args.target: NUMERIC}) if args.validation else None
    req = Request(args.budget_secs, train, args.target, args.model, args.labels, val)
    cost = CostModel.load(cfg.cost_model) if cfg.cost_model else None
    if cost is not None:
        cost.safety_factor, cost.trainings = cfg.safety_factor, cfg.trainings
    engine = Engine(corpus, cfg, cost_model=cost, trainer=args.trainer)
    outcome = engine.handle_request(req, log=lambda s: print(s, file=out))
    written = write_bundle(outcome, args.out)
    print(f"baseline cv r2 {_fmt(outcome.baseline.r2)}  final cv r2 {_fmt(outcome.cv.r2)}", file=out)
    for s in outcome.plan.steps:
        via = f" on {s.plan_key} = {s.dataset}.{s.join_key}" if s.kind == "vertical" else ""
        print(f"  {s.kind} {s.dataset}{via}  cv r2 {_fmt(s.cv)}", file=out)
    print(f"t_data {outcome.t_data:.3f}s  t_md_estimate {outcome.t_md_estimate:.3f}s"
          + (f"  t_md_actual {outcome.t_md_actual:.3f}s" if outcome.t_md_actual is not None else "")
          + f"  cache {'hit' if outcome.cache_hit else 'miss'}", file=out)
    print(f"wrote {', '.join(written)} to {args.out}", file=out)
    if outcome.budget_exhausted:
        print("warning: search budget exhausted; returning the best plan found so far", file=sys.stderr)
    return EXIT_OK


def _fmt(x) -> str:
    return "n/a" if x is None or x != x else f"{x:.4f}"


def cmd_predict(args, out) -> int:
    import pandas as pd
    from .search import load_predictor, predict_rows

    cfg = _config(args)
    plan_doc, model = load_predictor(args.bundle)
    corpus = _corpus(cfg) if plan_doc["steps"] else Corpus()
    force = {n: d for n, d in plan_doc["user"]["raw_schema"] if n != plan_doc["target"]}
    rows = ingest(args.input, "input", force=force)
    yhat = predict_rows(plan_doc, model, rows, corpus)
    pd.DataFrame({"prediction": yhat}).to_csv(args.output, index=False, float_format="%.17g")
    print(f"wrote {len(yhat)} predictions to {args.output}", file=out)
    return EXIT_OK


def cmd_list(args, out) -> int:
    corpus = _corpus(_config(args), create=False)
    print(f"{'name':<24} {'label':<5} {'rows':>10} {'features':>8} {'sketch_bytes':>12}", file=out)
    for e in corpus:
        print(f"{e.name:<24} {e.label.name:<5} {e.row_count:>10} {len(e.features):>8} {e.sketches.nbytes:>12}",
              file=out)
    return EXIT_OK


def cmd_inspect(args, out) -> int:
    corpus = _corpus(_config(args), create=False)
    e = corpus.get(args.name)
    summary = {
        "name": e.name, "label": e.label.name, "rows": e.row_count,
        "raw_schema": [[c.name, c.dtype] for c in e.raw_schema],
        "features": e.features,
        "keys": {k: {"domain_size": e.sketches.keyed[k].domain_size,
                     "distinct_estimate_basis": int(e.profile.keys[k][1])} for k in e.keys},
        "sketch_bytes": e.sketches.nbytes,
        "minhash_k": e.profile.k,
        "gram_count": float(e.sketches.global_gram.c),
    }
    print(json.dumps(summary, indent=1), file=out)
    return EXIT_OK


def cmd_fit_cost(args, out) -> int:
    from .search import fit_cost_model

    cfg = _config(args)
    try:
        grid = [tuple(int(v) for v in pt.lower().split("x")) for pt in args.grid.split(",")]
    except ValueError:
        raise UsageError(f"bad --grid {args.grid!r}") from None
    model = fit_cost_model(args.trainer, grid, cfg.safety_factor, cfg.trainings, cfg.seed)
    model.save(args.out)
    print(json.dumps(model.to_json()), file=out)
    return EXIT_OK


def cmd_bench(args, out) -> int:
    from .bench import run_experiment

    path = run_experiment(args.experiment, scale=args.scale, seed=args.seed, out_dir=args.out)
    print(f"wrote {path}", file=out)
    return EXIT_OK


COMMANDS = {"upload": cmd_upload, "update": cmd_update, "remove": cmd_remove, "request": cmd_request,
            "predict": cmd_predict, "list": cmd_list, "inspect": cmd_inspect, "fit-cost": cmd_fit_cost,
            "bench": cmd_bench}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return COMMANDS[args.command](args, out)
    except (UsageError, ConfigError) as e:
        print(f"augsearch: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorpusError, ModelError, SearchError, KeyError) as e:
        print(f"augsearch: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001 - last-resort reporting
        print(f"augsearch: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
