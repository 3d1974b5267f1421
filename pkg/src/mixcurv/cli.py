"""Command-line entry point: ``mixcurv <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .graph import HeteroGraph, build_from_logs, read_bids, read_catalog

log = logging.getLogger("mixcurv")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--M", type=int, default=2, help="number of subspaces")
    g.add_argument("--d", type=int, default=8, help="dimension per subspace")
    g.add_argument("--L", type=int, default=1, help="graph convolution layers")
    g.add_argument("--fanout", type=int, default=5)
    g.add_argument("--buckets", type=int, default=2**18)
    g.add_argument("--curvature", type=float, nargs="+", help="initial node curvatures, one per subspace")
    g.add_argument("--fixed-curvature", action="store_true")
    g.add_argument("--euclidean", action="store_true", help="pin every curvature at zero")
    g.add_argument("--model-seed", type=int, default=0)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    from .training import DESK_TRAIN

    g = p.add_argument_group("training")
    for f in fields(DESK_TRAIN):
        default = getattr(DESK_TRAIN, f.name)
        kind = type(default) if default is not None else int
        g.add_argument(f"--{f.name.replace('_', '-')}", type=kind, default=default)


def _model_config(args):
    from .model import ModelConfig, euclidean

    cfg = ModelConfig(M=args.M, d=args.d, L=args.L, fanout=args.fanout, buckets=args.buckets,
                      node_curvature_init=tuple(args.curvature) if args.curvature else None,
                      trainable_curvature=not args.fixed_curvature, seed=args.model_seed)
    return euclidean(cfg) if args.euclidean else cfg


def _train_config(args):
    from .training import TrainConfig

    return TrainConfig(**{f.name: getattr(args, f.name) for f in fields(TrainConfig)})


def cmd_synth(args) -> int:
    from .eval.synthetic import SyntheticSpec, synthetic_logs

    spec = SyntheticSpec(**json.loads(args.spec)) if args.spec else SyntheticSpec(seed=args.seed)
    logs = synthetic_logs(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "catalog.ndjson", "w") as fh:
        for rec in logs.catalog.values():
            fh.write(json.dumps(rec.to_json()) + "\n")
    with open(out / "bids.ndjson", "w") as fh:
        for aid, kws in logs.bids.items():
            fh.write(json.dumps({"ad_id": aid, "keywords": list(kws)}) + "\n")
    for name, sessions in (("day1", logs.day1), ("day2", logs.day2)):
        with open(out / f"sessions_{name}.ndjson", "w") as fh:
            for s in sessions:
                fh.write(json.dumps(s) + "\n")
    (out / "spec.json").write_text(json.dumps(spec.to_json()))
    print(json.dumps({"catalog": len(logs.catalog), "sessions_day1": len(logs.day1), "sessions_day2": len(logs.day2)}))
    return 0


def cmd_build_graph(args) -> int:
    catalog = read_catalog(args.catalog)
    bids = read_bids(args.bids) if args.bids else None
    g = build_from_logs(args.logs, catalog, bids, args.jaccard)
    g.save(args.out)
    print(json.dumps({"nodes": len(g), "edges": g.num_edges(), "sessions": g.report.sessions,
                      "rejected": g.report.rejected}))
    return 0


def cmd_train(args) -> int:
    from .model import MixedCurvatureModel
    from .training import Trainer, load_checkpoint, save_checkpoint

    g = HeteroGraph.load(args.graph)
    tcfg = _train_config(args)
    if args.resume:
        model, opt, _ = load_checkpoint(args.resume)
    else:
        model, opt = MixedCurvatureModel(_model_config(args)), None
    trainer = Trainer(g, model, tcfg, opt=opt)
    stream = open(args.metrics, "a" if args.resume else "w") if args.metrics else None
    try:
        hist = trainer.fit(args.steps, metrics_stream=stream)
    finally:
        if stream:
            stream.close()
    save_checkpoint(args.out, model, trainer.opt, tcfg)
    last = hist[-1] if hist else None
    print(json.dumps({"step": trainer.opt.step, "loss": last.loss if last else None,
                      "skipped": sum(h.skipped for h in hist)}))
    return 0


def cmd_gradcheck(args) -> int:
    import numpy as np

    from .model import MixedCurvatureModel, sample_context
    from .training import Trainer, check_gradients

    g = HeteroGraph.load(args.graph)
    model = MixedCurvatureModel(_model_config(args))
    tcfg = _train_config(args)
    trainer = Trainer(g, model, tcfg)
    batch, _ = trainer.make_batch(1)
    batch = batch[: args.samples]
    ids = {n for s in batch for n in (s.src, s.pos, *s.negs)}
    ctx = sample_context(g, ids, model.config.fanout, model.config.L, np.random.default_rng(tcfg.seed))
    rep = check_gradients(model, batch, ctx, trainer.features, g, tcfg, h=args.h, tol=args.tol)
    for name in rep.max_rel_error:
        print(f"{name}\t{rep.max_rel_error[name]:.3e}\tchecked={rep.checked[name]}\tkinks={rep.kinks_skipped[name]}")
    for f in rep.failures:
        print("FAIL", f)
    return 0 if rep.ok else 1


def cmd_build_index(args) -> int:
    from .index import DEFAULT_K, build_all_indices, precompute_store, save_indices
    from .training import load_checkpoint
    from .types import LAYER1_INDEXES

    g = HeteroGraph.load(args.graph)
    model, _, tcfg = load_checkpoint(args.checkpoint)
    kw = {} if tcfg is None else {"radius": tcfg.fd_radius, "temperature": tcfg.fd_temperature}
    store = precompute_store(model, g, context_seed=args.context_seed, **kw)
    K = {t: (args.k_layer1 if t in LAYER1_INDEXES else args.k_layer2) for t in DEFAULT_K}
    indices = build_all_indices(store, K, workers=args.workers)
    out = Path(args.out)
    save_indices(indices, out)
    store.save(out / "store")
    print(json.dumps({t.value: len(idx) for t, idx in indices.items()}))
    return 0


def _retrieval_config(args):
    from .retrieval import RetrievalConfig

    return RetrievalConfig(layer2_budget=args.layer2_budget, combine=args.combine)


def cmd_retrieve(args) -> int:
    from .index import load_indices
    from .retrieval import Request, known_ids, retrieve, unresolved

    indices = load_indices(args.indices)
    req = Request(args.query, tuple(p for p in (args.preclick or "").split(",") if p), args.k)
    ads = retrieve(req, indices, _retrieval_config(args))
    print(json.dumps({"ads": [c.to_json(args.verbose) for c in ads],
                      "warnings": unresolved(req, known_ids(indices))}))
    return 0


def cmd_serve(args) -> int:
    from .index import load_indices
    from .retrieval import serve

    serve(load_indices(args.indices), args.host, args.port, _retrieval_config(args))
    return 0


def _print_summary(summary: list[dict]) -> None:
    cols = ["config", "M", "d", "seeds", "next_auc", "hitrate@10", "ndcg@10", "hitrate@50", "ndcg@50"]
    w = csv.writer(sys.stdout, delimiter="\t")
    w.writerow(cols)
    for s in summary:
        w.writerow([f"{s[c]:.3f}" if isinstance(s[c], float) else s[c] for c in cols])


def cmd_experiment(args) -> int:
    from .eval.experiment import run_experiment
    from .plotting import render_report

    grid = json.loads(Path(args.grid).read_text()) if args.grid else {}
    if args.steps is not None:
        grid["steps"] = args.steps
    if args.seeds:
        grid["seeds"] = args.seeds
    res = run_experiment(grid, args.out)
    _print_summary(res["summary"])
    for p in render_report(args.out, res["summary"]):
        log.info("wrote %s", p)
    return 0


def cmd_report(args) -> int:
    from .plotting import render_report

    summary = None
    if args.experiment:
        with open(Path(args.experiment) / "summary.csv") as fh:
            summary = [{k: (v if k == "config" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]
        for s in summary:
            s["M"], s["d"], s["seeds"] = int(s["M"]), int(s["d"]), int(s["seeds"])
        _print_summary(summary)
    for p in render_report(args.out, summary, args.metrics):
        print(f"# figure\t{p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mixcurv", description=__doc__)
    ap.add_argument("-v", "--verbose-log", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic catalog, bids and two days of sessions")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", help="JSON object of generator settings")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("build-graph", help="build the interaction graph from session logs")
    p.add_argument("--logs", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--bids")
    p.add_argument("--jaccard", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_build_graph)

    p = sub.add_parser("train", help="train and write a checkpoint")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="run this many steps (default: the configured epochs)")
    p.add_argument("--metrics", help="append per-step NDJSON metrics here")
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("gradcheck", help="compare autograd with finite differences")
    p.add_argument("--graph", required=True)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("build-index", help="precompute embeddings and write the six indices")
    p.add_argument("--graph", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--k-layer1", type=int, default=50)
    p.add_argument("--k-layer2", type=int, default=200)
    p.add_argument("--context-seed", type=int, default=0)
    p.set_defaults(fn=cmd_build_index)

    for name, fn, help_ in (("retrieve", cmd_retrieve, "answer one request"),
                            ("serve", cmd_serve, "serve requests over TCP")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--indices", required=True)
        p.add_argument("--layer2-budget", type=int, default=50)
        p.add_argument("--combine", choices=("product", "sum"), default="product")
        if name == "retrieve":
            p.add_argument("--query", required=True)
            p.add_argument("--preclick", default="")
            p.add_argument("--k", type=int, default=20)
            p.add_argument("--verbose", action="store_true")
        else:
            p.add_argument("--host", default="127.0.0.1")
            p.add_argument("--port", type=int, default=7070)
        p.set_defaults(fn=fn)

    p = sub.add_parser("experiment", help="train and evaluate a grid of variants, then plot")
    p.add_argument("--grid", help="JSON grid file (default: built-in grid)")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seeds", type=int, nargs="+")
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("report", help="print a summary table and render figures")
    p.add_argument("--experiment", help="directory written by the experiment command")
    p.add_argument("--metrics", help="training metrics NDJSON")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose_log else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
