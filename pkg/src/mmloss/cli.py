"""Command-line entry point: ``mmloss {gen-data,train,eval,sweep,gradcheck}``.

Every subcommand takes ``--config FILE`` plus any number of
``--section.key=value`` overrides (see :mod:`mmloss.config`). Exit codes:

    0  success
    2  configuration error
    3  data or protocol error
    4  training diverged (a snapshot is written next to the output)
    5  gradient check failed
    6  every sweep cell failed
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import datagen, evalkit, trainer
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, DivergenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_GRADCHECK = 5
EXIT_SWEEP = 6


class _Exit(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _jsonable(obj):
    """Plain JSON tree; non-finite floats become the strings ``inf``/``-inf``/``nan``."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def _write_json(path, doc):
    Path(path).write_text(json.dumps(_jsonable(doc), indent=1, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    def cell(v):
        return repr(float(v)) if isinstance(v, (float, np.floating)) else ("" if v is None else str(v))

    lines = [",".join(header)] + [",".join(cell(v) for v in r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _load_data(path):
    try:
        return datagen.load_dataset(path)
    except OSError as exc:
        raise _Exit(EXIT_DATA, f"cannot read dataset {path}: {exc.strerror}") from None


def _load_ckpt(path):
    try:
        return trainer.load_checkpoint(path)
    except OSError as exc:
        raise _Exit(EXIT_DATA, f"cannot read checkpoint {path}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise _Exit(EXIT_DATA, f"{path}: invalid checkpoint ({exc})") from None


def _check_compatible(state, dataset, where):
    if state.params.sizes[0] != dataset.input_dim:
        raise _Exit(EXIT_DATA, f"{where}: model expects input dim {state.params.sizes[0]}, "
                               f"dataset has {dataset.input_dim}")
    if dataset.num_classes > state.head.num_classes:
        raise _Exit(EXIT_DATA, f"{where}: dataset has {dataset.num_classes} classes, "
                               f"model has {state.head.num_classes}")


# --- subcommands ------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> int:
    spec = cfg.synthetic_spec()
    ds = datagen.gen_longtail(spec)
    datagen.save_dataset(ds, args.out)
    _write_json(f"{args.out}.config.json", {"config": cfg.resolved().to_dict()})
    counts = ds.class_counts()
    print(f"wrote {len(ds)} samples ({ds.num_classes} classes) to {args.out}")
    print("class,count")
    for j, n in enumerate(counts):
        print(f"{j},{int(n)}")
    return EXIT_OK


def _divergence(exc: DivergenceError, out) -> int:
    path = f"{out}.diverged.json"
    if exc.snapshot is not None:
        trainer.save_checkpoint(exc.snapshot, path, extra={"error": str(exc)})
        print(f"training diverged: {exc}; snapshot written to {path}", file=sys.stderr)
    else:
        print(f"training diverged: {exc}", file=sys.stderr)
    return EXIT_DIVERGED


def cmd_train(cfg: RunConfig, args) -> int:
    ds = _load_data(args.data)
    tcfg = cfg.train_config()
    model = cfg.model_config()
    init = None
    if tcfg.warm_start:
        source = _load_ckpt(tcfg.warm_start)
        init = trainer.warm_start_state(source, tcfg, model, ds.input_dim, ds.num_classes)
    try:
        state, trace = trainer.train(tcfg, ds, model=model, init=init)
    except DivergenceError as exc:
        return _divergence(exc, args.out)
    trainer.save_checkpoint(state, args.out, extra={"run_config": cfg.resolved().to_dict()})
    trace_path = args.trace or f"{args.out}.trace.csv"
    trainer.write_trace(trace, trace_path)
    final = trace[-1]["loss_total"] if trace else float("nan")
    print(f"trained {state.iteration} iterations; final loss {final!r}")
    print(f"checkpoint {args.out}; trace {trace_path}")
    return EXIT_OK


def _histogram(state, ds, ev):
    idx = ds.indices(ev.hist_split)
    feats = trainer.forward_embed(state.params, ds.inputs[idx])
    return evalkit.nearest_centre_histogram(feats, ds.labels[idx], ev.hist_bins, (ev.hist_lo, ev.hist_hi))


def evaluate(cfg: RunConfig, state, ds, baseline=None):
    """Run the configured protocols; returns ``(report, csv_tables)``."""
    ev = cfg.eval
    seed = cfg.eval_seed()
    emb = trainer.forward_embed(state.params, ds.inputs)
    report = {"config": cfg.resolved().to_dict(), "protocols": list(ev.protocols)}
    tables = {}
    if "verification" in ev.protocols or "roc" in ev.protocols:
        pairs = datagen.make_pairs(ds, ev.split, ev.num_pos, ev.num_neg, seed)
        dist = evalkit.pair_distances(emb[pairs.a], emb[pairs.b], ev.metric)
        if "verification" in ev.protocols:
            res = evalkit.verification_from_distances(dist, pairs.same, ev.folds)
            report["verification"] = {
                "accuracy": res.accuracy,
                "threshold": res.threshold,
                "fold_accuracies": res.fold_accuracies,
                "fold_thresholds": res.fold_thresholds,
                "num_pairs": len(pairs),
            }
        if "roc" in ev.protocols:
            curve = evalkit.roc(dist[pairs.same], dist[~pairs.same])
            vr = {}
            for level in ev.far_levels:
                r = evalkit.vr_at_far(curve, level)
                vr[repr(float(level))] = {"tar": r.tar, "achievable": r.achievable}
            report["roc"] = {"auc": curve.auc, "num_pos": curve.num_pos, "num_neg": curve.num_neg,
                             "points": curve.points()}
            report["vr_at_far"] = vr
            tables["roc.csv"] = (("far", "tar"), curve.points())
    if "cmc" in ev.protocols:
        proto = datagen.make_ident_protocol(ds, ev.probe_ids, ev.distractors, seed, ev.split)
        curve = evalkit.cmc(proto, emb)
        ranks = list(range(1, curve.rank_rates.size + 1))
        report["cmc"] = {"rank_rates": curve.rank_rates, "probes": int(proto.probes.size),
                         "candidates": len(ranks)}
        tables["cmc.csv"] = (("rank", "rate"), list(zip(ranks, curve.rank_rates.tolist())))
    if "histogram" in ev.protocols:
        hist = _histogram(state, ds, ev)
        report["histogram"] = {"edges": hist.edges, "counts": hist.counts}
        tables["histogram.csv"] = (("bin_lo", "bin_hi", "count", "delta"), hist.rows())
        if baseline is not None:
            base = _histogram(baseline, ds, ev)
            delta = evalkit.compare_histograms(base, hist)
            report["histogram"]["baseline_counts"] = base.counts
            report["histogram"]["delta"] = delta
            tables["histogram_compare.csv"] = (("bin_lo", "bin_hi", "count", "delta"), hist.rows(delta))
    return report, tables


def cmd_eval(cfg: RunConfig, args) -> int:
    ds = _load_data(args.data)
    state = _load_ckpt(args.checkpoint)
    _check_compatible(state, ds, args.checkpoint)
    baseline = None
    if args.baseline:
        if "histogram" not in cfg.eval.protocols:
            raise ConfigError("--baseline needs the histogram protocol in eval.protocols")
        baseline = _load_ckpt(args.baseline)
        _check_compatible(baseline, ds, args.baseline)
    report, tables = evaluate(cfg, state, ds, baseline)
    report["checkpoint"] = str(args.checkpoint)
    if args.baseline:
        report["baseline"] = str(args.baseline)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report)
    for name, (header, rows) in tables.items():
        _write_csv(out / name, header, rows)
    if "verification" in report:
        print(f"verification_accuracy {report['verification']['accuracy']!r}")
    if "roc" in report:
        print(f"roc_auc {report['roc']['auc']!r}")
    if "cmc" in report:
        print(f"rank1 {float(report['cmc']['rank_rates'][0])!r}")
    print(f"report {out / 'report.json'}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    ds = _load_data(args.data)
    sw = cfg.sweep
    if sw.parameter not in evalkit.SWEEP_PARAMETERS:
        raise ConfigError(f"sweep.parameter must be one of {sorted(evalkit.SWEEP_PARAMETERS)}")
    if not sw.values or not sw.seeds:
        raise ConfigError("sweep.values and sweep.seeds must be non-empty")
    tcfg = cfg.train_config()
    model = cfg.model_config()
    init = None
    if tcfg.warm_start:
        init = _load_ckpt(tcfg.warm_start)
    ev = cfg.eval
    pairs = datagen.make_pairs(ds, ev.split, ev.num_pos, ev.num_neg, cfg.eval_seed())
    out = Path(args.out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    cells = []
    for v in sw.values:
        for s in sw.seeds:
            cell = evalkit.run_cell(tcfg, sw.parameter, v, s, ds, pairs, model, ev.folds, init)
            name = f"{sw.parameter}={float(v)!r}_seed={int(s)}.json"
            if cell.state is not None:
                trainer.save_checkpoint(cell.state, out / "cells" / name,
                                        extra={"run_config": cfg.resolved().to_dict(),
                                               "cell": {"parameter": sw.parameter, "value": float(v),
                                                        "seed": int(s)}})
            else:
                print(f"cell {sw.parameter}={v} seed={s} failed: {cell.error}", file=sys.stderr)
            cells.append(cell)
    table = evalkit.SweepTable(sw.parameter, cells)
    _write_csv(out / "table.csv", ("parameter", "value", "seed", "accuracy", "threshold", "error"),
               [(sw.parameter, c.value, c.seed, c.accuracy, c.threshold, c.error) for c in cells])
    means = table.means()
    _write_csv(out / "means.csv", ("parameter", "value", "mean_accuracy"),
               [(sw.parameter, v, m) for v, m in means.items()])
    _write_json(out / "report.json", {
        "config": cfg.resolved().to_dict(),
        "parameter": sw.parameter,
        "cells": [{"value": c.value, "seed": c.seed, "accuracy": c.accuracy, "threshold": c.threshold,
                   "error": c.error} for c in cells],
        "means": [{"value": v, "mean_accuracy": m} for v, m in means.items()],
        "failures": table.failures,
    })
    for v, m in means.items():
        print(f"{sw.parameter}={v!r} mean_accuracy={m!r}")
    print(f"{len(cells)} cells, {table.failures} failed; table {out / 'table.csv'}")
    return EXIT_SWEEP if table.failures == len(cells) else EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    ds = _load_data(args.data)
    try:
        report = trainer.gradcheck(cfg.train_config(), ds, samples=args.samples, epsilon=args.epsilon,
                                   model=cfg.model_config(), tolerance=args.tolerance, states=args.states,
                                   seed=cfg.eval_seed(), corrupt=args.inject_fault)
    except DivergenceError as exc:
        return _divergence(exc, args.out or "gradcheck")
    for name in sorted(report.max_rel_err):
        print(f"{name} max_rel_err={report.max_rel_err[name]:.3e} checked={report.checked[name]}")
    print(f"skipped_kinks={report.skipped_kinks} tolerance={report.tolerance:g}")
    if args.out:
        doc = report.to_dict()
        doc["config"] = cfg.resolved().to_dict()
        _write_json(args.out, doc)
    if not report.passed:
        print(f"gradcheck FAILED: {len(report.failures)} coordinates above tolerance", file=sys.stderr)
        return EXIT_GRADCHECK
    print("gradcheck passed")
    return EXIT_OK


# --- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmloss",
                                description="Train and evaluate embedders under softmax, centre "
                                            "and minimum-margin supervision.",
                                epilog="Config overrides: --section.key=value (repeatable).")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="sectioned config file")
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate a long-tailed synthetic dataset")
    sp.add_argument("--out", required=True, help="JSON-Lines dataset path")

    sp = add("train", cmd_train, "train an embedder and write a checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--trace", help="trace CSV path (default: <out>.trace.csv)")

    sp = add("eval", cmd_eval, "evaluate a checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--baseline", help="second checkpoint for histogram comparison")
    sp.add_argument("--out-dir", required=True)

    sp = add("sweep", cmd_sweep, "sweep M or beta over seeds")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out-dir", required=True)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of every loss gradient")
    sp.add_argument("--data", required=True)
    sp.add_argument("--samples", type=int, default=50, help="coordinates per component per state")
    sp.add_argument("--epsilon", type=float, default=1e-5)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--states", type=int, default=2)
    sp.add_argument("--inject-fault", type=float, default=0.0, metavar="SCALE",
                    help="scale analytic feature gradients by 1+SCALE (testing hook)")
    sp.add_argument("--out", help="write the report as JSON")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    overrides = [a for a in rest if a.startswith("--") and "." in a.split("=", 1)[0]]
    unknown = [a for a in rest if a not in overrides]
    if unknown:
        parser.error(f"unrecognized arguments: {' '.join(unknown)}")
    try:
        cfg = load_config(args.config, overrides)
        return args.func(cfg, args)
    except _Exit as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
