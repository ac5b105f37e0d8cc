"""Command-line entry point: ``gksn {gen,train,eval,verify}``.

Every output artifact gets a ``<artifact>.manifest.json`` next to it with the
command line, the resolved configuration, the library version and wall time.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .datasets import (INIT_STREAM, FramesFormatError, GenConfig, MinMaxScaler, OscillatorySpec, generate,
                       load_frames, save_frames, split_indices, substream, summarize)
from .invariants import FEATURES, FeatureConfig, Metric
from .network import atomic_write_text, build_model, load_checkpoint, save_model
from .training import TrainConfig, TrainingDiverged, evaluate, prepare, target_scaler, train
from .verify import CONTROLS, FAMILIES, reports_to_json, run_check, run_suite, summarize as summarize_reports

log = logging.getLogger("gksn")

_TRUE = {"on", "true", "t", "yes", "1"}
_FALSE = {"off", "false", "f", "no", "0"}


def flag(text: str) -> bool:
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise argparse.ArgumentTypeError(f"expected on/off or true/false, got {text!r}")


def feature_list(text: str) -> tuple:
    feats = tuple(f.strip() for f in text.split(",") if f.strip())
    bad = [f for f in feats if f not in FEATURES]
    if bad or not feats:
        raise argparse.ArgumentTypeError(f"features must be a comma list drawn from {','.join(FEATURES)}")
    return feats


def positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def non_negative_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


def default_threads() -> int:
    env = os.environ.get("GKSN_THREADS")
    if env is None:
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        raise SystemExit(f"GKSN_THREADS must be an integer, got {env!r}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(artifact, command: str, config: dict, seed, inputs, outputs, wall_time: float) -> Path:
    path = Path(f"{artifact}.manifest.json")
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": seed,
        "version": __version__,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "wall_time": wall_time,
    }
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _json_float(x: float):
    return x if math.isfinite(x) else repr(x)


# --- commands -------------------------------------------------------------------


def cmd_gen(args) -> int:
    t0 = time.perf_counter()
    config = GenConfig(m=args.m, n=args.n, num_samples=args.samples, seed=args.seed, em_lr=args.em_lr,
                       em_iters=args.em_iters, lj_a=args.a, bond_target=args.dhat)
    osc = OscillatorySpec.zero() if args.osc == "zero" else OscillatorySpec.default()
    ds = generate(args.kind, config, osc, workers=args.threads)
    save_frames(ds, args.out)
    info = summarize(ds)
    snapshot = {"kind": args.kind, "gen": vars(config), "osc": osc.to_dict(), "summary": info}
    write_manifest(args.out, "gen", snapshot, args.seed, [], [args.out], time.perf_counter() - t0)
    print(json.dumps({"out": str(args.out), **info}, default=float))
    return 0


def _load_data(path):
    try:
        return load_frames(path)
    except FramesFormatError as exc:
        raise SystemExit(f"error: malformed frames file {path}: {exc}")


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    ds = _load_data(args.data)
    feature_config = FeatureConfig(node_index=args.node_index, linear=args.linear, features=args.features)
    metric = Metric.minkowski() if args.metric == "minkowski" else Metric.euclidean()
    if args.perm and args.node_index:
        raise SystemExit("error: --perm on requires --node-index off (a node index breaks permutation invariance)")
    tr, te = split_indices(len(ds), args.split, args.seed)
    model = build_model(args.model, feature_config, ds.m, ds.n, perm=args.perm, metric=metric, size=args.size,
                        rng=substream(args.seed, INIT_STREAM))
    data = prepare(model, ds.subset(tr), ds.subset(te))
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, weight_decay=args.wd,
                         seed=args.seed, huber_delta=args.huber_delta)
    log.info("%s: %d parameters, %d train / %d test frames", model.name, model.param_count(), len(tr), len(te))

    def progress(rec):
        if args.verbose and (rec.epoch % 50 == 0 or rec.epoch == config.epochs - 1):
            log.info("epoch %d train %.4e test %.4e nll %.3f lr %.1e", rec.epoch, rec.train_huber,
                     rec.test_huber, rec.test_nll, rec.lr)

    try:
        model, history = train(model, data, config, progress)
    except TrainingDiverged as exc:
        raise SystemExit(f"error: {exc}")
    out = Path(args.out)
    history_path = Path(args.history) if args.history else out.with_suffix(".history.csv")
    extra = {"split": args.split, "split_seed": args.seed, "data_sha256": sha256_file(args.data),
             "n_train": int(len(tr)), "n_test": int(len(te)), "model_name": model.name}
    save_model(model, out, extra)
    history.save_csv(history_path, timing=args.timing)
    snapshot = {"model": args.model, "perm": args.perm, "size": args.size, "feature_config": feature_config.to_dict(),
                "metric": metric.to_dict(), "train": config.to_dict(), "split": args.split,
                "param_count": model.param_count(), "name": model.name}
    wall = time.perf_counter() - t0
    for artifact in (out, history_path):
        write_manifest(artifact, "train", snapshot, args.seed, [args.data], [out, history_path], wall)
    final = history.last if history else None
    if final is not None:
        result = {"test_huber": final.test_huber, "test_nll": _json_float(final.test_nll)}
    else:
        result = dict(zip(("test_huber", "test_nll"), evaluate(model, data.X_test, data.y_test, config.huber_delta)))
        result["test_nll"] = _json_float(result["test_nll"])
    print(json.dumps({"model": model.name, "params": model.param_count(), "epochs": len(history), **result}))
    return 0


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    model, extra = load_checkpoint(args.checkpoint)
    ds = _load_data(args.data)
    warnings = []
    if args.frames == "all":
        idx = np.arange(len(ds))
        tr = None
    else:
        if "split" not in extra:
            raise SystemExit("error: checkpoint has no split record; use --frames all")
        tr, idx = split_indices(len(ds), extra["split"], extra["split_seed"])
    if tr is not None:
        fitted = MinMaxScaler.fit(ds.energies[tr])
        if (fitted.lo, fitted.hi) != tuple(model.output_scaler):
            warnings.append("scaler mismatch: the checkpoint's target scaler was not fitted on this data's "
                            "training split")
    test = ds.subset(idx)
    X = model.features(test.coords, test.types)
    y = target_scaler(model).transform(test.energies)
    mean, value = evaluate(model, X, y, args.huber_delta)
    result = {"mean_huber": mean, "nll": _json_float(value), "n_test": int(len(idx)), "model": model.name,
              "scaler_mismatch": bool(warnings)}
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    text = json.dumps(result)
    if args.out:
        atomic_write_text(args.out, text + "\n")
        write_manifest(args.out, "eval", {"frames": args.frames, "huber_delta": args.huber_delta}, None,
                       [args.checkpoint, args.data], [args.out], time.perf_counter() - t0)
    print(text)
    return 0


def cmd_verify(args) -> int:
    t0 = time.perf_counter()
    if args.seeds is None:
        args.seeds = 1 if args.check else 10
    dims = {k: v for k, v in (("m", args.m), ("n", args.n), ("k", args.k)) if v is not None}
    if args.check:
        reports = [run_check(args.check, args.seed + s, dims, args.trials) for s in range(args.seeds)]
    elif args.negative_controls:
        reports = run_suite(args.seeds, checks=CONTROLS, trials=args.trials)
    elif args.all:
        reports = run_suite(args.seeds, trials=args.trials)
    else:
        raise SystemExit("error: choose --all, --check NAME or --negative-controls")
    wall = time.perf_counter() - t0
    text = reports_to_json(reports)
    if args.out:
        atomic_write_text(args.out, text + "\n")
        write_manifest(args.out, "verify", {"seeds": args.seeds, "check": args.check, "dims": dims,
                                            "trials": args.trials}, args.seed, [], [args.out], wall)
    else:
        print(text)
    bad = [r for r in reports if not r.ok]
    for name, s in summarize_reports(reports).items():
        want = "pass" if s["expect_pass"] else "fail"
        print(f"{name:32s} {s['ok']}/{s['count']} as expected ({want}), max residual {s['max_residual']:.3e}",
              file=sys.stderr)
    print(f"{len(reports)} reports, {len(bad)} unexpected, {wall:.1f} s", file=sys.stderr)
    return 1 if bad else 0


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gksn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=positive_int, default=None,
                        help="BLAS/worker threads (default: $GKSN_THREADS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic frames file")
    g.add_argument("--kind", choices=("lj", "polymer"), default="lj")
    g.add_argument("--m", type=positive_int, default=4)
    g.add_argument("--n", type=positive_int, default=3)
    g.add_argument("--samples", type=non_negative_int, default=10000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--osc", choices=("default", "zero"), default="default")
    g.add_argument("--dhat", type=float, default=1.0, help="polymer bond length")
    g.add_argument("--a", type=float, default=1.0, help="Lennard-Jones length scale")
    g.add_argument("--em-lr", type=float, default=0.01)
    g.add_argument("--em-iters", type=non_negative_int, default=500)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train a model on a frames file")
    t.add_argument("--data", required=True)
    t.add_argument("--model", choices=("kan", "mlp"), default="kan")
    t.add_argument("--perm", type=flag, default=False)
    t.add_argument("--node-index", type=flag, default=False)
    t.add_argument("--linear", type=flag, default=True)
    t.add_argument("--features", type=feature_list, default=("n1", "n12", "inner", "outer"))
    t.add_argument("--metric", choices=("euclidean", "minkowski"), default="euclidean")
    t.add_argument("--size", choices=("small", "medium", "large"), default="small")
    t.add_argument("--epochs", type=non_negative_int, default=1000)
    t.add_argument("--batch", type=positive_int, default=4092)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--wd", type=float, default=1e-9)
    t.add_argument("--huber-delta", type=float, default=1.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--split", choices=("80/20", "md"), default="80/20")
    t.add_argument("--out", default="model.json", help="checkpoint path")
    t.add_argument("--history", default=None, help="history CSV path (default: <out>.history.csv)")
    t.add_argument("--timing", type=flag, default=False,
                   help="write wall-clock seconds into the history CSV (off keeps it byte-reproducible)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--frames", choices=("test", "all"), default="test",
                   help="the run's own test split, or every frame in the file")
    e.add_argument("--huber-delta", type=float, default=1.0)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", parents=[common], help="run the numerical verification suite")
    v.add_argument("--all", action="store_true")
    v.add_argument("--check", choices=FAMILIES + CONTROLS)
    v.add_argument("--negative-controls", action="store_true")
    v.add_argument("--seeds", type=positive_int, default=None, help="seeds per family (default 10; 1 with --check)")
    v.add_argument("--seed", type=int, default=0, help="first seed for --check")
    v.add_argument("--trials", type=positive_int, default=1)
    v.add_argument("--m", type=positive_int)
    v.add_argument("--n", type=positive_int)
    v.add_argument("--k", type=positive_int)
    v.add_argument("--out", default=None)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is None:
        args.threads = default_threads()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    with threadpool_limits(limits=args.threads):
        return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
