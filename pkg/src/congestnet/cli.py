"""Command-line entry point.

Every invocation writes exactly one ``manifest.<command>.json`` recording
argv, the effective config, input/output digests, the seed and per-phase
timings.  Exit status: 0 success, 1 usage error, 2 data/format/config
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace

import numpy as np

from . import binio, infer
from .config import ModelConfig, TrainConfig, read_config
from .errors import CongestNetError, FormatError, NumericError, UsageError
from .grid import GridMap, QueryLocation, split_dataset, write_raster
from .knn import evaluate_knn
from .metrics import table
from .model import CongestionModel
from .qlmm import build_mask, map_location, mask_input
from .synth import CitySpec, generate_city, read_dataset, write_city
from .train import (ABLATION_MODES, evaluate, normalize_layers, predict_scores, run_ablation,
                    train, tune_threshold)

log = logging.getLogger("congestnet")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_help()}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="congestnet", description="Multimodal grid congestion prediction toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="generate a synthetic city")
    g.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    g.add_argument("--height", type=int, default=48, help="grid rows (default 48)")
    g.add_argument("--width", type=int, default=48, help="grid columns (default 48)")
    g.add_argument("--record-fraction", type=float, default=0.4, help="share of grids with traffic records")
    g.add_argument("--noise", type=float, default=0.1, help="label flip probability")
    g.add_argument("--time-points", type=int, default=216, help="daily time slots (default 216)")
    g.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="train the full model")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--config", help="config file (defaults fitted to the data dims when omitted)")
    t.add_argument("--seed", type=int, default=0, help="training seed (default 0)")
    t.add_argument("--out", required=True, help="run directory")

    e = sub.add_parser("eval", help="evaluate a trained run")
    e.add_argument("--ckpt", required=True, help="run directory or checkpoint file")
    e.add_argument("--data", help="dataset directory (default: the one recorded at training)")
    e.add_argument("--split", default="test", choices=("train", "validation", "test"), help="split to score")
    e.add_argument("--tune-threshold", action="store_true", help="pick the F1-optimal threshold on validation")

    r = sub.add_parser("predict", help="predict from the cached meta-representation")
    r.add_argument("--ckpt", required=True, help="run directory or checkpoint file")
    r.add_argument("--meta-cache", help="GMETA1 file (default: meta.gmeta next to the checkpoint)")
    r.add_argument("--loc", help="h,w[,h,w...] 1-based query cells, or 'all'")
    r.add_argument("--dump-heatmap", type=int, metavar="T", help="write binarized full-map predictions at time T (1-based)")
    r.add_argument("--data", help="dataset directory; when given the full path is timed as well")
    r.add_argument("--out", help="output directory (default: the run directory)")

    b = sub.add_parser("baseline", help="KNN baseline on the test split")
    b.add_argument("--data", required=True, help="dataset directory")
    b.add_argument("--k", type=int, action="append", required=True, help="neighbours; repeat for several rows")
    b.add_argument("--seed", type=int, default=0, help="split seed (default 0)")
    b.add_argument("--out", default=".", help="directory for the report and manifest (default .)")

    a = sub.add_parser("ablate", help="train and test one ablation arm")
    a.add_argument("--mode", required=True, choices=("full",) + ABLATION_MODES, help="ablation arm")
    a.add_argument("--data", required=True, help="dataset directory")
    a.add_argument("--config", help="config file")
    a.add_argument("--seed", type=int, default=0, help="training seed (default 0)")
    a.add_argument("--out", required=True, help="run directory")

    d = sub.add_parser("dump-mask", help="write a location mask (and its mapping) as GFL")
    d.add_argument("--loc", required=True, help="h,w 1-based query cell")
    d.add_argument("--sigma", type=float, help="isotropic std in cells (default max(H, W) / 8)")
    d.add_argument("--height", type=int, default=48, help="grid rows when no checkpoint is given")
    d.add_argument("--width", type=int, default=48, help="grid columns when no checkpoint is given")
    d.add_argument("--ckpt", help="trained run; adds the mapped representation")
    d.add_argument("--out", required=True, help="output directory")
    return p


# ---------------------------------------------------------------- helpers

class Run:
    """Collects what goes into the manifest."""

    def __init__(self, command: str, argv):
        self.command = command
        self.argv = list(argv)
        self.inputs: dict = {}
        self.outputs: dict = {}
        self.timings: dict = {}
        self.config = None
        self.seed = None
        self._t = time.perf_counter()

    def phase(self, name: str):
        now = time.perf_counter()
        self.timings[name] = round(1e3 * (now - self._t), 3)
        self._t = now

    def input(self, path):
        if os.path.isdir(path):
            for name in sorted(os.listdir(path)):
                full = os.path.join(path, name)
                if os.path.isfile(full) and not name.startswith("manifest."):
                    self.inputs[full] = binio.file_digest(full)
        elif os.path.exists(path):
            self.inputs[path] = binio.file_digest(path)

    def output(self, name: str, path):
        self.outputs[name] = {"path": path, "sha256": binio.file_digest(path)}

    def write(self, directory) -> str:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, f"manifest.{self.command}.json")
        doc = {"command": self.command, "argv": self.argv, "config": self.config, "seed": self.seed,
               "inputs": self.inputs, "outputs": self.outputs, "timings_ms": self.timings}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _configs_for(data_layers, records, config_path, seed):
    """Model/train configs: the file if given, otherwise defaults sized to the data."""
    if config_path:
        cfg, tcfg = read_config(config_path)
    else:
        mt = data_layers["media_text"].data
        cfg = replace(ModelConfig(), height=mt.shape[0], width=mt.shape[1], d_mt=mt.shape[2],
                      time_points=len(records[0].labels))
        tcfg = TrainConfig()
    return cfg, replace(tcfg, seed=seed)


def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _progress(entry):
    log.info("epoch %(epoch)d loss %(loss).4f val F1 %(val_f1).2f acc %(val_accuracy).2f", entry)


# ---------------------------------------------------------------- commands

def cmd_gen_synth(args, run: Run):
    spec = CitySpec(height=args.height, width=args.width, seed=args.seed, noise=args.noise,
                    record_fraction=args.record_fraction, time_points=args.time_points)
    run.config, run.seed = asdict(spec), args.seed
    city = generate_city(spec)
    run.phase("generate")
    for name, path in write_city(city, args.out).items():
        run.output(name, path)
    run.phase("write")
    print(f"wrote synthetic city {args.height}x{args.width} ({len(city.records)} records) to {args.out}")
    return args.out


def _train_like(args, run: Run, mode: str):
    layers, records, _ = read_dataset(args.data)
    run.input(args.data)
    if args.config:
        run.input(args.config)
    cfg, tcfg = _configs_for(layers, records, args.config, args.seed)
    split = split_dataset(records, tcfg.seed, tcfg.split_mode)
    run.phase("load")
    report, result = run_ablation(mode, layers, records, split, cfg, tcfg, _progress)
    run.phase("train")
    arm_cfg = result.model.cfg
    run.config, run.seed = {"model": arm_cfg.to_dict(), "train": asdict(tcfg)}, tcfg.seed
    paths = infer.save_run(args.out, result, arm_cfg, tcfg, split, data_dir=args.data, extra={"mode": mode})
    for name, path in paths.items():
        run.output(name, path)
    name = "Ours" if mode == "full" else mode
    text = report.block(f"{name} test") + f"best_epoch = {result.best_epoch}\n"
    metrics_path = os.path.join(args.out, f"metrics.{mode}.txt")
    _write_text(metrics_path, text)
    run.output("metrics", metrics_path)
    run.phase("save")
    print(text, end="")
    return args.out


def cmd_train(args, run: Run):
    return _train_like(args, run, "full")


def cmd_ablate(args, run: Run):
    return _train_like(args, run, args.mode)


def cmd_eval(args, run: Run):
    ckpt = infer.checkpoint_path(args.ckpt)
    run.input(ckpt)
    model, header = infer.load_model(ckpt)
    data_dir = args.data or header.get("data_dir")
    if not data_dir:
        raise FormatError("checkpoint records no data directory; pass --data", offset=0)
    layers, records, _ = read_dataset(data_dir)
    run.input(data_dir)
    split = infer.load_split(header)
    run.config, run.seed = {"model": model.cfg.to_dict(), "train": header.get("train_config")}, header.get("seed")
    run.phase("load")
    by_loc = {r.location: r for r in records}
    try:
        chosen = [by_loc[q] for q in split.subset(args.split)]
    except KeyError as exc:
        raise FormatError(f"split location {exc} has no record in {data_dir}", offset=None) from None
    meta = model.frozen_meta(normalize_layers(layers))
    threshold = model.cfg.threshold
    if args.tune_threshold:
        val = [by_loc[q] for q in split.validation]
        scores = predict_scores(model, meta.tensor, [r.location for r in val])
        threshold = tune_threshold(scores, np.stack([r.labels for r in val]))
    report = evaluate(model, meta.tensor, chosen, threshold)
    run.phase("evaluate")
    text = report.block(f"Ours {args.split}") + f"threshold = {threshold:.2f}\n"
    out_dir = os.path.dirname(os.path.abspath(ckpt))
    path = os.path.join(out_dir, f"metrics.eval.{args.split}.txt")
    _write_text(path, text)
    run.output("metrics", path)
    print(text, end="")
    return out_dir


def cmd_predict(args, run: Run):
    ckpt = infer.checkpoint_path(args.ckpt)
    run_dir = os.path.dirname(os.path.abspath(ckpt))
    cache = args.meta_cache or os.path.join(run_dir, infer.META_FILE)
    run.input(ckpt)
    run.input(cache)
    header = binio.read_checkpoint_header(ckpt)
    cfg = infer.config_from_header(header)
    run.config, run.seed = {"model": cfg.to_dict()}, header.get("seed")
    if args.loc is None and args.dump_heatmap is None:
        raise UsageError("predict needs --loc and/or --dump-heatmap")
    if args.dump_heatmap is not None and not 1 <= args.dump_heatmap <= cfg.time_points:
        raise UsageError(f"--dump-heatmap must lie in [1, {cfg.time_points}]")
    grid = GridMap(cfg.height, cfg.width)
    if args.loc is None:
        queries = []
    elif args.loc.strip() == "all":
        queries = grid.locations()
    else:
        queries = infer.parse_locations(args.loc)
    for q in queries:
        grid.check(q)
    out_dir = args.out or run_dir
    os.makedirs(out_dir, exist_ok=True)
    run.phase("load")

    t0 = time.perf_counter()
    preds = infer.fast_predict(cache, ckpt, queries) if queries else []
    if queries:
        run.timings["fast_ms_per_query"] = round(1e3 * (time.perf_counter() - t0) / len(queries), 3)
    run.phase("fast_predict")
    if queries:
        lines = []
        for pv in preds:
            labels = pv.binarize()
            for t, (s, y) in enumerate(zip(pv.scores, labels), start=1):
                lines.append(f"{pv.location.h} {pv.location.w} {t} {float(s):.6f} {int(y)}")
        path = os.path.join(out_dir, "predictions.txt")
        _write_text(path, "\n".join(lines) + "\n")
        run.output("predictions", path)
        print(f"wrote {len(preds)} prediction vectors to {path}")
    if args.dump_heatmap is not None:
        full_map = infer.fast_predict(cache, ckpt, grid.locations())
        heat = np.zeros((cfg.height, cfg.width), dtype=np.float32)
        for pv in full_map:
            heat[pv.location.index] = pv.binarize()[args.dump_heatmap - 1]
        path = os.path.join(out_dir, f"heatmap_t{args.dump_heatmap}.gfl")
        write_raster(path, heat, "heatmap", {"time_point": args.dump_heatmap})
        run.output("heatmap", path)
        run.phase("heatmap")
        print(f"wrote heatmap for t={args.dump_heatmap} to {path}")
    if args.data and queries:
        layers, _, _ = read_dataset(args.data)
        run.input(args.data)
        t0 = time.perf_counter()
        full = infer.full_predict(ckpt, layers, queries)
        run.timings["full_ms_per_query"] = round(1e3 * (time.perf_counter() - t0) / len(queries), 3)
        same = all(np.array_equal(a.scores, b.scores) for a, b in zip(preds, full))
        run.phase("full_predict")
        print(f"fast path {run.timings['fast_ms_per_query']:.2f} ms/query, full path "
              f"{run.timings['full_ms_per_query']:.2f} ms/query, identical={same}")
    return out_dir


def cmd_baseline(args, run: Run):
    _, records, _ = read_dataset(args.data)
    run.input(args.data)
    run.config, run.seed = {"k": args.k}, args.seed
    split = split_dataset(records, args.seed)
    by_loc = {r.location: r for r in records}
    train_recs = [by_loc[q] for q in split.train]
    test_recs = [by_loc[q] for q in split.test]
    run.phase("load")
    rows, blocks = [], []
    for i, k in enumerate(args.k, start=1):
        report = evaluate_knn(train_recs, test_recs, k)
        rows.append((f"Baseline_{i}", report))
        blocks.append(report.block(f"Baseline_{i} (k={k}) test"))
    run.phase("knn")
    text = "".join(blocks) + "\n" + table(rows) + "\n"
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "metrics.baseline.txt")
    _write_text(path, text)
    run.output("metrics", path)
    print(text, end="")
    return args.out


def cmd_dump_mask(args, run: Run):
    q = QueryLocation.parse(args.loc)
    if args.ckpt:
        ckpt = infer.checkpoint_path(args.ckpt)
        run.input(ckpt)
        model, _ = infer.load_model(ckpt, ("qlmm.",))
        cfg = model.cfg
    else:
        cfg, model = replace(ModelConfig(), height=args.height, width=args.width), None
    if args.sigma is not None:
        cfg = replace(cfg, sigma=args.sigma, mask_kind="gaussian")
    run.config, run.seed = {"model": cfg.to_dict()}, None
    GridMap(cfg.height, cfg.width).check(q)
    os.makedirs(args.out, exist_ok=True)
    mask = build_mask(q, cfg)
    path = os.path.join(args.out, f"mask_{q.h}_{q.w}.gfl")
    write_raster(path, mask.matrix, "mask", {"h": q.h, "w": q.w, "kind": mask.kind, "sigma": cfg.mask_sigma})
    run.output("mask", path)
    if model is not None:
        mapped = map_location(mask_input(mask), model.params, cfg).tensor.value
        path = os.path.join(args.out, f"mapped_{q.h}_{q.w}.gfl")
        write_raster(path, mapped, "mapped", {"h": q.h, "w": q.w})
        run.output("mapped", path)
    run.phase("dump")
    print(f"wrote mask for ({q.h},{q.w}) to {args.out}")
    return args.out


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "baseline": cmd_baseline,
    "ablate": cmd_ablate,
    "dump-mask": cmd_dump_mask,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = Run(args.command, argv)
    try:
        where = COMMANDS[args.command](args, run)
    except UsageError as exc:
        print(f"congestnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"congestnet {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CongestNetError, OSError) as exc:
        print(f"congestnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    run.write(where)
    return 0


if __name__ == "__main__":
    sys.exit(main())
