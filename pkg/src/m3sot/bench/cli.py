"""Command-line entry point: ``python -m m3sot <subcommand> ...``.

Exit status: 0 ok, 2 invalid input or configuration, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..numcore import ParameterStore
from ..tracker.inference import run_sequence
from ..tracker.model import TrackerModel, model_config_from
from ..tracker.training import DivergenceError, TrainConfig, train
from .metrics import StaticModel, evaluate_predictions, run_ope
from .tracklet import load_dataset, load_tracklet, save_dataset, save_tracklet

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("m3sot")


def read_config(path) -> dict:
    """key=value lines; blank lines and ``#`` comments ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: line {lineno}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def write_config(cfg: TrainConfig, path) -> None:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_config(args) -> TrainConfig:
    values = read_config(args.config) if args.config else {}
    cfg = TrainConfig.desk(**{k: v for k, v in TrainConfig.from_mapping(values).to_dict().items()
                              if k in values})
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def write_summary(out: Path, summary: dict) -> None:
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))


def _datasets(args):
    from .synthetic import BENCHMARK_SEED, standard_benchmark

    if args.data:
        root = Path(args.data)
        train_set, test_set = load_dataset(root / "train"), load_dataset(root / "test")
        if not train_set and not test_set:
            raise ValueError(f"{root}: no train/*.jsonl or test/*.jsonl tracklets")
    else:
        train_set, test_set = standard_benchmark(seed=BENCHMARK_SEED)
    if args.limit:
        train_set, test_set = train_set[:args.limit], test_set[:args.limit]
    return train_set, test_set


def _load_model(ckpt, cfg: TrainConfig) -> TrackerModel:
    ckpt = Path(ckpt)
    if ckpt.is_dir():
        ckpt = ckpt / "last.ckpt"
    return TrackerModel(model_config_from(cfg), ParameterStore.load(ckpt))


def _report_rows(rep):
    return [{"tracklet": r.tracklet_id, "frames": r.frames, "success": r.success, "precision": r.precision}
            for r in rep.per_tracklet]


def _write_csv(path, rows, cols) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen(args, out: Path) -> dict:
    from .synthetic import BENCHMARK_TEST, BENCHMARK_TRAIN, standard_benchmark

    seed = 7 if args.seed is None else args.seed
    train_set, test_set = standard_benchmark(seed=seed, n_train=args.n_train or BENCHMARK_TRAIN,
                                             n_test=args.n_test or BENCHMARK_TEST)
    save_dataset(train_set, out / "train")
    save_dataset(test_set, out / "test")
    rows = [{"split": s, "tracklet": t.id, "frames": len(t)} for s, ts in (("train", train_set), ("test", test_set))
            for t in ts]
    _write_csv(out / "tracklets.csv", rows, ["split", "tracklet", "frames"])
    return {"seed": seed, "train": len(train_set), "test": len(test_set)}


def cmd_train(args, out: Path) -> dict:
    cfg = load_config(args)
    train_set, _ = _datasets(args)
    write_config(cfg, out / "config.txt")
    res = train(cfg, train_set, out)
    last = res.history[-1] if res.history else {}
    return {"steps": len(res.history), "final_loss": last.get("total"), "checkpoint": str(out / "last.ckpt"),
            "config": cfg.to_dict()}


def cmd_eval(args, out: Path) -> dict:
    cfg = load_config(args)
    _, test_set = _datasets(args)
    model = StaticModel() if args.baseline == "static" else _load_model(args.checkpoint, cfg)
    rep = run_ope(model, test_set, K=cfg.K, seed=cfg.seed)
    _write_csv(out / "per_tracklet.csv", _report_rows(rep), ["tracklet", "frames", "success", "precision"])
    return {**rep.summary(), "K": cfg.K}


def cmd_track(args, out: Path) -> dict:
    cfg = load_config(args)
    tr = load_tracklet(args.tracklet)
    model = StaticModel() if args.baseline == "static" else _load_model(args.checkpoint, cfg)
    preds = run_sequence(tr, model, cfg.K, seed=cfg.seed)
    rep = evaluate_predictions(preds, tr.boxes[1:], tr.id)
    rows = []
    for i, (b, iou, d) in enumerate(zip(preds, rep.ious, rep.distances), start=1):
        rows.append({"frame": i, "cx": b.center[0], "cy": b.center[1], "cz": b.center[2], "w": b.size[0],
                     "l": b.size[1], "h": b.size[2], "yaw": b.yaw, "iou": iou, "distance": d})
    _write_csv(out / "predictions.csv", rows, list(rows[0]))
    return rep.summary()


def cmd_ablate(args, out: Path) -> dict:
    from .ablation import GRIDS, ablation_runner, write_rows

    cfg = load_config(args)
    train_set, test_set = _datasets(args)
    names = list(GRIDS) if args.grid == "all" else args.grid.split(",")
    for n in names:
        if n not in GRIDS:
            raise ValueError(f"unknown grid {n!r}; choose from {sorted(GRIDS)} or 'all'")
    summary = {}
    for n in names:
        rows = ablation_runner(n, train_set, test_set, cfg)
        write_rows(rows, out / f"ablation_{n}.csv")
        summary[n] = {"rows": len(rows), "failed": sum(r["status"] != "ok" for r in rows)}
    return summary


def cmd_pilot(args, out: Path) -> dict:
    from .pilot import pilot_paradigm, pilot_table

    cfg = load_config(args)
    train_set, test_set = _datasets(args)
    ks = tuple(int(k) for k in args.ks.split(","))
    rows = [pilot_paradigm(m, train_set, test_set, ks, cfg) for m in args.modes.split(",")]
    pilot_table(rows, out / "pilot_precision.csv", "precision")
    pilot_table(rows, out / "pilot_success.csv", "success")
    return {r["paradigm"]: {f"K={k}": v for k, v in r["precision"].items()} for r in rows}


def cmd_import_kitti(args, out: Path) -> dict:
    from .kitti import import_kitti

    tr = import_kitti(args.velodyne, args.labels, args.track_id, args.calib, args.lidar_to_camera)
    path = out / f"{tr.id}.jsonl"
    save_tracklet(tr, path)
    return {"tracklet": str(path), "frames": len(tr), "category": tr.category}


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "track": cmd_track, "ablate": cmd_ablate,
            "pilot": cmd_pilot, "import-kitti": cmd_import_kitti}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="file of key=value training settings")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="directory with train/ and test/ JSONL tracklets (default: synthetic benchmark)")
    data.add_argument("--limit", type=int, help="use only the first N tracklets of each split")

    p = argparse.ArgumentParser(prog="m3sot", description="Multi-frame point-cloud single-object tracker.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="write the synthetic benchmark as JSONL")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)

    sub.add_parser("train", parents=[common, data], help="train a tracker")

    for name in ("eval", "track"):
        s = sub.add_parser(name, parents=[common] + ([data] if name == "eval" else []),
                           help="score a checkpoint" if name == "eval" else "track one tracklet")
        s.add_argument("--checkpoint", help="checkpoint file or training output directory")
        s.add_argument("--baseline", choices=["static"], help="score a baseline instead of a checkpoint")
        if name == "track":
            s.add_argument("--tracklet", required=True)

    a = sub.add_parser("ablate", parents=[common, data], help="run ablation grids")
    a.add_argument("--grid", default="all", help="comma-separated grid names or 'all'")

    pl = sub.add_parser("pilot", parents=[common, data], help="frame-by-frame propagation study")
    pl.add_argument("--modes", default="a,b")
    pl.add_argument("--ks", default="1,2,3,4")

    k = sub.add_parser("import-kitti", parents=[common], help="convert one KITTI track to JSONL")
    k.add_argument("--velodyne", required=True)
    k.add_argument("--labels", required=True)
    k.add_argument("--track-id", type=int, required=True)
    k.add_argument("--calib", required=True)
    k.add_argument("--lidar-to-camera", action="store_true", help="calibration maps LiDAR to camera")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if args.command in ("eval", "track") and not args.checkpoint and not args.baseline:
        print("error: --checkpoint or --baseline is required", file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        summary = COMMANDS[args.command](args, out)
    except (DivergenceError, FloatingPointError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        write_summary(out, {"command": args.command, "status": "diverged", "error": str(exc)})
        return EXIT_DIVERGED
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    write_summary(out, {"command": args.command, "status": "ok", **summary})
    return EXIT_OK
