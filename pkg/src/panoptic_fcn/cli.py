"""Command-line entry point: ``pfcn <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import (
    inference_config, load_run_config, scene_spec, train_config, write_effective_config,
)
from .errors import ConfigurationError, InputError, TrainingError, ValidationError
from .evaluation import compute_pq
from .inference import run_inference_batch, write_predictions
from .nn_core import load_checkpoint
from .points import annotation_cost, read_point_annotations, simulate_dataset, write_point_annotations
from .synth import make_synth_dataset, read_dataset
from .trainer import TrainConfig, build_model, run_training

log = logging.getLogger("pfcn")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY.PATH=VALUE",
                   help="override a config value (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfcn", description="Panoptic FCN at desk scale.")
    parser.add_argument("--workers", type=int, default=None, help="CPU threads for numeric kernels")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--start", type=int, default=0, help="index of the first scene")
    _add_config_args(p)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", help="training dataset directory (overrides data.train_dir)")
    p.add_argument("--points", help="point annotation JSON (point supervision)")
    p.add_argument("--out", required=True)
    _add_config_args(p)

    p = sub.add_parser("evaluate", help="compute PQ / SQ / RQ")
    p.add_argument("--gt", required=True, help="ground-truth dataset directory")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--pred", help="prediction directory in the dataset layout")
    src.add_argument("--checkpoint", help="model checkpoint to run on --gt images")
    p.add_argument("--out", help="write the metric report JSON here")
    _add_config_args(p)

    p = sub.add_parser("infer", help="write panoptic predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--visualize", action="store_true")
    _add_config_args(p)

    p = sub.add_parser("simulate-points", help="turn full masks into point annotations")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--boundary-ratio", type=float, default=0.0)
    p.add_argument("--shape", choices=("convex", "concave"), default="concave")
    p.add_argument("--augment", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    _add_config_args(p)

    p = sub.add_parser("plot", help="PQ curves from metric JSON files")
    p.add_argument("metrics", nargs="+", help="metric JSON files (each may carry an 'x' value)")
    p.add_argument("--x", type=float, nargs="*", help="x values, one per file, when the files lack them")
    p.add_argument("--xlabel", default="points per instance")
    p.add_argument("--out", required=True, help="output PNG; the CSV goes next to it")
    _add_config_args(p)
    return parser


def _load_model(checkpoint: str, cfg: dict):
    """Model built from the config saved next to the checkpoint (or the run config)."""
    ck = Path(checkpoint)
    if not ck.exists():
        raise InputError(f"{ck}: checkpoint not found")
    saved = ck.parent / "config.json"
    tc = TrainConfig(**json.loads(saved.read_text())) if saved.exists() else train_config(cfg)
    model = build_model(tc)
    state = load_checkpoint(ck)
    try:
        model.load_state_dict({k: v.to(tc.torch_dtype) for k, v in state.items()})
    except RuntimeError as exc:
        raise InputError(f"{ck}: checkpoint does not match the model config ({str(exc).splitlines()[0]})") from None
    model.eval()
    return model


def cmd_make_synth(args, cfg) -> int:
    root = make_synth_dataset(args.out, args.count, scene_spec(cfg), args.start)
    write_effective_config(cfg, root)
    print(f"wrote {args.count} scenes to {root}")
    return 0


def cmd_train(args, cfg) -> int:
    data_dir = args.data or cfg["data"]["train_dir"]
    if not data_dir:
        raise ConfigurationError("no training data: pass --data or set data.train_dir")
    cfg["data"]["train_dir"] = data_dir
    points_file = args.points or cfg["data"]["points_file"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tc = train_config(cfg)
    dataset = read_dataset(data_dir)
    anns = None
    if points_file:
        cfg["data"]["points_file"] = points_file
        names, anns = read_point_annotations(points_file)
        if names != [s.name for s in dataset]:
            raise ValidationError(f"{points_file}: image list does not match {data_dir}")
        cfg["train"]["supervision"] = "points"
        # the file's own shape / augment choices apply unless overridden on the command line
        meta = json.loads(Path(points_file).read_text()).get("meta", {})
        explicit = {o.split("=", 1)[0].strip() for o in args.overrides}
        for key, field_name in (("shape", "shape_mode"), ("augment", "augment"), ("n", "points_n"),
                                ("boundary_ratio", "boundary_ratio")):
            if key in meta and f"train.{field_name}" not in explicit:
                cfg["train"][field_name] = meta[key]
        tc = train_config(cfg)
    write_effective_config(cfg, out)
    eval_hook = None
    val_dir = cfg["data"]["val_dir"]
    if val_dir and tc.eval_every:
        val = read_dataset(val_dir)
        ic = inference_config(cfg)

        def eval_hook(model, it):
            preds = run_inference_batch([s.image for s in val], model, ic, val.categories)
            return compute_pq(preds, [s.panoptic for s in val], val.categories).to_dict()

    res = run_training(dataset, tc, out, point_annotations=anns, eval_hook=eval_hook)
    last = res.history[-1] if res.history else {}
    print(f"trained {tc.iterations} iterations in {res.seconds:.1f}s; final L={last.get('L', float('nan')):.4f}")
    print(f"checkpoint: {res.checkpoint}")
    return 0


def cmd_evaluate(args, cfg) -> int:
    gt = read_dataset(args.gt, load_images=args.checkpoint is not None)
    if args.pred:
        pred = read_dataset(args.pred, load_images=False)
        by_name = {s.name: s.panoptic for s in pred}
        missing = [s.name for s in gt if s.name not in by_name]
        if missing:
            raise InputError(f"{args.pred}: no prediction for {missing[:3]}")
        preds = [by_name[s.name] for s in gt]
    else:
        model = _load_model(args.checkpoint, cfg)
        preds = run_inference_batch([s.image for s in gt], model, inference_config(cfg), gt.categories)
    report = compute_pq(preds, [s.panoptic for s in gt], gt.categories)
    print(report.table())
    if args.out:
        doc = report.to_dict()
        doc["config"] = cfg
        Path(args.out).write_text(json.dumps(doc, indent=1, default=list))
    return 0


def cmd_infer(args, cfg) -> int:
    data = read_dataset(args.data)
    model = _load_model(args.checkpoint, cfg)
    preds = run_inference_batch([s.image for s in data], model, inference_config(cfg), data.categories)
    root = write_predictions(preds, [s.name for s in data], args.out, data.categories, args.visualize)
    write_effective_config(cfg, root)
    print(f"wrote {len(preds)} predictions to {root}")
    return 0


def cmd_simulate_points(args, cfg) -> int:
    data = read_dataset(args.data, load_images=False)
    anns = simulate_dataset([s.panoptic for s in data], args.n, args.boundary_ratio, args.seed)
    write_point_annotations(anns, [s.name for s in data], args.out, n=args.n, boundary_ratio=args.boundary_ratio,
                            shape=args.shape, augment=args.augment, seed=args.seed)
    total = sum(len(a) for a in anns)
    print(f"wrote {total} annotated instances to {args.out} "
          f"({annotation_cost(args.n):g} s/instance at {args.n} points)")
    return 0


def cmd_plot(args, cfg) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = []
    for i, path in enumerate(args.metrics):
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise InputError(f"{path}: metric file not found") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from None
        if args.x:
            if len(args.x) != len(args.metrics):
                raise ConfigurationError("--x needs one value per metric file")
            x = args.x[i]
        elif "x" in doc:
            x = doc["x"]
        else:
            raise InputError(f"{path}: no 'x' field and no --x given")
        try:
            rows.append((float(x), float(doc["pq"]), float(doc["pq_th"]), float(doc["pq_st"])))
        except KeyError as exc:
            raise InputError(f"{path}: missing field {exc}") from None
    rows.sort()
    out = Path(args.out)
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "pq", "pq_th", "pq_st"])
        w.writerows(rows)
    arr = np.asarray(rows)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for col, label in ((1, "PQ"), (2, "PQ$^{th}$"), (3, "PQ$^{st}$")):
        ax.plot(arr[:, 0], arr[:, col], marker="o", label=label)
    ax.set_xlabel(args.xlabel)
    ax.set_ylabel("PQ (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    print(f"wrote {out} and {out.with_suffix('.csv')}")
    return 0


COMMANDS = {
    "make-synth": cmd_make_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "infer": cmd_infer,
    "simulate-points": cmd_simulate_points,
    "plot": cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_run_config(getattr(args, "config", None), getattr(args, "overrides", []))
        workers = args.workers if args.workers is not None else cfg["workers"]
        if workers and workers > 0:
            torch.set_num_threads(int(workers))
        cfg["workers"] = workers
        return COMMANDS[args.command](args, cfg)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except (ConfigurationError, InputError, TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
