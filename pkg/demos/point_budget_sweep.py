"""PQ as a function of the number of annotated points per instance.

Trains one small model per point budget (plus a fully supervised reference) on
64 px synthetic scenes, writes one metric JSON per run, and draws the curve
with ``pfcn plot``. Takes about 10 minutes per run on one CPU core.

    python demos/point_budget_sweep.py --out sweep/
"""
import argparse
import json
from pathlib import Path

import torch

from panoptic_fcn.cli import main as pfcn
from panoptic_fcn.evaluation import compute_pq
from panoptic_fcn.inference import run_inference_batch
from panoptic_fcn.points import annotation_cost, simulate_dataset
from panoptic_fcn.synth import Dataset, SceneSpec, generate_scenes
from panoptic_fcn.trainer import TrainConfig, run_training

MODEL = {"head_channels": 32, "kernel_dim": 32, "widths": (16, 32, 32, 32), "fpn_channels": 32}
SPEC = SceneSpec(image_size=64, min_radius=5, max_radius=14, max_objects=4)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="sweep")
    ap.add_argument("--budgets", type=int, nargs="+", default=[5, 10, 20, 30])
    ap.add_argument("--iterations", type=int, default=600)
    ap.add_argument("--train", type=int, default=150)
    ap.add_argument("--val", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = Dataset(generate_scenes(SPEC, args.train))
    val = generate_scenes(SPEC, args.val, start=args.train)
    base = {"iterations": args.iterations, "batch_size": 4, "seed": args.seed, "model": MODEL}

    def score(model):
        preds = run_inference_batch([s.image for s in val], model)
        return compute_pq(preds, [s.panoptic for s in val])

    files = []
    for n in args.budgets:
        anns = simulate_dataset([s.panoptic for s in train], n, seed=args.seed)
        res = run_training(train, TrainConfig(**base, supervision="points", points_n=n), point_annotations=anns)
        report = score(res.model)
        doc = {"x": n, "seconds_per_instance": annotation_cost(n), **report.to_dict()}
        files.append(out / f"points_{n:02d}.json")
        files[-1].write_text(json.dumps(doc, indent=1))
        print(f"P{n:<3d} {annotation_cost(n):5.1f} s/inst  PQ {report.pq:5.1f}  "
              f"PQ_th {report.pq_th:5.1f}  PQ_st {report.pq_st:5.1f}")

    full = score(run_training(train, TrainConfig(**base)).model)
    (out / "full.json").write_text(full.to_json())
    print(f"full supervision PQ {full.pq:.1f}")
    for f in files:
        pq = json.loads(f.read_text())["pq"]
        print(f"  {f.stem}: {100 * pq / max(full.pq, 1e-9):.0f}% of full")

    pfcn(["plot", *map(str, files), "--out", str(out / "pq_vs_points.png")])


if __name__ == "__main__":
    main()
