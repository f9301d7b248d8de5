"""Inference-time switches on one trained checkpoint.

Compares fusion thresholds, class-aware vs class-agnostic fusion and the two
stitching rules on held-out synthetic scenes. Needs a checkpoint from
``pfcn train`` (the directory must also hold its ``config.json``).

    pfcn make-synth --out data/train --count 200
    pfcn make-synth --out data/val --count 50 --start 200
    pfcn train --data data/train --out run
    python demos/inference_ablations.py run/model.pfcn data/val
"""
import argparse

import torch

from panoptic_fcn.cli import _load_model
from panoptic_fcn.config import default_run_config
from panoptic_fcn.evaluation import compute_pq
from panoptic_fcn.inference import InferenceConfig, run_inference_batch
from panoptic_fcn.synth import read_dataset

VARIANTS = [
    ("thres 0.80", InferenceConfig(thres=0.80)),
    ("thres 0.85", InferenceConfig(thres=0.85)),
    ("thres 0.90", InferenceConfig(thres=0.90)),
    ("thres 0.95", InferenceConfig(thres=0.95)),
    ("thres 1.00", InferenceConfig(thres=1.00)),
    ("class-agnostic", InferenceConfig(class_aware=False)),
    ("argmax stitch", InferenceConfig(stitch="argmax")),
]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("checkpoint")
    ap.add_argument("data")
    args = ap.parse_args()
    torch.set_num_threads(1)

    model = _load_model(args.checkpoint, default_run_config())
    ds = read_dataset(args.data)
    images, gts = [s.image for s in ds], [s.panoptic for s in ds]
    preds = run_inference_batch(images, model, configs=[c for _, c in VARIANTS])
    print(f"{'variant':16s}{'PQ':>7s}{'PQ_th':>7s}{'PQ_st':>7s}")
    for (name, _), p in zip(VARIANTS, preds):
        r = compute_pq(p, gts)
        print(f"{name:16s}{r.pq:7.1f}{r.pq_th:7.1f}{r.pq_st:7.1f}")


if __name__ == "__main__":
    main()
