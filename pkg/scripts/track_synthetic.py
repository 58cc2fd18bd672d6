"""Track synthetic sequences with a trained checkpoint and print OPE scores per preset.

    python3 scripts/track_synthetic.py --ckpt runs/desk.ckpt --estimator gt_jitter ncc
"""

import argparse

import numpy as np

from comet.cometnet import load_net
from comet.evalbench import SynthConfig, aggregate, attribute_breakdown, ope_metrics, synth_sequence
from comet.onlinetracker import GtJitterEstimator, NCCEstimator, RefineConfig, track_sequence


def estimator(name, record, seed):
    return GtJitterEstimator(record.gt_boxes, 0.1, seed) if name == "gt_jitter" else NCCEstimator()


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--ckpt", required=True)
    p.add_argument("--presets", nargs="+", default=["easy", "occlusion", "viewpoint-scale-drift"])
    p.add_argument("--estimator", nargs="+", default=["gt_jitter"], choices=["gt_jitter", "ncc"])
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--no-refine", action="store_true", help="score the rough estimate alone (n_steps=0)")
    args = p.parse_args()

    net, _ = load_net(args.ckpt)
    cfg = RefineConfig(n_steps=0 if args.no_refine else 5)
    for name in args.estimator:
        for preset in args.presets:
            rng = np.random.default_rng(args.seed)
            records, results = [], {}
            for i in range(args.count):
                rec = synth_sequence(SynthConfig.preset(preset, rng), int(rng.integers(2**31)), f"{preset}_{i}")
                boxes, _ = track_sequence(rec, net, estimator(name, rec, 0), cfg, seed=0)
                records.append(rec)
                results[rec.name] = ope_metrics(boxes, rec.gt_boxes)
            o = aggregate(results)
            attrs = ", ".join(f"{k} {v[1]:.3f}" for k, v in attribute_breakdown(results, records).items())
            print(f"{name:9s} {preset:22s} p@20 {o.precision_at_20:.3f}  s@0.5 {o.success_at_0_5:.3f}  "
                  f"AUC {o.auc:.3f}  [AUC by attribute: {attrs}]")


if __name__ == "__main__":
    main()
