"""Ablation sweeps over the assignment and suppression knobs.

Writes one CSV per sweep into the output directory:

- thresholds.csv: th_pos/th_neg in {0.7/0.7, 0.8/0.8, 0.9/0.9, 0.7/0.8}
- nms_variant.csv: density scaling f in {s^2, s, sqrt(s)}
- radius.csv: center-prior radius r in {3, 5, 7} on a 1024x1024 canvas
- cost.csv: overlap-aware vs plain IoU cost
- uot_terms.csv: object-wise / anchor-wise loss terms on and off

    python scripts/ablations.py --scenes 20 --out runs/ablations
"""

import argparse
import time
from pathlib import Path

from dgdet.config import ExperimentConfig
from dgdet.pipeline import run_sweep

SWEEPS = [
    ("thresholds", "th_pos/th_neg", ["0.7/0.7", "0.8/0.8", "0.9/0.9", "0.7/0.8"], {}),
    ("nms_variant", "nms_variant", ["square", "linear", "sqrt"], {}),
    ("radius", "radius", [3, 5, 7], {"scene.image_size": [1024, 1024]}),
    ("cost", "cost_type", ["iou", "overlap_aware"], {}),
    ("object_wise", "object_wise", [False, True], {}),
    ("anchor_wise", "anchor_wise", [False, True], {}),
]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", help="base config file")
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--only", nargs="*", help="subset of sweep names")
    p.add_argument("--out", default="runs/ablations")
    args = p.parse_args(argv)

    base = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    base = base.with_overrides({"num_scenes": args.scenes})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, axis, values, extra in SWEEPS:
        if args.only and name not in args.only:
            continue
        start = time.perf_counter()
        text = run_sweep(base.with_overrides(extra), axis, values, out / f"{name}.csv")
        print(f"== {name} ({time.perf_counter() - start:.1f}s)")
        print(text)


if __name__ == "__main__":
    main()
