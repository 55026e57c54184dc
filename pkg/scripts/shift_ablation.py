"""Score a trained model without the cyclic shift and with TopK ratios 0.9 down to 0.1.

    python scripts/shift_ablation.py --model runs/e2e/model.remm --out runs/ablation
"""
import argparse
import csv
from pathlib import Path

import numpy as np

from remm.benchmark import bucket_report, iter_benchmark, signed_angle
from remm.evaluate import EvalConfig, evaluate_pairs
from remm.formats import load_checkpoint
from remm.net import NetConfig, params_from_arrays
from remm.synthetic import synth_pairs

RATIOS = (0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--test-sources", type=int, default=4)
    args = ap.parse_args()
    arrays = load_checkpoint(args.model)
    net_cfg = NetConfig(g_size=128 // arrays["detector.weight"].shape[1])
    pairs = [bp for _, bp in iter_benchmark(synth_pairs(args.test_sources, seed=2))]
    modes = (None,) + RATIOS
    res = evaluate_pairs(pairs, params_from_arrays(arrays), net_cfg, EvalConfig(), modes=modes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("mode", "SR", "mean_NCM", "mean_NCM_large_rotation", "match_seconds"))
        for m in modes:
            recs = res[m]
            large = [r.ncm for r in recs if abs(signed_angle(r.theta_deg)) > 30]
            row = ("none" if m is None else m, f"{bucket_report(recs)[-1].sr:.2f}",
                   f"{np.mean([r.ncm for r in recs]):.2f}", f"{np.mean(large):.2f}",
                   f"{sum(r.seconds for r in recs):.2f}")
            w.writerow(row)
            print("  ".join(str(v) for v in row))


if __name__ == "__main__":
    main()
