"""Train and score the end-to-end pipeline for every orientation group count.

    python scripts/group_sweep.py --out runs/sweep [--steps 400]
"""
import argparse
import logging
from pathlib import Path

from remm.benchmark import bucket_report, iter_benchmark, write_report
from remm.cyclic import GROUP_SIZES
from remm.evaluate import EvalConfig, evaluate_pairs
from remm.net import NetConfig
from remm.synthetic import synth_pairs
from remm.train import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--steps", type=int, default=400)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    pairs = [bp for _, bp in iter_benchmark(synth_pairs(4, seed=2))]
    for g in GROUP_SIZES:
        out = Path(args.out) / f"g{g}"
        net_cfg = NetConfig(g_size=g)
        params = train(synth_pairs(32, seed=1), net_cfg, TrainConfig(steps=args.steps, log_every=100), out)
        rows = bucket_report(evaluate_pairs(pairs, params, net_cfg, EvalConfig(shift_mode=0.1), modes=(0.1,))[0.1])
        write_report(out / "report.csv", rows)
        print(f"G={g}: SR {rows[-1].sr:.2f}%  NCM {rows[-1].ncm:.2f}  RMSE {rows[-1].rmse:.3f}")


if __name__ == "__main__":
    main()
