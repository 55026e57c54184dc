"""Train on synthetic aligned pairs, then score the 105-pair benchmark of held-out pairs.

    python scripts/end_to_end.py --out runs/e2e [--steps 1500] [--g-size 16] [--shift-mode 0.1]
"""
import argparse
import logging
import time
from pathlib import Path

from remm.benchmark import bucket_report, iter_benchmark, write_report
from remm.evaluate import EvalConfig, evaluate_pairs, parse_shift_mode
from remm.net import NetConfig
from remm.synthetic import synth_pairs
from remm.train import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--g-size", type=int, default=16)
    ap.add_argument("--shift-mode", default="0.1")
    ap.add_argument("--train-sources", type=int, default=32)
    ap.add_argument("--test-sources", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)
    net_cfg = NetConfig(g_size=args.g_size)

    t = time.perf_counter()
    params = train(synth_pairs(args.train_sources, seed=1), net_cfg, TrainConfig(steps=args.steps, seed=args.seed),
                   out)
    train_s = time.perf_counter() - t

    mode = parse_shift_mode(args.shift_mode)
    pairs = [bp for _, bp in iter_benchmark(synth_pairs(args.test_sources, seed=2))]
    t = time.perf_counter()
    recs = evaluate_pairs(pairs, params, net_cfg, EvalConfig(shift_mode=mode), modes=(mode,))[mode]
    eval_s = time.perf_counter() - t
    rows = bucket_report(recs)
    write_report(out / "report.csv", rows)
    for r in rows:
        print(f"{r.bucket:>14}  pairs {r.pairs:4d}  NCM {r.ncm:7.2f}  RMSE {r.rmse:6.3f}  SR {r.sr:6.2f}%")
    print(f"train {train_s / 60:.1f} min, eval {eval_s / 60:.1f} min")


if __name__ == "__main__":
    main()
