"""Command-line entry point: gen-bench, train, extract, match, eval, plot."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .benchmark import (BenchmarkPair, build_benchmark, bucket_report, evaluate_matches, read_manifest,
                        write_report)
from .formats import load_checkpoint, read_descriptors, read_match_csv, save_checkpoint, write_descriptors, \
    write_match_csv
from .geometry import warp_points
from .imageio import load_png, to_uint8
from .net import params_from_arrays
from .pipeline import MatchSet, match_pair
from .synthetic import synth_pairs

log = logging.getLogger("remm")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
PLOT_RESIDUAL_PX = 3.0


class UsageError(Exception):
    pass


def _require(path, what: str = "input") -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"missing {what}: {p}")
    return p


# -- sources -----------------------------------------------------------------------
def load_sources(directory, synthetic: int | None, cfg: cfgmod.RunConfig, synthetic_seed: int | None = None):
    """Aligned (A, B) pairs from NAME_A.png / NAME_B.png files or the synthetic generator."""
    if synthetic is not None:
        seed = cfg.seed if synthetic_seed is None else synthetic_seed
        return synth_pairs(synthetic, cfg.bench.synthetic_size, seed)
    if directory is None:
        raise UsageError("give --sources DIR or --synthetic N")
    d = _require(directory, "source directory")
    a_files = sorted(d.glob("*_A.png"))
    if not a_files:
        raise UsageError(f"no *_A.png files in {d}")
    pairs = []
    for fa in a_files:
        fb = _require(fa.with_name(fa.name[:-len("_A.png")] + "_B.png"), "modality-B image")
        pairs.append((load_png(fa), load_png(fb)))
    return pairs


def load_model(path, cfg: cfgmod.RunConfig):
    arrays = load_checkpoint(_require(path, "checkpoint"))
    per_group = arrays["detector.weight"].shape[1]
    g = cfg.net.descriptor_dim // per_group
    if g != cfg.cyclic.g_size:
        log.info("checkpoint was trained with g_size=%d; using it", g)
        cfg.cyclic = cfgmod.dataclasses.replace(cfg.cyclic, g_size=g)
    return params_from_arrays(arrays)


def _pool_map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


# -- commands ----------------------------------------------------------------------
def cmd_gen_bench(args, cfg):
    sources = load_sources(args.sources, args.synthetic, cfg, args.synthetic_seed)
    pairs = build_benchmark(sources, args.out, cfg.seed, cfg.bench.translation_frac, cfg.bench.write_images)
    print(f"wrote {len(pairs)} pairs to {Path(args.out) / 'manifest.tsv'}")


def cmd_train(args, cfg):
    from .train import train

    sources = load_sources(args.sources, args.synthetic, cfg, args.synthetic_seed)
    train(sources, cfg.net_config(), cfg.train, args.out)
    print(f"wrote {Path(args.out) / 'model.remm'}")


def _extract_job(job):
    img_path, out_path, modality, model_path, cfg_text = job
    from .evaluate import extract

    cfg = cfgmod.parse_lines(cfg_text.splitlines())
    params = load_model(model_path, cfg)
    kp, desc = extract(load_png(img_path), params, cfg.net_config(), modality, cfg.eval_config())
    write_descriptors(out_path, kp, desc, cfg.cyclic.g_size)
    return out_path


def _bench_pairs(bench_dir) -> tuple[Path, list[BenchmarkPair]]:
    d = _require(bench_dir, "benchmark directory")
    return d, read_manifest(_require(d / "manifest.tsv", "manifest"))


def cmd_extract(args, cfg):
    bench, pairs = _bench_pairs(args.bench)
    model = _require(args.model, "checkpoint")
    load_model(model, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = {}
    for p in pairs:
        images.setdefault(p.x_path, "A")
        images.setdefault(p.y_path, "B")
    text = cfgmod.dump(cfg)
    jobs = [(str(_require(bench / name, "image")), str(out / (Path(name).stem + ".desc")), mod, str(model), text)
            for name, mod in images.items()]
    _pool_map(_extract_job, jobs, cfg.workers)
    print(f"wrote {len(jobs)} descriptor files to {out}")


def _match_job(job):
    desc_a, desc_b, out_path, cfg_text = job
    cfg = cfgmod.parse_lines(cfg_text.splitlines())
    ecfg = cfg.eval_config()
    kp_a, d_a, g_a = read_descriptors(desc_a)
    kp_b, d_b, g_b = read_descriptors(desc_b)
    if g_a != g_b:
        raise ValueError(f"group size mismatch between {desc_a} ({g_a}) and {desc_b} ({g_b})")
    ms = match_pair(kp_a, d_a, kp_b, d_b, g_a, ecfg.shift_mode, ecfg.min_sim, ecfg.inlier_px,
                    ecfg.ransac_iters, ecfg.ransac_seed)
    write_match_csv(out_path, ms.pts_a, ms.pts_b, ms.similarity, ms.inlier_flags)
    return out_path


def cmd_match(args, cfg):
    _, pairs = _bench_pairs(args.bench)
    desc = _require(args.desc, "descriptor directory")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = cfgmod.dump(cfg)
    jobs = [(str(_require(desc / (Path(p.x_path).stem + ".desc"), "descriptor file")),
             str(_require(desc / (Path(p.y_path).stem + ".desc"), "descriptor file")),
             str(out / f"{p.id}.csv"), text) for p in pairs]
    _pool_map(_match_job, jobs, cfg.workers)
    print(f"wrote {len(jobs)} match files to {out}")


def matchset_from_csv(path) -> MatchSet:
    pa, pb, sim, inl = read_match_csv(path)
    n = len(pa)
    idx = np.arange(n)
    return MatchSet(idx, idx.copy(), sim, np.zeros((n, 2), np.int64), pa, pb, None, inl)


def cmd_eval(args, cfg):
    _, pairs = _bench_pairs(args.bench)
    mdir = _require(args.matches, "match directory")
    ecfg = cfg.eval_config()
    records = [evaluate_matches(p.id, matchset_from_csv(_require(mdir / f"{p.id}.csv", "match file")), p.gt,
                                ecfg.pixel_thresh) for p in pairs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = bucket_report(records)
    write_report(out / "report.csv", rows)
    with open(out / "pairs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("pair_id", "theta", "bucket", "NCM", "RMSE", "success"))
        for r in records:
            w.writerow((r.pair_id, f"{r.theta_deg:g}", r.angle_bucket, r.ncm, f"{r.rmse:.4f}", int(r.success)))
    for r in rows:
        print(f"{r.bucket:>14}  pairs {r.pairs:5d}  NCM {r.ncm:8.2f}  RMSE {r.rmse:6.3f}  SR {r.sr:6.2f}%")


def plot_matches(img_a, img_b, matches: MatchSet, gt, out_path) -> list[tuple[float, float, float, float]]:
    """Side-by-side PNG: green lines for matches within 3 px of the truth, red dots for the rest.

    Returns the drawn line endpoints (B coordinates offset by A's width),
    which are also stored as JSON in the PNG text chunk ``remm_lines``.
    """
    from PIL import Image, ImageDraw
    from PIL.PngImagePlugin import PngInfo

    a, b = to_uint8(img_a), to_uint8(img_b)
    h = max(a.shape[0], b.shape[0])
    canvas = np.zeros((h, a.shape[1] + b.shape[1]), np.uint8)
    canvas[:a.shape[0], :a.shape[1]] = a
    canvas[:b.shape[0], a.shape[1]:] = b
    im = Image.fromarray(canvas, mode="L").convert("RGB")
    draw = ImageDraw.Draw(im)
    off = float(a.shape[1])
    lines = []
    if len(matches):
        warped, valid = warp_points(gt, matches.pts_a)
        res = np.where(valid, np.linalg.norm(warped - matches.pts_b, axis=1), np.inf)
        for (xa, ya), (xb, yb), r in zip(matches.pts_a, matches.pts_b, res):
            if r < PLOT_RESIDUAL_PX:
                seg = (float(xa), float(ya), float(xb) + off, float(yb))
                lines.append(seg)
                draw.line(seg, fill=(0, 255, 0), width=1)
            else:
                for x, y in ((xa, ya), (xb + off, yb)):
                    draw.point((float(x), float(y)), fill=(255, 0, 0))
    info = PngInfo()
    info.add_text("remm_lines", json.dumps(lines))
    im.save(out_path, format="PNG", pnginfo=info)
    return lines


def cmd_plot(args, cfg):
    bench, pairs = _bench_pairs(args.bench)
    mdir = _require(args.matches, "match directory")
    chosen = [p for p in pairs if args.pair is None or p.id in args.pair]
    if args.pair and len(chosen) != len(set(args.pair)):
        missing = set(args.pair) - {p.id for p in chosen}
        raise UsageError(f"pair ids not in manifest: {sorted(missing)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in chosen:
        ms = matchset_from_csv(_require(mdir / f"{p.id}.csv", "match file")).inliers()
        plot_matches(load_png(_require(bench / p.x_path, "image")), load_png(_require(bench / p.y_path, "image")),
                     ms, p.gt, out / f"{p.id}.png")
    print(f"wrote {len(chosen)} plots to {out}")


COMMANDS = {"gen-bench": cmd_gen_bench, "train": cmd_train, "extract": cmd_extract, "match": cmd_match,
            "eval": cmd_eval, "plot": cmd_plot}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int, help="random seed (default: REMM_SEED or 0)")
    common.add_argument("--workers", type=int, help="parallel worker processes (default: logical cores)")
    common.add_argument("--out", required=True, help="output directory")
    p = _Parser(prog="remm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("gen-bench", "train"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--sources", help="directory of NAME_A.png / NAME_B.png aligned pairs")
        s.add_argument("--synthetic", type=int, help="use N generated aligned pairs instead")
        s.add_argument("--synthetic-seed", type=int, help="seed of the generated pairs (default: --seed)")
    s = sub.add_parser("extract", parents=[common])
    s.add_argument("--bench", required=True)
    s.add_argument("--model", required=True)
    s = sub.add_parser("match", parents=[common])
    s.add_argument("--bench", required=True)
    s.add_argument("--desc", required=True)
    for name in ("eval", "plot"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--bench", required=True)
        s.add_argument("--matches", required=True)
    s.add_argument("--pair", action="append", help="pair id to plot (repeatable; default all)")
    return p


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = cfgmod.load(args.config, args.set, args.seed, args.workers)
        cfgmod.echo(cfg, args.out)
        COMMANDS[args.command](args, cfg)
        return EXIT_OK
    except (UsageError, cfgmod.ConfigError, FileNotFoundError) as e:
        print(f"remm: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - report any runtime failure as exit 2
        print(f"remm: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
