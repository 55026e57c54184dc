"""Rotation/scale benchmark synthesis and NCM / RMSE / SR evaluation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from .geometry import Homography, make_homography, warp_image
from .pipeline import MatchSet, residuals

ANGLES = tuple(range(10, 360, 10))
SCALE_RANGES = ((0.5, 0.8), (0.8, 1.0), (1.0, 1.0))
BUCKETS = ("[-180°:-90°)", "[-90°:-30°)", "[-30°:30°)", "[30°:90°)", "[90°:180°]")
RMSE_FAIL = 20.0
SUCCESS_NCM = 10  # success needs strictly more correct matches than this
PIXEL_THRESH = 3.0


def signed_angle(theta_deg: float) -> float:
    """Map any angle to (-180, 180]."""
    a = math.fmod(theta_deg, 360.0)
    if a > 180:
        a -= 360
    elif a <= -180:
        a += 360
    return a


def angle_bucket(theta_deg: float) -> str:
    a = signed_angle(theta_deg)
    if a < -90:
        return BUCKETS[0]
    if a < -30:
        return BUCKETS[1]
    if a < 30:
        return BUCKETS[2]
    if a < 90:
        return BUCKETS[3]
    return BUCKETS[4]


def scale_tag(rng_: Sequence[float]) -> str:
    lo, hi = rng_
    return f"[{lo:g},{hi:g}]"


@dataclass
class BenchmarkPair:
    id: str
    x_path: str | None
    y_path: str | None
    gt: Homography
    scale_draw: float
    scale_range_tag: str
    angle_bucket: str
    x: np.ndarray | None = field(default=None, repr=False)
    y: np.ndarray | None = field(default=None, repr=False)

    @property
    def theta_deg(self) -> float:
        return self.gt.theta_deg

    def manifest_line(self) -> str:
        m = " ".join(repr(float(v)) for v in self.gt.m.ravel())
        return "\t".join([self.id, self.x_path or "", self.y_path or "", m,
                          f"{self.gt.theta_deg:g}", repr(float(self.scale_draw)), self.angle_bucket])

    @classmethod
    def from_manifest_line(cls, line: str) -> "BenchmarkPair":
        f = line.rstrip("\n").split("\t")
        if len(f) != 7:
            raise ValueError(f"malformed manifest line ({len(f)} fields): {line!r}")
        pid, xp, yp, mat, theta, scale, bucket = f
        gt = Homography(np.array([float(v) for v in mat.split()]).reshape(3, 3), float(theta))
        tag = pid.rsplit("_", 1)[-1] if "_" in pid else ""
        return cls(pid, xp, yp, gt, float(scale), tag, bucket)


def synthesize_pair(img_a: np.ndarray, img_b: np.ndarray, theta_deg: float, scale_range=(1.0, 1.0),
                    translation_frac: float = 0.1, rng_seed=0, pair_id: str = "pair",
                    training: bool = False) -> BenchmarkPair:
    """X = img_a untouched, Y = img_b warped by a random similarity with the given rotation.

    ``gt`` maps X pixel coordinates to Y pixel coordinates. Training mode
    accepts any rotation angle; benchmark mode insists on the 10-degree grid.
    """
    img_a = np.asarray(img_a)
    img_b = np.asarray(img_b)
    if img_a.shape != img_b.shape:
        raise ValueError(f"source images are not aligned: {img_a.shape} vs {img_b.shape}")
    if not training and (theta_deg % 10 != 0 or not 10 <= theta_deg <= 350):
        raise ValueError(f"benchmark angles are multiples of 10 in [10, 350], got {theta_deg}")
    if not 0 <= translation_frac <= 0.2:
        raise ValueError(f"translation_frac must lie in [0, 0.2], got {translation_frac}")
    lo, hi = scale_range
    rng = np.random.default_rng(rng_seed)
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    h, w = img_a.shape
    lim = translation_frac * min(h, w)
    t = rng.uniform(-lim, lim, 2) if lim > 0 else np.zeros(2)
    gt = make_homography(theta_deg, scale, (float(t[0]), float(t[1])), ((w - 1) / 2.0, (h - 1) / 2.0))
    y = warp_image(img_b, gt)
    return BenchmarkPair(pair_id, None, None, gt, scale, scale_tag(scale_range), angle_bucket(theta_deg),
                         x=img_a, y=y)


def pair_seed(seed: int, source: int, k: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, source, k])


def iter_benchmark(source_pairs, seed: int = 0, translation_frac: float = 0.1):
    """Yield the 105 synthesized pairs of every source pair, in a fixed order."""
    for si, (a, b) in enumerate(source_pairs):
        for ai, theta in enumerate(ANGLES):
            for ri, srange in enumerate(SCALE_RANGES):
                pid = f"s{si:04d}_r{theta:03d}_{scale_tag(srange)}"
                yield si, synthesize_pair(a, b, theta, srange, translation_frac,
                                          pair_seed(seed, si, ai * len(SCALE_RANGES) + ri), pid)


def build_benchmark(source_pairs, out_dir, seed: int = 0, translation_frac: float = 0.1,
                    write_images: bool = True) -> list[BenchmarkPair]:
    """Expand every aligned source pair into 35 angles x 3 scale ranges and write a manifest.

    Images are written as 8-bit PNGs; the manifest is ``out_dir/manifest.tsv``.
    """
    from .imageio import save_png

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs: list[BenchmarkPair] = []
    x_written: set[int] = set()
    for si, bp in iter_benchmark(source_pairs, seed, translation_frac):
        x_path = out / f"s{si:04d}_X.png"
        y_path = out / f"{bp.id}_Y.png"
        if write_images:
            if si not in x_written:
                save_png(x_path, bp.x)
                x_written.add(si)
            save_png(y_path, bp.y)
        bp.x_path, bp.y_path = x_path.name, y_path.name
        bp.x = bp.y = None
        pairs.append(bp)
    write_manifest(out / "manifest.tsv", pairs)
    return pairs


def write_manifest(path, pairs: Iterable[BenchmarkPair]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(p.manifest_line() + "\n")


def read_manifest(path) -> list[BenchmarkPair]:
    with open(path, encoding="utf-8") as fh:
        return [BenchmarkPair.from_manifest_line(line) for line in fh if line.strip()]


# -- metrics ---------------------------------------------------------------------------
def ncm(matches: MatchSet, gt: Homography, pixel_thresh: float = PIXEL_THRESH) -> int:
    """Number of matches whose residual under the true transform is below the threshold."""
    if len(matches) == 0:
        return 0
    return int(np.sum(residuals(matches, gt) < pixel_thresh))


def rmse(matches: MatchSet, gt: Homography, pixel_thresh: float = PIXEL_THRESH) -> float:
    """RMS residual of the correct matches; the failure sentinel when NCM <= 10."""
    if len(matches) == 0:
        return RMSE_FAIL
    r = residuals(matches, gt)
    ok = r < pixel_thresh
    if ok.sum() <= SUCCESS_NCM:
        return RMSE_FAIL
    return float(np.sqrt(np.mean(r[ok] ** 2)))


@dataclass
class EvalRecord:
    pair_id: str
    ncm: int
    rmse: float
    success: bool
    angle_bucket: str
    seconds: float = 0.0
    theta_deg: float | None = None

    def __post_init__(self):
        if self.success != (self.ncm > SUCCESS_NCM):
            raise ValueError(f"success flag inconsistent with ncm={self.ncm}")


def evaluate_matches(pair_id: str, matches: MatchSet, gt: Homography, pixel_thresh: float = PIXEL_THRESH,
                     seconds: float = 0.0) -> EvalRecord:
    """Score the RANSAC-kept matches of one pair."""
    kept = matches.inliers()
    n = ncm(kept, gt, pixel_thresh)
    theta = gt.theta_deg if gt.theta_deg is not None else 0.0
    return EvalRecord(pair_id, n, rmse(kept, gt, pixel_thresh), n > SUCCESS_NCM, angle_bucket(theta),
                      seconds, gt.theta_deg)


@dataclass
class ReportRow:
    bucket: str
    pairs: int
    ncm: float  # mean over successful pairs, 0 if none
    rmse: float  # mean over successful pairs, sentinel if none
    sr: float  # percent
    ncm_all: float  # mean over every pair, failures included
    rmse_all: float  # mean over every pair with failures counted at the sentinel


def _row(bucket: str, recs: list[EvalRecord]) -> ReportRow:
    succ = [r for r in recs if r.success]
    n = len(recs)
    return ReportRow(
        bucket, n,
        float(np.mean([r.ncm for r in succ])) if succ else 0.0,
        float(np.mean([r.rmse for r in succ])) if succ else RMSE_FAIL,
        100.0 * len(succ) / n if n else 0.0,
        float(np.mean([r.ncm for r in recs])) if recs else 0.0,
        float(np.mean([r.rmse for r in recs])) if recs else RMSE_FAIL,
    )


def bucket_report(records: Sequence[EvalRecord]) -> list[ReportRow]:
    """One row per angle bucket (in table order) plus a final 'all' row."""
    if not records:
        return []
    rows = [_row(b, [r for r in records if r.angle_bucket == b]) for b in BUCKETS]
    rows.append(_row("all", list(records)))
    return rows


REPORT_HEADER = ("bucket", "pairs", "NCM", "RMSE", "SR", "NCM_all", "RMSE_all")


def write_report(path, rows: Sequence[ReportRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow([r.bucket, r.pairs, f"{r.ncm:.3f}", f"{r.rmse:.3f}", f"{r.sr:.2f}",
                        f"{r.ncm_all:.3f}", f"{r.rmse_all:.3f}"])


def read_report(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
