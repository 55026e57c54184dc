"""Training loop for the toy multimodal network."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .benchmark import synthesize_pair
from .cyclic import shift_channels, shift_value_from_angle
from .formats import save_checkpoint
from .geometry import Homography, affine_grid, pixel_to_norm, warp_points
from .losses import peaking_loss, repeatability_loss, shift_descriptor_loss, total_loss
from .net import NetConfig, describe, detect_scores, init_params
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "L_P", "L_R", "L_SD", "L_all", "lr")


@dataclass
class TrainConfig:
    steps: int = 1500
    batch: int = 4
    lr: float = 1e-3
    positives: int = 256  # per step, split evenly over the batch
    positive_sampling: str = "random"  # "random" or "top"
    crop: int = 48
    scale_range: tuple[float, float] = (0.6, 1.0)
    translation_frac: float = 0.1
    angle_mode: str = "group"  # "group": multiples of 360/G; "any": uniform in [0, 360)
    edge_margin: int = 2
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be positive")
        if self.positives < 2 * self.batch:
            raise ValueError(f"need at least 2 positives per pair, got {self.positives} for batch {self.batch}")
        if self.positive_sampling not in ("random", "top"):
            raise ValueError(f"positive_sampling must be 'random' or 'top', got {self.positive_sampling!r}")
        if self.angle_mode not in ("group", "any"):
            raise ValueError(f"angle_mode must be 'group' or 'any', got {self.angle_mode!r}")
        if self.crop < 32:
            raise ValueError(f"crop must be at least 32, got {self.crop}")


@dataclass
class Sample:
    """One cropped training pair; ``gt`` maps X crop pixels to Y crop pixels."""

    x: np.ndarray
    y: np.ndarray
    gt: Homography
    theta_deg: float


def _translate(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def make_sample(img_a, img_b, rng: np.random.Generator, net_cfg: NetConfig, cfg: TrainConfig) -> Sample:
    """Random rotation and scale of B, then matching crops of both images."""
    g = net_cfg.g_size
    if cfg.angle_mode == "group":
        theta = float(rng.integers(g)) * 360.0 / g
    else:
        theta = float(rng.uniform(0, 360))
    bp = synthesize_pair(img_a, img_b, theta, cfg.scale_range, cfg.translation_frac,
                         int(rng.integers(2 ** 31)), training=True)
    h, w = bp.x.shape
    c = cfg.crop
    if c > min(h, w):
        raise ValueError(f"crop {c} exceeds image size {h}x{w}")
    ox, oy = (int(v) for v in rng.integers(0, [w - c + 1, h - c + 1]))
    centre, _ = warp_points(bp.gt, [[ox + c / 2 - 0.5, oy + c / 2 - 0.5]])
    qx = int(np.clip(round(centre[0, 0] - c / 2 + 0.5), 0, w - c))
    qy = int(np.clip(round(centre[0, 1] - c / 2 + 0.5), 0, h - c))
    gt = Homography(_translate(-qx, -qy) @ bp.gt.m @ _translate(ox, oy), theta)
    return Sample(bp.x[oy:oy + c, ox:ox + c], bp.y[qy:qy + c, qx:qx + c], gt, theta)


def _eroded_inside(gt: Homography, size: int, margin: int) -> np.ndarray:
    """Pixels of X whose warped position lies at least ``margin`` px inside Y."""
    ys, xs = np.mgrid[0:size, 0:size]
    p, ok = warp_points(gt, np.stack([xs.ravel(), ys.ravel()], axis=1))
    lo, hi = margin, size - 1 - margin
    inside = ok & np.all((p >= lo) & (p <= hi), axis=1)
    keep = inside.reshape(size, size)
    keep[:margin, :] = keep[-margin:, :] = False
    keep[:, :margin] = keep[:, -margin:] = False
    return keep


def pick_positives(valid: np.ndarray, n: int, rng: np.random.Generator, scores: np.ndarray | None = None):
    """(ys, xs) of n distinct valid pixels, uniformly or by highest score."""
    ys, xs = np.nonzero(valid)
    if len(ys) < n:
        raise ValueError(f"only {len(ys)} valid pixels for {n} positives")
    if scores is None:
        idx = rng.choice(len(ys), n, replace=False)
    else:
        idx = np.argsort(-scores[ys, xs], kind="stable")[:n]
    return ys[idx], xs[idx]


def pair_losses(dx: Tensor, sx: Tensor, dy: Tensor, sy: Tensor, sample: Sample, n_pos: int,
                rng: np.random.Generator, net_cfg: NetConfig, cfg: TrainConfig):
    """(L_P, L_R, L_SD) for one pair given its (1, ., H, W) feature maps."""
    size = dx.shape[-1]
    grid = affine_grid(sample.gt, size, size, *dy.shape[-2:])
    mask = grid.inside().astype(np.float32)[None, None]
    cs_y = T.grid_sample(sy, grid)
    l_r = repeatability_loss(sx, cs_y, mask)
    l_p = (peaking_loss(sx, None, net_cfg.detector_window)
           + peaking_loss(sy, None, net_cfg.detector_window)) * 0.5

    valid = _eroded_inside(sample.gt, size, cfg.edge_margin)
    rank = sx.data[0, 0] * cs_y.data[0, 0] if cfg.positive_sampling == "top" else None
    py, px = pick_positives(valid, n_pos, rng, rank)
    rd_y = shift_channels(dy, shift_value_from_angle(sample.theta_deg, net_cfg.g_size), net_cfg.g_size)
    src, _ = warp_points(sample.gt, np.stack([px, py], axis=1))
    pts = np.stack([pixel_to_norm(src[:, 0], dy.shape[-1]), pixel_to_norm(src[:, 1], dy.shape[-2])], axis=-1)
    at_y = T.grid_sample(rd_y, pts[None])  # (1, D, 1, n)
    d2 = T.l2norm(T.transpose(T.reshape(at_y, (dy.shape[1], n_pos))), axis=-1)
    d1 = T.index(dx, (0, slice(None), py, px))  # (n, D): advanced axes go first
    return l_p, l_r, shift_descriptor_loss(d1, d2, net_cfg.tau)


def train_step(params, batch: list[Sample], rng, net_cfg: NetConfig, cfg: TrainConfig):
    """Forward and backward for one batch; returns the four loss values and the loss tensor."""
    xs = np.stack([s.x for s in batch])[:, None]
    ys = np.stack([s.y for s in batch])[:, None]
    dx = describe(xs, "A", params, net_cfg)
    dy = describe(ys, "B", params, net_cfg)
    sx = detect_scores(dx, params, net_cfg)
    sy = detect_scores(dy, params, net_cfg)
    n_pos = cfg.positives // len(batch)
    parts = [[], [], []]
    for i, s in enumerate(batch):
        sl = (slice(i, i + 1),)
        terms = pair_losses(T.index(dx, sl), T.index(sx, sl), T.index(dy, sl), T.index(sy, sl),
                            s, n_pos, rng, net_cfg, cfg)
        for acc, t in zip(parts, terms):
            acc.append(t)
    inv = 1.0 / len(batch)
    l_p, l_r, l_sd = (_sum(p) * inv for p in parts)
    loss = total_loss(l_p, l_r, l_sd, net_cfg.lambdas)
    return loss, (float(l_p.data), float(l_r.data), float(l_sd.data), float(loss.data))


def _sum(ts: list[Tensor]) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = out + t
    return out


def lr_at(step: int, total: int, base: float) -> float:
    """Linear decay from ``base`` at step 0 to 0 after the last step."""
    return base * (1.0 - step / total)


def train(pairs, net_cfg: NetConfig | None = None, cfg: TrainConfig | None = None, out_dir=None,
          params=None) -> dict[str, Tensor]:
    """Train on aligned (A, B) image pairs; optionally write checkpoint and loss log to ``out_dir``.

    Raises FloatingPointError naming the step if the loss stops being finite.
    """
    net_cfg = net_cfg or NetConfig()
    cfg = cfg or TrainConfig()
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no training pairs")
    rng = np.random.default_rng(cfg.seed)
    params = params or init_params(net_cfg, cfg.seed)
    opt = Adam(params)
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    fh = open(out / "train_log.csv", "w", newline="") if out is not None else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(LOG_COLUMNS)
    try:
        for step in range(cfg.steps):
            lr = lr_at(step, cfg.steps, cfg.lr)
            batch = [make_sample(*pairs[int(rng.integers(len(pairs)))], rng, net_cfg, cfg)
                     for _ in range(cfg.batch)]
            loss, vals = train_step(params, batch, rng, net_cfg, cfg)
            if not all(math.isfinite(v) for v in vals):
                raise FloatingPointError(f"non-finite loss at step {step}: {vals}")
            opt.zero_grad()
            T.backward(loss)
            opt.step(lr)
            row = (step,) + vals + (lr,)
            rows.append(row)
            if writer:
                writer.writerow([step] + [f"{v:.6g}" for v in row[1:]])
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d  L_P %.4f  L_R %.5f  L_SD %.4f  L_all %.4f  lr %.2e", step, *vals, lr)
    finally:
        if fh:
            fh.close()
    if out is not None:
        save_checkpoint(out / "model.remm", params)
    return params
