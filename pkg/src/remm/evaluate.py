"""Benchmark runner: extract, match and score every pair of a manifest."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .benchmark import PIXEL_THRESH, BenchmarkPair, EvalRecord, evaluate_matches
from .net import NetConfig
from .pipeline import DEFAULT_SCALES, MatchSet, keypoint_array, match_pair, multiscale_extract


@dataclass
class EvalConfig:
    scales: tuple[float, ...] = DEFAULT_SCALES
    k: int = 5000
    nms_window: int = 5
    shift_mode: str | float | None = 0.1
    min_sim: float = 0.0
    inlier_px: float = 3.0
    ransac_iters: int = 2000
    ransac_seed: int = 0
    pixel_thresh: float = PIXEL_THRESH

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)


def parse_shift_mode(text) -> str | float | None:
    """'none' disables shifting, 'top1' keeps the argmax, a number is a ratio."""
    if text is None or isinstance(text, float):
        return text
    t = str(text).strip().lower()
    if t in ("none", "off", "no"):
        return None
    if t == "top1":
        return "top1"
    r = float(t)
    if not 0 < r < 1:
        raise ValueError(f"shift ratio must lie in (0, 1), got {text!r}")
    return r


def extract(image: np.ndarray, params, net_cfg: NetConfig, modality: str, ecfg: EvalConfig):
    """(N, 4) keypoints [x, y, score, scale] and (N, D) descriptors."""
    kps, desc = multiscale_extract(image, params, net_cfg, modality, ecfg.scales, ecfg.k, ecfg.nms_window)
    return keypoint_array(kps), desc


def match_and_score(pair_id: str, kp_a, d_a, kp_b, d_b, gt, net_cfg: NetConfig, ecfg: EvalConfig,
                    mode="default") -> tuple[EvalRecord, MatchSet]:
    mode = ecfg.shift_mode if mode == "default" else mode
    t0 = time.perf_counter()
    ms = match_pair(kp_a, d_a, kp_b, d_b, net_cfg.g_size, mode, ecfg.min_sim, ecfg.inlier_px,
                    ecfg.ransac_iters, ecfg.ransac_seed)
    return evaluate_matches(pair_id, ms, gt, ecfg.pixel_thresh, time.perf_counter() - t0), ms


def evaluate_pairs(pairs: Iterable[BenchmarkPair], params, net_cfg: NetConfig, ecfg: EvalConfig | None = None,
                   modes: Sequence = ("default",)) -> dict:
    """Score in-memory pairs under one or more shift modes.

    X features are cached per source image (pairs sharing an ``x`` array
    object reuse them). Returns {mode: [EvalRecord, ...]}; each record's
    ``seconds`` is the matching plus RANSAC time for that mode.
    """
    ecfg = ecfg or EvalConfig()
    out = {m: [] for m in modes}
    cache: dict[int, tuple] = {}
    for bp in pairs:
        key = id(bp.x)
        if key not in cache:
            cache.clear()
            cache[key] = (bp.x, extract(bp.x, params, net_cfg, "A", ecfg))
        kp_a, d_a = cache[key][1]
        kp_b, d_b = extract(bp.y, params, net_cfg, "B", ecfg)
        for m in modes:
            rec, _ = match_and_score(bp.id, kp_a, d_a, kp_b, d_b, bp.gt, net_cfg, ecfg, m)
            out[m].append(rec)
    return out
