"""Test-time pipeline: NMS, multi-scale extraction, shift-expanded matching, RANSAC."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .cyclic import ShiftMode, roll_groups, shift_masks
from .geometry import Homography, resize_image, warp_points
from .net import MIN_SIDE, NetConfig, extract_features

log = logging.getLogger(__name__)

DEFAULT_SCALES = (0.5, 0.707, 1.0, 1.414)


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float
    scale: float = 1.0


@dataclass
class MatchSet:
    idx_a: np.ndarray
    idx_b: np.ndarray
    similarity: np.ndarray
    shifts: np.ndarray  # (n, 2) winning (shift on A, shift on B)
    pts_a: np.ndarray  # (n, 2) pixel coordinates of the matched A keypoints
    pts_b: np.ndarray
    estimated_h: Homography | None = None
    inlier_flags: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.idx_a)

    @classmethod
    def empty(cls) -> "MatchSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros(0), np.zeros((0, 2), np.int64), np.zeros((0, 2)), np.zeros((0, 2)))

    def inliers(self) -> "MatchSet":
        """Subset kept by RANSAC (everything when no estimate was made)."""
        if self.inlier_flags is None:
            return self
        f = self.inlier_flags
        return MatchSet(self.idx_a[f], self.idx_b[f], self.similarity[f], self.shifts[f],
                        self.pts_a[f], self.pts_b[f], self.estimated_h, np.ones(int(f.sum()), bool))


# -- keypoints -------------------------------------------------------------------
def nms_topk(scores, window: int = 5, k: int = 5000) -> list[Keypoint]:
    """Local maxima of a score map, best first, at most k.

    A pixel survives when it is >= every neighbour in its window and strictly
    greater than the neighbours preceding it in row-major order, so plateaus
    keep only their first pixel. Equal scores sort row-major.
    """
    s = np.asarray(getattr(scores, "data", scores), dtype=np.float64)
    s = s.reshape(s.shape[-2:])
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    r = window // 2
    h, w = s.shape
    padded = np.pad(s, r, constant_values=-np.inf)
    keep = np.ones_like(s, dtype=bool)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[r + dy:r + dy + h, r + dx:r + dx + w]
            keep &= (s > nb) if (dy, dx) < (0, 0) else (s >= nb)
    ys, xs = np.nonzero(keep)
    order = np.argsort(-s[ys, xs], kind="stable")[:k]
    return [Keypoint(float(xs[i]), float(ys[i]), float(s[ys[i], xs[i]])) for i in order]


def multiscale_extract(image: np.ndarray, params, config: NetConfig, modality: str = "A",
                       scales=DEFAULT_SCALES, k: int = 5000, window: int = 5):
    """Keypoints (original pixel coordinates) and unit descriptors, global top-k by score."""
    if not scales or any(s <= 0 for s in scales):
        raise ValueError(f"scales must be non-empty and positive, got {scales}")
    image = np.asarray(image, dtype=np.float32)
    kps: list[Keypoint] = []
    descs: list[np.ndarray] = []
    for s in scales:
        level = image if s == 1.0 else resize_image(image, s)
        if min(level.shape) < MIN_SIDE:
            log.warning("skipping scale %.3f: level %s smaller than %d px", s, level.shape, MIN_SIDE)
            continue
        feats = extract_features(level, modality, params, config)
        found = nms_topk(feats.scores.data[0, 0], window, k)
        dmap = feats.descriptors.data[0]
        for kp in found:
            kps.append(Keypoint(kp.x / s, kp.y / s, kp.score, s))
            descs.append(sample_descriptor(dmap, kp.x, kp.y))
    order = sorted(range(len(kps)), key=lambda i: -kps[i].score)[:k]
    out_desc = np.stack([descs[i] for i in order]) if order else np.zeros((0, config.descriptor_dim), np.float32)
    return [kps[i] for i in order], out_desc.astype(np.float32)


def sample_descriptor(dmap: np.ndarray, x: float, y: float) -> np.ndarray:
    """Bilinear read of a (D, H, W) descriptor map, L2-normalized."""
    _, h, w = dmap.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0
    acc = np.zeros(dmap.shape[0], dtype=np.float64)
    for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)), (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        if wt and 0 <= xi < w and 0 <= yi < h:
            acc += wt * dmap[:, yi, xi]
    n = np.linalg.norm(acc)
    return (acc / n if n > 0 else acc).astype(np.float32)


def keypoint_array(kps: list[Keypoint]) -> np.ndarray:
    return np.array([[k.x, k.y, k.score, k.scale] for k in kps], dtype=np.float64).reshape(-1, 4)


# -- matching --------------------------------------------------------------------
def expand_all(desc: np.ndarray, g_size: int, mode: ShiftMode | None):
    """Stack every shift variant; returns (variants, owner index, shift) sorted by owner."""
    masks = shift_masks(desc, g_size, mode)
    owner, shift = np.nonzero(masks)
    n, dim = desc.shape
    grouped = desc.reshape(n, g_size, dim // g_size)
    rows = (np.arange(g_size)[None, :] + shift[:, None]) % g_size
    variants = grouped[owner[:, None], rows].reshape(len(owner), dim)
    return variants, owner, shift


def _block_starts(owner: np.ndarray, n: int) -> np.ndarray:
    return np.searchsorted(owner, np.arange(n + 1))


def mutual_nn_variants(va, oa, sa, vb, ob, sb, n_a: int, n_b: int, min_sim: float = 0.0) -> MatchSet:
    """Mutual nearest neighbours where each keypoint owns a contiguous block of variant rows.

    The similarity of two keypoints is the max cosine over their variant
    pairs; the winning (shift A, shift B) is recorded per match.
    """
    if n_a == 0 or n_b == 0:
        return MatchSet.empty()
    sim = np.asarray(va, np.float32) @ np.asarray(vb, np.float32).T
    ra, rb = _block_starts(oa, n_a), _block_starts(ob, n_b)
    best = np.maximum.reduceat(np.maximum.reduceat(sim, rb[:-1], axis=1), ra[:-1], axis=0)
    ab = best.argmax(axis=1)
    ba = best.argmax(axis=0)
    ia = np.nonzero(ba[ab] == np.arange(n_a))[0]
    ib = ab[ia]
    keep = best[ia, ib] >= min_sim
    ia, ib = ia[keep], ib[keep]
    shifts = np.zeros((len(ia), 2), dtype=np.int64)
    for n, (i, j) in enumerate(zip(ia, ib)):
        sub = sim[ra[i]:ra[i + 1], rb[j]:rb[j + 1]]
        r, c = np.unravel_index(np.argmax(sub), sub.shape)
        shifts[n] = (sa[ra[i] + r], sb[rb[j] + c])
    return MatchSet(ia, ib, best[ia, ib].astype(np.float64), shifts, np.zeros((len(ia), 2)), np.zeros((len(ia), 2)))


def match_mutual_nn(desc_a: np.ndarray, desc_b: np.ndarray, g_size: int = 16,
                    mode: ShiftMode | None = 0.1, min_sim: float = 0.0) -> MatchSet:
    """Mutual nearest neighbours under the max cosine over shift variants.

    ``mode`` picks the shift candidates per descriptor: None for no shift,
    'top1', or a ratio R keeping histogram bins >= R * max.
    """
    desc_a = np.asarray(desc_a, dtype=np.float32)
    desc_b = np.asarray(desc_b, dtype=np.float32)
    if len(desc_a) == 0 or len(desc_b) == 0:
        return MatchSet.empty()
    return mutual_nn_variants(*expand_all(desc_a, g_size, mode), *expand_all(desc_b, g_size, mode),
                              len(desc_a), len(desc_b), min_sim)


def match_keypoints(kps_a, desc_a, kps_b, desc_b, g_size: int = 16, mode: ShiftMode | None = 0.1,
                    min_sim: float = 0.0) -> MatchSet:
    ms = match_mutual_nn(desc_a, desc_b, g_size, mode, min_sim)
    pa = keypoint_array(kps_a)[:, :2] if not isinstance(kps_a, np.ndarray) else kps_a[:, :2]
    pb = keypoint_array(kps_b)[:, :2] if not isinstance(kps_b, np.ndarray) else kps_b[:, :2]
    return replace(ms, pts_a=pa[ms.idx_a], pts_b=pb[ms.idx_b])


# -- robust estimation ---------------------------------------------------------------
def _normalizer(pts: np.ndarray) -> np.ndarray:
    """Similarity taking points to zero mean, mean distance sqrt(2); batched over leading axes."""
    c = pts.mean(axis=-2, keepdims=True)
    d = np.linalg.norm(pts - c, axis=-1).mean(axis=-1)
    s = np.sqrt(2) / np.where(d > 1e-12, d, 1.0)
    t = np.zeros(pts.shape[:-2] + (3, 3))
    t[..., 0, 0] = s
    t[..., 1, 1] = s
    t[..., 0, 2] = -s * c[..., 0, 0]
    t[..., 1, 2] = -s * c[..., 0, 1]
    t[..., 2, 2] = 1.0
    return t


def dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized DLT; src/dst shaped (..., n, 2) with n >= 4. Returns (..., 3, 3)."""
    ts, td = _normalizer(src), _normalizer(dst)
    ps = src @ np.swapaxes(ts[..., :2, :2], -1, -2) + ts[..., None, :2, 2]
    pd = dst @ np.swapaxes(td[..., :2, :2], -1, -2) + td[..., None, :2, 2]
    x, y = ps[..., 0], ps[..., 1]
    u, v = pd[..., 0], pd[..., 1]
    one, zero = np.ones_like(x), np.zeros_like(x)
    r1 = np.stack([-x, -y, -one, zero, zero, zero, u * x, u * y, u], axis=-1)
    r2 = np.stack([zero, zero, zero, -x, -y, -one, v * x, v * y, v], axis=-1)
    a = np.concatenate([r1, r2], axis=-2)
    _, _, vt = np.linalg.svd(a)
    hn = vt[..., -1, :].reshape(a.shape[:-2] + (3, 3))
    return np.linalg.inv(td) @ hn @ ts


def reprojection_error(m: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """|H src - dst| for one (3, 3) or a batch (K, 3, 3) of homographies."""
    hom = src @ np.swapaxes(m[..., :, :2], -1, -2) + m[..., None, :, 2]
    wz = hom[..., 2]
    ok = np.abs(wz) > 1e-12
    proj = hom[..., :2] / np.where(ok, wz, 1.0)[..., None]
    err = np.linalg.norm(proj - dst, axis=-1)
    return np.where(ok & np.isfinite(err), err, np.inf)


@dataclass
class RansacResult:
    h: np.ndarray | None
    inliers: np.ndarray
    consensus: int = field(default=0)


def ransac(src: np.ndarray, dst: np.ndarray, inlier_px: float = 3.0, max_iters: int = 2000,
           seed: int = 0) -> RansacResult:
    """Fixed-budget 4-point RANSAC with a least-squares refit on the best consensus."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    if n < 4:
        return RansacResult(None, np.zeros(n, bool))
    rng = np.random.default_rng(seed)
    # sample 4 distinct indices per hypothesis via argsort of uniform keys
    keys = rng.random((max_iters, n))
    idx = np.argpartition(keys, 3, axis=1)[:, :4] if n > 4 else np.tile(np.arange(4), (max_iters, 1))
    with np.errstate(all="ignore"):
        hyps = dlt(src[idx], dst[idx])
        good = np.all(np.isfinite(hyps), axis=(1, 2)) & (np.abs(np.linalg.det(hyps)) > 1e-12)
        err = reprojection_error(hyps, src, dst)
    counts = np.where(good, (err < inlier_px).sum(axis=1), -1)
    best = int(np.argmax(counts))
    if counts[best] < 4:
        return RansacResult(None, np.zeros(n, bool))
    inl = err[best] < inlier_px
    with np.errstate(all="ignore"):
        refit = dlt(src[inl], dst[inl])
    if not np.all(np.isfinite(refit)) or abs(np.linalg.det(refit)) <= 1e-12:
        refit = hyps[best]
    return RansacResult(refit / refit[2, 2], inl, int(counts[best]))


def ransac_homography(matches: MatchSet, inlier_px: float = 3.0, max_iters: int = 2000,
                      seed: int = 0) -> MatchSet:
    """Attach a RANSAC homography and the consensus inlier flags to a match set."""
    n = len(matches)
    if n < 4:
        return replace(matches, estimated_h=None, inlier_flags=np.zeros(n, bool))
    res = ransac(matches.pts_a, matches.pts_b, inlier_px, max_iters, seed)
    if res.h is None:
        return replace(matches, estimated_h=None, inlier_flags=np.zeros(n, bool))
    try:
        est = Homography(res.h)
    except ValueError:
        return replace(matches, estimated_h=None, inlier_flags=np.zeros(n, bool))
    return replace(matches, estimated_h=est, inlier_flags=res.inliers)


def residuals(matches: MatchSet, gt: Homography) -> np.ndarray:
    """Distance between GT-warped A points and their matched B points (inf if invalid)."""
    warped, valid = warp_points(gt, matches.pts_a)
    d = np.linalg.norm(warped - matches.pts_b, axis=1) if len(matches) else np.zeros(0)
    return np.where(valid, d, np.inf)


def match_pair(kps_a, desc_a, kps_b, desc_b, g_size: int = 16, mode: ShiftMode | None = 0.1,
               min_sim: float = 0.0, inlier_px: float = 3.0, max_iters: int = 2000, seed: int = 0) -> MatchSet:
    return ransac_homography(match_keypoints(kps_a, desc_a, kps_b, desc_b, g_size, mode, min_sim),
                             inlier_px, max_iters, seed)
