"""Homographies, STN-style sampling grids and point warping.

Pixel coordinates put pixel (i, j) at x = j, y = i. Normalized grid
coordinates place pixel centres at (2j + 1) / W - 1, so [-1, 1] spans the
full image extent and a 2x2 identity grid sits at +-0.5.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .tensor import Tensor, grid_sample as _grid_sample


@dataclass(frozen=True)
class Homography:
    m: np.ndarray
    theta_deg: float | None = None

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise ValueError("homography has non-finite entries")
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise ValueError("homography is not invertible")
        object.__setattr__(self, "m", m)

    def inverse(self) -> "Homography":
        theta = None if self.theta_deg is None else -self.theta_deg
        return Homography(np.linalg.inv(self.m), theta)

    def __matmul__(self, other: "Homography") -> "Homography":
        theta = None
        if self.theta_deg is not None and other.theta_deg is not None:
            theta = self.theta_deg + other.theta_deg
        return Homography(self.m @ other.m, theta)

    def to_line(self) -> str:
        vals = " ".join(repr(float(v)) for v in self.m.ravel())
        return vals if self.theta_deg is None else f"{vals} theta={self.theta_deg!r}"

    @classmethod
    def from_line(cls, line: str) -> "Homography":
        toks = line.split()
        theta = None
        nums = []
        for t in toks:
            if t.startswith("theta="):
                theta = float(t[len("theta="):])
            else:
                nums.append(float(t))
        if len(nums) != 9:
            raise ValueError(f"expected 9 homography entries, got {len(nums)}")
        return cls(np.array(nums).reshape(3, 3), theta)


def _translate(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def make_homography(theta_deg: float, scale: float = 1.0, translation=(0.0, 0.0),
                    center=(0.0, 0.0)) -> Homography:
    """Similarity transform T(c) T(t) R(theta) S(scale) T(-c)."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    th = math.radians(theta_deg)
    c, s = math.cos(th), math.sin(th)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    m = (_translate(*center) @ _translate(*translation) @ rot
         @ np.diag([scale, scale, 1.0]) @ _translate(-center[0], -center[1]))
    return Homography(m, float(theta_deg))


def warp_points(H: Homography | np.ndarray, pts) -> tuple[np.ndarray, np.ndarray]:
    """Map (N, 2) pixel points through H.

    Returns the warped points and a validity mask; points that land at
    infinity (w ~ 0) come back as NaN with valid=False.
    """
    m = H.m if isinstance(H, Homography) else np.asarray(H, dtype=np.float64)
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    hom = p @ m[:, :2].T + m[:, 2]
    wcoord = hom[:, 2]
    valid = np.abs(wcoord) > 1e-12
    out = np.full((len(p), 2), np.nan)
    out[valid] = hom[valid, :2] / wcoord[valid, None]
    return out, valid


def pixel_to_norm(x, size: int):
    return (2.0 * np.asarray(x, dtype=np.float64) + 1.0) / size - 1.0


def norm_to_pixel(u, size: int):
    return ((np.asarray(u, dtype=np.float64) + 1.0) * size - 1.0) / 2.0


@dataclass
class SampleGrid:
    """Per-output-pixel source coordinates, normalized to [-1, 1]."""

    coords: np.ndarray  # (out_h, out_w, 2), (x, y)
    src_shape: tuple[int, int] = field(default=(0, 0))

    @property
    def shape(self) -> tuple[int, int]:
        return self.coords.shape[:2]

    def inside(self) -> np.ndarray:
        return np.all(np.abs(self.coords) <= 1.0, axis=-1) & np.all(np.isfinite(self.coords), axis=-1)


def affine_grid(H: Homography, out_h: int, out_w: int, src_h: int | None = None,
                src_w: int | None = None) -> SampleGrid:
    """Grid reading the source image at H(p) for every output pixel p.

    Sampling an image B with the grid of H^-1 produces B warped by H; sampling
    a feature map of the warped image with the grid of H brings it back onto
    the unwarped frame.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    if not isinstance(H, Homography):
        H = Homography(H)
    src_h = out_h if src_h is None else src_h
    src_w = out_w if src_w is None else src_w
    ys, xs = np.mgrid[0:out_h, 0:out_w]
    src, _ = warp_points(H, np.stack([xs.ravel(), ys.ravel()], axis=1))
    coords = np.stack([pixel_to_norm(src[:, 0], src_w), pixel_to_norm(src[:, 1], src_h)], axis=-1)
    return SampleGrid(coords.reshape(out_h, out_w, 2), (src_h, src_w))


def grid_sample(f: Tensor, grid: SampleGrid) -> Tensor:
    """Bilinear, zero-padded sampling of an NCHW tensor (differentiable in f)."""
    if f.shape[-2] < 2 or f.shape[-1] < 2:
        raise ValueError(f"grid_sample needs at least 2x2 input, got {f.shape}")
    return _grid_sample(f, grid)


def warp_image(img: np.ndarray, H: Homography, out_shape=None) -> np.ndarray:
    """Resample so that out(H p) = img(p): bilinear, zeros outside.

    Uses the same pixel-centre convention and zero padding as grid_sample.
    """
    img = np.asarray(img, dtype=np.float64)
    oh, ow = img.shape if out_shape is None else out_shape
    ys, xs = np.mgrid[0:oh, 0:ow]
    src, valid = warp_points(H.inverse(), np.stack([xs.ravel(), ys.ravel()], axis=1))
    src[~valid] = -10.0
    out = map_coordinates(img, [src[:, 1], src[:, 0]], order=1, mode="grid-constant", cval=0.0, prefilter=False)
    return out.reshape(oh, ow)


def resize_image(img: np.ndarray, scale: float) -> np.ndarray:
    """Bilinear resize; output pixel (x, y) reads the input at (x, y) / scale, edges replicated."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    oh, ow = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    ys, xs = np.mgrid[0:oh, 0:ow] / scale
    out = map_coordinates(img, [np.clip(ys, 0, h - 1).ravel(), np.clip(xs, 0, w - 1).ravel()],
                          order=1, mode="nearest", prefilter=False)
    return out.reshape(oh, ow).astype(np.float32)
