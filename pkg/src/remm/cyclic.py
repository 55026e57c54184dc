"""Cyclic shift encoding of descriptor orientation.

A 128-d descriptor is viewed as ``g_size`` groups of ``128 // g_size``
channels, one group per orientation bin of 360 / g_size degrees. Rotating
the image by one bin corresponds to rolling the group axis by one step;
the first channel of every group acts as an orientation histogram used to
pick candidate shifts when the rotation is unknown.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np

from .tensor import Tensor, take

GROUP_SIZES = (8, 16, 32, 64)
DESCRIPTOR_DIM = 128

# "top1" or a ratio R in (0, 1): keep bins with h >= R * max(h)
ShiftMode = Union[str, float]


@dataclass(frozen=True)
class GroupedDescriptor:
    groups: np.ndarray
    g_size: int

    def __post_init__(self):
        if self.groups.shape[0] != self.g_size:
            raise ValueError(f"expected {self.g_size} groups, got {self.groups.shape[0]}")

    def flatten(self) -> np.ndarray:
        return self.groups.reshape(-1)

    @property
    def histogram(self) -> np.ndarray:
        return self.groups[:, 0]


@dataclass(frozen=True)
class ShiftSet:
    shifts: tuple[int, ...]

    def __post_init__(self):
        if not self.shifts:
            raise ValueError("shift set must not be empty")
        if len(set(self.shifts)) != len(self.shifts):
            raise ValueError(f"duplicate shifts in {self.shifts}")

    def __iter__(self) -> Iterator[int]:
        return iter(self.shifts)

    def __len__(self) -> int:
        return len(self.shifts)


def check_group_size(g_size: int, dim: int = DESCRIPTOR_DIM) -> None:
    if g_size < 1 or dim % g_size:
        raise ValueError(f"group size {g_size} does not divide descriptor dim {dim}")


def group(d, g_size: int) -> GroupedDescriptor:
    d = np.asarray(d)
    check_group_size(g_size, d.size)
    return GroupedDescriptor(d.reshape(g_size, d.size // g_size), g_size)


def shift_value_from_angle(theta_deg: float, g_size: int) -> int:
    """Nearest whole number of orientation bins for a rotation, mod g_size."""
    check_group_size(g_size)
    if not math.isfinite(theta_deg):
        raise ValueError(f"rotation angle must be finite, got {theta_deg}")
    x = theta_deg / 360.0 * g_size
    # half-way cases round away from zero
    n = math.copysign(math.floor(abs(x) + 0.5), x)
    return int(n) % g_size


def cyclic_shift(gd: GroupedDescriptor, s: int) -> GroupedDescriptor:
    """Output group i is input group (i + s) mod g_size."""
    s = int(s) % gd.g_size
    if s == 0:
        return GroupedDescriptor(gd.groups.copy(), gd.g_size)
    return GroupedDescriptor(np.roll(gd.groups, -s, axis=0), gd.g_size)


def _ranked_bins(h: np.ndarray, mode: ShiftMode) -> list[int]:
    g = len(h)
    if np.all(h == h[0]):
        return list(range(g))
    order = sorted(range(g), key=lambda i: (-h[i], i))
    if mode == "top1":
        return order[:1]
    ratio = float(mode)
    if not 0 < ratio < 1:
        raise ValueError(f"shift ratio must lie in (0, 1), got {mode!r}")
    thresh = ratio * h[order[0]]
    return [order[0]] + [i for i in order[1:] if h[i] >= thresh]


def topk_shift_values(gd: GroupedDescriptor, mode: ShiftMode = "top1") -> ShiftSet:
    """Candidate shifts read off the orientation histogram, argmax first."""
    return ShiftSet(tuple(int(i) for i in _ranked_bins(gd.histogram, mode)))


def expand_descriptors(gd: GroupedDescriptor, shifts: ShiftSet) -> np.ndarray:
    """One re-normalized flattened descriptor per shift, in shift order."""
    out = np.stack([cyclic_shift(gd, s).flatten() for s in shifts]).astype(np.float32)
    n = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.where(n > 0, n, 1)


# -- batched helpers used by the matcher --------------------------------------
def shift_masks(desc: np.ndarray, g_size: int, mode: ShiftMode | None) -> np.ndarray:
    """(N, g_size) boolean: which shifts each descriptor expands to.

    ``mode=None`` disables the shift module (identity shift only).
    """
    desc = np.asarray(desc)
    check_group_size(g_size, desc.shape[1])
    n = len(desc)
    if mode is None:
        m = np.zeros((n, g_size), dtype=bool)
        m[:, 0] = True
        return m
    h = desc.reshape(n, g_size, -1)[:, :, 0]
    hmax = h.max(axis=1, keepdims=True)
    flat = np.all(h == h[:, :1], axis=1)
    if mode == "top1":
        m = np.arange(g_size)[None, :] == h.argmax(axis=1)[:, None]
    else:
        ratio = float(mode)
        if not 0 < ratio < 1:
            raise ValueError(f"shift ratio must lie in (0, 1), got {mode!r}")
        m = h >= ratio * hmax
        m[np.arange(n), h.argmax(axis=1)] = True
    m[flat] = True
    return m


def roll_groups(desc: np.ndarray, s: int, g_size: int) -> np.ndarray:
    """cyclic_shift applied row-wise to an (N, 128) array."""
    n, dim = desc.shape
    return np.roll(desc.reshape(n, g_size, dim // g_size), -int(s), axis=1).reshape(n, dim)


def shift_channels(t: Tensor, s: int, g_size: int, axis: int = 1) -> Tensor:
    """Differentiable cyclic shift of the descriptor axis of a feature tensor."""
    dim = t.shape[axis]
    check_group_size(g_size, dim)
    s = int(s) % g_size
    if s == 0:
        return t
    per = dim // g_size
    perm = ((np.arange(g_size)[:, None] + s) % g_size * per + np.arange(per)[None, :]).ravel()
    return take(t, perm, axis)
