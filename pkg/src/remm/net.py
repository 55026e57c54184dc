"""Multimodal feature network: unshared front layers, shared trunk, soft detector."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cyclic import GROUP_SIZES, check_group_size
from .geometry import Homography, SampleGrid, affine_grid, grid_sample
from .tensor import Tensor

MODALITIES = ("A", "B")
MIN_SIDE = 32


@dataclass
class NetConfig:
    unshared_layers: int = 2
    shared_layers: int = 3
    channels: tuple[int, ...] = (16, 32, 64, 128, 128)
    detector_window: int = 5
    descriptor_dim: int = 128
    tau: float = 0.1
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    g_size: int = 16

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if len(self.channels) != self.unshared_layers + self.shared_layers:
            raise ValueError(f"{len(self.channels)} channel entries for "
                             f"{self.unshared_layers + self.shared_layers} layers")
        if self.channels[-1] != self.descriptor_dim:
            raise ValueError("last layer width must equal descriptor_dim")
        for g in GROUP_SIZES:
            check_group_size(g, self.descriptor_dim)
        check_group_size(self.g_size, self.descriptor_dim)
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.detector_window < 3 or self.detector_window % 2 == 0:
            raise ValueError(f"detector_window must be odd and >= 3, got {self.detector_window}")


@dataclass
class DenseFeatures:
    """Per-pixel unit descriptors (N, D, H, W) and scores (N, 1, H, W)."""

    descriptors: Tensor
    scores: Tensor
    mask: np.ndarray | None = field(default=None)  # (N, 1, H, W) validity, set by alignment

    def descriptor_map(self, i: int = 0) -> np.ndarray:
        """H x W x D view of one image's descriptors."""
        return self.descriptors.data[i].transpose(1, 2, 0)

    def score_map(self, i: int = 0) -> np.ndarray:
        return self.scores.data[i, 0]


def init_params(config: NetConfig, seed: int = 0) -> dict[str, Tensor]:
    """He-initialized weights. Shared layers exist once and serve both modalities."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def conv(name, cin, cout, k=3):
        std = np.sqrt(2.0 / (cin * k * k))
        params[f"{name}.weight"] = Tensor(rng.normal(0, std, (cout, cin, k, k)).astype(np.float32),
                                          requires_grad=True, name=f"{name}.weight")
        params[f"{name}.bias"] = Tensor(np.zeros(cout, np.float32), requires_grad=True, name=f"{name}.bias")

    widths = (1,) + config.channels
    for mod in MODALITIES:
        for i in range(config.unshared_layers):
            conv(f"unshared.{mod}.{i}", widths[i], widths[i + 1])
    for j in range(config.shared_layers):
        i = config.unshared_layers + j
        conv(f"shared.{j}", widths[i], widths[i + 1])
    per_group = config.descriptor_dim // config.g_size
    params["detector.weight"] = Tensor(rng.normal(0, np.sqrt(1.0 / per_group), (1, per_group, 1, 1))
                                       .astype(np.float32), requires_grad=True, name="detector.weight")
    params["detector.bias"] = Tensor(np.zeros(1, np.float32), requires_grad=True, name="detector.bias")
    return params


def params_from_arrays(arrays: dict[str, np.ndarray], trainable: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v.astype(np.float32), requires_grad=trainable, name=k) for k, v in arrays.items()}


def layer_names(config: NetConfig, modality: str) -> list[str]:
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
    names = [f"unshared.{modality}.{i}" for i in range(config.unshared_layers)]
    return names + [f"shared.{j}" for j in range(config.shared_layers)]


def standardize(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    std = img.std()
    return (img - img.mean()) / (std if std > 1e-6 else 1.0)


def describe(image, modality: str, params: dict[str, Tensor], config: NetConfig) -> Tensor:
    """Unit-norm dense descriptors (N, D, H, W) for an (H, W) or (N, 1, H, W) input."""
    names = layer_names(config, modality)
    if isinstance(image, Tensor):
        x = image
    else:
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None, None]
        x = Tensor(np.stack([standardize(a[0])[None] for a in arr]))
    if min(x.shape[-2:]) < MIN_SIDE:
        raise ValueError(f"image side {min(x.shape[-2:])} below network minimum {MIN_SIDE}")
    for k, name in enumerate(names):
        x = T.conv2d(T.pad2d(x, 1, "replicate"), params[f"{name}.weight"], bias=params[f"{name}.bias"])
        if k < len(names) - 1:
            x = T.relu(x)
    return T.l2norm(x, axis=1)


def local_softmax(act: Tensor, window: int) -> Tensor:
    """exp(a_p) over the largest window sum touching p.

    Dividing by the max of the neighbouring window sums (rather than p's own)
    keeps every window's total score at most 1.
    """
    r = window // 2
    e = T.exp(act - float(act.data.max()))
    z = T.box_sum2d(T.pad2d(e, r, "replicate"), window)
    m = T.max_pool2d(T.pad2d(z, r, "replicate"), window)
    return e / m


def detect_scores(descriptors: Tensor, params: dict[str, Tensor], config: NetConfig) -> Tensor:
    """Score map in [0, 1] from a 1x1 projection of the descriptors.

    The projection weight is shared by all orientation groups, so a cyclic
    shift of the descriptor leaves the activation unchanged.
    """
    n, d, h, w = descriptors.shape
    g = config.g_size
    pooled = T.tsum(T.reshape(descriptors, (n, g, d // g, h, w)), axis=1)
    act = T.conv2d(pooled, params["detector.weight"], bias=params["detector.bias"])
    return local_softmax(act, config.detector_window)


def extract_features(image, modality: str, params: dict[str, Tensor], config: NetConfig) -> DenseFeatures:
    desc = describe(image, modality, params, config)
    return DenseFeatures(desc, detect_scores(desc, params, config))


def align_to_reference(features_y: DenseFeatures, gt: Homography, out_shape=None) -> DenseFeatures:
    """Warp Y's descriptor and score maps onto X's pixel frame.

    ``gt`` maps X pixels to Y pixels. The returned mask is 0 where the grid
    reads outside Y.
    """
    h, w = features_y.descriptors.shape[-2:]
    oh, ow = (h, w) if out_shape is None else out_shape
    grid = affine_grid(gt, oh, ow, h, w)
    mask = grid.inside().astype(np.float32)[None, None]
    return DenseFeatures(grid_sample(features_y.descriptors, grid), grid_sample(features_y.scores, grid),
                         np.broadcast_to(mask, (features_y.scores.shape[0], 1, oh, ow)).copy())


def forward_pair(x, y, params, config: NetConfig):
    return extract_features(x, "A", params, config), extract_features(y, "B", params, config)


__all__ = [
    "NetConfig", "DenseFeatures", "init_params", "params_from_arrays", "describe", "detect_scores",
    "local_softmax", "extract_features", "align_to_reference", "SampleGrid", "MODALITIES",
]
