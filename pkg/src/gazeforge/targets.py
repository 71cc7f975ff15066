"""Target saliency maps: local shifts under object masks and global scaling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, UsageError, no_grad

LOCAL_SHIFT = "local-shift"
GLOBAL_SCALE = "global-scale"
MANIPULATIONS = (LOCAL_SHIFT, GLOBAL_SCALE)

SHIFT_RANGE = (-4.0, 4.0)
SCALE_RANGE = (0.5, 2.0)


@dataclass
class ObjectMask:
    grid: np.ndarray  # (H, W) in [0, 1]
    object_id: int = 0

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ShapeError(f"mask grid must be 2-D, got {self.grid.shape}")
        if self.grid.min(initial=0.0) < 0.0 or self.grid.max(initial=0.0) > 1.0:
            raise ValueError("mask values must lie in [0, 1]")


@dataclass
class LocalShift:
    mask: ObjectMask
    k_sh: float
    mask_blur_sigma: float = 0.0

    kind = LOCAL_SHIFT


@dataclass
class GlobalScale:
    k_sc: float

    kind = GLOBAL_SCALE


TargetSpec = Union[LocalShift, GlobalScale]


def default_mask_sigma(grid_size: int) -> float:
    """5 px at a 512 px grid, scaled with the grid."""
    return 5.0 * grid_size / 512.0


def _as_array(s) -> np.ndarray:
    return np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64)


def blurred_mask(mask: ObjectMask, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ValueError("mask blur sigma must be >= 0")
    if sigma == 0:
        return mask.grid
    with no_grad():
        return ops.gaussian_blur(Tensor(mask.grid[None, None]), sigma).data[0, 0]


def local_shift(s, spec: LocalShift) -> np.ndarray:
    """S_t = S + k_sh * blur(M)."""
    s = _as_array(s)
    if spec.mask.grid.shape != s.shape[-2:]:
        raise ShapeError(f"mask extents {spec.mask.grid.shape} do not match saliency {s.shape[-2:]}")
    return s + spec.k_sh * blurred_mask(spec.mask, spec.mask_blur_sigma)


def global_scale(s, k_sc: float) -> np.ndarray:
    """S_t = k_sc * S."""
    if not k_sc > 0:
        raise ValueError(f"k_sc must be positive, got {k_sc}")
    return k_sc * _as_array(s)


def apply_spec(s, spec: TargetSpec) -> np.ndarray:
    if isinstance(spec, LocalShift):
        return local_shift(s, spec)
    return global_scale(s, spec.k_sc)


def softmax(s: np.ndarray) -> np.ndarray:
    with no_grad():
        shaped = s if s.ndim == 4 else s.reshape((1, 1) + s.shape[-2:])
        return ops.softmax_spatial(Tensor(shaped)).data.reshape(s.shape)


def union_mask(masks: Sequence[ObjectMask]) -> ObjectMask:
    return ObjectMask(np.clip(np.sum([m.grid for m in masks], axis=0), 0.0, 1.0), object_id=0)


def sample_target(s, masks: Sequence[ObjectMask], rng: np.random.Generator, manipulation: str = LOCAL_SHIFT,
                  mask_blur_sigma: float | None = None) -> tuple[np.ndarray, TargetSpec]:
    """Draw one target: a shared k_sh over the union of masks, or a global k_sc.

    Returns the normalized target density and the spec that produced it.
    """
    s = _as_array(s)
    if manipulation == LOCAL_SHIFT:
        if not masks:
            raise UsageError("local-shift targets need at least one object mask")
        sigma = default_mask_sigma(s.shape[-1]) if mask_blur_sigma is None else mask_blur_sigma
        spec: TargetSpec = LocalShift(union_mask(masks), float(rng.uniform(*SHIFT_RANGE)), sigma)
    elif manipulation == GLOBAL_SCALE:
        spec = GlobalScale(float(rng.uniform(*SCALE_RANGE)))
    else:
        raise UsageError(f"unknown manipulation {manipulation!r}; choose from {MANIPULATIONS}")
    return softmax(apply_spec(s, spec)), spec


def to_network_input(p_t) -> np.ndarray:
    """Elementwise log of a strictly positive density."""
    p = _as_array(p_t)
    if (p <= 0).any():
        raise ValueError("target density must be strictly positive to take its log")
    return np.log(p)


def mask_to_grid(mask: np.ndarray, grid_shape: tuple[int, int]) -> np.ndarray:
    """Block-average an image-resolution mask onto a coarser saliency grid."""
    mask = np.asarray(mask, dtype=np.float64)
    fh, fw = mask.shape[0] // grid_shape[0], mask.shape[1] // grid_shape[1]
    if fh != fw or fh * grid_shape[0] != mask.shape[0] or fw * grid_shape[1] != mask.shape[1]:
        raise ShapeError(f"mask {mask.shape} cannot be block-averaged onto {grid_shape}")
    with no_grad():
        return ops.downsample_avg(Tensor(mask[None, None]), fh).data[0, 0]
