"""DeepGaze-style fixation prediction on top of the frozen backbone.

log-saliency = blur(upsample_x8(readout(block-5 stack)))
density      = spatial soft-max(log-saliency [+ centre bias])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ops
from .backbone import READOUT_LAYERS, Backbone, FeatureStack, preprocess
from .losses import kl_per_sample
from .optim import Adam, AdamConfig
from .tensor import ShapeError, Tensor, UsageError, backward, no_grad


class TrainingDivergence(RuntimeError):
    """A loss went non-finite during optimisation."""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class ReadoutParams:
    """Four pointwise layers; every layer but the last is rectified."""

    weights: list[Tensor]
    biases: list[Tensor]
    blur_sigma: float = 1.5
    upsample: int = 8

    @classmethod
    def init(cls, in_channels: int, widths: Sequence[int] = (16, 8, 4, 1), seed: int = 0,
             blur_sigma: float = 1.5, upsample: int = 8) -> "ReadoutParams":
        if len(widths) != 4 or widths[-1] != 1:
            raise ValueError("readout needs four layers ending in a single channel")
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        c = in_channels
        for k, out in enumerate(widths):
            w = rng.standard_normal((out, c, 1, 1)) * np.sqrt(2.0 / c)
            if k == len(widths) - 1:
                w[:] = 0.0  # start from the uniform density
            weights.append(Tensor(w, requires_grad=True))
            biases.append(Tensor(np.zeros(out), requires_grad=True))
            c = out
        return cls(weights, biases, blur_sigma, upsample)

    @property
    def widths(self) -> list[int]:
        return [w.shape[0] for w in self.weights]

    def named(self) -> dict[str, Tensor]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"readout{k}.weight"] = w
            out[f"readout{k}.bias"] = b
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named().items()}

    @classmethod
    def from_state(cls, state: dict, blur_sigma: float = 1.5, upsample: int = 8) -> "ReadoutParams":
        n = len([k for k in state if k.endswith(".weight")])
        weights = [Tensor(state[f"readout{k}.weight"], requires_grad=True) for k in range(n)]
        biases = [Tensor(state[f"readout{k}.bias"], requires_grad=True) for k in range(n)]
        return cls(weights, biases, blur_sigma, upsample)

    def set_trainable(self, flag: bool) -> None:
        for t in self.named().values():
            t.requires_grad = flag


class SaliencyModel:
    """Backbone + readout. The backbone is shared and never updated here."""

    def __init__(self, backbone: Backbone, readout: Optional[ReadoutParams] = None, seed: int = 0):
        self.backbone = backbone
        self.readout = readout or ReadoutParams.init(backbone.config.readout_channels, seed=seed)
        if self.readout.weights[0].shape[1] != backbone.config.readout_channels:
            raise ShapeError("readout input width does not match the backbone stack")

    def log_saliency_from_stack(self, stack: Tensor) -> Tensor:
        x = stack
        last = len(self.readout.weights) - 1
        for k, (w, b) in enumerate(zip(self.readout.weights, self.readout.biases)):
            x = ops.conv1x1(x, w, b)
            if k < last:
                x = ops.relu(x)
        x = ops.nn_upsample(x, self.readout.upsample)
        return ops.gaussian_blur(x, self.readout.blur_sigma)

    def forward(self, image: Tensor, extra_layers: Sequence[str] = ()) -> tuple[Tensor, FeatureStack]:
        """Log-saliency plus any extra backbone layers from one shared pass."""
        _check_extents(image)
        feats = self.backbone.extract(preprocess(image), list(READOUT_LAYERS) + list(extra_layers))
        stack = ops.concat([feats[name] for name in READOUT_LAYERS], axis=1)
        return self.log_saliency_from_stack(stack), feats

    def predict_log_saliency(self, image: Tensor) -> Tensor:
        return self.forward(image)[0]

    def predict_density(self, image: Tensor, center_bias=None) -> Tensor:
        s = self.predict_log_saliency(image)
        return density_from_log_saliency(s, center_bias)


def density_from_log_saliency(s: Tensor, center_bias=None) -> Tensor:
    if center_bias is not None:
        bias = np.asarray(center_bias.data if isinstance(center_bias, Tensor) else center_bias, dtype=np.float64)
        if bias.shape[-2:] != s.shape[-2:]:
            raise ShapeError(f"centre bias extents {bias.shape[-2:]} do not match saliency {s.shape[-2:]}")
        s = ops.add(s, bias.reshape((1, 1) + bias.shape[-2:]))
    return ops.softmax_spatial(s)


def _check_extents(image: Tensor) -> None:
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W) image batch, got {image.shape}")
    if image.shape[2] % 16 or image.shape[3] % 16:
        raise ShapeError(f"image extents {image.shape[2:]} must be divisible by 16")


def luminance(image: np.ndarray) -> np.ndarray:
    """(N, 3, H, W) RGB -> (N, 1, H, W) Rec. 601 luma."""
    w = np.array([0.299, 0.587, 0.114]).reshape(1, 3, 1, 1)
    return (image * w).sum(axis=1, keepdims=True)


def synthetic_saliency_oracle(image, contrast_sigma: float = 1.0, sigma: float = 2.0,
                              grid_factor: int = 2) -> np.ndarray:
    """Density proportional to blurred local RMS contrast, on the model's output grid.

    A zero-contrast image yields the uniform density.
    """
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    luma = Tensor(luminance(img))
    with no_grad():
        local_mean = ops.gaussian_blur(luma, contrast_sigma).data
        local_sq = ops.gaussian_blur(Tensor(luma.data ** 2), contrast_sigma).data
        var = local_sq - local_mean ** 2
        # cancellation leaves ~1e-17 residue on flat regions; treat it as zero contrast
        var[var < 1e-12 * max(1.0, float(local_sq.max()))] = 0.0
        rms = np.sqrt(var)
        coarse = ops.downsample_avg(Tensor(rms), grid_factor)
        smooth = ops.gaussian_blur(coarse, sigma).data
    smooth = np.maximum(smooth, 0.0)
    totals = smooth.sum(axis=(2, 3), keepdims=True)
    uniform = np.full_like(smooth, 1.0 / (smooth.shape[2] * smooth.shape[3]))
    safe = np.where(totals > 1e-12, totals, 1.0)
    return np.where(totals > 1e-12, smooth / safe, uniform)


@dataclass
class PretrainResult:
    readout: ReadoutParams
    curve: list[float] = field(default_factory=list)
    initial_heldout: float = float("nan")
    final_heldout: float = float("nan")


def _mean_kl(model: SaliencyModel, stacks: np.ndarray, targets: np.ndarray) -> float:
    with no_grad():
        s = model.log_saliency_from_stack(Tensor(stacks))
        return float(kl_per_sample(Tensor(targets), ops.softmax_spatial(s)).data.mean())


def pretrain_readout(model: SaliencyModel, images: np.ndarray, steps: int, adam: Optional[AdamConfig] = None,
                     batch_size: int = 8, heldout_fraction: float = 0.25, seed: int = 0,
                     oracle_kwargs: Optional[dict] = None) -> PretrainResult:
    """Fit the readout to the contrast oracle by minimising KL(oracle || prediction).

    The backbone stack is computed once per image since the backbone is frozen.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) < 2:
        raise UsageError("pretraining needs a batch of at least 2 images")
    adam = adam or AdamConfig(lr=1e-2)
    targets = synthetic_saliency_oracle(images, **(oracle_kwargs or {}))
    with no_grad():
        stacks = np.concatenate([model.backbone.readout_stack(Tensor(images[i:i + 16])).data
                                 for i in range(0, len(images), 16)])
    n_held = max(1, int(round(len(images) * heldout_fraction)))
    train_idx = np.arange(len(images) - n_held)
    held_idx = np.arange(len(images) - n_held, len(images))

    result = PretrainResult(model.readout)
    result.initial_heldout = _mean_kl(model, stacks[held_idx], targets[held_idx])
    params = list(model.readout.named().values())
    opt = Adam(params, adam)
    rng = np.random.default_rng(seed)
    batch_size = min(batch_size, len(train_idx))
    order = rng.permutation(train_idx)
    cursor = 0
    for step in range(steps):
        if cursor + batch_size > len(order):
            order = rng.permutation(train_idx)
            cursor = 0
        batch = order[cursor:cursor + batch_size]
        cursor += batch_size
        for p in params:
            p.zero_grad()
        s = model.log_saliency_from_stack(Tensor(stacks[batch]))
        loss = ops.mean(kl_per_sample(Tensor(targets[batch]), ops.softmax_spatial(s)))
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergence(f"pretraining loss became {value} at step {step}",
                                     {"step": step, "last_finite": result.curve[-1:] or None})
        backward(loss)
        opt.step()
        if not all(np.isfinite(p.data).all() for p in params):
            raise TrainingDivergence(f"readout parameters became non-finite at step {step}",
                                     {"step": step, "last_finite": value})
        result.curve.append(value)
    result.final_heldout = _mean_kl(model, stacks[held_idx], targets[held_idx])
    return result
