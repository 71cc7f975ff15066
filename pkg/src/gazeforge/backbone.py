"""Frozen, seeded VGG-style feature hierarchy.

Stands in for the normalised VGG-19: five blocks of 3x3 convolutions with
ReLUs, 2x average pooling between blocks, layers named ``conv{b}_{i}`` and
``relu{b}_{i}``. Weights are He-initialised from a seed and never trained.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, no_grad

# Per-channel means in [0, 1] units, BGR order (the usual VGG values / 255).
BGR_MEAN = np.array([103.939, 116.779, 123.68]) / 255.0

READOUT_LAYERS = ("conv5_1", "relu5_1", "relu5_2", "conv5_3", "relu5_4")
FEATURE_LAYER = "relu5_2"
TEXTURE_LAYERS = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")

# Deeper kernels: centre-weighted envelope and a small positive mean, so that
# local contrast energy survives to block 5 instead of being scrambled.
WEIGHT_DRIFT = 0.3
ENVELOPE_EDGE = 0.25
CENTRE_ENVELOPE = np.array([[ENVELOPE_EDGE ** 2, ENVELOPE_EDGE, ENVELOPE_EDGE ** 2],
                            [ENVELOPE_EDGE, 1.0, ENVELOPE_EDGE],
                            [ENVELOPE_EDGE ** 2, ENVELOPE_EDGE, ENVELOPE_EDGE ** 2]])

DESK_CHANNELS = (8, 16, 32, 64, 64)
PAPER_CHANNELS = (64, 128, 256, 512, 512)
VGG19_DEPTHS = (2, 2, 4, 4, 4)


@dataclass(frozen=True)
class BackboneConfig:
    block_channels: tuple[int, ...] = DESK_CHANNELS
    convs_per_block: tuple[int, ...] = VGG19_DEPTHS
    seed: int = 0
    normalize_activations: bool = True
    calibration_size: int = 64
    calibration_batch: int = 8

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        object.__setattr__(self, "convs_per_block", tuple(int(c) for c in self.convs_per_block))
        if len(self.block_channels) != 5 or len(self.convs_per_block) != 5:
            raise ValueError("backbone needs exactly 5 blocks")
        if min(self.block_channels) < 1 or min(self.convs_per_block) < 1:
            raise ValueError("block channels and depths must be positive")
        if self.convs_per_block[4] < 4:
            raise ValueError("block 5 needs at least 4 convolutions for the readout layers")

    @property
    def readout_channels(self) -> int:
        return len(READOUT_LAYERS) * self.block_channels[4]

    @classmethod
    def paper_scale(cls, **kwargs) -> "BackboneConfig":
        return cls(block_channels=PAPER_CHANNELS, **kwargs)


def preprocess(image: Tensor) -> Tensor:
    """Display RGB in [0, 1] -> BGR, mean-subtracted, scaled by 255."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"preprocess expects (N, 3, H, W), got {image.shape}")
    bgr = ops.concat([ops.take(image, (slice(None), slice(c, c + 1))) for c in (2, 1, 0)], axis=1)
    return ops.mul(ops.sub(bgr, BGR_MEAN.reshape(1, 3, 1, 1)), 255.0)


def deprocess(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"deprocess expects (N, 3, H, W), got {x.shape}")
    bgr = ops.add(ops.mul(x, 1.0 / 255.0), BGR_MEAN.reshape(1, 3, 1, 1))
    return ops.concat([ops.take(bgr, (slice(None), slice(c, c + 1))) for c in (2, 1, 0)], axis=1)


def calibration_batch(n: int, size: int, seed: int) -> np.ndarray:
    """Seeded multi-octave noise images in [0, 1] with roughly 1/f amplitude falloff."""
    rng = np.random.default_rng(seed)
    images = np.zeros((n, 3, size, size))
    sigma = 0.5
    with no_grad():
        while sigma < size / 2:
            octave = ops.gaussian_blur(Tensor(rng.standard_normal((n, 3, size, size))), sigma).data
            images += octave / (octave.std() + 1e-12)
            sigma *= 2.0
    images /= images.std(axis=(1, 2, 3), keepdims=True)
    return np.clip(0.5 + 0.2 * images, 0.0, 1.0)


class FeatureStack(dict):
    """Layer name -> (N, C, H, W) activations, in extraction order."""

    def channels(self, layer: str) -> int:
        return self[layer].shape[1]

    def positions(self, layer: str) -> int:
        return self[layer].shape[2] * self[layer].shape[3]


@dataclass
class _Conv:
    name: str
    block: int
    weight: Tensor
    bias: Tensor


class Backbone:
    """The frozen hierarchy. Weights are plain tensors with ``requires_grad=False``."""

    def __init__(self, config: Optional[BackboneConfig] = None):
        self.config = config or BackboneConfig()
        rng = np.random.default_rng(self.config.seed)
        self.convs: list[_Conv] = []
        in_c = 3
        for b, (out_c, depth) in enumerate(zip(self.config.block_channels, self.config.convs_per_block), start=1):
            for i in range(1, depth + 1):
                first = (b, i) == (1, 1)
                env = np.ones((3, 3)) if first else CENTRE_ENVELOPE
                std = np.sqrt(2.0 / (in_c * np.sum(env ** 2)))
                w = rng.standard_normal((out_c, in_c, 3, 3)) * std * env
                if first:
                    # DC-free first filters: responses depend on local contrast, not mean colour
                    w -= w.mean(axis=(2, 3), keepdims=True)
                else:
                    w += WEIGHT_DRIFT * std * env
                self.convs.append(_Conv(f"conv{b}_{i}", b, Tensor(w), Tensor(np.zeros(out_c))))
                in_c = out_c
        self.layer_names = []
        for conv in self.convs:
            self.layer_names += [conv.name, "relu" + conv.name[4:]]
        self._unit_variance()
        if self.config.normalize_activations:
            self._calibrate()

    def _blocks_forward(self, act: Tensor, per_layer) -> None:
        for k, conv in enumerate(self.convs):
            act = per_layer(conv, act)
            last_in_block = k + 1 == len(self.convs) or self.convs[k + 1].block != conv.block
            if last_in_block and conv.block < 5:
                act = ops.downsample_avg(act, 2)

    def _unit_variance(self) -> None:
        """Per-layer gain correction (LSUV-style): unit ReLU std on seeded unit-variance noise."""
        noise = np.random.default_rng(self.config.seed + 104729).standard_normal((4, 3, 64, 64))

        def fix(conv, act):
            out = ops.relu(ops.conv2d(act, conv.weight, conv.bias, padding=1)).data
            spread = out.std()
            if spread > 0:
                conv.weight.data /= spread
                out = out / spread
            return Tensor(out)

        with no_grad():
            self._blocks_forward(Tensor(noise), fix)

    def _calibrate(self) -> None:
        """Rescale each filter so its ReLU output averages 1 over a seeded noise batch."""
        cfg = self.config
        noise = calibration_batch(cfg.calibration_batch, cfg.calibration_size, cfg.seed + 7919)

        def normalize(conv, act):
            pre = ops.conv2d(act, conv.weight, conv.bias, padding=1).data
            means = np.maximum(pre, 0.0).mean(axis=(0, 2, 3))
            dead = means <= 1e-12
            if dead.any():
                conv.weight.data[dead] *= -1.0
                conv.bias.data[dead] *= -1.0
                pre = ops.conv2d(act, conv.weight, conv.bias, padding=1).data
                means = np.maximum(pre, 0.0).mean(axis=(0, 2, 3))
            scale = np.where(means > 1e-12, 1.0 / np.maximum(means, 1e-300), 1.0)
            conv.weight.data *= scale[:, None, None, None]
            conv.bias.data *= scale
            return Tensor(np.maximum(pre, 0.0) * scale[None, :, None, None])

        with no_grad():
            self._blocks_forward(preprocess(Tensor(noise)), normalize)

    @property
    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for conv in self.convs:
            out[f"{conv.name}.weight"] = conv.weight
            out[f"{conv.name}.bias"] = conv.bias
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.parameters.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def save(self, directory) -> None:
        """Persist the weights as a GZT1 container; the manifest echoes the config."""
        from dataclasses import asdict

        from . import io

        meta = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.config).items()}
        io.save_container(directory, {k: t.data for k, t in self.parameters.items()}, meta=meta)

    @classmethod
    def load(cls, directory) -> "Backbone":
        """Rebuild from a saved container, taking the stored weights verbatim."""
        from . import io

        tensors, manifest = io.load_container(directory)
        backbone = cls.__new__(cls)
        backbone.config = BackboneConfig(**manifest["meta"])
        backbone.convs = []
        names = [k[:-len(".weight")] for k in tensors if k.endswith(".weight")]
        for name in names:
            block = int(name[4:].split("_")[0])
            backbone.convs.append(_Conv(name, block, Tensor(tensors[f"{name}.weight"]),
                                        Tensor(tensors[f"{name}.bias"])))
        backbone.layer_names = []
        for conv in backbone.convs:
            backbone.layer_names += [conv.name, "relu" + conv.name[4:]]
        return backbone

    def extract(self, x: Tensor, layers: Iterable[str]) -> FeatureStack:
        """Run the preprocessed batch ``x`` up to the deepest requested layer."""
        wanted = list(dict.fromkeys(layers))
        unknown = [name for name in wanted if name not in self.layer_names]
        if unknown:
            raise KeyError(f"unknown backbone layer(s): {', '.join(unknown)}")
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"backbone expects (N, 3, H, W), got {x.shape}")
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise ShapeError(f"input extents {x.shape[2:]} must be divisible by 16")
        deepest = max(self.layer_names.index(name) for name in wanted)
        found: dict[str, Tensor] = {}
        act = x
        for k, conv in enumerate(self.convs):
            if 2 * k > deepest:
                break
            pre = ops.conv2d(act, conv.weight, conv.bias, padding=1)
            found[conv.name] = pre
            act = ops.relu(pre)
            found["relu" + conv.name[4:]] = act
            last_in_block = k + 1 == len(self.convs) or self.convs[k + 1].block != conv.block
            if last_in_block and conv.block < 5:
                act = ops.downsample_avg(act, 2)
        return FeatureStack((name, found[name]) for name in wanted)

    def features(self, image: Tensor, layers: Sequence[str]) -> FeatureStack:
        """Extract from a display-RGB image (preprocessing included)."""
        return self.extract(preprocess(image), layers)

    def readout_stack(self, image: Tensor, preprocessed: bool = False) -> Tensor:
        x = image if preprocessed else preprocess(image)
        stack = self.extract(x, READOUT_LAYERS)
        return ops.concat([stack[name] for name in READOUT_LAYERS], axis=1)
