"""Feature-guided transformer (FGTransform) and the patch discriminator.

The generator starts from the frozen block-5 readout stack, runs a residual
trunk at 1/16 resolution and four nearest-neighbour up-sampling stages. Before
every stage the 4-channel guide (RGB image + log target saliency), averaged
down to the stage resolution, is concatenated to the features.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import io, ops
from .backbone import Backbone, BackboneConfig
from .tensor import ShapeError, Tensor

GUIDE_CHANNELS = 4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FGTransformConfig:
    residual_blocks: int = 1
    trunk_channels: int = 64
    upsample_stages: int = 4
    concat_channels: int = GUIDE_CHANNELS
    output_residual_skip: bool = True
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    @classmethod
    def paper_scale(cls) -> "FGTransformConfig":
        return cls(residual_blocks=6, trunk_channels=1024, upsample_stages=4,
                   backbone=BackboneConfig.paper_scale(normalize_activations=False))

    def echo(self) -> dict:
        d = asdict(self)
        d["backbone"] = asdict(self.backbone)
        return d


@dataclass
class Stage:
    name: str
    kind: str  # "residual" | "upsample" | "head"
    in_channels: int  # including the concatenated guide
    out_channels: int
    reduction: int  # spatial reduction of the stage input relative to the image


@dataclass
class ShapePlan:
    stages: list[Stage]

    @property
    def stage_inputs(self) -> list[int]:
        return [s.in_channels for s in self.stages if s.kind != "head"]

    @property
    def residual_inputs(self) -> list[int]:
        return [s.in_channels for s in self.stages if s.kind == "residual"]

    @property
    def upsample_inputs(self) -> list[int]:
        return [s.in_channels for s in self.stages if s.kind == "upsample"]

    def parameter_count(self, feature_channels: int) -> int:
        """Count weights straight from the plan (independent of the built tensors)."""
        total = 0
        skip_in = feature_channels
        for s in self.stages:
            if s.kind == "residual":
                total += s.in_channels * s.out_channels * 9 + s.out_channels
                total += s.out_channels * s.out_channels * 9 + s.out_channels
                if skip_in != s.out_channels:
                    total += skip_in * s.out_channels
                skip_in = s.out_channels
            else:
                total += s.in_channels * s.out_channels * 9 + s.out_channels
        return total


class NetworkParams:
    """Ordered named tensors with per-tensor trainable flags."""

    def __init__(self, config=None):
        self.tensors: dict[str, Tensor] = {}
        self.config = config

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter name {name}")
        t = Tensor(value, requires_grad=trainable)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def trainable(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self.tensors[k].shape != v.shape:
                raise ShapeError(f"{k}: checkpoint shape {v.shape} differs from {self.tensors[k].shape}")
            self.tensors[k].data = np.array(v, dtype=np.float64)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, t in self.tensors.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def save(self, directory, meta: Optional[dict] = None) -> None:
        io.save_container(directory, self.state(), meta=meta,
                          flags={k: t.requires_grad for k, t in self.tensors.items()})


def _he(rng: np.random.Generator, out_c: int, in_c: int, k: int) -> np.ndarray:
    return rng.standard_normal((out_c, in_c, k, k)) * np.sqrt(2.0 / (in_c * k * k))


# ----------------------------------------------------------------- generator

def shape_plan(cfg: FGTransformConfig) -> ShapePlan:
    reduction = 2 ** cfg.upsample_stages
    if reduction != 16:
        raise ConfigError(f"{cfg.upsample_stages} up-sampling stages give x{reduction}, "
                          "but the backbone reduces by 16")
    if cfg.residual_blocks < 1:
        raise ConfigError("need at least one residual block")
    if cfg.trunk_channels % reduction:
        raise ConfigError(f"trunk channels {cfg.trunk_channels} must be divisible by {reduction}")
    g = cfg.concat_channels
    stages = []
    features = cfg.backbone.readout_channels
    for r in range(cfg.residual_blocks):
        c_in = (features if r == 0 else cfg.trunk_channels) + g
        stages.append(Stage(f"res{r}", "residual", c_in, cfg.trunk_channels, 16))
    c = cfg.trunk_channels
    for u in range(cfg.upsample_stages):
        stages.append(Stage(f"up{u}", "upsample", c + g, c // 2, 16 // 2 ** u))
        c //= 2
    stages.append(Stage("head", "head", c + g, 3, 1))
    return ShapePlan(stages)


def build_fgtransform(cfg: FGTransformConfig = FGTransformConfig(), seed: int = 0) -> tuple[NetworkParams, ShapePlan]:
    plan = shape_plan(cfg)
    rng = np.random.default_rng(seed)
    params = NetworkParams(cfg)
    skip_in = cfg.backbone.readout_channels
    for s in plan.stages:
        if s.kind == "residual":
            params.add(f"{s.name}.conv1.weight", _he(rng, s.out_channels, s.in_channels, 3))
            params.add(f"{s.name}.conv1.bias", np.zeros(s.out_channels))
            params.add(f"{s.name}.conv2.weight", _he(rng, s.out_channels, s.out_channels, 3))
            params.add(f"{s.name}.conv2.bias", np.zeros(s.out_channels))
            if skip_in != s.out_channels:
                params.add(f"{s.name}.proj.weight", _he(rng, s.out_channels, skip_in, 1))
            skip_in = s.out_channels
        elif s.kind == "upsample":
            params.add(f"{s.name}.conv.weight", _he(rng, s.out_channels, s.in_channels, 3))
            params.add(f"{s.name}.conv.bias", np.zeros(s.out_channels))
        else:
            # zero head: with the skip enabled the untrained network is the identity
            params.add("head.conv.weight", np.zeros((3, s.in_channels, 3, 3)))
            params.add("head.conv.bias", np.zeros(3))
    return params, plan


def residual_block(x: Tensor, params: NetworkParams, prefix: str, guide: Optional[Tensor] = None,
                   eps: float = 1e-5) -> Tensor:
    """conv3x3 -> IN -> ReLU -> conv3x3 -> IN, add the (projected) input, ReLU."""
    h = x if guide is None else ops.concat([x, guide], axis=1)
    h = ops.relu(ops.instance_norm(ops.conv2d(h, params[f"{prefix}.conv1.weight"],
                                              params[f"{prefix}.conv1.bias"], padding=1), eps))
    h = ops.instance_norm(ops.conv2d(h, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"],
                                     padding=1), eps)
    if f"{prefix}.proj.weight" in params:
        skip = ops.conv1x1(x, params[f"{prefix}.proj.weight"])
    else:
        skip = x
    if skip.shape[1] != h.shape[1]:
        raise ShapeError(f"residual block {prefix}: input has {skip.shape[1]} channels, output {h.shape[1]}")
    return ops.relu(ops.add(h, skip))


def upsample_block(x: Tensor, params: NetworkParams, prefix: str, guide: Optional[Tensor] = None,
                   eps: float = 1e-5) -> Tensor:
    """NN-up x2 -> conv3x3 -> IN -> ReLU."""
    h = x if guide is None else ops.concat([x, guide], axis=1)
    h = ops.nn_upsample(h, 2)
    return ops.relu(ops.instance_norm(ops.conv2d(h, params[f"{prefix}.conv.weight"],
                                                 params[f"{prefix}.conv.bias"], padding=1), eps))


def make_guide(image: Tensor, log_target: np.ndarray) -> Tensor:
    """RGB image plus the log target resampled (bilinearly) to image extents."""
    lt = np.asarray(log_target.data if isinstance(log_target, Tensor) else log_target, dtype=np.float64)
    if lt.ndim == 2:
        lt = lt[None, None]
    if lt.shape[0] != image.shape[0]:
        raise ShapeError(f"log target batch {lt.shape[0]} differs from image batch {image.shape[0]}")
    h, w = image.shape[2:]
    resized = ops.resize_bilinear(Tensor(lt), h, w)
    return ops.concat([image, resized], axis=1)


def forward_transform(params: NetworkParams, image: Tensor, log_target, backbone: Backbone,
                      stack: Optional[Tensor] = None, audit: Optional[list] = None) -> Tensor:
    """Transformed image with the same extents as ``image``.

    ``stack`` may carry a precomputed block-5 readout stack of ``image``.
    ``audit``, when given, receives the runtime input channel count per stage.
    """
    cfg: FGTransformConfig = params.config
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W) image batch, got {image.shape}")
    if image.shape[2] % 16 or image.shape[3] % 16:
        raise ShapeError(f"image extents {image.shape[2:]} must be divisible by 16")
    plan = shape_plan(cfg)
    guide_full = make_guide(image, log_target)
    guides = {1: guide_full}
    x = stack if stack is not None else backbone.readout_stack(image)
    for s in plan.stages:
        if s.reduction not in guides:
            guides[s.reduction] = ops.downsample_avg(guide_full, s.reduction)
        guide = guides[s.reduction]
        if audit is not None:
            audit.append((s.name, x.shape[1] + guide.shape[1]))
        if s.kind == "residual":
            x = residual_block(x, params, s.name, guide)
        elif s.kind == "upsample":
            x = upsample_block(x, params, s.name, guide)
        else:
            x = ops.conv2d(ops.concat([x, guide], axis=1), params["head.conv.weight"],
                           params["head.conv.bias"], padding=1)
    if cfg.output_residual_skip:
        x = ops.add(x, image)
    return x


# ------------------------------------------------------------- discriminator

@dataclass(frozen=True)
class DiscriminatorConfig:
    widths: tuple[int, ...] = (8, 16, 32, 64, 1)
    kernel: int = 4
    strides: tuple[int, ...] = (2, 2, 2, 1, 1)
    padding: int = 1
    slope: float = 0.2
    conditional: bool = False

    @classmethod
    def paper_scale(cls) -> "DiscriminatorConfig":
        return cls(widths=(64, 128, 256, 512, 1))

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.widths) != len(self.strides):
            raise ConfigError("one stride per discriminator layer")
        if self.widths[-1] != 1:
            raise ConfigError("the discriminator emits a single channel")


def receptive_field(kernels: Sequence[int], strides: Sequence[int]) -> int:
    """r <- r + (k - 1) * jump; jump <- jump * s, starting from a single pixel."""
    r, jump = 1, 1
    for k, s in zip(kernels, strides):
        r += (k - 1) * jump
        jump *= s
    return r


def build_discriminator(cfg: DiscriminatorConfig = DiscriminatorConfig(), seed: int = 0) -> NetworkParams:
    rng = np.random.default_rng(seed)
    params = NetworkParams(cfg)
    c = 6 if cfg.conditional else 3
    for k, w in enumerate(cfg.widths):
        params.add(f"d{k}.weight", rng.standard_normal((w, c, cfg.kernel, cfg.kernel)) * 0.02)
        params.add(f"d{k}.bias", np.zeros(w))
        c = w
    return params


def forward_discriminator(params: NetworkParams, image: Tensor, condition: Optional[Tensor] = None) -> Tensor:
    """Patch decisions, shape (N, 1, h, w). InstanceNorm on the hidden layers after the first."""
    cfg: DiscriminatorConfig = params.config
    x = image
    if cfg.conditional:
        if condition is None:
            raise ShapeError("conditional discriminator needs the input image as condition")
        x = ops.concat([image, condition], axis=1)
    last = len(cfg.widths) - 1
    for k, stride in enumerate(cfg.strides):
        x = ops.conv2d(x, params[f"d{k}.weight"], params[f"d{k}.bias"], stride=stride, padding=cfg.padding)
        if k == last:
            break
        if k > 0:
            x = ops.instance_norm(x)
        x = ops.leaky_relu(x, cfg.slope)
    return x
