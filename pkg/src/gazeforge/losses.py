"""Saliency, feature, texture and LSGAN loss terms and their weighted total.

Per-image terms are averaged over the batch dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import ops
from .backbone import FEATURE_LAYER, TEXTURE_LAYERS, Backbone, FeatureStack
from .tensor import ShapeError, Tensor, as_tensor

TERMS = ("L_sal", "L_feat", "L_tex", "L_adv")


class LossDiagnosticsError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term} is not finite ({value})")
        self.term = term
        self.value = value


@dataclass(frozen=True)
class LossWeights:
    sal: float = 1e0
    feat: float = 1e-2
    tex: float = 2e-2
    adv: float = 1e-1
    feature_layer: str = FEATURE_LAYER
    texture_layers: tuple[str, ...] = TEXTURE_LAYERS
    texture_weights: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "texture_layers", tuple(self.texture_layers))
        if self.texture_weights is None:
            object.__setattr__(self, "texture_weights", tuple(1.0 for _ in self.texture_layers))
        else:
            object.__setattr__(self, "texture_weights", tuple(float(w) for w in self.texture_weights))
        if len(self.texture_weights) != len(self.texture_layers):
            raise ValueError("one texture weight per texture layer")
        for name in ("sal", "feat", "tex", "adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.sal, self.feat, self.tex, self.adv)

    def replace(self, **changes) -> "LossWeights":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return LossWeights(**values)


@dataclass
class LossReport:
    L_sal: float
    L_feat: float
    L_tex: float
    L_adv: float
    total: float
    L_D: float = float("nan")

    def row(self, step: int) -> list:
        return [step, self.L_sal, self.L_feat, self.L_tex, self.L_adv, self.L_D, self.total]


CSV_HEADER = ("step", "L_sal", "L_feat", "L_tex", "L_adv", "L_D", "total")


def _value(t) -> float:
    return t.item() if isinstance(t, Tensor) else float(t)


def total_loss(terms: Mapping[str, Union[Tensor, float]], weights: LossWeights = LossWeights()):
    """Weighted sum of the four generator terms.

    Returns ``(total, report)`` where ``total`` is a Tensor whenever any term is
    one, so it can be back-propagated.
    """
    values = {}
    for name in TERMS:
        v = _value(terms[name])
        if not math.isfinite(v):
            raise LossDiagnosticsError(name, v)
        values[name] = v
    pieces = [ops.mul(terms[name], lam) if isinstance(terms[name], Tensor) else lam * values[name]
              for name, lam in zip(TERMS, weights.as_tuple())]
    total = pieces[0]
    for piece in pieces[1:]:
        total = ops.add(total, piece) if isinstance(total, Tensor) or isinstance(piece, Tensor) else total + piece
    report_total = sum(lam * values[name] for name, lam in zip(TERMS, weights.as_tuple()))
    report = LossReport(values["L_sal"], values["L_feat"], values["L_tex"], values["L_adv"], report_total)
    return total, report


# ------------------------------------------------------------ saliency (KL)

def kl_per_sample(p_t, p_hat: Tensor, eps: float = 1e-12) -> Tensor:
    """KL(p_t || max(p_hat, eps)) for every batch element, shape (N,); 0 log 0 = 0."""
    pt = p_t.data if isinstance(p_t, Tensor) else np.asarray(p_t, dtype=np.float64)
    p_hat = as_tensor(p_hat)
    if pt.shape != p_hat.shape:
        raise ShapeError(f"saliency maps differ in shape: {pt.shape} vs {p_hat.shape}")
    positive = pt > 0
    log_t = np.where(positive, np.log(np.where(positive, pt, 1.0)), 0.0)
    log_q = ops.log(ops.clamp_min(p_hat, eps))
    terms = ops.sub(pt * log_t, ops.mul(log_q, pt))
    return ops.sum(terms, axis=tuple(range(1, pt.ndim)))


def saliency_loss(p_t, p_hat: Tensor, eps: float = 1e-12) -> Tensor:
    return ops.mean(kl_per_sample(p_t, p_hat, eps))


# ------------------------------------------------------------------ feature

def feature_mse(f_hat: Tensor, f: Tensor) -> Tensor:
    """(1 / (N_l M_l)) * sum of squared differences, averaged over the batch."""
    f_hat, f = as_tensor(f_hat), as_tensor(f)
    if f_hat.shape != f.shape:
        raise ShapeError(f"feature maps differ in shape: {f_hat.shape} vs {f.shape}")
    diff = ops.sub(f_hat, f)
    return ops.mean(ops.mul(diff, diff))


def feature_loss(backbone: Backbone, image: Tensor, transformed: Tensor, layer: str = FEATURE_LAYER) -> Tensor:
    if image.shape != transformed.shape:
        raise ShapeError("feature loss needs images of equal extents")
    ref = backbone.features(image, [layer])[layer]
    out = backbone.features(transformed, [layer])[layer]
    return feature_mse(out, ref)


# ------------------------------------------------------------------ texture

def gram(features: Tensor) -> Tensor:
    """Gram matrix F^T F / M.

    Accepts an (M, N) matrix (positions x channels) or an (B, C, H, W) batch,
    for which it returns (B, C, C).
    """
    features = as_tensor(features)
    if features.ndim == 2:
        m = features.shape[0]
        return ops.mul(ops.matmul(ops.transpose(features, (1, 0)), features), 1.0 / m)
    if features.ndim != 4:
        raise ShapeError(f"gram expects (M, N) or (B, C, H, W), got {features.shape}")
    b, c, h, w = features.shape
    flat = ops.reshape(features, (b, c, h * w))
    return ops.mul(ops.matmul(flat, ops.transpose(flat, (0, 2, 1))), 1.0 / (h * w))


def gram_distance(g_hat: Tensor, g: Tensor) -> Tensor:
    """E_l = (1 / N_l^2) sum_ij (G_hat - G)^2, averaged over the batch."""
    g_hat, g = as_tensor(g_hat), as_tensor(g)
    diff = ops.sub(g_hat, g)
    return ops.mean(ops.mul(diff, diff))


def texture_loss_from_features(feats_hat: FeatureStack, feats: Mapping[str, Tensor], layers: Sequence[str],
                               weights: Sequence[float]) -> Tensor:
    if not layers:
        raise ValueError("texture loss needs at least one layer")
    total = None
    for layer, w in zip(layers, weights):
        ref = feats[layer]
        g_ref = ref if ref.ndim == 3 else gram(ref)
        term = ops.mul(gram_distance(gram(feats_hat[layer]), g_ref), float(w))
        total = term if total is None else ops.add(total, term)
    return total


def texture_loss(backbone: Backbone, image: Tensor, transformed: Tensor,
                 layers: Sequence[str] = TEXTURE_LAYERS, weights: Optional[Sequence[float]] = None) -> Tensor:
    weights = [1.0] * len(layers) if weights is None else list(weights)
    ref = backbone.features(image, layers)
    out = backbone.features(transformed, layers)
    return texture_loss_from_features(out, ref, layers, weights)


# ---------------------------------------------------------------- adversarial

def adv_generator_loss(d_out: Tensor) -> Tensor:
    """sum_xy (1 - D(I_hat))^2 per image, averaged over the batch."""
    d_out = as_tensor(d_out)
    miss = ops.sub(1.0, d_out)
    return ops.mean(ops.sum(ops.mul(miss, miss), axis=tuple(range(1, d_out.ndim))))


def adv_discriminator_loss(d_fake: Tensor, d_real: Tensor) -> Tensor:
    """1/2 sum_xy (D(I_hat)^2 + (1 - D(I))^2) per image, averaged over the batch."""
    d_fake, d_real = as_tensor(d_fake), as_tensor(d_real)
    if d_fake.shape != d_real.shape:
        raise ShapeError(f"discriminator outputs differ in shape: {d_fake.shape} vs {d_real.shape}")
    miss = ops.sub(1.0, d_real)
    per_pos = ops.add(ops.mul(d_fake, d_fake), ops.mul(miss, miss))
    return ops.mul(ops.mean(ops.sum(per_pos, axis=tuple(range(1, d_fake.ndim)))), 0.5)
