"""Central-difference gradient checking against the autodiff tape."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import ops
from .tensor import Tensor, backward


def gradcheck(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    kink_margin: float = 0.0,
    coords: Optional[np.ndarray] = None,
    floor: float = 1e-8,
) -> float:
    """Max relative error between the analytic and numeric gradient of ``f`` at ``x``.

    The error per coordinate is ``|a - n| / max(|a|, |n|, floor)``. Coordinates with
    ``|x_i| < kink_margin`` are skipped (use it for ops whose kinks sit at 0).
    ``coords`` optionally restricts the check to a set of flat indices.
    """
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base, requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad

    flat = base.reshape(-1)
    indices = np.arange(flat.size) if coords is None else np.asarray(coords).reshape(-1)
    worst = 0.0
    for idx in indices:
        if kink_margin > 0 and abs(flat[idx]) < kink_margin:
            continue
        bumped = flat.copy()
        bumped[idx] += step
        f_plus = f(Tensor(bumped.reshape(base.shape))).item()
        bumped[idx] -= 2 * step
        f_minus = f(Tensor(bumped.reshape(base.shape))).item()
        numeric = (f_plus - f_minus) / (2 * step)
        a = analytic.reshape(-1)[idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst


def projection(shape, seed: int = 0) -> np.ndarray:
    """Fixed random weights that turn a tensor-valued op into a generic scalar."""
    return np.random.default_rng(seed).standard_normal(shape)


def projected(op: Callable[[Tensor], Tensor], out_shape, seed: int = 0) -> Callable[[Tensor], Tensor]:
    weights = Tensor(projection(out_shape, seed))
    return lambda t: ops.sum(ops.mul(op(t), weights))


@dataclass
class GradcheckCase:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _op_cases(size: int, rng: np.random.Generator) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray, float]]:
    """Scalar-valued probes for every differentiable primitive: (f, x, kink margin)."""
    s = max(4, size - size % 2)
    img = rng.standard_normal((2, 3, s, s))
    w3 = Tensor(rng.standard_normal((4, 3, 3, 3)))
    b3 = Tensor(rng.standard_normal(4))
    w1 = Tensor(rng.standard_normal((5, 3, 1, 1)))
    b1 = Tensor(rng.standard_normal(5))
    mat_b = Tensor(rng.standard_normal((s, 3)))

    def case(op, x, margin=0.0):
        with_out = op(Tensor(x))
        return projected(op, with_out.shape, seed=int(rng.integers(1 << 31))), x, margin

    return {
        "conv2d": case(lambda t: ops.conv2d(t, w3, b3, stride=1, padding=1), img),
        "conv2d_stride2": case(lambda t: ops.conv2d(t, w3, b3, stride=2, padding=1), img),
        "conv1x1": case(lambda t: ops.conv1x1(t, w1, b1), img),
        "relu": case(ops.relu, img, 1e-3),
        "leaky_relu": case(lambda t: ops.leaky_relu(t, 0.2), img, 1e-3),
        "instance_norm": case(lambda t: ops.instance_norm(t, 1e-5), img),
        "gaussian_blur": case(lambda t: ops.gaussian_blur(t, 1.0), img),
        "softmax_spatial": case(ops.softmax_spatial, img),
        "nn_upsample": case(lambda t: ops.nn_upsample(t, 2), img),
        "downsample_avg": case(lambda t: ops.downsample_avg(t, 2), img),
        "resize_bilinear": case(lambda t: ops.resize_bilinear(t, 2 * s, s + 3), img),
        "matmul": case(lambda t: ops.matmul(t, mat_b), img),
        "elementwise": case(lambda t: ops.div(ops.mul(t, t) + ops.exp(t * 0.5), ops.add(ops.mul(t, t), 1.0)), img),
        "log": case(lambda t: ops.log(ops.add(ops.mul(t, t), 0.5)), img),
        "concat": case(lambda t: ops.concat([t, ops.mul(t, t)], axis=1), img),
    }


OP_NAMES = tuple(_op_cases(4, np.random.default_rng(0)).keys())


def run_suite(ops_selected=None, size: int = 6, seed: int = 0, tolerance: float = 1e-5,
              step: float = 1e-5) -> list[GradcheckCase]:
    rng = np.random.default_rng(seed)
    cases = _op_cases(size, rng)
    names = list(cases) if ops_selected in (None, "all") else list(ops_selected)
    unknown = [n for n in names if n not in cases]
    if unknown:
        raise KeyError(f"unknown op(s): {', '.join(unknown)}; choose from {', '.join(cases)}")
    results = []
    for name in names:
        f, x, margin = cases[name]
        results.append(GradcheckCase(name, gradcheck(f, Tensor(x), step=step, kink_margin=margin), tolerance))
    return results
