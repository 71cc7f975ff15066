"""Empirical fixation densities and the behavioural metrics built on them.

Densities live on the stimulus pixel grid (optionally coarsened by an
integer divisor). Pixel (i, j) covers [j, j+1) x [i, i+1) in image
coordinates, so a fixation at (x, y) falls into bin (floor(y), floor(x)).
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import ndtr

from .tensor import ShapeError, UsageError

FIXATION_HEADER = ("subject", "image", "block", "fix_index", "x", "y")
SUBSETS = ("all", "first-fixation", "first-block")


class FixationFormatError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class FixationRecord:
    subject: str
    image: str
    block: int
    fix_index: int
    x: float
    y: float
    duration_ms: Optional[float] = None

    def __post_init__(self):
        if self.block < 1 or self.fix_index < 1:
            raise ValueError("block and fixation indices are 1-based")
        if not (math.isfinite(self.x) and math.isfinite(self.y)) or self.x < 0 or self.y < 0:
            raise ValueError(f"fixation ({self.x}, {self.y}) lies outside the image")

    @property
    def trial(self) -> tuple[str, str, int]:
        return (self.subject, self.image, self.block)


def read_fixations(path, extents: Optional[Mapping[str, tuple[int, int]]] = None) -> list[FixationRecord]:
    """Parse a fixation CSV. ``extents`` maps image id -> (height, width) for bounds checks."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FixationFormatError("empty fixation file", 1) from None
        header = [h.strip() for h in header]
        if tuple(header[:6]) != FIXATION_HEADER or len(header) > 7 or (len(header) == 7 and header[6] != "duration_ms"):
            raise FixationFormatError(f"expected header {','.join(FIXATION_HEADER)}[,duration_ms], got {','.join(header)}", 1)
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise FixationFormatError(f"expected {len(header)} fields, got {len(row)}", line)
            try:
                duration = float(row[6]) if len(row) == 7 and row[6].strip() else None
                rec = FixationRecord(row[0].strip(), row[1].strip(), int(row[2]), int(row[3]),
                                     float(row[4]), float(row[5]), duration)
            except ValueError as exc:
                raise FixationFormatError(str(exc), line) from None
            if extents is not None:
                if rec.image not in extents:
                    raise FixationFormatError(f"unknown image {rec.image!r}", line)
                h, w = extents[rec.image]
                if rec.x >= w or rec.y >= h:
                    raise FixationFormatError(f"fixation ({rec.x}, {rec.y}) outside {w}x{h} image", line)
            records.append(rec)
    return records


def write_fixations(path, records: Iterable[FixationRecord]) -> None:
    records = list(records)
    with_duration = any(r.duration_ms is not None for r in records)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FIXATION_HEADER + (("duration_ms",) if with_duration else ()))
        for r in records:
            row = [r.subject, r.image, r.block, r.fix_index, repr(float(r.x)), repr(float(r.y))]
            if with_duration:
                row.append("" if r.duration_ms is None else repr(float(r.duration_ms)))
            writer.writerow(row)


def subset(records: Sequence[FixationRecord], selector: str = "all") -> list[FixationRecord]:
    """first-fixation: the earliest fixation of every trial; first-block: each subject's earliest block."""
    if selector == "all":
        return list(records)
    if selector == "first-fixation":
        first: dict = {}
        for r in records:
            first[r.trial] = min(first.get(r.trial, r.fix_index), r.fix_index)
        return [r for r in records if r.fix_index == first[r.trial]]
    if selector == "first-block":
        block: dict = {}
        for r in records:
            block[r.subject] = min(block.get(r.subject, r.block), r.block)
        return [r for r in records if r.block == block[r.subject]]
    raise UsageError(f"unknown subset {selector!r}; choose from {SUBSETS}")


# ------------------------------------------------------------------- KDE

def _axis_mass(coords: np.ndarray, n: int, sigma: float) -> np.ndarray:
    """(len(coords), n) Gaussian mass per unit bin on [0, n], folding tails back at both borders."""
    edges = np.arange(n + 1, dtype=np.float64)
    reach = int(math.ceil(6.0 * sigma / n)) + 1
    mass = np.zeros((len(coords), n))
    for k in range(-reach, reach + 1):
        for centre in (coords + 2 * k * n, -coords + 2 * k * n):
            cdf = ndtr((edges[None, :] - centre[:, None]) / sigma)
            mass += np.diff(cdf, axis=1)
    return mass


def kde(points: np.ndarray, extents: tuple[int, int], sigma: float) -> np.ndarray:
    """Gaussian KDE with reflected border mass; sums to 1 on the (H, W) grid."""
    if sigma <= 0:
        raise ValueError("bandwidth must be positive")
    h, w = extents
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) == 0:
        raise UsageError("density estimate needs at least one fixation")
    mx = _axis_mass(points[:, 0], w, sigma)
    my = _axis_mass(points[:, 1], h, sigma)
    density = my.T @ mx / len(points)
    return density / density.sum()


@dataclass(frozen=True)
class DensityFitConfig:
    bandwidths: tuple[float, ...] = (1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0)
    alphas: tuple[float, ...] = (0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5)
    betas: tuple[float, ...] = (0.0, 0.1, 0.2, 0.4)
    grid_divisor: int = 1

    def __post_init__(self):
        for name in ("bandwidths", "alphas", "betas"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if not self.bandwidths or any(b <= 0 for b in self.bandwidths):
            raise ValueError("bandwidths must be positive")
        if not self.alphas or not self.betas or min(self.alphas + self.betas) < 0:
            raise ValueError("mixture weights must be nonnegative")
        if not self.combinations(True):
            raise ValueError("no (alpha, beta) pair satisfies alpha + beta <= 1")
        if self.grid_divisor < 1:
            raise ValueError("grid divisor must be a positive integer")

    def combinations(self, with_center_bias: bool) -> list[tuple[float, float]]:
        betas = self.betas if with_center_bias else (0.0,)
        return [(a, b) for a in self.alphas for b in betas if a + b <= 1.0 + 1e-12]

    def grid_extents(self, extents: tuple[int, int]) -> tuple[int, int]:
        h, w = extents
        if h % self.grid_divisor or w % self.grid_divisor:
            raise ShapeError(f"image {w}x{h} is not divisible by grid divisor {self.grid_divisor}")
        return h // self.grid_divisor, w // self.grid_divisor


@dataclass
class DensityFit:
    density: np.ndarray
    sigma: float
    alpha: float
    beta: float
    log_likelihood: float  # mean held-out log-likelihood per fixation at the chosen point
    scores: list[tuple[float, float, float, float]] = field(default_factory=list)  # (sigma, alpha, beta, ll)


def _grid_points(records: Sequence[FixationRecord], divisor: int) -> np.ndarray:
    return np.array([[r.x / divisor, r.y / divisor] for r in records], dtype=np.float64).reshape(-1, 2)


def _bins(points: np.ndarray, extents: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    h, w = extents
    rows = np.clip(np.floor(points[:, 1]).astype(int), 0, h - 1)
    cols = np.clip(np.floor(points[:, 0]).astype(int), 0, w - 1)
    return rows, cols


def fit_density(records: Sequence[FixationRecord], extents: tuple[int, int], cfg: DensityFitConfig = DensityFitConfig(),
                center_bias: Optional[np.ndarray] = None) -> DensityFit:
    """Mixture of KDE, uniform and centre bias; (sigma, alpha, beta) by leave-one-subject-out likelihood.

    Ties go to the larger alpha, then the larger beta, then the larger sigma.
    """
    grid = cfg.grid_extents(extents)
    by_subject: dict[str, list[FixationRecord]] = defaultdict(list)
    for r in records:
        by_subject[r.subject].append(r)
    if len(by_subject) < 2:
        raise UsageError("cross-validation over subjects needs at least 2 subjects")
    if center_bias is not None:
        center_bias = np.asarray(center_bias, dtype=np.float64)
        if center_bias.shape != grid:
            raise ShapeError(f"centre bias {center_bias.shape} does not match density grid {grid}")
    combos = cfg.combinations(center_bias is not None)
    alphas = np.array([a for a, _ in combos])
    betas = np.array([b for _, b in combos])
    uniform = 1.0 / (grid[0] * grid[1])
    subjects = sorted(by_subject)
    folds = []
    for s in subjects:
        train = _grid_points([r for t in subjects if t != s for r in by_subject[t]], cfg.grid_divisor)
        held = _grid_points(by_subject[s], cfg.grid_divisor)
        folds.append((train, _bins(held, grid)))

    scores = []
    best = None
    for sigma in cfg.bandwidths:
        total = np.zeros(len(combos))
        count = 0
        for train, (rows, cols) in folds:
            k = kde(train, grid, sigma)[rows, cols]
            c = center_bias[rows, cols] if center_bias is not None else np.zeros_like(k)
            mix = (1.0 - alphas - betas)[:, None] * k[None] + alphas[:, None] * uniform + betas[:, None] * c[None]
            with np.errstate(divide="ignore"):
                total += np.log(mix).sum(axis=1)
            count += len(rows)
        for (a, b), ll in zip(combos, total / count):
            scores.append((sigma, a, b, float(ll)))
            key = (ll, a, b, sigma)
            if best is None or _better(key, best):
                best = key
    ll, alpha, beta, sigma = best
    all_points = _grid_points(records, cfg.grid_divisor)
    density = (1.0 - alpha - beta) * kde(all_points, grid, sigma) + alpha * uniform
    if center_bias is not None:
        density = density + beta * center_bias
    return DensityFit(density / density.sum(), sigma, alpha, beta, float(ll), scores)


def _better(key, best, rtol: float = 1e-12) -> bool:
    ll, a, b, s = key
    bll = best[0]
    if math.isinf(ll) or math.isinf(bll):
        tie = ll == bll
    else:
        tie = abs(ll - bll) <= rtol * max(abs(ll), abs(bll), 1.0)
    if not tie:
        return ll > bll
    return (a, b, s) > best[1:]


def estimate_center_bias(densities: Mapping[str, np.ndarray], exclude: str) -> np.ndarray:
    """Normalized mean of every density except ``exclude`` (leave-one-image-out)."""
    if len(densities) < 2:
        raise UsageError("centre bias needs densities for at least 2 images")
    others = [np.asarray(d, dtype=np.float64) for k, d in densities.items() if k != exclude]
    if not others:
        raise UsageError("no images left after excluding the target")
    shapes = {o.shape for o in others}
    if len(shapes) != 1:
        raise ShapeError(f"densities have differing extents: {sorted(shapes)}")
    mean = np.mean(others, axis=0)
    return mean / mean.sum()


# ---------------------------------------------------------------- metrics

def object_probability(p: np.ndarray, mask: np.ndarray) -> float:
    p, mask = np.asarray(p, dtype=np.float64), np.asarray(mask, dtype=np.float64)
    if p.shape != mask.shape:
        raise ShapeError(f"density {p.shape} and mask {mask.shape} differ in extents")
    return float((p * mask).sum())


def entropy(p: np.ndarray, base: str = "nats") -> float:
    """-sum p log p with 0 log 0 = 0; ``base`` is "nats" or "bits".

    Compensated summation keeps uniform densities on power-of-two grids exact.
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    nz = p[p > 0]
    if base == "bits":
        return -math.fsum(nz * np.log2(nz)) + 0.0
    if base != "nats":
        raise ValueError(f"unknown entropy base {base!r}")
    return -math.fsum(nz * np.log(nz)) + 0.0


@dataclass(frozen=True)
class RelativeChange:
    absolute: float
    relative: float  # nan when undefined
    defined: bool


def relative_change(before: float, after: float) -> RelativeChange:
    absolute = after - before
    if before > 0:
        return RelativeChange(absolute, absolute / before, True)
    return RelativeChange(absolute, float("nan"), False)


# ----------------------------------------------------------------- report

@dataclass
class Stimulus:
    id: str
    original: str  # id of the unmanipulated image; equal to ``id`` for originals
    height: int
    width: int
    target_mask: Optional[str] = None  # key into the masks mapping
    image: Optional[str] = None  # image path, for model predictions


REPORT_HEADER = ("stimulus", "original", "n_fixations", "sigma", "alpha", "beta",
                 "p_obj", "entropy_bits", "d_p_obj", "rel_p_obj", "d_entropy_bits",
                 "model_p_obj", "model_entropy_bits", "model_d_p_obj", "model_rel_p_obj", "model_d_entropy_bits")


def fit_all(stimuli: Sequence[Stimulus], records: Sequence[FixationRecord],
            cfg: DensityFitConfig = DensityFitConfig()) -> dict[str, DensityFit]:
    """Fit every stimulus: a KDE-plus-uniform pass, then a refit with its leave-one-out centre bias."""
    by_image: dict[str, list[FixationRecord]] = defaultdict(list)
    for r in records:
        by_image[r.image].append(r)
    missing = [s.id for s in stimuli if s.id not in by_image]
    if missing:
        raise UsageError(f"no fixations for stimuli: {', '.join(missing)}")
    first = {s.id: fit_density(by_image[s.id], (s.height, s.width), cfg).density for s in stimuli}
    if len(stimuli) < 2:
        return {s.id: fit_density(by_image[s.id], (s.height, s.width), cfg) for s in stimuli}
    return {s.id: fit_density(by_image[s.id], (s.height, s.width), cfg, estimate_center_bias(first, s.id))
            for s in stimuli}


def _mask_on(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape == shape:
        return mask
    fh, fw = mask.shape[0] // shape[0], mask.shape[1] // shape[1]
    if fh < 1 or fh != fw or fh * shape[0] != mask.shape[0] or fw * shape[1] != mask.shape[1]:
        raise ShapeError(f"mask {mask.shape} cannot be mapped onto grid {shape}")
    return mask.reshape(shape[0], fh, shape[1], fw).mean(axis=(1, 3))


def _metrics(p: np.ndarray, mask: Optional[np.ndarray]) -> tuple[float, float]:
    p_obj = object_probability(p, _mask_on(mask, p.shape)) if mask is not None else float("nan")
    return p_obj, entropy(p, "bits")


def analysis_report(stimuli: Sequence[Stimulus], records: Sequence[FixationRecord],
                    masks: Mapping[str, np.ndarray], cfg: DensityFitConfig = DensityFitConfig(),
                    model_densities: Optional[Mapping[str, np.ndarray]] = None,
                    fits: Optional[Mapping[str, DensityFit]] = None) -> tuple[list[list], list]:
    """Per-stimulus rows (REPORT_HEADER) and an aggregate row of column means.

    A manipulated stimulus is compared against its original using the
    original's object mask; model columns are filled when predictions are given.
    """
    ids = {s.id for s in stimuli}
    for s in stimuli:
        if s.original not in ids:
            raise UsageError(f"stimulus {s.id}: original {s.original!r} is not in the stimulus set")
        if s.target_mask is not None and s.target_mask not in masks:
            raise UsageError(f"stimulus {s.id}: mask {s.target_mask!r} is missing")
    fits = fits if fits is not None else fit_all(stimuli, records, cfg)
    counts: dict[str, int] = defaultdict(int)
    for r in records:
        counts[r.image] += 1
    by_id = {s.id: s for s in stimuli}

    def mask_for(s: Stimulus) -> Optional[np.ndarray]:
        name = s.target_mask if s.target_mask is not None else by_id[s.original].target_mask
        return None if name is None else masks[name]

    rows = []
    for s in stimuli:
        mask = mask_for(s)
        orig = by_id[s.original]
        p_obj, h = _metrics(fits[s.id].density, mask)
        p_obj0, h0 = _metrics(fits[orig.id].density, mask)
        change = relative_change(p_obj0, p_obj)
        row = [s.id, s.original, counts[s.id], fits[s.id].sigma, fits[s.id].alpha, fits[s.id].beta,
               p_obj, h, change.absolute, change.relative, h - h0]
        if model_densities is not None and s.id in model_densities and orig.id in model_densities:
            m_obj, m_h = _metrics(model_densities[s.id], mask)
            m_obj0, m_h0 = _metrics(model_densities[orig.id], mask)
            m_change = relative_change(m_obj0, m_obj)
            row += [m_obj, m_h, m_change.absolute, m_change.relative, m_h - m_h0]
        else:
            row += [float("nan")] * 5
        rows.append(row)
    aggregate = ["mean", "", float(np.mean([r[2] for r in rows]))]
    for k in range(3, len(REPORT_HEADER)):
        col = np.array([r[k] for r in rows], dtype=np.float64)
        finite = col[np.isfinite(col)]
        aggregate.append(float(finite.mean()) if len(finite) else float("nan"))
    return rows, aggregate


# ------------------------------------------------------------- stimuli set

STIMULI_FORMAT = "gazeforge-stimuli/1"


def read_stimuli(path) -> list[Stimulus]:
    import json

    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format") != STIMULI_FORMAT:
        raise UsageError(f"{path}: unsupported stimuli format {manifest.get('format')!r}")
    out = []
    for k, entry in enumerate(manifest.get("stimuli", [])):
        try:
            out.append(Stimulus(str(entry["id"]), str(entry.get("original", entry["id"])), int(entry["height"]),
                                int(entry["width"]), entry.get("mask"), entry.get("image")))
        except KeyError as exc:
            raise UsageError(f"{path}: stimulus #{k} lacks field {exc.args[0]!r}") from None
    if not out:
        raise UsageError(f"{path}: no stimuli listed")
    return out
