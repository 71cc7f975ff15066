"""Joint generator / discriminator training, evaluation and loss ablations.

Each step samples a batch, draws fresh targets, updates the generator on the
weighted four-term loss and then the discriminator on the LSGAN loss.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io, ops
from .backbone import READOUT_LAYERS
from .dataset import Item
from .losses import (CSV_HEADER, LossDiagnosticsError, LossWeights, adv_discriminator_loss,
                     adv_generator_loss, feature_mse, gram, saliency_loss, texture_loss_from_features,
                     total_loss)
from .optim import Adam, AdamConfig
from .saliency import SaliencyModel, TrainingDivergence
from .targets import LOCAL_SHIFT, MANIPULATIONS, ObjectMask, mask_to_grid, sample_target, to_network_input
from .tensor import Tensor, UsageError, backward, no_grad
from .transformer import (DiscriminatorConfig, FGTransformConfig, NetworkParams, build_discriminator,
                          build_fgtransform, forward_discriminator, forward_transform)

EVAL_HEADER = ("image", "L_sal", "L_feat", "L_tex", "L_adv", "total")
SUMMARY_HEADER = ("step", "split", "L_sal", "L_feat", "L_tex", "L_adv", "total")


@dataclass(frozen=True)
class TrainRunConfig:
    manipulation: str = LOCAL_SHIFT
    weights: LossWeights = field(default_factory=LossWeights)
    generator_adam: AdamConfig = field(default_factory=AdamConfig)
    discriminator_adam: AdamConfig = field(default_factory=AdamConfig)
    transformer: FGTransformConfig = field(default_factory=FGTransformConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    batch_size: int = 4
    steps: int = 2000
    seed: int = 0
    report_every: int = 1
    eval_every: int = 0  # 0: evaluate once at the end
    eval_images: int = 16
    checkpoint_every: int = 0  # 0: final checkpoint only
    mask_blur_sigma: Optional[float] = None

    def __post_init__(self):
        if self.manipulation not in MANIPULATIONS:
            raise UsageError(f"unknown manipulation {self.manipulation!r}; choose from {MANIPULATIONS}")
        if self.batch_size < 1 or self.steps < 0 or self.report_every < 1:
            raise UsageError("batch_size and report_every must be positive, steps nonnegative")


@dataclass
class TrainResult:
    generator: NetworkParams
    discriminator: NetworkParams
    rows: list[list] = field(default_factory=list)  # CSV_HEADER rows
    eval_rows: list[list] = field(default_factory=list)  # SUMMARY_HEADER rows
    frozen_before: dict[str, str] = field(default_factory=dict)
    frozen_after: dict[str, str] = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        k = CSV_HEADER.index(name)
        return np.array([row[k] for row in self.rows], dtype=np.float64)

    def final_eval(self, split: str) -> dict[str, float]:
        rows = [r for r in self.eval_rows if r[1] == split]
        if not rows:
            raise KeyError(f"no {split} evaluation recorded")
        return dict(zip(SUMMARY_HEADER[2:], rows[-1][2:]))


class ImageCache:
    """Frozen-network quantities of the unmodified images, computed once per id."""

    def __init__(self, model: SaliencyModel, weights: LossWeights):
        self.model = model
        self.weights = weights
        self._store: dict[str, dict] = {}

    def layers(self) -> list[str]:
        return list(dict.fromkeys([self.weights.feature_layer, *self.weights.texture_layers]))

    def get(self, item: Item) -> dict:
        if item.id not in self._store:
            with no_grad():
                image = Tensor(item.image[None])
                s, feats = self.model.forward(image, self.layers())
                stack = ops.concat([feats[name] for name in READOUT_LAYERS], axis=1).data
                grid = s.shape[2:]
                self._store[item.id] = {
                    "log_saliency": s.data[0, 0],
                    "stack": stack[0],
                    "feature": feats[self.weights.feature_layer].data[0],
                    "grams": {name: gram(feats[name]).data[0] for name in self.weights.texture_layers},
                    "masks": [ObjectMask(mask_to_grid(m, grid), k) for k, m in sorted(item.masks.items())],
                }
        return self._store[item.id]


def _targets(cache: ImageCache, batch: Sequence[Item], rng: np.random.Generator, manipulation: str,
             mask_blur_sigma: Optional[float]) -> np.ndarray:
    out = []
    for item in batch:
        entry = cache.get(item)
        p_t, _ = sample_target(entry["log_saliency"], entry["masks"], rng, manipulation, mask_blur_sigma)
        out.append(p_t)
    return np.stack(out)[:, None]


def generator_terms(gen: NetworkParams, disc: Optional[NetworkParams], model: SaliencyModel, cache: ImageCache,
                    batch: Sequence[Item], p_t: np.ndarray) -> tuple[dict, Tensor]:
    """Forward the generator and return the four loss terms (as Tensors) and Î."""
    weights = cache.weights
    entries = [cache.get(item) for item in batch]
    image = Tensor(np.stack([item.image for item in batch]))
    stack = Tensor(np.stack([e["stack"] for e in entries]))
    transformed = forward_transform(gen, image, to_network_input(p_t), model.backbone, stack=stack)
    s_hat, feats = model.forward(transformed, cache.layers())
    p_hat = ops.softmax_spatial(s_hat)
    terms = {"L_sal": saliency_loss(p_t, p_hat)}
    terms["L_feat"] = feature_mse(feats[weights.feature_layer], Tensor(np.stack([e["feature"] for e in entries])))
    refs = {name: Tensor(np.stack([e["grams"][name] for e in entries])) for name in weights.texture_layers}
    terms["L_tex"] = texture_loss_from_features(feats, refs, weights.texture_layers, weights.texture_weights)
    if disc is not None:
        terms["L_adv"] = adv_generator_loss(forward_discriminator(disc, transformed, image))
    else:
        terms["L_adv"] = 0.0
    return terms, transformed


def _check_disjoint(items: Sequence[Item], train_ids: Optional[set]) -> None:
    if train_ids is None:
        return
    overlap = sorted(train_ids & {item.id for item in items})
    if overlap:
        raise UsageError(f"evaluation set overlaps the training set: {', '.join(overlap[:5])}")


def evaluate(gen: NetworkParams, model: SaliencyModel, items: Sequence[Item], n_images: Optional[int] = None,
             seed: int = 0, manipulation: str = LOCAL_SHIFT, weights: LossWeights = LossWeights(),
             disc: Optional[NetworkParams] = None, train_ids: Optional[set] = None,
             cache: Optional[ImageCache] = None, mask_blur_sigma: Optional[float] = None) -> list[list]:
    """One row per image (EVAL_HEADER) with freshly sampled, seeded targets.

    Passing ``train_ids`` enforces that no evaluated image was trained on.
    """
    n_images = len(items) if n_images is None else n_images
    if n_images < 1 or not items:
        raise UsageError("evaluation needs at least one image")
    if n_images > len(items):
        raise UsageError(f"requested {n_images} evaluation images but only {len(items)} are available")
    items = list(items)[:n_images]
    _check_disjoint(items, train_ids)
    cache = cache or ImageCache(model, weights)
    rng = np.random.default_rng(seed)
    rows = []
    with no_grad():
        for item in items:
            p_t = _targets(cache, [item], rng, manipulation, mask_blur_sigma)
            terms, _ = generator_terms(gen, disc, model, cache, [item], p_t)
            _, report = total_loss(terms, weights)
            rows.append([item.id, report.L_sal, report.L_feat, report.L_tex, report.L_adv, report.total])
    return rows


def summarize(rows: Sequence[Sequence]) -> list[float]:
    return [float(np.mean([r[k] for r in rows])) for k in range(1, len(EVAL_HEADER))]


def frozen_checksums(model: SaliencyModel) -> dict[str, str]:
    readout = NetworkParams()
    for name, t in model.readout.named().items():
        readout.tensors[name] = t
    return {"backbone": model.backbone.checksum(), "readout": readout.checksum()}


def _save_checkpoint(directory: Path, gen: NetworkParams, disc: NetworkParams, step: int, cfg_echo: dict) -> None:
    meta = {"step": step, **cfg_echo}
    gen.save(directory / "generator", meta)
    disc.save(directory / "discriminator", meta)


def train_ids_of(items: Sequence[Item]) -> set[str]:
    return {item.id for item in items}


def config_echo(cfg: TrainRunConfig) -> dict:
    echo = asdict(cfg)
    echo["weights"]["texture_layers"] = list(cfg.weights.texture_layers)
    return echo


def train(cfg: TrainRunConfig, model: SaliencyModel, train_items: Sequence[Item],
          test_items: Sequence[Item] = (), out_dir=None, gen_seed: Optional[int] = None,
          disc_seed: Optional[int] = None) -> TrainResult:
    """Run ``cfg.steps`` alternating updates; writes CSVs and checkpoints under ``out_dir``."""
    train_items = list(train_items)
    if not train_items:
        raise UsageError("training set is empty")
    if cfg.transformer.backbone != model.backbone.config:
        raise UsageError("transformer config names a different backbone than the saliency model")
    out = Path(out_dir) if out_dir is not None else None
    seed = cfg.seed
    gen, _ = build_fgtransform(cfg.transformer, seed if gen_seed is None else gen_seed)
    disc = build_discriminator(cfg.discriminator, seed + 1 if disc_seed is None else disc_seed)
    cache = ImageCache(model, cfg.weights)
    model.readout.set_trainable(False)
    result = TrainResult(gen, disc, frozen_before=frozen_checksums(model))
    echo = {"config": config_echo(cfg), "train_ids": sorted(train_ids_of(train_items))}

    gen_opt = Adam(gen.trainable(), cfg.generator_adam)
    disc_opt = Adam(disc.trainable(), cfg.discriminator_adam)
    order_rng = np.random.default_rng([seed, 1])
    target_rng = np.random.default_rng([seed, 2])
    batch_size = min(cfg.batch_size, len(train_items))
    order, cursor = order_rng.permutation(len(train_items)), 0
    train_ids = train_ids_of(train_items)
    eval_n_train = min(cfg.eval_images, len(train_items))
    eval_n_test = min(cfg.eval_images, len(test_items))

    def run_eval(step: int) -> None:
        for split, items, n, ids in (("train", train_items, eval_n_train, None),
                                     ("test", list(test_items), eval_n_test, train_ids)):
            if n == 0:
                continue
            rows = evaluate(gen, model, items, n, seed + 1000, cfg.manipulation, cfg.weights, disc, ids, cache,
                            cfg.mask_blur_sigma)
            result.eval_rows.append([step, split, *summarize(rows)])

    last_good = gen.state(), disc.state()
    for step in range(1, cfg.steps + 1):
        if cursor + batch_size > len(order):
            order, cursor = order_rng.permutation(len(train_items)), 0
        batch = [train_items[k] for k in order[cursor:cursor + batch_size]]
        cursor += batch_size
        p_t = _targets(cache, batch, target_rng, cfg.manipulation, cfg.mask_blur_sigma)

        gen_opt.zero_grad()
        disc.set_trainable(False)  # generator step: D is a fixed function
        try:
            terms, transformed = generator_terms(gen, disc, model, cache, batch, p_t)
            loss, report = total_loss(terms, cfg.weights)
        except LossDiagnosticsError as exc:
            _abort(out, gen, disc, last_good, step, echo, {"term": exc.term, "value": exc.value})
        backward(loss)
        gen_opt.step()

        disc.set_trainable(True)
        disc_opt.zero_grad()
        image = Tensor(np.stack([item.image for item in batch]))
        fake = Tensor(transformed.data)
        l_d = adv_discriminator_loss(forward_discriminator(disc, fake, image), forward_discriminator(disc, image, image))
        if not math.isfinite(l_d.item()):
            _abort(out, gen, disc, last_good, step, echo, {"term": "L_D", "value": l_d.item()})
        backward(l_d)
        disc_opt.step()
        report.L_D = l_d.item()

        if not all(np.isfinite(t.data).all() for t in gen.tensors.values()):
            _abort(out, gen, disc, last_good, step, echo, {"term": "generator parameters", "value": float("nan")})
        last_good = gen.state(), disc.state()
        if step % cfg.report_every == 0:
            result.rows.append(report.row(step))
        if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            _save_checkpoint(out / "checkpoints" / f"step_{step:06d}", gen, disc, step, echo)
        if cfg.eval_every and step % cfg.eval_every == 0 and step != cfg.steps:
            run_eval(step)

    run_eval(cfg.steps)
    result.frozen_after = frozen_checksums(model)
    if result.frozen_before != result.frozen_after:
        raise RuntimeError("a frozen component changed during training")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _save_checkpoint(out, gen, disc, cfg.steps, echo)
        io.write_csv(out / "train_losses.csv", CSV_HEADER, result.rows)
        io.write_csv(out / "eval_losses.csv", SUMMARY_HEADER, result.eval_rows)
    return result


def _abort(out: Optional[Path], gen: NetworkParams, disc: NetworkParams, last_good, step: int, echo: dict,
           diagnostics: dict) -> None:
    gen.load_state(last_good[0])
    disc.load_state(last_good[1])
    diagnostics = {"step": step, **diagnostics}
    if out is not None:
        _save_checkpoint(out / "last_good", gen, disc, step - 1, echo)
        io.dump_json(out / "diagnostics.json", diagnostics)
    raise TrainingDivergence(f"training diverged at step {step}: {diagnostics}", diagnostics)


# ------------------------------------------------------------------ ablation

ABLATION_HEADER = ("variant", "sal", "feat", "tex", "adv", "L_sal", "L_feat", "L_tex", "L_adv")

STANDARD_VARIANTS = {
    "full": {},
    "saliency-only": {"feat": 0.0, "tex": 0.0, "adv": 0.0},
    "no-adversarial": {"adv": 0.0},
    "no-texture": {"tex": 0.0},
    "no-feature": {"feat": 0.0},
}


def run_ablation(base: TrainRunConfig, model: SaliencyModel, train_items: Sequence[Item],
                 test_items: Sequence[Item], variants: Optional[dict[str, dict]] = None,
                 out_dir=None) -> list[list]:
    """Train + evaluate each zeroed-weight variant under the shared seed; one table row per variant.

    The table reports the final test-set evaluation.
    """
    variants = STANDARD_VARIANTS if variants is None else variants
    allowed = {"sal", "feat", "tex", "adv"}
    for name, changes in variants.items():
        bad = set(changes) - allowed
        if bad:
            raise UsageError(f"variant {name!r} names unknown weights: {', '.join(sorted(bad))}")
    table = []
    for name, changes in variants.items():
        cfg = replace(base, weights=base.weights.replace(**changes))
        sub = Path(out_dir) / name if out_dir is not None else None
        result = train(cfg, model, train_items, test_items, sub)
        split = "test" if test_items else "train"
        final = result.final_eval(split)
        w = cfg.weights
        table.append([name, w.sal, w.feat, w.tex, w.adv,
                      final["L_sal"], final["L_feat"], final["L_tex"], final["L_adv"]])
    if out_dir is not None:
        io.write_csv(Path(out_dir) / "ablation.csv", ABLATION_HEADER, table)
    return table


# --------------------------------------------------------- pipeline check

def pipeline_gradcheck(gen: NetworkParams, disc: Optional[NetworkParams], model: SaliencyModel,
                       batch: Sequence[Item], p_t: np.ndarray, weights: LossWeights = LossWeights(),
                       per_tensor: int = 5, seed: int = 0, step: float = 1e-5,
                       names: Optional[Sequence[str]] = None, floor: float = 1e-5) -> dict[str, float]:
    """Spot-check d(total loss)/d(param) for every trainable generator tensor.

    Returns the max relative error per tensor over ``per_tensor`` random coordinates.
    Biases feeding an instance norm have an exactly zero gradient; ``floor``
    keeps finite-difference round-off on those from reading as relative error.
    """
    from .gradcheck import gradcheck

    cache = ImageCache(model, weights)
    rng = np.random.default_rng(seed)
    errors = {}
    for name in names or [k for k, t in gen.tensors.items() if t.requires_grad]:
        original = gen.tensors[name]
        coords = rng.choice(original.data.size, size=min(per_tensor, original.data.size), replace=False)

        def f(t: Tensor, name=name) -> Tensor:
            gen.tensors[name] = t
            try:
                terms, _ = generator_terms(gen, disc, model, cache, batch, p_t)
                return total_loss(terms, weights)[0]
            finally:
                gen.tensors[name] = original

        errors[name] = gradcheck(f, original, step=step, coords=coords, floor=floor)
    return errors
