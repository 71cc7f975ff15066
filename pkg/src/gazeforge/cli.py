"""Command-line entry point.

Every command writes ``run_manifest.json`` into its ``--out`` directory. The
manifest carries the fully resolved configuration and the sha256 of every
artifact, so ``gazeforge replay`` can re-run the command and compare bytes.

Exit codes: 0 success, 1 usage or validation error, 2 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__, config, io
from .backbone import Backbone, BackboneConfig
from .dataset import make_dataset, read_dataset, split, write_dataset
from .fixations import (REPORT_HEADER, DensityFitConfig, SUBSETS, analysis_report, fit_all, read_fixations,
                        read_stimuli, subset)
from .gradcheck import OP_NAMES, run_suite
from .losses import CSV_HEADER, LossWeights, saliency_loss
from .optim import AdamConfig
from .saliency import ReadoutParams, SaliencyModel, TrainingDivergence, pretrain_readout
from .targets import GLOBAL_SCALE, GlobalScale, LocalShift, ObjectMask, apply_spec, mask_to_grid, softmax
from .tensor import ShapeError, Tensor, UsageError, no_grad
from .trainer import (EVAL_HEADER, TrainRunConfig, evaluate, run_ablation, summarize, train)
from .transformer import (DiscriminatorConfig, FGTransformConfig, NetworkParams, build_discriminator,
                          build_fgtransform, forward_transform)

log = logging.getLogger("gazeforge")

MANIFEST_NAME = "run_manifest.json"
MANIFEST_FORMAT = "gazeforge-run/1"
FORMATS = {"tensor": "GZT1", "container": io.CONTAINER_FORMAT, "dataset": "gazeforge-dataset/1",
           "manifest": MANIFEST_FORMAT}


# --------------------------------------------------------------- helpers

def _abs(path, base: Optional[Path] = None) -> str:
    p = Path(path)
    if not p.is_absolute() and base is not None:
        p = base / p
    return str(p.resolve())


def _hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def artifact_hashes(out: Path) -> dict[str, str]:
    return {str(p.relative_to(out)): _hash(p) for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != MANIFEST_NAME}


def write_manifest(out: Path, command: str, cfg: dict, elapsed: float) -> dict:
    manifest = {
        "format": MANIFEST_FORMAT,
        "command": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "artifacts": artifact_hashes(out),
        "formats": FORMATS,
        "version": __version__,
        "numpy": np.__version__,
        "wall_clock_s": elapsed,
    }
    io.dump_json(out / MANIFEST_NAME, manifest)
    return manifest


def _backbone_meta(cfg: BackboneConfig) -> dict:
    return {"block_channels": list(cfg.block_channels), "convs_per_block": list(cfg.convs_per_block),
            "seed": cfg.seed, "normalize_activations": cfg.normalize_activations,
            "calibration_size": cfg.calibration_size, "calibration_batch": cfg.calibration_batch}


def save_saliency(directory: Path, model: SaliencyModel) -> None:
    meta = {"backbone": _backbone_meta(model.backbone.config), "blur_sigma": model.readout.blur_sigma,
            "upsample": model.readout.upsample}
    io.save_container(directory, model.readout.state(), meta=meta)


def load_saliency(directory) -> SaliencyModel:
    try:
        state, manifest = io.load_container(directory)
    except FileNotFoundError:
        raise UsageError(f"{directory}: no saliency checkpoint") from None
    meta = manifest["meta"]
    backbone = Backbone(BackboneConfig(**meta["backbone"]))
    readout = ReadoutParams.from_state(state, meta["blur_sigma"], meta["upsample"])
    model = SaliencyModel(backbone, readout)
    model.readout.set_trainable(False)
    return model


def _transformer_config(echo: dict) -> FGTransformConfig:
    t = dict(echo)
    t["backbone"] = BackboneConfig(**t["backbone"])
    return FGTransformConfig(**t)


def load_run(run_dir) -> tuple[SaliencyModel, NetworkParams, NetworkParams, dict]:
    """Saliency model, generator, discriminator and the checkpoint metadata of a ``train`` run."""
    run_dir = Path(run_dir)
    if not (run_dir / "generator" / "manifest.json").exists():
        raise UsageError(f"{run_dir}: not a training run directory (no generator checkpoint)")
    model = load_saliency(run_dir / "saliency")
    gen_state, gen_manifest = io.load_container(run_dir / "generator")
    disc_state, _ = io.load_container(run_dir / "discriminator")
    meta = gen_manifest["meta"]
    tcfg = _transformer_config(meta["config"]["transformer"])
    if tcfg.backbone != model.backbone.config:
        raise UsageError(f"{run_dir}: generator and saliency checkpoints disagree on the backbone")
    gen, _ = build_fgtransform(tcfg)
    gen.load_state(gen_state)
    dcfg = meta["config"]["discriminator"]
    disc = build_discriminator(DiscriminatorConfig(**dcfg))
    disc.load_state(disc_state)
    return model, gen, disc, meta


def _weights_from_echo(echo: dict) -> LossWeights:
    w = dict(echo)
    w["texture_layers"] = tuple(w["texture_layers"])
    w["texture_weights"] = tuple(w["texture_weights"])
    return LossWeights(**w)


def _read_dataset(path: str):
    try:
        return read_dataset(path)
    except FileNotFoundError:
        raise UsageError(f"{path}: dataset manifest not found") from None


def _load_image(path: str) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{p}: no such image")
    if p.suffix == ".gzt":
        image = io.read_gzt(p)
    else:
        image = io.load_image(p)
    if image.ndim != 3 or image.shape[0] != 3:
        raise UsageError(f"{p}: expected an RGB image, got shape {image.shape}")
    return image


# --------------------------------------------------------------- commands

def run_gradcheck(cfg: dict, out: Path) -> int:
    names = None if cfg["ops"] == "all" else cfg["ops"]
    try:
        results = run_suite(names, size=cfg["size"], seed=cfg["seed"], tolerance=cfg["tolerance"])
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    rows = [[r.name, r.error, r.tolerance, "pass" if r.passed else "FAIL"] for r in results]
    io.write_csv(out / "gradcheck.csv", ("op", "max_rel_error", "tolerance", "status"), rows)
    for name, err, tol, status in rows:
        print(f"{status:4s}  {name:18s} max rel error {err:.3e} (tolerance {tol:.0e})")
    return 0 if all(r.passed for r in results) else 2


def run_make_dataset(cfg: dict, out: Path) -> int:
    items = make_dataset(cfg["n"], cfg["size"], cfg["objects_per_image"], cfg["seed"], cfg["test_fraction"])
    write_dataset(items, out, meta={k: cfg[k] for k in ("n", "size", "objects_per_image", "seed", "test_fraction")})
    n_masks = sum(len(it.masks) for it in items)
    print(f"wrote {len(items)} images and {n_masks} masks to {out}")
    return 0


def run_pretrain(cfg: dict, out: Path) -> int:
    c: config.PretrainConfig = config.parse(config.PretrainConfig, cfg)
    train_items, _ = split(_read_dataset(c.dataset))
    if len(train_items) < 2:
        raise UsageError("pretraining needs at least 2 training images")
    model = SaliencyModel(Backbone(c.backbone.build()), seed=c.seed)
    images = np.stack([it.image for it in train_items])
    result = pretrain_readout(model, images, c.steps, AdamConfig(lr=c.lr), c.batch_size, c.heldout_fraction,
                              c.seed, {"sigma": c.oracle_sigma})
    save_saliency(out / "saliency", model)
    io.write_csv(out / "pretrain_curve.csv", ("step", "kl"), enumerate(result.curve, start=1))
    metrics = {"initial_heldout_kl": result.initial_heldout, "final_heldout_kl": result.final_heldout}
    io.dump_json(out / "metrics.json", metrics)
    print(f"held-out KL {result.initial_heldout:.4f} -> {result.final_heldout:.4f}")
    return 0


def _train_run_config(c: config.TrainConfig, backbone: BackboneConfig) -> TrainRunConfig:
    gen_adam, disc_adam = c.adam()
    return TrainRunConfig(
        manipulation=c.manipulation, weights=c.weights.build(), generator_adam=gen_adam,
        discriminator_adam=disc_adam,
        transformer=FGTransformConfig(residual_blocks=c.residual_blocks, trunk_channels=c.trunk_channels,
                                      backbone=backbone),
        batch_size=c.batch_size, steps=c.steps, seed=c.seed, report_every=c.report_every, eval_every=c.eval_every,
        eval_images=c.eval_images, checkpoint_every=c.checkpoint_every)


def run_train(cfg: dict, out: Path) -> int:
    c: config.TrainConfig = config.parse(config.TrainConfig, cfg)
    model = load_saliency(c.saliency)
    train_items, test_items = split(_read_dataset(c.dataset))
    run_cfg = _train_run_config(c, model.backbone.config)
    result = train(run_cfg, model, train_items, test_items, out)
    save_saliency(out / "saliency", model)
    if result.rows:
        last = dict(zip(CSV_HEADER, result.rows[-1]))
        print("final step " + ", ".join(f"{k}={v:.4g}" for k, v in last.items() if k != "step"))
    return 0


def run_evaluate(cfg: dict, out: Path) -> int:
    c: config.EvaluateConfig = config.parse(config.EvaluateConfig, cfg)
    model, gen, disc, meta = load_run(c.run)
    train_items, test_items = split(_read_dataset(c.dataset))
    items = test_items if c.split == "test" else train_items
    train_ids = set(meta["train_ids"]) if c.split == "test" else None
    manipulation = c.manipulation or meta["config"]["manipulation"]
    weights = _weights_from_echo(meta["config"]["weights"])
    rows = evaluate(gen, model, items, c.n_images, c.seed, manipulation, weights, disc, train_ids)
    mean = ["mean", *summarize(rows)]
    io.write_csv(out / "eval.csv", EVAL_HEADER, rows + [mean])
    print("mean " + ", ".join(f"{k}={v:.4g}" for k, v in zip(EVAL_HEADER[1:], mean[1:])))
    return 0


def run_ablate(cfg: dict, out: Path) -> int:
    c: config.AblateConfig = config.parse(config.AblateConfig, cfg)
    model = load_saliency(c.saliency)
    train_items, test_items = split(_read_dataset(c.dataset))
    base = _train_run_config(c, model.backbone.config)
    table = run_ablation(base, model, train_items, test_items, c.variants or None, out)
    for row in table:
        print("  ".join(str(v) if isinstance(v, str) else f"{v:.4g}" for v in row))
    return 0


def _target_spec(raw: str) -> config.TargetSpecConfig:
    text = Path(raw[1:]).read_text() if raw.startswith("@") else raw
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"target spec is not valid JSON: {exc.msg}") from None
    return config.parse(config.TargetSpecConfig, data, "target spec").checked()


def run_transform(cfg: dict, out: Path) -> int:
    model, gen, _, _ = load_run(cfg["checkpoint"])
    image = _load_image(cfg["image"])
    if image.shape[1] % 16 or image.shape[2] % 16:
        raise UsageError(f"image extents {image.shape[1:]} must be divisible by 16")
    spec_cfg = _target_spec(cfg["target_spec"])
    mask = None
    if cfg.get("mask"):
        mask = io.load_mask(cfg["mask"])
        if mask.shape != image.shape[1:]:
            raise UsageError(f"mask extents {mask.shape} do not match image {image.shape[1:]}")
    with no_grad():
        batch = Tensor(image[None])
        s = model.predict_log_saliency(batch).data[0, 0]
        grid_mask = mask_to_grid(mask, s.shape) if mask is not None else None
        if spec_cfg.kind == GLOBAL_SCALE:
            spec = GlobalScale(spec_cfg.k_sc)
        else:
            if grid_mask is None:
                raise UsageError("a local-shift target spec needs --mask")
            sigma = spec_cfg.mask_blur_sigma if spec_cfg.mask_blur_sigma is not None else 5.0 * s.shape[-1] / 512.0
            spec = LocalShift(ObjectMask(grid_mask), spec_cfg.k_sh, sigma)
        p_t = softmax(apply_spec(s, spec))
        transformed = forward_transform(gen, batch, np.log(p_t)[None, None], model.backbone).data[0]
        p_orig = softmax(s)
        p_new = model.predict_density(Tensor(transformed[None])).data[0, 0]
    io.write_gzt(out / "transformed.gzt", transformed)
    io.save_image(out / "transformed.ppm", np.clip(transformed, 0.0, 1.0))
    for name, density in (("density_original", p_orig), ("density_transformed", p_new), ("target", p_t)):
        io.write_gzt(out / f"{name}.gzt", density)
        io.save_density_pgm(out / f"{name}.pgm", density)
    metrics = {
        "kl_target_transformed": saliency_loss(p_t[None, None], Tensor(p_new[None, None])).item(),
        "kl_target_original": saliency_loss(p_t[None, None], Tensor(p_orig[None, None])).item(),
        "max_abs_pixel_change": float(np.abs(transformed - image).max()),
    }
    if grid_mask is not None:
        before, after = float((grid_mask * p_orig).sum()), float((grid_mask * p_new).sum())
        metrics.update({"p_obj_original": before, "p_obj_transformed": after, "d_p_obj": after - before})
    io.dump_json(out / "metrics.json", metrics)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def run_analyze(cfg: dict, out: Path) -> int:
    stimuli = read_stimuli(cfg["stimuli"])
    base = Path(cfg["stimuli"]).parent
    mask_dir = Path(cfg["masks"]) if cfg.get("masks") else base
    masks = {}
    for s in stimuli:
        if s.target_mask is not None and s.target_mask not in masks:
            path = mask_dir / s.target_mask
            if not path.exists():
                raise UsageError(f"stimulus {s.id}: mask file {path} is missing")
            masks[s.target_mask] = io.load_mask(path)
    extents = {s.id: (s.height, s.width) for s in stimuli}
    records = subset(read_fixations(cfg["fixations"], extents), cfg["subset"])
    fit_cfg = DensityFitConfig(grid_divisor=cfg.get("grid_divisor", 1))
    fits = fit_all(stimuli, records, fit_cfg)
    model_densities = None
    if cfg.get("model"):
        model = load_saliency(cfg["model"])
        model_densities = {}
        with no_grad():
            for s in stimuli:
                if s.image is None:
                    raise UsageError(f"stimulus {s.id}: model predictions need an image path")
                image = _load_image(str(base / s.image))
                model_densities[s.id] = model.predict_density(Tensor(image[None])).data[0, 0]
    rows, aggregate = analysis_report(stimuli, records, masks, fit_cfg, model_densities, fits)
    io.write_csv(out / "report.csv", REPORT_HEADER, rows + [aggregate])
    (out / "densities").mkdir(exist_ok=True)
    for s in stimuli:
        io.write_gzt(out / "densities" / f"{s.id}.gzt", fits[s.id].density)
    print(f"{len(records)} fixations, {len(rows)} stimuli; report in {out / 'report.csv'}")
    return 0


COMMANDS: dict[str, Callable[[dict, Path], int]] = {
    "gradcheck": run_gradcheck,
    "make-dataset": run_make_dataset,
    "pretrain": run_pretrain,
    "train": run_train,
    "evaluate": run_evaluate,
    "ablate": run_ablate,
    "transform": run_transform,
    "analyze": run_analyze,
}

_CONFIG_PATH_KEYS = {"pretrain": ("dataset",), "train": ("dataset", "saliency"), "ablate": ("dataset", "saliency"),
                     "evaluate": ("dataset", "run")}


def execute(command: str, cfg: dict, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    status = COMMANDS[command](cfg, out)
    write_manifest(out, command, cfg, time.perf_counter() - start)
    return status


def replay(manifest_path, out: Path) -> int:
    """Re-run a recorded command into ``out`` and compare every artifact's bytes."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise UsageError(f"{manifest_path}: no such manifest")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT or manifest.get("command") not in COMMANDS:
        raise UsageError(f"{manifest_path}: not a replayable run manifest")
    execute(manifest["command"], manifest["config"], out)
    fresh = artifact_hashes(out)
    recorded = manifest["artifacts"]
    differing = sorted(k for k in set(recorded) | set(fresh) if recorded.get(k) != fresh.get(k))
    if differing:
        for name in differing:
            print(f"DIFFERS  {name}")
        return 2
    print(f"replay identical: {len(fresh)} artifacts")
    return 0


# ----------------------------------------------------------------- parser

def _ops_list(text: str):
    if text == "all":
        return "all"
    names = [t.strip() for t in text.split(",") if t.strip()]
    unknown = [n for n in names if n not in OP_NAMES]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown op(s) {', '.join(unknown)}; choose from {', '.join(OP_NAMES)}")
    return names


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gazeforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gazeforge {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable op")
    p.add_argument("--ops", type=_ops_list, default="all", help="'all' or a comma-separated list")
    p.add_argument("--size", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("make-dataset", help="synthetic images with exact object masks")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--objects-per-image", type=int, default=2)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    for name, text in (("pretrain", "fit the saliency readout"), ("train", "train the generator"),
                       ("evaluate", "per-term losses on held-out images"), ("ablate", "zeroed-weight variants")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)

    p = sub.add_parser("transform", help="apply a trained generator to one image")
    p.add_argument("--checkpoint", required=True, help="directory written by 'train'")
    p.add_argument("--image", required=True)
    p.add_argument("--target-spec", required=True, help="JSON object or @file")
    p.add_argument("--mask")
    p.add_argument("--out", required=True)

    p = sub.add_parser("analyze", help="fixation densities and object/entropy metrics")
    p.add_argument("--fixations", required=True)
    p.add_argument("--stimuli", required=True)
    p.add_argument("--masks")
    p.add_argument("--subset", choices=SUBSETS, default="all")
    p.add_argument("--grid-divisor", type=int, default=1)
    p.add_argument("--model", help="saliency checkpoint directory for model predictions")
    p.add_argument("--out", required=True)

    p = sub.add_parser("replay", help="re-run a command from its run manifest and compare outputs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    return parser


def _command_config(args: argparse.Namespace) -> dict:
    if args.command == "gradcheck":
        return {"ops": args.ops, "size": args.size, "seed": args.seed, "tolerance": args.tolerance}
    if args.command == "make-dataset":
        if args.size % 16:
            raise UsageError(f"--size {args.size} must be divisible by 16")
        return {"n": args.n, "size": args.size, "objects_per_image": args.objects_per_image,
                "test_fraction": args.test_fraction, "seed": args.seed}
    if args.command in _CONFIG_PATH_KEYS:
        path = Path(args.config)
        model = {"pretrain": config.PretrainConfig, "train": config.TrainConfig,
                 "evaluate": config.EvaluateConfig, "ablate": config.AblateConfig}[args.command]
        parsed = config.load(model, path)
        data = parsed.model_dump(mode="json")
        for key in _CONFIG_PATH_KEYS[args.command]:
            data[key] = _abs(data[key], path.parent)
        return data
    if args.command == "transform":
        return {"checkpoint": _abs(args.checkpoint), "image": _abs(args.image),
                "target_spec": args.target_spec if not args.target_spec.startswith("@")
                else Path(args.target_spec[1:]).read_text(),
                "mask": _abs(args.mask) if args.mask else None}
    if args.command == "analyze":
        return {"fixations": _abs(args.fixations), "stimuli": _abs(args.stimuli),
                "masks": _abs(args.masks) if args.masks else None, "subset": args.subset,
                "grid_divisor": args.grid_divisor, "model": _abs(args.model) if args.model else None}
    raise UsageError(f"unknown command {args.command}")


def main(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"gazeforge: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=io.env_threads()):
            out = Path(args.out)
            if args.command == "replay":
                return replay(args.manifest, out)
            return execute(args.command, _command_config(args), out)
    except (UsageError, ShapeError, io.FormatError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"gazeforge: error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDivergence, FloatingPointError, RuntimeError) as exc:
        print(f"gazeforge: numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
