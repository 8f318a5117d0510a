"""``dyncoef`` command line: make-scene, train, render, eval, sweep-np."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import OUT_ENV, VARIANT_LETTERS, ConfigError, RunConfig, dump_config, load_config
from .dataset import DatasetError, SceneDataset, atomic_write_text, load_dataset, read_image, save_dataset, write_image
from .field import OutOfBoundsError
from .gradtensor import ContractError, DimensionError, DomainError
from .metrics import psnr, ssim
from .model import RadianceField
from .render import Camera
from .synthetic import generate_scene
from .train import TrainingDiverged, evaluate, train

logger = logging.getLogger("dyncoef")

# errors named in module contracts map to exit status 2
HANDLED = (ConfigError, DatasetError, CheckpointError, ContractError, DimensionError, DomainError,
           OutOfBoundsError, TrainingDiverged, FileNotFoundError, ValueError)


# ---------------------------------------------------------------------------
# helpers


def resolve_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None), getattr(args, "preset", None))
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "variant", None) is not None:
        overrides["variant"] = args.variant
    if getattr(args, "dataset", None) is not None:
        overrides["dataset"] = str(args.dataset)
    if overrides:
        cfg = RunConfig.from_dict(overrides, base=cfg)
    tc = cfg.train
    if getattr(args, "iters", None) is not None:
        tc = replace(tc, iterations=args.iters)
    if getattr(args, "lr", None) is not None:
        # --lr sets the grid rate; the network rate keeps its ratio to it
        ratio = tc.lr_network / tc.lr_init if tc.lr_init > 0 else 1.0
        tc = replace(tc, lr_init=args.lr, lr_network=args.lr * ratio)
    if getattr(args, "threads", None) is not None:
        tc = replace(tc, threads=args.threads)
    if getattr(args, "deterministic", None) is not None:
        tc = replace(tc, deterministic=args.deterministic)
    cfg.train = replace(tc, seed=cfg.seed)
    cfg.out = str(output_dir(args, cfg))
    return cfg


def output_dir(args, cfg: RunConfig | None = None) -> Path:
    """``--out`` wins, then the ``DYNCOEF_OUT`` environment variable, then the config."""
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    if cfg is not None:
        return Path(cfg.out)
    raise ConfigError(f"no output directory: pass --out or set {OUT_ENV}")


def datasets_for(cfg: RunConfig) -> tuple[SceneDataset, SceneDataset | None]:
    if cfg.dataset:
        root = Path(cfg.dataset)
        near, far = cfg.field.near, cfg.field.far
        train_ds = load_dataset(root, "train", near, far)
        test_ds = load_dataset(root, "test", near, far) if (root / "transforms_test.json").exists() else None
        return train_ds, test_ds
    sc = cfg.scene
    return (generate_scene(sc.spec, sc.n_train, sc.resolution, "train"),
            generate_scene(sc.spec, sc.n_test, sc.resolution, "test"))


def build_model(cfg: RunConfig, num_illuminations: int) -> RadianceField:
    fc = cfg.field
    if num_illuminations > fc.appearance.n_illuminations:
        fc = replace(fc, appearance=replace(fc.appearance, n_illuminations=num_illuminations))
        cfg.field = fc
    return RadianceField(fc, seed=cfg.seed)


def run_training(cfg: RunConfig, out: Path | None = None) -> dict:
    """Train per ``cfg``; with ``out`` also write checkpoints, log and summary there."""
    train_ds, test_ds = datasets_for(cfg)
    model = build_model(cfg, train_ds.num_illuminations)
    summary = {"variant": cfg.variant, "seed": cfg.seed, "n_basis": cfg.field.appearance.n_basis,
               "iterations": cfg.train.iterations}
    if test_ds is not None:
        summary["initial_psnr"] = evaluate(model, test_ds, with_ssim=False)["psnr"]
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "config.yaml", dump_config(cfg))
        save_checkpoint(model, out / "checkpoint_init.ckpt")
        log_path = out / "metrics.jsonl"
    result = train(model, train_ds, cfg.train, log_path=log_path)
    summary["seconds"] = result.seconds
    if test_ds is not None:
        ev = evaluate(model, test_ds)
        summary.update(psnr=ev["psnr"], ssim=ev["ssim"], frames=ev["frames"])
    if out is not None:
        save_checkpoint(model, out / "checkpoint.ckpt", result.optimizer, extra={"summary": _brief(summary)})
        atomic_write_text(out / "summary.json", json.dumps(summary, indent=2))
    summary["model"] = model
    summary["log"] = result.log
    return summary


def _brief(summary: dict) -> dict:
    return {k: v for k, v in summary.items() if k not in ("frames", "model", "log")}


def cameras_from_file(path, near, far) -> list[Camera]:
    """Transforms-style JSON with extra ``width`` and ``height`` keys."""
    meta = json.loads(Path(path).read_text())
    try:
        w, h, angle = int(meta["width"]), int(meta["height"]), float(meta["camera_angle_x"])
        return [Camera.from_fov(w, h, angle, np.asarray(f["transform_matrix"], float), near, far)
                for f in meta["frames"]]
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"{path}: camera file needs width, height, camera_angle_x and frames ({exc})") from None


# ---------------------------------------------------------------------------
# commands


def cmd_make_scene(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    sc = cfg.scene
    for split, n in (("train", sc.n_train), ("test", sc.n_test)):
        save_dataset(generate_scene(sc.spec, n, sc.resolution, split), out)
    atomic_write_text(out / "scene.json", json.dumps(sc.to_dict(), indent=2))
    print(json.dumps({"out": str(out), "train": sc.n_train, "test": sc.n_test}))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    summary = run_training(cfg, Path(cfg.out))
    print(json.dumps(_brief(summary)))
    return 0


def cmd_render(args) -> int:
    model = load_checkpoint(args.checkpoint)
    out = output_dir(args)
    if args.camera:
        cams = cameras_from_file(args.camera, model.config.near, model.config.far)
        illum = [args.illumination] * len(cams)
    else:
        if not args.dataset:
            raise ConfigError("render needs --dataset or --camera")
        ds = load_dataset(args.dataset, args.split, model.config.near, model.config.far)
        cams = [f.camera for f in ds.frames]
        illum = [f.illumination for f in ds.frames]
    for i, (cam, il) in enumerate(zip(cams, illum)):
        write_image(out / f"render_{i:03d}.png", model.render_image(cam, il if model.appearance.codes.active else None))
    print(json.dumps({"out": str(out), "rendered": len(cams)}))
    return 0


def cmd_eval(args) -> int:
    if args.checkpoint is None and args.predictions is None:
        raise ConfigError("eval needs --checkpoint or --predictions")
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        ds = load_dataset(args.dataset, args.split, model.config.near, model.config.far)
        preds = [model.render_image(f.camera, f.illumination if model.appearance.codes.active else None)
                 for f in ds.frames]
    else:
        ds = load_dataset(args.dataset, args.split)
        files = sorted(Path(args.predictions).glob("*.png"))
        if len(files) != len(ds):
            raise DatasetError(f"{args.predictions} has {len(files)} PNGs, the split has {len(ds)} frames")
        preds = [read_image(p) for p in files]
    rows = []
    for i, (pred, frame) in enumerate(zip(preds, ds.frames)):
        row = {"frame": i, "illumination": frame.illumination, "psnr": psnr(pred, frame.image),
               "ssim": ssim(pred, frame.image)}
        rows.append(row)
        print(json.dumps(row))
    print(json.dumps({"mean_psnr": float(np.mean([r["psnr"] for r in rows])),
                      "mean_ssim": float(np.mean([r["ssim"] for r in rows])), "frames": len(rows)}))
    return 0


def cmd_sweep_np(args) -> int:
    base = resolve_config(args)
    out = Path(base.out)
    rows = []
    for n in args.values:
        cfg = RunConfig.from_dict({"field": {"appearance": {"n_basis": n}}}, base=base)
        cfg.train = base.train
        summary = run_training(cfg, out / f"np_{n}")
        row = {"n_basis": n, "seed": cfg.seed, "psnr": summary["psnr"], "ssim": summary["ssim"]}
        rows.append(row)
    atomic_write_text(out / "sweep.jsonl", "".join(json.dumps(r) + "\n" for r in rows))
    print("n_basis\tseed\tpsnr\tssim")
    for r in rows:
        print(f"{r['n_basis']}\t{r['seed']}\t{r['psnr']:.3f}\t{r['ssim']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _run_flags(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--config", type=Path, help="YAML run config")
    p.add_argument("--preset", choices=["default", "toy", "smoke"], help="base values before --config")
    p.add_argument("--out", type=Path, help=f"output directory (else ${OUT_ENV}, else config 'out')")
    p.add_argument("--seed", type=int)
    if not training:
        return
    p.add_argument("--dataset", type=Path, help="dataset root; default renders the config's synthetic scene")
    p.add_argument("--variant", choices=sorted(VARIANT_LETTERS),
                   help="full, or ablation a=no_decomposition b=linear_blend c=concat_conditioning d=raw_features")
    p.add_argument("--threads", type=int)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="fixed-order gradient reduction across worker shards")
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float, help="grid learning rate; the network rate is scaled alongside")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dyncoef", description="Radiance fields with view-dependent coefficient decomposition.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-scene", parents=[common], help="write a synthetic dataset (transforms json + PNGs)")
    _run_flags(p, training=False)
    p.set_defaults(func=cmd_make_scene)

    p = sub.add_parser("train", parents=[common], help="train a model; writes checkpoints and a metrics log")
    _run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", parents=[common], help="render a checkpoint to PNGs")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--split", default="test")
    p.add_argument("--camera", type=Path, help="transforms-style JSON with width and height")
    p.add_argument("--illumination", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of a checkpoint (or rendered PNGs) against a split")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--predictions", type=Path, help="directory of PNGs in frame order")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-np", parents=[common], help="train one model per basis count and compare")
    _run_flags(p)
    p.add_argument("--values", type=int, nargs="+", default=[4, 16])
    p.set_defaults(func=cmd_sweep_np)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except HANDLED as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
