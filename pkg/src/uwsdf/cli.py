"""Command-line surface: synth, train, mesh, eval, render, segment.

Exit codes: 0 success, 2 usage or file errors, 1 numeric failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import assets, metrics, segmentation, synth, training
from .errors import (
    EmptySurfaceError,
    MissError,
    NumericError,
    UwsdfError,
    ValidationError,
)
from .field import (
    BoxField,
    SphereField,
    TorusField,
    load_checkpoint,
)
from .meshing import marching_cubes
from .renderer import render_image


def _triple(text: str) -> tuple:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="uwsdf",
        description="Neural SDF surface reconstruction toolkit for multi-view "
        "images with geometric priors.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic oracle dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--shape", choices=("sphere", "box", "torus"), default="sphere")
    sp.add_argument("--object-radius", type=float, default=0.5)
    sp.add_argument("--views", type=int, default=20)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--radius", type=float, default=3.0, help="camera ring radius")
    sp.add_argument("--elevation", type=float, default=20.0)
    sp.add_argument("--fov", type=float, default=32.0)
    sp.add_argument("--albedo", type=_triple, default=(0.8, 0.7, 0.6))
    sp.add_argument("--tint", type=_triple, default=(0.0, 0.0, 0.0))
    sp.add_argument("--haze", type=_triple, default=(0.12, 0.35, 0.45))
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)

    tp = sub.add_parser("train", help="optimize the field on a dataset")
    tp.add_argument("--dataset", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--config", default=None)
    tp.add_argument("--iters", type=int, default=None)
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--enhancer", default=None)
    tp.add_argument("--resume", action="store_true")

    mp = sub.add_parser("mesh", help="extract a mesh from a checkpoint")
    mp.add_argument("--checkpoint", required=True)
    mp.add_argument("--out", required=True)
    mp.add_argument("--res", type=int, default=64)
    mp.add_argument("--bound", type=float, default=1.0)

    ep = sub.add_parser("eval", help="accuracy/completeness between meshes")
    ep.add_argument("recon")
    ep.add_argument("gt")
    ep.add_argument("report")
    ep.add_argument("--samples", type=int, default=100000)
    ep.add_argument("--seed", type=int, default=0)
    ep.add_argument("--cap", type=float, default=None)

    rp = sub.add_parser("render", help="render maps from a checkpoint")
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--poses", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--samples", type=int, default=128)
    rp.add_argument("--seed", type=int, default=0)

    gp = sub.add_parser("segment", help="emit point prompts and cleaned masks")
    gp.add_argument("--ref-image", required=True)
    gp.add_argument("--ref-mask", required=True)
    gp.add_argument("--targets", nargs="+", required=True)
    gp.add_argument("--mode", choices=("toy", "tensor"), default="toy")
    gp.add_argument("--features-dir", default=None,
                    help="directory of <stem>.uwtf feature tensors (tensor mode)")
    gp.add_argument("--rough-masks", default=None,
                    help="directory of <stem>.pgm rough masks to optimize")
    gp.add_argument("--min-component", type=int, default=16)
    gp.add_argument("--out", required=True)
    return p


def _resolve_checkpoint(path_text: str) -> Path:
    path = Path(path_text)
    if (path / "manifest.json").is_file():
        return path
    latest = training.find_latest_checkpoint(path)
    if latest is None:
        raise ValidationError(f"no checkpoint found under {path_text}")
    return latest


def cmd_synth(args) -> int:
    common = {"albedo": args.albedo}
    if args.shape == "sphere":
        field = SphereField(radius=args.object_radius, **common)
    elif args.shape == "box":
        field = BoxField(**common)
    else:
        field = TorusField(**common)
    spec = synth.SynthSceneSpec(
        field=field,
        num_views=args.views,
        ring_radius=args.radius,
        elevation_deg=args.elevation,
        image_size=args.size,
        fov_deg=args.fov,
        tint_attenuation=args.tint,
        haze_color=args.haze,
        prior_noise_std=args.noise,
        seed=args.seed,
    )
    out = synth.generate_dataset(spec, args.out)
    print(f"wrote {spec.num_views} views to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = assets.load_config(args.config) if args.config else assets.PipelineConfig()
    overrides = {"dataset_dir": args.dataset, "out_dir": args.out}
    if args.iters is not None:
        overrides["iterations"] = args.iters
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.enhancer is not None:
        overrides["enhancer"] = args.enhancer
    cfg = dataclasses.replace(cfg, **overrides)
    ds = training.load_dataset(cfg.dataset_dir, cfg)
    _, log = training.train(ds, cfg, resume=args.resume)
    if log:
        print(f"finished at iteration {log[-1]['iteration']} total {log[-1]['total']:.4f}")
    else:
        print("finished with no iterations")
    return 0


def cmd_mesh(args) -> int:
    model, iteration, _ = load_checkpoint(_resolve_checkpoint(args.checkpoint))
    for name, param in model.named_parameters():
        if not torch.isfinite(param).all():
            raise NumericError(f"checkpoint parameter {name!r} is non-finite")
    b = args.bound
    mesh = marching_cubes(model.sdf, (np.full(3, -b), np.full(3, b)), args.res)
    assets.write_mesh_obj(mesh, args.out)
    print(
        f"iteration {iteration}: {len(mesh.vertices)} vertices, "
        f"{len(mesh.faces)} faces -> {args.out}"
    )
    return 0


def cmd_eval(args) -> int:
    recon = assets.read_mesh_obj(args.recon)
    gt = assets.read_mesh_obj(args.gt)
    report = metrics.evaluate_meshes(recon, gt, args.samples, args.seed, cap=args.cap)
    metrics.write_metrics_report(report, args.report)
    print(f"acc {report['acc']:.6f} comp {report['comp']:.6f} -> {args.report}")
    return 0


def cmd_render(args) -> int:
    model, _, _ = load_checkpoint(_resolve_checkpoint(args.checkpoint))
    cams = assets.read_pose_file(args.poses)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = assets.PipelineConfig(eval_samples_per_ray=args.samples)
    rng = np.random.default_rng(args.seed)
    for i, cam in enumerate(cams):
        color, depth, normal, opacity = render_image(
            model.sdf, model.radiance, cam, cfg, model.beta, rng
        )
        assets.write_image(
            assets.ImageBuffer(np.clip(color, 0, 1).astype(np.float32)),
            out / f"view_{i:03d}_color.ppm",
        )
        assets.write_tensor(depth.astype(np.float32), out / f"view_{i:03d}_depth.uwtf")
        encoded = np.clip((normal + 1.0) / 2.0, 0, 1).astype(np.float32)
        assets.write_image(assets.ImageBuffer(encoded), out / f"view_{i:03d}_normal.ppm")
        assets.write_image(
            assets.ImageBuffer(np.clip(opacity, 0, 1).astype(np.float32)[..., None]),
            out / f"view_{i:03d}_opacity.pgm",
        )
    print(f"rendered {len(cams)} views to {out}")
    return 0


def _segment_features(path: Path, mode: str, features_dir) -> segmentation.FeatureMap:
    if mode == "toy":
        return segmentation.extract_features_toy(assets.read_image(path))
    if features_dir is None:
        raise ValidationError("tensor mode needs --features-dir")
    tensor = assets.read_tensor(Path(features_dir) / f"{path.stem}.uwtf")
    return segmentation.normalize_features(tensor)


def cmd_segment(args) -> int:
    ref_image = Path(args.ref_image)
    ref_features = _segment_features(ref_image, args.mode, args.features_dir)
    ref_mask = assets.read_image(args.ref_mask).pixels[..., 0] > 0.5
    local = segmentation.crop_foreground_features(ref_features, ref_mask)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for target in args.targets:
        target = Path(target)
        feats = _segment_features(target, args.mode, args.features_dir)
        confidence = segmentation.aggregate_confidence_chunked(feats, local)
        prompts = segmentation.select_prompts(confidence)
        segmentation.emit_prompt_file(prompts, target.stem, out / f"{target.stem}.prompts.json")
        if args.rough_masks is not None:
            rough_path = Path(args.rough_masks) / f"{target.stem}.pgm"
            if rough_path.is_file():
                rough = assets.read_image(rough_path).pixels[..., 0] > 0.5
                cleaned = segmentation.optimize_mask(rough, args.min_component)
                assets.write_image(
                    assets.ImageBuffer(cleaned.astype(np.float32)[..., None]),
                    out / f"{target.stem}.mask.pgm",
                )
    print(f"processed {len(args.targets)} target views -> {out}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "mesh": cmd_mesh,
    "eval": cmd_eval,
    "render": cmd_render,
    "segment": cmd_segment,
}


def main(argv=None) -> int:
    threads = os.environ.get("UWSDF_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (NumericError, EmptySurfaceError, MissError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 1
    except UwsdfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
