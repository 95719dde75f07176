"""Command line entry point: synth, ingest, train, render, eval, gradstats.

Exit status: 0 on success, 1 on usage errors, 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .geometry import Camera, Intrinsics, Pose


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def cameras_to_json(names, cameras) -> dict:
    return {"cameras": [{"name": n,
                         "intrinsics": {"fx": c.intrinsics.fx, "fy": c.intrinsics.fy,
                                        "cx": c.intrinsics.cx, "cy": c.intrinsics.cy,
                                        "width": c.width, "height": c.height},
                         "rotation": list(c.pose.rotation), "translation": list(c.pose.translation)}
                        for n, c in zip(names, cameras)]}


def cameras_from_json(d: dict) -> tuple[list[str], list[Camera]]:
    names, cams = [], []
    for k, c in enumerate(d["cameras"]):
        i = c["intrinsics"]
        names.append(c.get("name", f"view_{k:03d}"))
        cams.append(Camera(Intrinsics(float(i["fx"]), float(i["fy"]), float(i["cx"]), float(i["cy"]),
                                      int(i["width"]), int(i["height"])),
                           Pose(tuple(c["rotation"]), tuple(c["translation"]))))
    return names, cams


def cmd_synth(args):
    from .ingest.dataset import write_synthetic_dataset

    ds = write_synthetic_dataset(args.scene, args.out)
    Path(args.out, "cameras.json").write_text(json.dumps(cameras_to_json(ds.names, ds.cameras), indent=2))
    print(f"wrote {len(ds)} views to {args.out}")


def cmd_ingest(args):
    from .ingest.dataset import ingest

    ds = ingest(args.colmap, args.images, args.priors, args.out)
    Path(args.out, "cameras.json").write_text(json.dumps(cameras_to_json(ds.names, ds.cameras), indent=2))
    print(f"ingested {len(ds)} images, {len(ds.points)} sparse points")


def _oracle(ds):
    if ds.scene is None:
        return None
    from .ingest.synthetic import SyntheticScene

    return SyntheticScene.from_dict(ds.scene).sdf


def cmd_train(args):
    from .ingest.dataset import load_dataset
    from .trainer import TrainConfig, train

    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    ds = load_dataset(args.data)
    res = train(ds, cfg, args.out, oracle_sdf=_oracle(ds), resume=args.resume)
    print(f"trained to iteration {res.iteration}; final L_total {res.losses[-1][7]:.6g}"
          if res.losses else "no iterations run")


def _render_views(field_, cameras, n_samples):
    from .renderer import render_image

    return [render_image(c, field_, field_.bounds, n_samples) for c in cameras]


def _samples(cfg, args):
    if getattr(args, "samples", None):
        return args.samples
    return cfg.samples_per_ray if cfg is not None else 64


def cmd_render(args):
    from .ingest.pfm import save_pfm, save_png
    from .trainer import load_checkpoint

    field_, cfg, _ = load_checkpoint(args.ckpt)
    names, cams = cameras_from_json(json.loads(Path(args.cameras).read_text()))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, img in zip(names, _render_views(field_, cams, _samples(cfg, args))):
        stem = Path(name).stem
        save_png(out / f"{stem}.png", img["color"])
        save_pfm(out / f"{stem}_depth.pfm", img["depth"])
        save_pfm(out / f"{stem}_normal.pfm", img["normal"])
    print(f"rendered {len(cams)} views to {out}")


def cmd_eval(args):
    from .ingest.dataset import load_dataset
    from .ingest.pfm import load_pfm, load_png
    from .metrics import evaluate_images

    ds = load_dataset(args.data)
    idx = ds.view_index(args.views)
    if not idx:
        raise ValueError(f"view selection {args.views!r} is empty")
    names = [ds.names[i] for i in idx]
    config = None
    if args.ckpt:
        from .trainer import load_checkpoint

        field_, cfg, _ = load_checkpoint(args.ckpt)
        config = cfg.to_dict() if cfg is not None else None
        imgs = _render_views(field_, [ds.cameras[i] for i in idx], _samples(cfg, args))
        preds = [np.round(np.clip(im["color"], 0, 1) * 255) / 255 for im in imgs]
        pdepth = [im["depth"] for im in imgs]
    else:
        rd = Path(args.renders)
        preds = [load_png(rd / f"{Path(n).stem}.png") for n in names]
        pdepth = [load_pfm(rd / f"{Path(n).stem}_depth.pfm").astype(np.float64) for n in names]
    gts = [ds.images[i] for i in idx]
    if ds.gt is not None:
        gdepth = [ds.gt[i].depth for i in idx]
        masks = [ds.gt[i].mask for i in idx]
    else:
        gdepth = masks = None
    rep = evaluate_images(names, preds, gts, pdepth, gdepth, masks, config)
    if ds.gt is None:
        rep.notes.append("no ground-truth depth; depth_rmse not computed")
    rep.save(args.report)
    m = rep.mean
    print(f"mean PSNR {m.psnr:.3f} dB, SSIM {m.ssim:.4f}, depth RMSE {m.depth_rmse:.4f}")


def cmd_gradstats(args):
    from .ingest.synthetic import SyntheticScene
    from .trainer import GRAD_COLUMNS, load_checkpoint, log_gradient_stats

    field_, cfg, it = load_checkpoint(args.ckpt)
    scene = SyntheticScene.load(args.scene)
    near = cfg.near_band if cfg else 0.02
    far = cfg.far_band if cfg else (0.18, 0.20)
    g = log_gradient_stats(field_, scene.sdf, field_.bounds, args.points, args.seed, near, far, it)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(GRAD_COLUMNS)
        w.writerow(g.row())
    print(f"near mean {g.near_mean:.4f} std {g.near_std:.4f}; far mean {g.far_mean:.4f} std {g.far_std:.4f}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gridsdf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="render an analytic scene into a dataset directory")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="build a dataset from COLMAP text, images and prior maps")
    s.add_argument("--colmap", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--priors", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="optimize a field; writes losses.csv and checkpoint.bin")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render color/depth/normal images for a camera list")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--samples", type=int)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="PSNR/SSIM/depth RMSE report for a checkpoint or rendered images")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--renders")
    s.add_argument("--data", required=True)
    s.add_argument("--views", default="test", choices=["test", "train", "all"])
    s.add_argument("--report", required=True)
    s.add_argument("--samples", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradstats", help="near/far gradient-norm statistics against the analytic SDF")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--points", type=int, default=4096)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradstats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        args.func(args)
    except Exception as e:  # every module error surfaces as a runtime failure
        print(f"gridsdf {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
