"""SceneDataset: posed images, prior maps and sparse depths, plus its on-disk layout.

Layout of a dataset directory::

    dataset.json            names, train/test split, bounds, optional scene file
    colmap/                 cameras.txt, images.txt, points3D.txt
    images/<name>.png       8-bit RGB
    priors/<stem>_depth.pfm, <stem>_normal.pfm, <stem>_mask.png
    gt/<stem>_depth.pfm, <stem>_mask.png      (synthetic only; ray distance)
"""
from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import Camera, SceneBounds
from ..losses import ScaleShift, solve_scale_shift
from .colmap import ColmapImage, ColmapModel, SparsePointCloud, read_colmap, write_colmap
from .pfm import load_pfm, load_png, save_pfm, save_png
from .synthetic import (PriorMaps, SyntheticScene, degrade_priors, project_sparse_depths,
                        sample_sparse_points, synth_render)

FORMAT_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class GroundTruth:
    depth: np.ndarray   # (H, W) ray distance
    mask: np.ndarray    # (H, W) bool


@dataclass
class SceneDataset:
    names: list[str]
    cameras: list[Camera]
    images: list[np.ndarray]
    priors: list[PriorMaps]
    sparse: list[np.ndarray]            # per image (K, 3): row, col, z-depth
    bounds: SceneBounds
    points: SparsePointCloud = field(default_factory=SparsePointCloud)
    train: list[int] = field(default_factory=list)
    test: list[int] = field(default_factory=list)
    gt: list[GroundTruth] | None = None
    scene: dict | None = None           # synthetic scene description, if any

    def __post_init__(self):
        n = len(self.cameras)
        lens = {len(self.names), len(self.images), len(self.priors), len(self.sparse)}
        if lens != {n} or (self.gt is not None and len(self.gt) != n):
            raise DatasetError("per-image list lengths disagree")
        for i, (cam, img, sp) in enumerate(zip(self.cameras, self.images, self.sparse)):
            if img.shape != (cam.height, cam.width, 3):
                raise DatasetError(f"image {self.names[i]} has shape {img.shape}, "
                                   f"camera expects {(cam.height, cam.width, 3)}")
            if self.priors[i].depth.shape != (cam.height, cam.width):
                raise DatasetError(f"prior maps of {self.names[i]} do not match the image size")
            if len(sp) and (sp[:, 0].min() < 0 or sp[:, 0].max() > cam.height - 1
                            or sp[:, 1].min() < 0 or sp[:, 1].max() > cam.width - 1):
                raise DatasetError(f"sparse depth sample outside image {self.names[i]}")
        if len(self.points) and not np.all(self.bounds.contains(self.points.xyz)):
            raise DatasetError("scene bounds do not contain all sparse points")
        for i in self.train + self.test:
            if not 0 <= i < n:
                raise DatasetError(f"view index {i} out of range")

    def __len__(self) -> int:
        return len(self.cameras)

    def scale_shift(self, i: int) -> ScaleShift | None:
        """Least-squares alignment of prior depth to the projected sparse depths of image i."""
        sp = self.sparse[i]
        if len(sp) == 0:
            return None
        r, c = sp[:, 0].astype(int), sp[:, 1].astype(int)
        pri = self.priors[i]
        ok = pri.mask[r, c]
        return solve_scale_shift(pri.depth[r[ok], c[ok]], sp[ok, 2])

    def view_index(self, names_or_split) -> list[int]:
        if names_or_split == "test":
            return list(self.test)
        if names_or_split == "train":
            return list(self.train)
        if names_or_split == "all":
            return list(range(len(self)))
        raise DatasetError(f"unknown view selection {names_or_split!r}")


def _stem(name: str) -> str:
    return Path(name).stem


def save_dataset(ds: SceneDataset, out, model: ColmapModel | None = None) -> None:
    out = Path(out)
    for sub in ("images", "priors", "colmap"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    if model is None:
        intr = {1: ds.cameras[0].intrinsics}
        images = [ColmapImage(i + 1, n, 1, cam) for i, (n, cam) in enumerate(zip(ds.names, ds.cameras))]
        model = ColmapModel(intr, images, ds.points)
    write_colmap(model, out / "colmap")
    for name, img, pri in zip(ds.names, ds.images, ds.priors):
        s = _stem(name)
        save_png(out / "images" / f"{s}.png", img)
        save_pfm(out / "priors" / f"{s}_depth.pfm", pri.depth)
        save_pfm(out / "priors" / f"{s}_normal.pfm", pri.normal)
        save_png(out / "priors" / f"{s}_mask.png", pri.mask.astype(np.float64))
    if ds.gt is not None:
        (out / "gt").mkdir(exist_ok=True)
        for name, g in zip(ds.names, ds.gt):
            save_pfm(out / "gt" / f"{_stem(name)}_depth.pfm", g.depth)
            save_png(out / "gt" / f"{_stem(name)}_mask.png", g.mask.astype(np.float64))
    meta = {"version": FORMAT_VERSION, "names": ds.names, "train": ds.train, "test": ds.test,
            "bounds": {"lo": list(ds.bounds.lo), "hi": list(ds.bounds.hi)},
            "has_gt": ds.gt is not None, "scene": ds.scene}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2))


def load_dataset(directory) -> SceneDataset:
    d = Path(directory)
    try:
        meta = json.loads((d / "dataset.json").read_text())
    except FileNotFoundError:
        raise DatasetError(f"{d} has no dataset.json") from None
    if meta.get("version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset version {meta.get('version')!r}")
    model = read_colmap(d / "colmap")
    by_name = {im.name: im for im in model.images}
    cameras, images, priors, gt = [], [], [], []
    for name in meta["names"]:
        if name not in by_name:
            raise DatasetError(f"image {name} missing from the COLMAP model")
        cameras.append(by_name[name].camera)
        s = _stem(name)
        images.append(load_png(d / "images" / f"{s}.png"))
        mask = load_png(d / "priors" / f"{s}_mask.png") > 0.5
        priors.append(PriorMaps(load_pfm(d / "priors" / f"{s}_depth.pfm").astype(np.float64),
                                _unit(load_pfm(d / "priors" / f"{s}_normal.pfm")), mask))
        if meta.get("has_gt"):
            gt.append(GroundTruth(load_pfm(d / "gt" / f"{s}_depth.pfm").astype(np.float64),
                                  load_png(d / "gt" / f"{s}_mask.png") > 0.5))
    ids = [by_name[n].id for n in meta["names"]]
    sparse = project_sparse_depths(model.points, cameras, ids)
    b = meta["bounds"]
    return SceneDataset(list(meta["names"]), cameras, images, priors, sparse,
                        SceneBounds(tuple(b["lo"]), tuple(b["hi"])), model.points,
                        list(meta["train"]), list(meta["test"]), gt if meta.get("has_gt") else None,
                        meta.get("scene"))


def _unit(n: np.ndarray) -> np.ndarray:
    # float32 storage loses a little norm; renormalize non-zero vectors
    n = n.astype(np.float64)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    return np.where(norm > 0, n / np.where(norm > 0, norm, 1.0), 0.0)


def synthetic_dataset(scene: SyntheticScene, scene_dict: dict | None = None) -> SceneDataset:
    """Render every view of an analytic scene into an in-memory dataset."""
    cams = scene.cameras()
    views = [synth_render(scene, c) for c in cams]
    cloud = sample_sparse_points([views[i] for i in scene.train], scene.sparse_points, scene.seed,
                                 image_ids=[i + 1 for i in scene.train])
    sparse = project_sparse_depths(cloud, cams, list(range(1, len(cams) + 1)))
    priors = [degrade_priors(v.zdepth, v.normal_cam, v.valid, scene.noise, scene.seed * 1000 + k)
              for k, v in enumerate(views)]
    names = [f"view_{k:03d}.png" for k in range(len(cams))]
    return SceneDataset(names, cams, [v.color for v in views], priors, sparse, scene.bounds, cloud,
                        list(scene.train), list(scene.test),
                        [GroundTruth(v.depth, v.valid) for v in views], scene_dict)


def write_synthetic_dataset(scene_path, out) -> SceneDataset:
    scene_dict = json.loads(Path(scene_path).read_text())
    ds = synthetic_dataset(SyntheticScene.from_dict(scene_dict), scene_dict)
    save_dataset(ds, out)
    return ds


def ingest(colmap_dir, images_dir, priors_dir, out=None, train=None, test=None) -> SceneDataset:
    """Build a dataset from a COLMAP text model, its images and per-image prior maps.

    Priors are looked up as ``<stem>_depth.pfm`` and ``<stem>_normal.pfm`` with an
    optional ``<stem>_mask.png``; without a mask, finite positive depths count as valid.
    """
    model = read_colmap(colmap_dir)
    if len(model.points) == 0:
        raise DatasetError("the COLMAP model has no 3D points; bounds cannot be derived")
    images_dir, priors_dir = Path(images_dir), Path(priors_dir)
    names, cams, imgs, priors = [], [], [], []
    for im in model.images:
        path = images_dir / im.name
        if not path.exists():
            raise DatasetError(f"image file {path} not found")
        img = load_png(path)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        s = _stem(im.name)
        depth = load_pfm(priors_dir / f"{s}_depth.pfm").astype(np.float64)
        normal = _unit(load_pfm(priors_dir / f"{s}_normal.pfm"))
        mpath = priors_dir / f"{s}_mask.png"
        mask = load_png(mpath) > 0.5 if mpath.exists() else np.isfinite(depth) & (depth > 0)
        mask &= np.isfinite(depth) & (depth > 0)
        depth = np.where(mask, depth, 0.0)
        names.append(im.name)
        cams.append(im.camera)
        imgs.append(img)
        priors.append(PriorMaps(depth, normal, mask))
    sparse = project_sparse_depths(model.points, cams, [im.id for im in model.images])
    bounds = SceneBounds.around(model.points.xyz, pad=0.1)
    n = len(cams)
    ds = SceneDataset(names, cams, imgs, priors, sparse, bounds, model.points,
                      list(range(n)) if train is None else list(train), [] if test is None else list(test))
    if out is not None:
        save_dataset(ds, out, model)
        # keep the original COLMAP files verbatim
        for f in ("cameras.txt", "images.txt", "points3D.txt"):
            shutil.copyfile(Path(colmap_dir) / f, Path(out) / "colmap" / f)
    return ds
