"""COLMAP sparse text model (cameras.txt, images.txt, points3D.txt) reader and writer.

COLMAP stores camera-from-world poses; records here carry world-from-camera
:class:`~gridsdf.geometry.Pose` objects, converted once on read and inverted
back on write.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import Camera, Intrinsics, Pose


class ColmapError(ValueError):
    pass


@dataclass
class SparsePoint:
    id: int
    xyz: np.ndarray
    error: float = 0.0
    track: list[tuple[int, int]] = field(default_factory=list)
    rgb: tuple[int, int, int] = (0, 0, 0)


@dataclass
class SparsePointCloud:
    points: list[SparsePoint] = field(default_factory=list)

    def __post_init__(self):
        ids = [p.id for p in self.points]
        if len(set(ids)) != len(ids):
            raise ColmapError("duplicate 3D point ids")
        for p in self.points:
            if not np.all(np.isfinite(p.xyz)):
                raise ColmapError(f"3D point {p.id} has a non-finite position")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return np.array([p.xyz for p in self.points]).reshape(-1, 3)


@dataclass
class ColmapImage:
    id: int
    name: str
    camera_id: int
    camera: Camera
    points2d: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))  # x, y, point3d id
    cam_from_world: Pose | None = None  # as stored in the file, kept for exact rewrites


@dataclass
class ColmapModel:
    intrinsics: dict[int, Intrinsics]
    images: list[ColmapImage]
    points: SparsePointCloud

    def image_by_id(self) -> dict[int, ColmapImage]:
        return {im.id: im for im in self.images}


def _content_lines(text: str):
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("#"):
            continue
        yield no, line


def _intrinsics(model: str, width: int, height: int, params: list[float], no: int) -> Intrinsics:
    if model == "PINHOLE":
        if len(params) != 4:
            raise ColmapError(f"line {no}: PINHOLE expects 4 parameters, got {len(params)}")
        fx, fy, cx, cy = params
    elif model == "SIMPLE_PINHOLE":
        if len(params) != 3:
            raise ColmapError(f"line {no}: SIMPLE_PINHOLE expects 3 parameters, got {len(params)}")
        fx, cx, cy = params
        fy = fx
    else:
        raise ColmapError(f"line {no}: unsupported camera model {model!r}")
    return Intrinsics(fx, fy, cx, cy, width, height)


def parse_cameras(text: str) -> dict[int, Intrinsics]:
    cams: dict[int, Intrinsics] = {}
    for no, line in _content_lines(text):
        if not line:
            continue
        elems = line.split()
        try:
            cam_id, model, width, height = int(elems[0]), elems[1], int(elems[2]), int(elems[3])
            params = [float(v) for v in elems[4:]]
        except (IndexError, ValueError):
            raise ColmapError(f"line {no}: malformed camera line") from None
        try:
            cams[cam_id] = _intrinsics(model, width, height, params, no)
        except ColmapError:
            raise
        except ValueError as e:
            raise ColmapError(f"line {no}: {e}") from None
    return cams


def parse_images(text: str, intrinsics: dict[int, Intrinsics]) -> list[ColmapImage]:
    images: list[ColmapImage] = []
    pending = None
    for no, line in _content_lines(text):
        if pending is None:
            if not line:
                continue
            elems = line.split()
            try:
                image_id = int(elems[0])
                q = np.array([float(v) for v in elems[1:5]])
                t = np.array([float(v) for v in elems[5:8]])
                cam_id = int(elems[8])
                name = elems[9]
            except (IndexError, ValueError):
                raise ColmapError(f"line {no}: malformed image line") from None
            if len(elems) != 10:
                raise ColmapError(f"line {no}: malformed image line")
            if cam_id not in intrinsics:
                raise ColmapError(f"line {no}: image {image_id} references unknown camera {cam_id}")
            norm = np.linalg.norm(q)
            if not np.isfinite(norm) or norm == 0:
                raise ColmapError(f"line {no}: invalid quaternion")
            try:
                cam_from_world = Pose(tuple(q / norm), tuple(t))
            except ValueError as e:
                raise ColmapError(f"line {no}: {e}") from None
            pending = (image_id, name, cam_id, cam_from_world)
        else:
            elems = line.split()
            if len(elems) % 3:
                raise ColmapError(f"line {no}: 2D point list length is not a multiple of 3")
            try:
                pts = np.array([float(v) for v in elems]).reshape(-1, 3)
            except ValueError:
                raise ColmapError(f"line {no}: malformed 2D point list") from None
            image_id, name, cam_id, cfw = pending
            images.append(ColmapImage(image_id, name, cam_id, Camera(intrinsics[cam_id], cfw.inverse()),
                                      pts, cfw))
            pending = None
    if pending is not None:
        image_id, name, cam_id, cfw = pending
        images.append(ColmapImage(image_id, name, cam_id, Camera(intrinsics[cam_id], cfw.inverse()),
                                  cam_from_world=cfw))
    return images


def parse_points3d(text: str, image_ids=None) -> SparsePointCloud:
    points = []
    for no, line in _content_lines(text):
        if not line:
            continue
        elems = line.split()
        try:
            pid = int(elems[0])
            xyz = np.array([float(v) for v in elems[1:4]])
            rgb = tuple(int(v) for v in elems[4:7])
            err = float(elems[7])
            rest = [int(v) for v in elems[8:]]
        except (IndexError, ValueError):
            raise ColmapError(f"line {no}: malformed 3D point line") from None
        if len(rgb) != 3 or len(rest) % 2:
            raise ColmapError(f"line {no}: malformed 3D point line")
        track = list(zip(rest[0::2], rest[1::2]))
        if image_ids is not None:
            for img, _ in track:
                if img not in image_ids:
                    raise ColmapError(f"line {no}: point {pid} references unknown image {img}")
        points.append(SparsePoint(pid, xyz, err, track, rgb))
    try:
        return SparsePointCloud(points)
    except ColmapError as e:
        raise ColmapError(str(e)) from None


def parse_colmap(cameras_text: str, images_text: str, points_text: str) -> ColmapModel:
    intr = parse_cameras(cameras_text)
    images = parse_images(images_text, intr)
    ids = [im.id for im in images]
    if len(set(ids)) != len(ids):
        raise ColmapError("duplicate image ids")
    return ColmapModel(intr, images, parse_points3d(points_text, set(ids)))


def read_colmap(directory) -> ColmapModel:
    d = Path(directory)
    return parse_colmap((d / "cameras.txt").read_text(), (d / "images.txt").read_text(),
                        (d / "points3D.txt").read_text())


def _fmt(x: float) -> str:
    return repr(float(x))


def format_colmap(model: ColmapModel) -> tuple[str, str, str]:
    cam_lines = ["# Camera list with one line of data per camera:",
                 "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]"]
    for cid, k in sorted(model.intrinsics.items()):
        cam_lines.append(" ".join([str(cid), "PINHOLE", str(k.width), str(k.height),
                                   _fmt(k.fx), _fmt(k.fy), _fmt(k.cx), _fmt(k.cy)]))
    img_lines = ["# Image list with two lines of data per image:",
                 "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
                 "#   POINTS2D[] as (X, Y, POINT3D_ID)"]
    for im in model.images:
        cfw = im.cam_from_world if im.cam_from_world is not None else im.camera.pose.inverse()
        img_lines.append(" ".join([str(im.id)] + [_fmt(v) for v in cfw.rotation]
                                  + [_fmt(v) for v in cfw.translation]
                                  + [str(im.camera_id), im.name]))
        img_lines.append(" ".join(f"{_fmt(x)} {_fmt(y)} {int(pid)}" for x, y, pid in im.points2d))
    pt_lines = ["# 3D point list with one line of data per point:",
                "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)"]
    for p in model.points.points:
        track = " ".join(f"{i} {j}" for i, j in p.track)
        pt_lines.append(" ".join([str(p.id)] + [_fmt(v) for v in p.xyz]
                                 + [str(int(c)) for c in p.rgb] + [_fmt(p.error)])
                        + (" " + track if track else ""))
    return tuple("\n".join(lines) + "\n" for lines in (cam_lines, img_lines, pt_lines))


def write_colmap(model: ColmapModel, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cams, imgs, pts = format_colmap(model)
    (d / "cameras.txt").write_text(cams)
    (d / "images.txt").write_text(imgs)
    (d / "points3D.txt").write_text(pts)
