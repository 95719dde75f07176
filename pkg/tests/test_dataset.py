import shutil
from pathlib import Path

import numpy as np
import pytest

from gridsdf.ingest.dataset import DatasetError, ingest, load_dataset, save_dataset
from gridsdf.ingest.pfm import save_pfm, save_png

FIXTURE = Path(__file__).parent / "fixtures" / "colmap_toy"


def test_save_load_round_trip(tiny_dataset, tmp_path):
    save_dataset(tiny_dataset, tmp_path)
    ds = load_dataset(tmp_path)
    assert ds.names == tiny_dataset.names
    assert (ds.train, ds.test) == (tiny_dataset.train, tiny_dataset.test)
    assert ds.bounds == tiny_dataset.bounds
    assert ds.scene == tiny_dataset.scene
    for a, b in zip(ds.cameras, tiny_dataset.cameras):
        assert a.intrinsics == b.intrinsics
        np.testing.assert_allclose(a.pose.R, b.pose.R, atol=1e-12)
        np.testing.assert_allclose(a.pose.t, b.pose.t, atol=1e-12)
    for a, b in zip(ds.images, tiny_dataset.images):
        np.testing.assert_allclose(a, b, atol=0.5 / 255 + 1e-12)
    for a, b in zip(ds.priors, tiny_dataset.priors):
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_allclose(a.depth, b.depth, rtol=1e-6)
        np.testing.assert_allclose(a.normal, b.normal, atol=1e-6)
    for a, b in zip(ds.sparse, tiny_dataset.sparse):
        np.testing.assert_allclose(a, b, atol=1e-9)
    for a, b in zip(ds.gt, tiny_dataset.gt):
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_allclose(a.depth, b.depth, rtol=1e-6)


def test_load_rejects_missing_and_bad_version(tiny_dataset, tmp_path):
    with pytest.raises(DatasetError, match="dataset.json"):
        load_dataset(tmp_path)
    save_dataset(tiny_dataset, tmp_path)
    meta = (tmp_path / "dataset.json").read_text().replace('"version": 1', '"version": 7')
    (tmp_path / "dataset.json").write_text(meta)
    with pytest.raises(DatasetError, match="version"):
        load_dataset(tmp_path)


def test_synthetic_scale_shift_close_to_noise_config(tiny_dataset):
    for i in tiny_dataset.train:
        ss = tiny_dataset.scale_shift(i)
        assert ss is not None and not ss.degenerate
        assert ss.w == pytest.approx(2.0, rel=0.1)


def _raw_inputs(root: Path) -> tuple[Path, Path]:
    images, priors = root / "images", root / "priors"
    images.mkdir()
    priors.mkdir()
    for name, (w, h) in (("a", (640, 480)), ("b", (320, 240))):
        save_png(images / f"{name}.png", np.full((h, w, 3), 0.5))
        depth = np.full((h, w), 1.5)
        depth[0, 0] = 0.0                      # invalid without an explicit mask
        save_pfm(priors / f"{name}_depth.pfm", depth)
        n = np.zeros((h, w, 3))
        n[..., 2] = -1.0
        save_pfm(priors / f"{name}_normal.pfm", n)
    mask = np.ones((480, 640))
    mask[:10] = 0
    save_png(priors / "a_mask.png", mask)
    return images, priors


def test_ingest_colmap_fixture(tmp_path):
    images, priors = _raw_inputs(tmp_path)
    ds = ingest(FIXTURE, images, priors, tmp_path / "out", test=[1])
    assert ds.names == ["a.png", "b.png"]
    assert ds.train == [0, 1] and ds.test == [1]
    assert [c.width for c in ds.cameras] == [640, 320]
    # image 1 sees points 1, 2, 4 by track and the trackless point 6; point 5 is behind it
    assert sorted(ds.sparse[0][:, 2]) == pytest.approx([1.0, 2.0, 4.0, 5.0])
    # from image 2 every candidate is behind the camera or outside the frame
    assert len(ds.sparse[1]) == 0 and ds.scale_shift(1) is None
    assert ds.bounds.contains(ds.points.xyz).all()
    assert not ds.priors[0].mask[:10].any() and ds.priors[0].mask[10:].all()
    assert not ds.priors[1].mask[0, 0] and ds.priors[1].mask.sum() == 320 * 240 - 1
    for f in ("cameras.txt", "images.txt", "points3D.txt"):
        assert (tmp_path / "out" / "colmap" / f).read_bytes() == (FIXTURE / f).read_bytes()
    again = load_dataset(tmp_path / "out")
    assert again.names == ds.names and again.gt is None
    for a, b in zip(again.sparse, ds.sparse):
        np.testing.assert_array_equal(a, b)


def test_ingest_missing_image_is_an_error(tmp_path):
    images, priors = _raw_inputs(tmp_path)
    (images / "b.png").unlink()
    with pytest.raises(DatasetError, match="b.png"):
        ingest(FIXTURE, images, priors)


def test_ingest_without_points_is_an_error(tmp_path):
    images, priors = _raw_inputs(tmp_path)
    col = tmp_path / "colmap"
    shutil.copytree(FIXTURE, col)
    (col / "points3D.txt").write_text("# empty\n")
    with pytest.raises((DatasetError, ValueError)):
        ingest(col, images, priors)
