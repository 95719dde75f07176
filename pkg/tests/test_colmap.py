from pathlib import Path

import numpy as np
import pytest

from gridsdf.geometry import Camera, Intrinsics, Pose
from gridsdf.ingest.colmap import (ColmapError, format_colmap, parse_cameras, parse_colmap, parse_images,
                                   parse_points3d, read_colmap)
from gridsdf.ingest.synthetic import project_sparse_depths

FIX = Path(__file__).parent / "fixtures" / "colmap_toy"


def test_simple_pinhole_example():
    k = parse_cameras("1 SIMPLE_PINHOLE 640 480 500 320 240\n")[1]
    assert k == Intrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def test_identity_image_line():
    intr = {1: Intrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)}
    im = parse_images("1 1 0 0 0 0 0 0 1 a.png\n\n", intr)[0]
    assert im.camera.pose == Pose.identity()
    assert im.name == "a.png" and im.points2d.shape == (0, 3)


def test_points_line_with_two_observations():
    cloud = parse_points3d("7 1 2 3 4 5 6 0.25 1 0 2 5\n", {1, 2})
    p = cloud.points[0]
    assert p.id == 7 and p.track == [(1, 0), (2, 5)]
    np.testing.assert_array_equal(p.xyz, [1, 2, 3])
    assert p.rgb == (4, 5, 6) and p.error == 0.25


def test_fixture_parses_to_expected_structures():
    m = read_colmap(FIX)
    assert m.intrinsics == {1: Intrinsics(500.0, 500.0, 320.0, 240.0, 640, 480),
                            2: Intrinsics(250.5, 251.5, 160.0, 120.0, 320, 240)}
    assert [im.id for im in m.images] == [1, 2]
    assert [im.name for im in m.images] == ["a.png", "b.png"]
    a, b = m.images
    assert a.camera.pose == Pose.identity()
    np.testing.assert_array_equal(a.points2d, [[320, 240, 1], [382.5, 208.75, 2], [320, 240, 4], [100, 100, 5]])
    np.testing.assert_array_equal(b.points2d, [[50, 60, 3], [70.5, 80.5, 1]])
    # camera-from-world 90 deg about +y with t = (1, 0, 0) -> camera center (0, 0, -1)
    np.testing.assert_allclose(b.camera.pose.t, [0, 0, -1], atol=1e-12)
    np.testing.assert_allclose(b.camera.pose.R, [[0, 0, -1], [0, 1, 0], [1, 0, 0]], atol=1e-12)
    assert b.camera.intrinsics.fy == 251.5
    pts = {p.id: p for p in m.points.points}
    assert sorted(pts) == [1, 2, 3, 4, 5, 6]
    assert pts[1].track == [(1, 0), (2, 1)] and pts[1].rgb == (255, 0, 0) and pts[1].error == 0.5
    assert pts[3].track == [(2, 0)] and pts[3].error == 1.25
    assert pts[6].track == []
    np.testing.assert_array_equal(pts[5].xyz, [0, 0, -2])


def test_behind_camera_point_is_dropped():
    m = read_colmap(FIX)
    cams = [im.camera for im in m.images]
    s1, s2 = project_sparse_depths(m.points, cams, [1, 2])
    # image 1 sees 1, 2, 4 and the trackless 6; point 5 is behind it
    assert len(s1) == 4
    np.testing.assert_allclose(sorted(s1[:, 2]), [1.0, 2.0, 4.0, 5.0])
    # point 1 sits on the optical axis at depth 2 -> principal point pixel
    row = s1[np.argmin(np.abs(s1[:, 2] - 2.0))]
    assert abs(row[0] - 239.5) <= 0.5 and abs(row[1] - 319.5) <= 0.5
    assert all(np.all(s[:, 2] > 0) for s in (s1, s2))


def test_point_behind_all_cameras_contributes_nothing():
    m = read_colmap(FIX)
    from gridsdf.ingest.colmap import SparsePoint, SparsePointCloud
    cloud = SparsePointCloud([SparsePoint(1, np.array([0.0, 0.0, -5.0]))])
    cams = [Camera(im.camera.intrinsics, Pose.identity()) for im in m.images]
    assert all(len(s) == 0 for s in project_sparse_depths(cloud, cams))


def test_round_trip_fixpoint():
    m = read_colmap(FIX)
    text = format_colmap(m)
    m2 = parse_colmap(*text)
    assert format_colmap(m2) == text
    for a, b in zip(m.images, m2.images):
        np.testing.assert_allclose(a.camera.pose.R, b.camera.pose.R, atol=1e-15)
        np.testing.assert_allclose(a.camera.pose.t, b.camera.pose.t, atol=1e-15)


@pytest.mark.parametrize("text,match", [
    ("1 OPENCV 640 480 1 2 3 4 0 0 0 0\n", "OPENCV"),
    ("# c\n1 PINHOLE 640 480 500\n", "line 2"),
    ("1 PINHOLE abc 480 1 1 1 1\n", "line 1"),
])
def test_camera_errors(text, match):
    with pytest.raises(ColmapError, match=match):
        parse_cameras(text)


def test_image_and_point_errors():
    intr = parse_cameras((FIX / "cameras.txt").read_text())
    with pytest.raises(ColmapError, match="unknown camera 9"):
        parse_images("1 1 0 0 0 0 0 0 9 a.png\n\n", intr)
    with pytest.raises(ColmapError, match="line 1"):
        parse_images("1 1 0 0 0 0 0 1 a.png\n\n", intr)
    with pytest.raises(ColmapError, match="line 2"):
        parse_images("1 1 0 0 0 0 0 0 1 a.png\n1 2\n", intr)
    with pytest.raises(ColmapError, match="unknown image 3"):
        parse_points3d("1 0 0 0 0 0 0 0 3 0\n", {1, 2})
    with pytest.raises(ColmapError, match="line 1"):
        parse_points3d("1 0 0\n", {1})
    with pytest.raises(ColmapError, match="duplicate"):
        parse_points3d("1 0 0 0 0 0 0 0\n1 1 1 1 0 0 0 0\n")
