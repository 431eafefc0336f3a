import numpy as np
import pytest

from soi.ply import read_ply, write_ply
from soi.pointcloud import ColoredPointCloud, hsv_to_rgb


def make_cloud(rng, n=100, frame="cam1"):
    pos = rng.normal(size=(n, 3))
    hsv = np.column_stack([
        rng.uniform(0, 360, n), rng.uniform(0, 1, n), rng.uniform(0, 1, n)
    ])
    return ColoredPointCloud(pos, hsv, frame)


@pytest.mark.parametrize("binary", [True, False])
def test_roundtrip(tmp_path, binary):
    rng = np.random.default_rng(0)
    cloud = make_cloud(rng)
    path = tmp_path / "c.ply"
    write_ply(path, cloud, binary=binary)
    back = read_ply(path)
    assert back.frame_id == "cam1"
    assert len(back) == len(cloud)
    # positions stored as float32
    assert np.allclose(back.positions, cloud.positions, atol=1e-5)
    # colors quantized to 8-bit rgb on disk
    rgb0 = hsv_to_rgb(cloud.colors)
    rgb1 = hsv_to_rgb(back.colors)
    assert np.abs(rgb0 - rgb1).max() <= 1.0 / 255.0 + 1e-9


def test_empty_cloud_roundtrip(tmp_path):
    cloud = ColoredPointCloud.empty("world")
    path = tmp_path / "e.ply"
    write_ply(path, cloud)
    back = read_ply(path)
    assert len(back) == 0 and back.frame_id == "world"


def test_rejects_non_ply(tmp_path):
    path = tmp_path / "x.ply"
    path.write_text("not a ply file\n")
    with pytest.raises(ValueError):
        read_ply(path)


def test_rejects_missing_color(tmp_path):
    path = tmp_path / "m.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 1\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n0 0 0\n"
    )
    with pytest.raises(ValueError):
        read_ply(path)
