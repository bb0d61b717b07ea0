"""Smoke test for the pyfu Python bindings.

Build and install first:
    pip install --no-build-isolation -e crates/python
then run:
    python python/smoke_test.py
"""

import math
import random
import tempfile
from pathlib import Path

import pyfu

SMALL = """
[model]
channels = 8
lidar_widths = [4, 4, 8, 8, 8, 8]
camera_widths = [4, 4, 8, 8, 8, 8]
expansion = 2

[train]
base_lr = 0.02
iterations = 4
"""


def check_helpers():
    assert pyfu.poly_lr(0, 100, 0.1) == 0.1
    assert pyfu.poly_lr(100, 100, 0.1) == 0.0
    assert abs(pyfu.poly_lr(50, 100, 0.1) - 0.1 * (1 - 0.5**0.9)) < 1e-12

    w = pyfu.class_weights([10, 1000, 100])
    assert w[0] > w[2] > w[1]

    iou, miou = pyfu.iou_miou([[3, 1], [2, 4]])
    assert abs(iou[0] - 0.5) < 1e-12 and abs(iou[1] - 4 / 7) < 1e-12
    assert abs(miou - 0.5357) < 1e-4

    try:
        pyfu.class_weights([5, 0])
    except ValueError:
        pass
    else:
        raise AssertionError("a single populated class must be rejected")


def check_projection():
    rng = random.Random(0)
    points = []
    for _ in range(500):
        r = rng.uniform(2, 30)
        yaw = rng.uniform(-math.pi, math.pi)
        pitch = math.radians(rng.uniform(-24, 2))
        points.append([r * math.cos(pitch) * math.cos(yaw), r * math.cos(pitch) * math.sin(yaw), r * math.sin(pitch), 0.5])
    pixels = pyfu.spherical_project(points)
    assert len(pixels) == len(points)
    assert all(0 <= u < 256 and 0 <= v < 32 for u, v in pixels)

    # a uniform raster stays uniform after refinement
    labels = pyfu.knn_postprocess(points, [2] * (32 * 256))
    assert labels == [2] * len(points)


def check_model(root: Path):
    ids = pyfu.synthesize(str(root / "train"), frames=2, seed=0)
    assert ids == ["000000", "000001"]
    pyfu.synthesize(str(root / "val"), frames=1, seed=5)

    model = pyfu.Model(SMALL, preset="pfb-pfh", seed=3)
    assert model.head == "fused" and model.classes == len(pyfu.CLASSES)
    assert model.num_parameters > 0
    assert any(n.startswith("lidar.") for n in model.parameter_names())

    losses = model.train(str(root / "train"), iterations=3)
    assert len(losses) == 3 and all(math.isfinite(x) for x in losses)

    iou, miou, acc = model.evaluate(str(root / "val"))
    assert len(iou) == model.classes and 0.0 <= miou <= 1.0 and 0.0 <= acc <= 1.0

    preds = model.predict(str(root / "val"))
    assert [p[0] for p in preds] == ["000000"]
    assert all(0 <= c < model.classes for c in preds[0][1])

    path = str(root / "weights.pyfu")
    model.save(path)
    other = pyfu.Model(SMALL, preset="pfb-pfh", seed=4)
    assert other.load(path) >= len(model.parameter_names())
    assert other.evaluate(str(root / "val")) == model.evaluate(str(root / "val"))

    try:
        pyfu.Model("[model]\nwidth = 3")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown keys must be rejected")


def check_selftest_and_cli():
    ok, rows = pyfu.run_selftest("knn", seed=1, size=3)
    assert ok and rows
    assert pyfu.run_cli(["--help"]) == 0
    assert pyfu.run_cli(["frobnicate"]) == 2


def main():
    check_helpers()
    check_projection()
    with tempfile.TemporaryDirectory() as d:
        check_model(Path(d))
    check_selftest_and_cli()
    print("pyfu smoke test passed")


if __name__ == "__main__":
    main()
