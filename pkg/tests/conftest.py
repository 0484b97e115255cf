import csv
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage
from skimage.draw import line

from hetsample.imageio import save_png

ACCEPTANCE_LINES: list[str] = []


def vessel_pair(rng, height, width, n_lines=6, dtype=np.uint8):
    """Synthetic vessel image and mask: bright thick random lines on a noisy background."""
    mask = np.zeros((height, width), bool)
    for _ in range(n_lines):
        r0, r1 = rng.integers(0, height, 2)
        c0, c1 = rng.integers(0, width, 2)
        rr, cc = line(r0, c0, r1, c1)
        mask[rr, cc] = True
    mask = ndimage.binary_dilation(mask, iterations=int(rng.integers(1, 4)))
    top = 255 if dtype == np.uint8 else 60000
    background = rng.uniform(0.1, 0.3) * top
    vessel = rng.uniform(0.5, 0.9) * top
    image = np.where(mask, vessel, background) + rng.normal(0, rng.uniform(2, 10) * top / 255, mask.shape)
    return np.clip(image, 0, top).astype(dtype), mask


@pytest.fixture
def source_dirs(tmp_path):
    """Three 320x300 source images with masks on disk."""
    rng = np.random.default_rng(2024)
    images, masks = tmp_path / "images", tmp_path / "masks"
    images.mkdir()
    masks.mkdir()
    for i in range(3):
        image, mask = vessel_pair(rng, 300, 320, n_lines=10)
        save_png(images / f"src{i}.png", image)
        save_png(masks / f"src{i}.png", mask)
    return images, masks


def write_features(path: Path, ids, values, groups=None, names=None):
    values = np.asarray(values, float)
    names = names or [f"f{j}" for j in range(values.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + (["group"] if groups is not None else []) + names)
        for i, sid in enumerate(ids):
            w.writerow([sid] + ([groups[i]] if groups is not None else []) + [repr(float(v)) for v in values[i]])
    return path


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        ACCEPTANCE_LINES.append(f"{'PASS' if report.passed else 'FAIL'}  {marker.args[0]}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for text in ACCEPTANCE_LINES:
            terminalreporter.write_line(text)
