import numpy as np
import pytest

from emberflow.data import Dataset, PIXELS_PER_IMAGE, write_fer_csv
from emberflow.tensor import Rng


def make_synthetic_dataset(n: int, seed: int, noise: float = 0.25,
                           random_phase: bool = False) -> Dataset:
    """Labeled 48x48 images with a learnable per-class grating pattern.

    Each class gets a distinct orientation/frequency grating; per-example
    Gaussian noise makes the task nontrivial. With random_phase each
    example's grating is shifted by a random phase, which removes the
    fixed per-class pixel template: the net must learn orientation and
    frequency features instead of template-matching, a much harder task.
    Pixels are quantized to the 0..255 grid like a real source file.
    """
    rng = Rng(seed)
    yy, xx = np.mgrid[0:48, 0:48].astype(np.float64) / 48.0
    labels = np.array([rng.randbelow(7) for _ in range(n)], dtype=np.int64)
    if random_phase:
        imgs = np.empty((n, 48, 48))
        for i in range(n):
            c = labels[i]
            theta = c * np.pi / 7.0
            freq = 2.0 + (c % 3)
            t = xx * np.cos(theta) + yy * np.sin(theta)
            phase = float(rng.uniform((1,))[0])
            imgs[i] = 0.5 + 0.25 * np.sin(2 * np.pi * (freq * t + phase))
    else:
        protos = []
        for c in range(7):
            theta = c * np.pi / 7.0
            freq = 2.0 + (c % 3)
            t = xx * np.cos(theta) + yy * np.sin(theta)
            protos.append(np.sin(2.0 * np.pi * freq * t))
        imgs = 0.5 + 0.25 * np.stack(protos)[labels]
    imgs = imgs + noise * rng.normal((n, 48, 48), dtype=np.float64)
    imgs = np.clip(imgs, 0.0, 1.0)
    imgs = np.rint(imgs * 255.0) / 255.0
    return Dataset(labels, imgs.reshape(n, PIXELS_PER_IMAGE).astype(np.float32),
                   provenance=f"synthetic(n={n},seed={seed})")


@pytest.fixture
def tiny_dataset():
    return make_synthetic_dataset(20, seed=7)


@pytest.fixture
def fixture_csv(tmp_path):
    """A small on-disk FER-format CSV with known class counts."""
    ds = make_synthetic_dataset(10, seed=3)
    path = tmp_path / "fixture.csv"
    write_fer_csv(ds, path)
    return path, ds
