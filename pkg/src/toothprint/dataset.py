"""Dataset manifests and the synthetic desk-scale dataset generator.

On-disk layout: ``root/<subject_id>/<sample>.png|pgm``. Every subject needs
at least two samples. Ordering is lexicographic everywhere so manifests are
deterministic. The synthetic generator stands in for a real enrollment
database: each subject gets a base pattern of seeded stripe gratings and
rectangles, and each sample jitters it with a small affine transform,
brightness shift and pixel noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, TooFewSamples
from .imaging import DEFAULT_ROI_SIZE
from .raster import RasterImage, read_image, write_image

IMAGE_SUFFIXES = (".png", ".pgm")


@dataclass
class Sample:
    subject_id: str
    path: Path
    split: str = "train"  # "train" or "test"


@dataclass
class SubjectRecord:
    subject_id: str
    samples: list[Sample] = field(default_factory=list)


@dataclass
class DatasetManifest:
    root: Path
    subjects: list[SubjectRecord]

    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]

    def all_samples(self) -> list[Sample]:
        return [smp for sub in self.subjects for smp in sub.samples]

    def train_samples(self) -> list[Sample]:
        return [s for s in self.all_samples() if s.split == "train"]

    def test_samples(self) -> list[Sample]:
        return [s for s in self.all_samples() if s.split == "test"]


def load_dataset(root: str | Path, holdout: bool = False) -> DatasetManifest:
    """Scan ``root/<subject>/<sample>`` into a manifest.

    Every image is decoded once to verify readability. With ``holdout`` the
    lexicographically last sample of each subject is assigned to the test
    split; by default everything is a training sample (closed-set protocol).
    """
    root = Path(root)
    if not root.is_dir():
        raise EmptyDataset(f"dataset root {root} does not exist")
    subjects: list[SubjectRecord] = []
    for subject_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        paths = sorted(
            p for p in subject_dir.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
        )
        if not paths:
            continue
        if len(paths) < 2:
            raise TooFewSamples(
                f"subject {subject_dir.name!r} has {len(paths)} sample(s); need at least 2"
            )
        record = SubjectRecord(subject_dir.name)
        for i, path in enumerate(paths):
            read_image(path)  # raises UnreadableImage on a corrupt file
            split = "test" if holdout and i == len(paths) - 1 else "train"
            record.samples.append(Sample(subject_dir.name, path, split))
        subjects.append(record)
    if not subjects:
        raise EmptyDataset(f"no subjects with images under {root}")
    return DatasetManifest(root, subjects)


def _subject_pattern(rng: np.random.Generator, side: int) -> np.ndarray:
    """Base identity pattern: gratings plus rectangles, float64 in [0, 255]."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    canvas = np.full((side, side), rng.uniform(50.0, 110.0))
    for _ in range(2):
        freq = rng.uniform(0.04, 0.16)
        theta = rng.uniform(0.0, math.pi)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        amp = rng.uniform(25.0, 55.0)
        canvas += amp * np.sin(2.0 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    for _ in range(rng.integers(4, 8)):
        h = int(rng.integers(side // 10, side // 3))
        w = int(rng.integers(side // 10, side // 3))
        y0 = int(rng.integers(0, side - h))
        x0 = int(rng.integers(0, side - w))
        delta = rng.uniform(40.0, 90.0) * rng.choice([-1.0, 1.0])
        canvas[y0 : y0 + h, x0 : x0 + w] += delta
    return np.clip(canvas, 0.0, 255.0)


def _warp_bilinear(canvas: np.ndarray, out_side: int, angle_rad: float,
                   shift: tuple[float, float]) -> np.ndarray:
    """Sample a rotated/translated ``out_side`` window from the canvas center."""
    side = canvas.shape[0]
    margin = (side - out_side) / 2.0
    yy, xx = np.mgrid[0:out_side, 0:out_side].astype(np.float64)
    cy = cx = (out_side - 1) / 2.0
    cos_a, sin_a = math.cos(angle_rad), math.sin(angle_rad)
    # Inverse map output pixels back into canvas coordinates.
    sx = cos_a * (xx - cx) + sin_a * (yy - cy) + cx + margin + shift[0]
    sy = -sin_a * (xx - cx) + cos_a * (yy - cy) + cy + margin + shift[1]
    sx = np.clip(sx, 0.0, side - 1.0)
    sy = np.clip(sy, 0.0, side - 1.0)
    x0 = np.clip(np.floor(sx).astype(np.int64), 0, side - 2)
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, side - 2)
    fx = sx - x0
    fy = sy - y0
    c00 = canvas[y0, x0]
    c01 = canvas[y0, x0 + 1]
    c10 = canvas[y0 + 1, x0]
    c11 = canvas[y0 + 1, x0 + 1]
    return (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)


def synth_dataset(
    n_subjects: int,
    n_samples: int,
    out_dir: str | Path,
    roi_size: int = DEFAULT_ROI_SIZE,
    seed: int = 0,
    jitter_px: float = 3.0,
    jitter_deg: float = 3.0,
    brightness: float = 0.10,
    noise_sigma: float = 5.0,
) -> DatasetManifest:
    """Generate a synthetic enrollment dataset on disk, fully seeded.

    Per subject: a random base pattern (distinct grating frequency/phase and
    rectangle placement). Per sample: the base warped by up to
    ``jitter_px`` pixels translation and ``jitter_deg`` degrees rotation,
    scaled by a brightness factor within ``1 +- brightness`` and corrupted by
    Gaussian noise of ``noise_sigma`` 8-bit levels. Rerunning with the same
    arguments reproduces identical bytes.
    """
    if n_subjects < 2 or n_samples < 2:
        raise ValueError("need at least 2 subjects with 2 samples each")
    out_dir = Path(out_dir)
    width = len(str(n_subjects - 1))
    canvas_side = roi_size + 2 * (int(math.ceil(jitter_px)) + roi_size // 8 + 2)
    for s in range(n_subjects):
        subject_id = f"s{s:0{max(width, 3)}d}"
        pattern = _subject_pattern(np.random.default_rng([seed, s]), canvas_side)
        for j in range(n_samples):
            rng = np.random.default_rng([seed, s, j])
            angle = math.radians(rng.uniform(-jitter_deg, jitter_deg))
            shift = (rng.uniform(-jitter_px, jitter_px), rng.uniform(-jitter_px, jitter_px))
            img = _warp_bilinear(pattern, roi_size, angle, shift)
            img = img * (1.0 + rng.uniform(-brightness, brightness))
            img = img + rng.normal(0.0, noise_sigma, size=img.shape)
            data = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
            write_image(RasterImage(data), out_dir / subject_id / f"img{j:02d}.pgm")
    return load_dataset(out_dir)
