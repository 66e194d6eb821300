"""Block-DCT spectrogram statistics over images and datasets.

Each image is cut into N x N blocks (8 x 8 by default, JPEG style), the
absolute DCT spectra are averaged across blocks, and the mean spectrogram is
summarized over four regions: low (L), two mid bands (M1, M2) and high (H).
A dataset is then described by the mean and population variance of those
per-image region means.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dct import InvalidSizeError, make_basis
from .tensor import Tensor

REGIONS = ("L", "M1", "M2", "H")


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class RegionPartition:
    N: int
    masks: dict[str, np.ndarray]

    def indices(self, region: str) -> set[tuple[int, int]]:
        return {tuple(map(int, ij)) for ij in np.argwhere(self.masks[region])}

    def sizes(self) -> dict[str, int]:
        return {r: int(self.masks[r].sum()) for r in REGIONS}


@dataclass(frozen=True)
class ImageFreqSummary:
    region_means: tuple[float, float, float, float]
    name: str = ""

    def as_dict(self) -> dict[str, float]:
        return dict(zip(REGIONS, self.region_means))


@dataclass(frozen=True)
class DatasetFreqSummary:
    mean_of_means: tuple[float, float, float, float]
    variance: tuple[float, float, float, float]
    count: int


def partition_spectrum(N: int = 8) -> RegionPartition:
    if N < 4 or N % 4:
        raise InvalidSizeError(f"spectrum size must be a positive multiple of 4, got {N}")
    q = N // 4
    low_r = np.zeros((N, N), dtype=bool)
    low_r[:q, :] = True
    low_c = np.zeros((N, N), dtype=bool)
    low_c[:, :q] = True
    masks = {
        "L": low_r & low_c,
        "M1": low_r & ~low_c,
        "M2": ~low_r & low_c,
        "H": ~low_r & ~low_c,
    }
    return RegionPartition(N, masks)


def mean_abs_spectrum(image, N: int = 8) -> np.ndarray:
    """Mean |DCT| over all complete N x N blocks of a 2D image; ragged edges dropped."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a grayscale (H, W) image, got shape {img.shape}")
    H, W = img.shape
    if H < N or W < N:
        raise ValueError(f"image {H}x{W} is smaller than one {N}x{N} block")
    bh, bw = H // N, W // N
    blocks = img[: bh * N, : bw * N].reshape(bh, N, bw, N).transpose(0, 2, 1, 3)
    b = make_basis(N).basis1d
    spectra = np.matmul(np.matmul(b, blocks), b.T)
    return np.abs(spectra).mean(axis=(0, 1))


def image_freq_summary(image, partition: RegionPartition, name: str = "") -> ImageFreqSummary:
    spec = mean_abs_spectrum(image, partition.N)
    means = tuple(float(spec[partition.masks[r]].mean()) for r in REGIONS)
    return ImageFreqSummary(means, name)


def dataset_summary(summaries: Sequence[ImageFreqSummary]) -> DatasetFreqSummary:
    if len(summaries) < 2:
        raise InsufficientDataError(f"dataset summary needs at least 2 images, got {len(summaries)}")
    table = np.array([s.region_means for s in summaries], dtype=np.float64)
    # shift by the first row so identical summaries give exactly zero variance
    d = table - table[0]
    dm = d.mean(axis=0)
    var = ((d - dm) ** 2).mean(axis=0)
    mean = table[0] + dm
    return DatasetFreqSummary(tuple(map(float, mean)), tuple(map(float, var)), len(summaries))


def write_image_csv(path, summaries: Sequence[ImageFreqSummary]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "L_mean", "M1_mean", "M2_mean", "H_mean"])
        for s in summaries:
            w.writerow([s.name, *(repr(v) for v in s.region_means)])


def write_dataset_csv(path, summary: DatasetFreqSummary) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["region", "mean_of_means", "variance"])
        for r, m, v in zip(REGIONS, summary.mean_of_means, summary.variance):
            w.writerow([r, repr(m), repr(v)])
