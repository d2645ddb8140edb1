"""Per-frame labelling, contrast normalization, augmentation and balancing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import RejectedInputError

INTENSITY_AUS = ("au4", "au6", "au7", "au9", "au10")
ROTATION_DEG = 10.0
SOURCE_SIZE = 250
TARGET_SIZE = 215


@dataclass(frozen=True)
class AUVector:
    """Facial action unit intensities; AU43 (eye closure) is binary."""

    au4: int = 0
    au6: int = 0
    au7: int = 0
    au9: int = 0
    au10: int = 0
    au43: int = 0

    def __post_init__(self):
        for name in INTENSITY_AUS:
            v = getattr(self, name)
            if int(v) != v or not 0 <= v <= 5:
                raise RejectedInputError(f"{name}={v} outside 0..5")
        if self.au43 not in (0, 1):
            raise RejectedInputError(f"au43={self.au43} must be 0 or 1")

    def as_tuple(self) -> tuple[int, ...]:
        return (self.au4, self.au6, self.au7, self.au9, self.au10, self.au43)


def pspi_score(au: AUVector) -> int:
    return au.au4 + max(au.au6, au.au7) + max(au.au9, au.au10) + au.au43


def pspi_scores(aus: np.ndarray) -> np.ndarray:
    """Vectorized score over an ``(n, 6)`` array in ``AUVector`` field order."""
    aus = np.asarray(aus)
    return aus[:, 0] + np.maximum(aus[:, 1], aus[:, 2]) + np.maximum(aus[:, 3], aus[:, 4]) + aus[:, 5]


def binarize(pspi) -> int:
    if pspi < 0:
        raise RejectedInputError(f"negative PSPI {pspi}")
    return int(pspi >= 1)


def histogram_equalize(image) -> np.ndarray:
    """256-bin CDF remap ``round(255 (cdf(v) - cdf_min) / (N - cdf_min))``.

    A constant image has ``N == cdf_min`` and maps to all zeros.
    """
    img = np.asarray(image)
    if img.size == 0:
        raise RejectedInputError("empty image")
    if np.any(img < 0) or np.any(img > 255):
        raise RejectedInputError("pixel values must lie in 0..255")
    vals = img.astype(np.int64)
    cdf = np.cumsum(np.bincount(vals.ravel(), minlength=256))
    n = vals.size
    cdf_min = cdf[vals.min()]
    if n == cdf_min:
        return np.zeros_like(vals, dtype=np.uint8)
    lut = np.floor(255.0 * (cdf - cdf_min) / (n - cdf_min) + 0.5)
    return np.clip(lut, 0, 255).astype(np.uint8)[vals]


def crop_size(source: int) -> int:
    """Target side after rotation crop, scaled from 250 -> 215."""
    return int(round(source * TARGET_SIZE / SOURCE_SIZE))


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if size > h or size > w:
        raise RejectedInputError(f"crop {size} larger than image {h}x{w}")
    top = (h - size) // 2
    left = (w - size) // 2
    return image[top:top + size, left:left + size]


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1]


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    # bilinear; edge pixels extend outward and are cropped away afterwards
    return ndimage.rotate(np.asarray(image, dtype=float), degrees, reshape=False, order=1, mode="nearest")


def augment(image, rng: np.random.Generator, target: int | None = None) -> list[np.ndarray]:
    """Original, flipped, and a +-10 degree rotation of each, center-cropped.

    Returns four float arrays in the original value domain. Each rotated copy
    draws its own rotation sign from ``rng``.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise RejectedInputError(f"augment expects a square 2-D image, got {img.shape}")
    target = crop_size(img.shape[0]) if target is None else target
    if target > img.shape[0]:
        raise RejectedInputError(f"target {target} larger than source {img.shape[0]}")
    flipped = hflip(img)
    signs = rng.choice((-1.0, 1.0), size=2)
    variants = [img, flipped, rotate(img, signs[0] * ROTATION_DEG), rotate(flipped, signs[1] * ROTATION_DEG)]
    return [center_crop(v, target) for v in variants]


@dataclass(frozen=True)
class BalancedSample:
    indices: np.ndarray
    labels: np.ndarray
    degenerate: bool


def balanced_sample(labels, rng: np.random.Generator, n_per_class: int = 200) -> BalancedSample:
    """Draw ``n_per_class`` positives and negatives with replacement.

    When one class is absent the present class alone is sampled and the
    result is flagged degenerate.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise RejectedInputError("empty session")
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    parts = [rng.choice(group, size=n_per_class, replace=True) for group in (pos, neg) if group.size]
    idx = np.concatenate(parts)
    return BalancedSample(idx, labels[idx], degenerate=len(parts) < 2)
