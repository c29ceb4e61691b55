"""Hand-crafted concept measurements and color normalization.

Concepts per image: nuclei count and mean nucleus area from a binary mask,
and Haralick contrast and correlation from a gray-level co-occurrence matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
CONCEPTS = ("area", "count", "contrast", "correlation")


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim == 3:
        if img.shape[2] == 1:
            return img[..., 0]
        return img @ LUMA
    return img


def quantize(gray: np.ndarray, levels: int) -> np.ndarray:
    return np.clip((np.asarray(gray) * levels).astype(int), 0, levels - 1)


@dataclass
class GLCM:
    matrix: np.ndarray
    offset: tuple[int, int]
    symmetric: bool
    n_pairs: int

    @property
    def levels(self) -> int:
        return self.matrix.shape[0]


def glcm_compute(gray: np.ndarray, levels: int = 8, offset: tuple[int, int] = (1, 0),
                 symmetric: bool = True, quantized: bool = False) -> GLCM:
    """Normalized co-occurrence matrix of level pairs ``(I[y, x], I[y+dy, x+dx])``.

    ``gray`` holds intensities in [0, 1] unless ``quantized`` is set, in which
    case it already holds integer levels.
    """
    if levels < 2:
        raise ValueError("need at least 2 gray levels")
    q = np.asarray(gray).astype(int) if quantized else quantize(to_gray(gray), levels)
    if q.min() < 0 or q.max() >= levels:
        raise ValueError("quantized levels out of range")
    dx, dy = offset
    h, w = q.shape
    if abs(dx) >= w or abs(dy) >= h:
        raise ValueError(f"image {h}x{w} smaller than offset {offset}")
    ys = slice(max(0, -dy), h - max(0, dy))
    xs = slice(max(0, -dx), w - max(0, dx))
    ys2 = slice(max(0, dy), h - max(0, -dy))
    xs2 = slice(max(0, dx), w - max(0, -dx))
    a, b = q[ys, xs].ravel(), q[ys2, xs2].ravel()
    counts = np.bincount(a * levels + b, minlength=levels * levels).reshape(levels, levels).astype(float)
    if symmetric:
        counts = counts + counts.T
    total = counts.sum()
    matrix = counts / total if total > 0 else counts
    return GLCM(matrix, (dx, dy), symmetric, int(a.size))


def haralick_contrast(g: GLCM) -> float:
    i, j = np.indices(g.matrix.shape)
    return float(np.sum((i - j) ** 2 * g.matrix))


def haralick_correlation(g: GLCM) -> float:
    """Normalized covariance of co-occurring levels; 0 when a marginal is constant."""
    p = g.matrix
    levels = np.arange(p.shape[0])
    pi, pj = p.sum(axis=1), p.sum(axis=0)
    mu_i, mu_j = levels @ pi, levels @ pj
    sd_i = np.sqrt(((levels - mu_i) ** 2) @ pi)
    sd_j = np.sqrt(((levels - mu_j) ** 2) @ pj)
    if sd_i < 1e-12 or sd_j < 1e-12:
        return 0.0
    cov = (levels - mu_i) @ p @ (levels - mu_j)
    return float(np.clip(cov / (sd_i * sd_j), -1.0, 1.0))


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndimage.generate_binary_structure(2, 2)
    raise ValueError("connectivity must be 4 or 8")


def label_blobs(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_structure(connectivity))
    return labels, int(n)


def count_blobs(mask: np.ndarray, connectivity: int = 8) -> int:
    return label_blobs(mask, connectivity)[1]


def mean_blob_area(mask: np.ndarray, connectivity: int = 8) -> float:
    n = count_blobs(mask, connectivity)
    if n == 0:
        return 0.0
    return float(np.count_nonzero(mask)) / n


def concept_values(image: np.ndarray, mask: np.ndarray, levels: int = 8, offset=(1, 0),
                   connectivity: int = 8) -> dict[str, float]:
    g = glcm_compute(to_gray(image), levels, offset, symmetric=True)
    return {
        "area": mean_blob_area(mask, connectivity),
        "count": float(count_blobs(mask, connectivity)),
        "contrast": haralick_contrast(g),
        "correlation": haralick_correlation(g),
    }


@dataclass
class ZScore:
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)

    def apply(self, values: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        return {k: (np.asarray(v, float) - self.mean[k]) / self.std[k] for k, v in values.items() if k in self.mean}

    def invert(self, values: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        return {k: np.asarray(v, float) * self.std[k] + self.mean[k] for k, v in values.items() if k in self.mean}


def zscore_fit(values: dict[str, np.ndarray]) -> ZScore:
    """Per-concept mean and population std; a zero std is clamped to 1."""
    stats = ZScore()
    for k, v in values.items():
        v = np.asarray(v, dtype=float)
        if v.size == 0:
            raise ValueError(f"no fitting values for concept {k!r}")
        sd = float(v.std())
        if sd == 0.0:
            log.warning("concept %r is constant on the fitting split; std clamped to 1", k)
            sd = 1.0
        stats.mean[k] = float(v.mean())
        stats.std[k] = sd
    return stats


def zscore_fit_apply(fit_values: dict[str, np.ndarray], *others: dict[str, np.ndarray]):
    """Fit on the first mapping and transform it and every other mapping."""
    stats = zscore_fit(fit_values)
    return (stats, stats.apply(fit_values), *[stats.apply(o) for o in others])


# Reinhard et al. colour transfer constants.
RGB2LMS = np.array([[0.3811, 0.5783, 0.0402],
                    [0.1967, 0.7244, 0.0782],
                    [0.0241, 0.1288, 0.8444]])
LMS2RGB = np.linalg.inv(RGB2LMS)
LMS2LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array([[1, 1, 1], [1, 1, -2], [1, -1, 0]])
LAB2LMS = np.linalg.inv(LMS2LAB)
LOG_FLOOR = 1e-6


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    lms = np.asarray(img, float) @ RGB2LMS.T
    return np.log(np.maximum(lms, LOG_FLOOR)) @ LMS2LAB.T


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    return np.exp(np.asarray(lab, float) @ LAB2LMS.T) @ LMS2RGB.T


def lab_stats(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lab = rgb_to_lab(img).reshape(-1, 3)
    return lab.mean(axis=0), lab.std(axis=0)


def reinhard_normalize(img: np.ndarray, ref_mean, ref_std) -> np.ndarray:
    """Match per-channel l-alpha-beta mean and std to a reference, back to RGB."""
    lab = rgb_to_lab(img)
    mean = lab.reshape(-1, 3).mean(axis=0)
    std = lab.reshape(-1, 3).std(axis=0)
    # Rounding leaves ~1e-17 spread on flat channels; treat that as zero.
    flat = std < 1e-12
    scale = np.where(flat, 1.0, np.asarray(ref_std, float) / np.where(flat, 1.0, std))
    out = (lab - mean) * scale + np.asarray(ref_mean, float)
    return np.clip(lab_to_rgb(out), 0.0, 1.0)
