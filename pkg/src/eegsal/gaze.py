"""Ground-truth saliency maps from gaze samples."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.ndimage import gaussian_filter

MAP_SHAPE = (45, 81)
PAD_ROWS = 18
SQUARE = 81
ERROR_RADIUS_PX = 2.0
SIGMA_PX = 3.0
MAX_SHIFT = 5


class EmptyGazeWarning(UserWarning):
    pass


def gaze_to_pixels(gaze, resolution=MAP_SHAPE) -> np.ndarray:
    """Map normalized (x, y) screen coordinates to integer (row, col)."""
    h, w = resolution
    xy = np.asarray(gaze, dtype=float)
    if xy.size == 0:
        return np.zeros((0, 2), dtype=int)
    xy = xy.reshape(len(xy), -1)[:, :2]
    if np.any((xy < 0) | (xy > 1)):
        raise ValueError("gaze coordinates must lie in [0, 1]")
    rows = np.rint(xy[:, 1] * (h - 1)).astype(int)
    cols = np.rint(xy[:, 0] * (w - 1)).astype(int)
    return np.column_stack([rows, cols])


def rasterize_fixations(gaze, error_radius_px: float = ERROR_RADIUS_PX,
                        resolution=MAP_SHAPE) -> np.ndarray:
    """Stamp a filled disk per gaze point; overlapping disks add up."""
    if error_radius_px <= 0:
        raise ValueError("error radius must be positive")
    h, w = resolution
    out = np.zeros((h, w))
    if len(gaze) == 0:
        warnings.warn("no gaze samples: saliency map is empty", EmptyGazeWarning, stacklevel=2)
        return out
    rr, cc = np.mgrid[0:h, 0:w]
    for r, c in gaze_to_pixels(gaze, resolution):
        out += (rr - r) ** 2 + (cc - c) ** 2 <= error_radius_px ** 2
    return out


def gaussian_blur(saliency: np.ndarray, sigma_px: float = SIGMA_PX, rescale: bool = True) -> np.ndarray:
    """Gaussian smoothing with reflective borders, then max-normalization to 1."""
    if sigma_px <= 0:
        raise ValueError("sigma must be positive")
    out = gaussian_filter(np.asarray(saliency, dtype=float), sigma_px, mode="reflect")
    if not rescale:
        return out
    peak = out.max()
    if peak > 0:
        out = out / peak
    return np.clip(out, 0.0, 1.0)


def pad_to_square(saliency: np.ndarray) -> np.ndarray:
    """Add 18 empty rows above and below a 45x81 map."""
    saliency = np.asarray(saliency)
    if saliency.shape != MAP_SHAPE:
        raise ValueError(f"expected an unpadded {MAP_SHAPE} map, got {saliency.shape}")
    return np.pad(saliency, ((PAD_ROWS, PAD_ROWS), (0, 0)))


def unpad(saliency: np.ndarray) -> np.ndarray:
    if saliency.shape[-2:] != (SQUARE, SQUARE):
        raise ValueError(f"expected a padded {SQUARE}x{SQUARE} map, got {saliency.shape}")
    return saliency[..., PAD_ROWS:PAD_ROWS + MAP_SHAPE[0], :]


def shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate the last two axes with zero fill."""
    out = np.zeros_like(img)
    h, w = img.shape[-2:]
    src_r = slice(max(0, -dy), min(h, h - dy))
    dst_r = slice(max(0, dy), min(h, h + dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[..., dst_r, dst_c] = img[..., src_r, src_c]
    return out


def augment_saliency(saliency: np.ndarray, rng=None, max_shift: int = MAX_SHIFT,
                     flip_prob: float = 0.5) -> np.ndarray:
    """Random horizontal mirror and integer translation in [-max_shift, max_shift]."""
    rng = np.random.default_rng(rng)
    out = np.asarray(saliency)
    if rng.random() < flip_prob:
        out = out[..., ::-1]
    dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
    return shift(np.ascontiguousarray(out), int(dy), int(dx))


def fixation_set(gaze, resolution=MAP_SHAPE, padded: bool = True) -> np.ndarray:
    """Binary map of the pixels hit by gaze points (disk centres only)."""
    h, w = resolution
    out = np.zeros((h, w), dtype=bool)
    if len(gaze):
        px = gaze_to_pixels(gaze, resolution)
        out[px[:, 0], px[:, 1]] = True
    return pad_to_square(out) if padded else out


def saliency_from_gaze(gaze, error_radius_px: float = ERROR_RADIUS_PX,
                       sigma_px: float = SIGMA_PX) -> np.ndarray:
    """Full ground-truth pipeline: disks, blur, normalize, pad to 81x81."""
    return pad_to_square(gaussian_blur(rasterize_fixations(gaze, error_radius_px), sigma_px))
