"""Color-space conversion, color moments, sharpness measures, calibration profiles.

Images are ``(H, W, 3)`` float64 arrays with values in ``[0, 1]``. LAB images
share the layout with channels ``(L, a, b)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import correlate2d

# D65 reference white, sRGB primaries
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_WHITE = _RGB_TO_XYZ @ np.ones(3)

_EPS = 216 / 24389
_KAPPA = 24389 / 27

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


class EmptyCalibrationError(ValueError):
    pass


class ImageTooSmallError(ValueError):
    pass


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must be finite and within [0, 1]")
    return img


def load_image(path: str | Path) -> np.ndarray:
    """Decode a PNG/JPEG file to an RGB float image in ``[0, 1]``."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(img: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    arr = np.clip(np.rint(check_image(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------- LAB


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.maximum(c, 0.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def _f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _EPS, np.cbrt(t), (_KAPPA * t + 16) / 116)


def _f_inv(t: np.ndarray) -> np.ndarray:
    t3 = t**3
    return np.where(t3 > _EPS, t3, (116 * t - 16) / _KAPPA)


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """sRGB (D65) to CIE L*a*b*."""
    img = check_image(img)
    xyz = _srgb_to_linear(img) @ _RGB_TO_XYZ.T
    fx, fy, fz = np.moveaxis(_f(xyz / _WHITE), -1, 0)
    lab = np.stack([116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)], axis=-1)
    lab[..., 0] = np.clip(lab[..., 0], 0.0, 100.0)
    return lab


def lab_to_rgb(lab: np.ndarray, clip: bool = True) -> np.ndarray:
    """Inverse of :func:`rgb_to_lab`; out-of-gamut values are clipped to ``[0, 1]``."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16) / 116
    fx = fy + lab[..., 1] / 500
    fz = fy - lab[..., 2] / 200
    xyz = np.stack([_f_inv(fx), _f_inv(fy), _f_inv(fz)], axis=-1) * _WHITE
    rgb = _linear_to_srgb(xyz @ _XYZ_TO_RGB.T)
    return np.clip(rgb, 0.0, 1.0) if clip else rgb


# ---------------------------------------------------------------- statistics


@dataclass(frozen=True)
class ColorStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("ColorStats needs 3-vectors")
        if not all(np.isfinite(self.mean)) or not all(np.isfinite(self.std)):
            raise ValueError("ColorStats must be finite")
        if min(self.std) < 0:
            raise ValueError("ColorStats std must be non-negative")

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "ColorStats":
        return cls(tuple(float(v) for v in d["mean"]), tuple(float(v) for v in d["std"]))


@dataclass(frozen=True)
class SharpnessStats:
    laplacian_variance: float
    tenengrad_mean: float

    def __post_init__(self):
        if not (self.laplacian_variance >= 0 and self.tenengrad_mean >= 0):
            raise ValueError("sharpness measures must be non-negative")

    def to_dict(self) -> dict:
        return {"laplacian_variance": self.laplacian_variance, "tenengrad_mean": self.tenengrad_mean}

    @classmethod
    def from_dict(cls, d: dict) -> "SharpnessStats":
        return cls(float(d["laplacian_variance"]), float(d["tenengrad_mean"]))


def color_stats(lab: np.ndarray) -> ColorStats:
    """Per-channel population mean and standard deviation."""
    flat = np.asarray(lab, dtype=np.float64).reshape(-1, 3)
    if flat.shape[0] == 0:
        raise ValueError("empty image")
    mean = flat.mean(axis=0)
    std = np.sqrt(((flat - mean) ** 2).mean(axis=0))
    # a flat channel has exactly zero spread, whatever the mean's rounding
    std[np.ptp(flat, axis=0) == 0] = 0.0
    return ColorStats(tuple(float(v) for v in mean), tuple(float(v) for v in std))


def luma(img: np.ndarray) -> np.ndarray:
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def laplacian_variance(gray: np.ndarray) -> float:
    resp = correlate2d(gray, LAPLACIAN, mode="valid")
    return float(resp.var())


def sharpness_stats(img: np.ndarray) -> SharpnessStats:
    """Laplacian variance and mean Sobel magnitude of the luma channel (valid region)."""
    img = check_image(img)
    if img.shape[0] < 3 or img.shape[1] < 3:
        raise ImageTooSmallError(f"sharpness needs at least 3x3 pixels, got {img.shape[:2]}")
    gray = luma(img)
    gx = correlate2d(gray, SOBEL_X, mode="valid")
    gy = correlate2d(gray, SOBEL_Y, mode="valid")
    lv = laplacian_variance(gray)
    # flat inputs give round-off sized responses
    ten = float(np.sqrt(gx * gx + gy * gy).mean())
    return SharpnessStats(lv if lv > 1e-24 else 0.0, ten if ten > 1e-12 else 0.0)


# ---------------------------------------------------------------- calibration profile


def _aggregate_color(items: Sequence[ColorStats]) -> ColorStats:
    means = np.array([c.mean for c in items])
    stds = np.array([c.std for c in items])
    return ColorStats(tuple(float(v) for v in means.mean(axis=0)), tuple(float(v) for v in stds.mean(axis=0)))


def _aggregate_sharpness(items: Sequence[SharpnessStats]) -> SharpnessStats:
    return SharpnessStats(
        float(np.mean([s.laplacian_variance for s in items])),
        float(np.mean([s.tenengrad_mean for s in items])),
    )


@dataclass(frozen=True)
class CalibrationProfile:
    """Appearance statistics of a calibration subset.

    Aggregate color is the mean of per-image means and the mean of per-image
    stds; aggregate sharpness is the mean of per-image measures.
    """

    per_image: tuple[tuple[ColorStats, SharpnessStats], ...]
    aggregate_color: ColorStats = field(init=False)
    aggregate_sharpness: SharpnessStats = field(init=False)

    def __post_init__(self):
        if not self.per_image:
            raise EmptyCalibrationError("calibration profile needs at least one image")
        object.__setattr__(self, "aggregate_color", _aggregate_color([c for c, _ in self.per_image]))
        object.__setattr__(self, "aggregate_sharpness", _aggregate_sharpness([s for _, s in self.per_image]))

    @property
    def source_image_count(self) -> int:
        return len(self.per_image)

    def to_dict(self) -> dict:
        return {
            "per_image": [{"color": c.to_dict(), "sharpness": s.to_dict()} for c, s in self.per_image],
            "aggregate_color": self.aggregate_color.to_dict(),
            "aggregate_sharpness": self.aggregate_sharpness.to_dict(),
            "source_image_count": self.source_image_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationProfile":
        per = tuple(
            (ColorStats.from_dict(e["color"]), SharpnessStats.from_dict(e["sharpness"])) for e in d["per_image"]
        )
        prof = cls(per)
        if d.get("source_image_count", prof.source_image_count) != prof.source_image_count:
            raise ValueError("source_image_count does not match per_image length")
        return prof

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationProfile":
        return cls.from_dict(json.loads(text))


def image_stats(img: np.ndarray) -> tuple[ColorStats, SharpnessStats]:
    return color_stats(rgb_to_lab(img)), sharpness_stats(img)


def build_calibration_profile(images: Sequence[np.ndarray]) -> CalibrationProfile:
    if len(images) == 0:
        raise EmptyCalibrationError("cannot build a calibration profile from zero images")
    return CalibrationProfile(tuple(image_stats(img) for img in images))
