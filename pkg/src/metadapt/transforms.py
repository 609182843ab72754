"""Appearance transforms parameterized by calibration statistics.

Color transfer (global LAB moment matching), the blur family (gaussian,
motion, defocus), flips and right-angle rotations, and a seeded stochastic
pipeline that composes them. Nothing here rescales, crops, or warps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate

from .imaging import (
    CalibrationProfile,
    ColorStats,
    SharpnessStats,
    check_image,
    color_stats,
    lab_to_rgb,
    laplacian_variance,
    rgb_to_lab,
)

MAX_BLUR_SIGMA = 5.0

BLUR_KINDS = ("gaussian_blur", "motion_blur", "defocus_blur")
GEOMETRIC_KINDS = ("horizontal_flip", "vertical_flip", "rotate90")
KINDS = ("color_transfer",) + BLUR_KINDS + GEOMETRIC_KINDS + ("one_of",)


# ---------------------------------------------------------------- color


def transfer_lab(lab: np.ndarray, target: ColorStats, source: ColorStats | None = None) -> np.ndarray:
    """Per-channel affine map of LAB values from ``source`` moments onto ``target``."""
    if source is None:
        source = color_stats(lab)
    out = np.empty_like(lab)
    for c in range(3):
        mu_s, sd_s = source.mean[c], source.std[c]
        mu_t, sd_t = target.mean[c], target.std[c]
        if sd_s < 1e-6:
            out[..., c] = lab[..., c] - mu_s + mu_t
        else:
            out[..., c] = (lab[..., c] - mu_s) / sd_s * sd_t + mu_t
    return out


def color_transfer(img: np.ndarray, target: ColorStats) -> np.ndarray:
    """Match the image's global LAB mean/std to ``target``; pointwise, so layout is untouched."""
    lab = rgb_to_lab(img)
    return lab_to_rgb(transfer_lab(lab, target))


# ---------------------------------------------------------------- blur kernels


@lru_cache(maxsize=256)
def _gaussian_1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_kernel(sigma: float) -> np.ndarray:
    """2-D gaussian kernel truncated at 3 sigma (outer product of the 1-D kernel)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return np.ones((1, 1))
    k = _gaussian_1d(float(sigma))
    return np.outer(k, k)


def motion_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Normalized line of ``length`` samples through the kernel center at ``angle_deg``.

    Each sample point along the line is splatted with bilinear weights.
    """
    if length < 1:
        raise ValueError("motion blur length must be >= 1")
    half = (length - 1) / 2
    # one pixel of margin on each side for the bilinear spill
    size = 2 * int(math.ceil(half)) + 3
    k = np.zeros((size, size))
    c = size // 2
    theta = math.radians(angle_deg)
    dx, dy = math.cos(theta), -math.sin(theta)
    for t in np.linspace(-half, half, length):
        x, y = c + t * dx, c + t * dy
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        k[y0, x0] += (1 - fx) * (1 - fy)
        k[y0, x0 + 1] += fx * (1 - fy)
        k[y0 + 1, x0] += (1 - fx) * fy
        k[y0 + 1, x0 + 1] += fx * fy
    return k / k.sum()


def defocus_kernel(radius: float) -> np.ndarray:
    """Normalized disk of the given radius (radius 0 is the identity)."""
    if radius < 0:
        raise ValueError("defocus radius must be >= 0")
    r = int(math.ceil(radius))
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    k = (x * x + y * y <= radius * radius + 1e-9).astype(np.float64)
    return k / k.sum()


def convolve_image(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate every channel with ``kernel`` using edge-replicate padding."""
    if kernel.shape == (1, 1):
        return np.array(img, dtype=np.float64)
    out = np.empty_like(img, dtype=np.float64)
    for ch in range(img.shape[2]):
        out[..., ch] = correlate(img[..., ch], kernel, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return np.array(img, dtype=np.float64)
    k = _gaussian_1d(float(sigma))
    out = correlate(img, k[:, None, None], mode="nearest")
    out = correlate(out, k[None, :, None], mode="nearest")
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- specs


@dataclass(frozen=True)
class TransformSpec:
    """One pipeline entry.

    ``params`` by kind: color_transfer ``target`` (ColorStats) or ``targets``
    (one drawn uniformly per application); gaussian_blur
    ``sigma``; motion_blur ``length`` and ``angle`` (``None`` draws a uniform
    angle per application); defocus_blur ``radius``; rotate90
    ``quarter_turns`` (``None`` draws 1..3). ``one_of`` picks one of
    ``choices`` uniformly per application.
    """

    kind: str
    probability: float = 0.5
    params: dict = field(default_factory=dict)
    choices: tuple["TransformSpec", ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must be within [0, 1]")
        p = self.params
        if self.kind == "color_transfer":
            targets = p.get("targets", (p.get("target"),))
            if not targets or not all(isinstance(t, ColorStats) for t in targets):
                raise ValueError("color_transfer needs a ColorStats target (or a list of targets)")
        if self.kind == "gaussian_blur" and not p.get("sigma", -1) >= 0:
            raise ValueError("gaussian_blur needs sigma >= 0")
        if self.kind == "motion_blur" and not p.get("length", 0) >= 1:
            raise ValueError("motion_blur needs length >= 1")
        if self.kind == "defocus_blur" and not p.get("radius", -1) >= 0:
            raise ValueError("defocus_blur needs radius >= 0")
        if self.kind == "rotate90" and p.get("quarter_turns") not in (None, 1, 2, 3):
            raise ValueError("quarter_turns must be 1, 2 or 3")
        if self.kind == "one_of" and not self.choices:
            raise ValueError("one_of needs at least one choice")

    def with_probability(self, p: float) -> "TransformSpec":
        return TransformSpec(self.kind, p, dict(self.params), self.choices)

    def to_dict(self) -> dict:
        params = {}
        for k, v in self.params.items():
            if isinstance(v, ColorStats):
                v = v.to_dict()
            elif k == "targets":
                v = [t.to_dict() for t in v]
            params[k] = v
        d = {"kind": self.kind, "probability": self.probability, "params": params}
        if self.choices:
            d["choices"] = [c.to_dict() for c in self.choices]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        params = dict(d.get("params", {}))
        if "target" in params:
            params["target"] = ColorStats.from_dict(params["target"])
        if "targets" in params:
            params["targets"] = tuple(ColorStats.from_dict(t) for t in params["targets"])
        choices = tuple(cls.from_dict(c) for c in d.get("choices", ()))
        return cls(d["kind"], float(d["probability"]), params, choices)


def _apply_spec(img: np.ndarray, spec: TransformSpec, rng: np.random.Generator) -> np.ndarray:
    kind, p = spec.kind, spec.params
    if kind == "one_of":
        choice = spec.choices[int(rng.integers(len(spec.choices)))]
        return _apply_spec(img, choice, rng)
    if kind == "color_transfer":
        if "targets" in p:
            return color_transfer(img, p["targets"][int(rng.integers(len(p["targets"])))])
        return color_transfer(img, p["target"])
    if kind == "gaussian_blur":
        return gaussian_blur(img, p["sigma"])
    if kind == "motion_blur":
        angle = p.get("angle")
        if angle is None:
            angle = float(rng.uniform(0.0, 180.0))
        return convolve_image(img, motion_kernel(int(p["length"]), angle))
    if kind == "defocus_blur":
        return convolve_image(img, defocus_kernel(p["radius"]))
    if kind == "horizontal_flip":
        return img[:, ::-1].copy()
    if kind == "vertical_flip":
        return img[::-1].copy()
    if kind == "rotate90":
        turns = p.get("quarter_turns")
        if turns is None:
            turns = int(rng.integers(1, 4))
        return np.rot90(img, k=turns, axes=(0, 1)).copy()
    raise ValueError(kind)


def apply_blur(img: np.ndarray, spec: TransformSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply a blur spec unconditionally (its probability is ignored)."""
    if spec.kind not in BLUR_KINDS + ("one_of",):
        raise ValueError(f"{spec.kind!r} is not a blur")
    return _apply_spec(check_image(img), spec, rng or np.random.default_rng(0))


# ---------------------------------------------------------------- blur strength


@lru_cache(maxsize=1)
def reference_texture() -> np.ndarray:
    """Fixed 48x48 gray texture used to map sharpness ratios to a gaussian sigma."""
    rng = np.random.default_rng(20240531)
    tex = rng.uniform(0.2, 0.8, size=(48, 48))
    tex = np.repeat(tex[:, :, None], 3, axis=2)
    tex.setflags(write=False)
    return tex


def _reference_ratio(sigma: float) -> float:
    tex = reference_texture()
    base = laplacian_variance(tex[..., 0])
    return laplacian_variance(gaussian_blur(tex, sigma)[..., 0]) / base


def estimate_blur_strength(source: SharpnessStats, target_aggregate: SharpnessStats, tol: float = 0.01) -> float:
    """Gaussian sigma whose Laplacian-variance attenuation matches target/source.

    Returns 0 when the target is at least as sharp as the source. The ratio is
    matched on :func:`reference_texture` by bisection over ``[0, 5]``; a ratio
    not reachable within that range clamps to 5.
    """
    if source.laplacian_variance <= 0 or target_aggregate.laplacian_variance >= source.laplacian_variance:
        return 0.0
    ratio = target_aggregate.laplacian_variance / source.laplacian_variance
    if _reference_ratio(MAX_BLUR_SIGMA) >= ratio:
        return MAX_BLUR_SIGMA
    lo, hi = 0.0, MAX_BLUR_SIGMA
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        r = _reference_ratio(mid)
        if abs(r - ratio) <= tol * ratio:
            return mid
        if r > ratio:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class TransformPipeline:
    specs: tuple[TransformSpec, ...]
    master_seed: int = 0

    def __post_init__(self):
        for s in self.specs:
            for leaf in (s.choices or (s,)):
                if leaf.kind not in KINDS:
                    raise ValueError(leaf.kind)

    def with_probability(self, p: float) -> "TransformPipeline":
        return TransformPipeline(tuple(s.with_probability(p) for s in self.specs), self.master_seed)

    def to_dict(self) -> dict:
        return {"master_seed": self.master_seed, "transforms": [s.to_dict() for s in self.specs]}

    @classmethod
    def from_dict(cls, d: dict) -> "TransformPipeline":
        return cls(tuple(TransformSpec.from_dict(s) for s in d["transforms"]), int(d["master_seed"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TransformPipeline":
        return cls.from_dict(json.loads(text))


def build_pipeline(
    profile: CalibrationProfile,
    source_sharpness: SharpnessStats,
    master_seed: int,
    probability: float = 0.5,
) -> TransformPipeline:
    """Color transfer toward the profile, one blur of calibrated strength, flips, rotations."""
    sigma = estimate_blur_strength(source_sharpness, profile.aggregate_sharpness)
    blur = TransformSpec(
        "one_of",
        probability,
        choices=(
            TransformSpec("gaussian_blur", 1.0, {"sigma": sigma}),
            TransformSpec("motion_blur", 1.0, {"length": int(math.ceil(2 * sigma)) + 1, "angle": None}),
            TransformSpec("defocus_blur", 1.0, {"radius": sigma}),
        ),
    )
    specs = (
        TransformSpec("color_transfer", probability, {"target": profile.aggregate_color}),
        blur,
        TransformSpec("horizontal_flip", probability),
        TransformSpec("vertical_flip", probability),
        TransformSpec("rotate90", probability, {"quarter_turns": None}),
    )
    return TransformPipeline(specs, int(master_seed))


def build_generic_pipeline(
    profile: CalibrationProfile,
    master_seed: int,
    blur_sigma: float = 1.0,
    probability: float = 0.5,
) -> TransformPipeline:
    """Untargeted augmentation from a dataset's own statistics.

    Color transfer moves each image toward the color moments of a randomly
    drawn profile member; blurs use a fixed strength.
    """
    sigma = float(blur_sigma)
    blur = TransformSpec(
        "one_of",
        probability,
        choices=(
            TransformSpec("gaussian_blur", 1.0, {"sigma": sigma}),
            TransformSpec("motion_blur", 1.0, {"length": int(math.ceil(2 * sigma)) + 1, "angle": None}),
            TransformSpec("defocus_blur", 1.0, {"radius": sigma}),
        ),
    )
    specs = (
        TransformSpec("color_transfer", probability, {"targets": tuple(c for c, _ in profile.per_image)}),
        blur,
        TransformSpec("horizontal_flip", probability),
        TransformSpec("vertical_flip", probability),
        TransformSpec("rotate90", probability, {"quarter_turns": None}),
    )
    return TransformPipeline(specs, int(master_seed))


def _rng(master_seed: int, sample_index: int, position: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed & (2**64 - 1), sample_index, position]))


def pipeline_apply(pipeline: TransformPipeline, img: np.ndarray, sample_index: int) -> np.ndarray:
    """Apply each spec with its probability; randomness keyed by (seed, index, position)."""
    out = check_image(img)
    for pos, spec in enumerate(pipeline.specs):
        rng = _rng(pipeline.master_seed, int(sample_index), pos)
        if rng.random() < spec.probability:
            out = _apply_spec(out, spec, rng)
    return out


def fired(pipeline: TransformPipeline, sample_index: int) -> list[bool]:
    """Which specs fire for ``sample_index`` (same draws as :func:`pipeline_apply`)."""
    return [
        _rng(pipeline.master_seed, int(sample_index), pos).random() < spec.probability
        for pos, spec in enumerate(pipeline.specs)
    ]


def apply_many(pipeline: TransformPipeline, images: Sequence[np.ndarray], sample_ids: Sequence[int]) -> np.ndarray:
    return np.stack([pipeline_apply(pipeline, img, int(i)) for img, i in zip(images, sample_ids)])
