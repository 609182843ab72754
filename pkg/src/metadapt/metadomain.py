"""Calibration subsets, meta-domain partitions, and adapt-batch assembly."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .imaging import (
    CalibrationProfile,
    EmptyCalibrationError,
    SharpnessStats,
    build_calibration_profile,
    load_image,
    save_image,
    sharpness_stats,
)
from .seeding import derive_seed, rng_for
from .transforms import TransformPipeline, build_pipeline, pipeline_apply

SPLITS = ("train", "val", "test")


class InsufficientCalibrationError(ValueError):
    pass


@dataclass
class LabeledDataset:
    """Images with class labels and a train/val/test split tag per sample."""

    images: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    class_count: int
    domain_name: str
    paths: tuple[str, ...] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=object)
        n = len(self.labels)
        if n == 0:
            raise ValueError("dataset has no samples")
        if self.images.shape[0] != n or self.splits.shape[0] != n:
            raise ValueError("images, labels and splits must have equal length")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in 0..{self.class_count - 1}")
        bad = set(self.splits.tolist()) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.labels)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def subset(self, index: Sequence[int] | np.ndarray) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        paths = tuple(self.paths[i] for i in index) if self.paths is not None else None
        return LabeledDataset(self.images[index], self.labels[index], self.splits[index], self.class_count, self.domain_name, paths)

    def split(self, name: str) -> "LabeledDataset":
        return self.subset(self.indices(name))

    def relabel(self, label_map: dict[int, int], class_count: int) -> "LabeledDataset":
        """Map labels into another class space; every label must be declared."""
        missing = set(np.unique(self.labels).tolist()) - set(label_map)
        if missing:
            raise ValueError(f"label map does not cover labels {sorted(missing)}")
        labels = np.array([label_map[int(y)] for y in self.labels])
        return LabeledDataset(self.images, labels, self.splits, class_count, self.domain_name, self.paths)


# ---------------------------------------------------------------- manifests


def read_manifest(path: str | Path, domain_name: str | None = None, class_count: int | None = None) -> LabeledDataset:
    """Load a ``path,label,split`` CSV; relative image paths resolve against the manifest's folder."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames][:3] != ["path", "label", "split"]:
            raise ValueError(f"{path}: manifest header must be 'path,label,split'")
        for row in reader:
            rows.append((row["path"].strip(), int(row["label"]), row["split"].strip()))
    if not rows:
        raise EmptyCalibrationError(f"{path}: manifest lists no images")
    images = np.stack([load_image(path.parent / p) for p, _, _ in rows])
    labels = np.array([r[1] for r in rows])
    if class_count is None:
        class_count = max(2, int(labels.max()) + 1)
    return LabeledDataset(
        images,
        labels,
        np.array([r[2] for r in rows], dtype=object),
        class_count,
        domain_name or path.parent.name,
        tuple(r[0] for r in rows),
    )


def read_manifests(paths: Sequence[str | Path], domain_name: str | None = None, class_count: int | None = None) -> LabeledDataset:
    parts = [read_manifest(p, domain_name, class_count) for p in paths]
    if class_count is None:
        class_count = max(p.class_count for p in parts)
    return LabeledDataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.splits for p in parts]),
        class_count,
        domain_name or parts[0].domain_name,
        tuple(x for p in parts for x in (p.paths or ())),
    )


def write_dataset(ds: LabeledDataset, root: str | Path) -> list[Path]:
    """Write PNGs plus one manifest per split under ``root``; returns manifest paths."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    manifests = []
    for split in SPLITS:
        idx = ds.indices(split)
        mpath = root / f"{split}.csv"
        with open(mpath, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "label", "split"])
            for i in idx:
                rel = f"images/{split}_{i:05d}.png"
                save_image(ds.images[i], root / rel)
                w.writerow([rel, int(ds.labels[i]), split])
        manifests.append(mpath)
    return manifests


# ---------------------------------------------------------------- calibration and partitions


def sample_calibration(target: LabeledDataset, fraction: float, seed: int) -> np.ndarray:
    """Indices (into ``target``) of a uniform draw from its training split."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"calibration fraction must lie in (0, 1], got {fraction}")
    train = target.indices("train")
    if len(train) == 0:
        raise EmptyCalibrationError("target dataset has no training samples")
    count = max(1, int(math.floor(fraction * len(train) + 0.5)))
    count = min(count, len(train))
    picked = rng_for(seed, "calibration").choice(len(train), size=count, replace=False)
    return np.sort(train[picked])


def partition_meta_domains(cal_indices: Sequence[int], k: int, seed: int) -> list[np.ndarray]:
    """Random disjoint split of ``cal_indices`` into ``k`` parts whose sizes differ by at most one."""
    cal = np.asarray(cal_indices, dtype=np.int64)
    if k < 1:
        raise ValueError("K must be >= 1")
    if len(cal) < k:
        raise InsufficientCalibrationError(f"{len(cal)} calibration samples cannot fill {k} meta-domains")
    perm = rng_for(seed, "partition").permutation(cal)
    return [np.sort(p) for p in np.array_split(perm, k)]


@dataclass(frozen=True)
class MetaDomain:
    id: int
    calibration_member_indices: tuple[int, ...]
    profile: CalibrationProfile
    pipeline: TransformPipeline

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "calibration_member_indices": list(self.calibration_member_indices),
            "profile": self.profile.to_dict(),
            "pipeline": self.pipeline.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetaDomain":
        return cls(
            int(d["id"]),
            tuple(int(i) for i in d["calibration_member_indices"]),
            CalibrationProfile.from_dict(d["profile"]),
            TransformPipeline.from_dict(d["pipeline"]),
        )


def dump_meta_domains(domains: Sequence[MetaDomain]) -> str:
    return json.dumps([m.to_dict() for m in domains], indent=2, sort_keys=True)


def load_meta_domains(text: str) -> list[MetaDomain]:
    return [MetaDomain.from_dict(d) for d in json.loads(text)]


def source_sharpness(source: LabeledDataset, split: str = "train") -> SharpnessStats:
    """Mean sharpness of the source images in ``split``."""
    imgs = source.images[source.indices(split)] if split else source.images
    stats = [sharpness_stats(img) for img in imgs]
    return SharpnessStats(
        float(np.mean([s.laplacian_variance for s in stats])),
        float(np.mean([s.tenengrad_mean for s in stats])),
    )


def build_meta_domains(
    source: LabeledDataset | None,
    target: LabeledDataset,
    partitions: Sequence[Sequence[int]],
    source_sharpness_stats: SharpnessStats | None,
    master_seed: int,
    probability: float = 0.5,
) -> list[MetaDomain]:
    """Fit one profile and pipeline per calibration partition."""
    if source_sharpness_stats is None:
        if source is None:
            raise ValueError("need either the source dataset or its sharpness stats")
        source_sharpness_stats = source_sharpness(source)
    out = []
    for j, members in enumerate(partitions):
        members = tuple(int(i) for i in members)
        if not members:
            raise InsufficientCalibrationError(f"meta-domain {j} has no calibration images")
        profile = build_calibration_profile([target.images[i] for i in members])
        pipe = build_pipeline(profile, source_sharpness_stats, derive_seed(master_seed, "meta-domain", j), probability)
        out.append(MetaDomain(j, members, profile, pipe))
    seen: set[int] = set()
    for m in out:
        if seen & set(m.calibration_member_indices):
            raise ValueError("meta-domain partitions overlap")
        seen |= set(m.calibration_member_indices)
    return out


# ---------------------------------------------------------------- adapt batches


@dataclass(frozen=True)
class AdaptBatch:
    """Transformed source samples interleaved 1:1 with calibration samples."""

    images: np.ndarray
    labels: np.ndarray
    from_calibration: np.ndarray
    meta_domain: int

    def __len__(self) -> int:
        return len(self.labels)


def select_meta_domain(iteration: int, k: int) -> int:
    return int(iteration) % k


def assemble_adapt_batch(
    source_images: np.ndarray,
    source_labels: np.ndarray,
    source_ids: Sequence[int],
    calibration: LabeledDataset,
    cal_indices: Sequence[int],
    meta_domains: Sequence[MetaDomain],
    iteration: int,
    seed: int,
    meta_domain: int | None = None,
) -> AdaptBatch:
    """Build one adapt batch.

    The meta-domain is ``iteration mod K`` unless given explicitly. Source
    images go through that meta-domain's pipeline with their global id as the
    sample index; calibration samples are drawn uniformly with replacement.
    """
    if len(source_labels) == 0:
        raise ValueError("empty source batch")
    if not meta_domains:
        raise ValueError("no meta-domains")
    cal_indices = np.asarray(cal_indices, dtype=np.int64)
    if len(cal_indices) == 0:
        raise EmptyCalibrationError("calibration subset is empty")
    j = select_meta_domain(iteration, len(meta_domains)) if meta_domain is None else int(meta_domain)
    pipe = meta_domains[j].pipeline
    moved = np.stack([pipeline_apply(pipe, img, int(i)) for img, i in zip(source_images, source_ids)])
    n = len(source_labels)
    draw = cal_indices[rng_for(seed, "adapt-cal", iteration, j).integers(len(cal_indices), size=n)]
    images = np.empty((2 * n,) + moved.shape[1:])
    images[0::2] = moved
    images[1::2] = calibration.images[draw]
    labels = np.empty(2 * n, dtype=np.int64)
    labels[0::2] = source_labels
    labels[1::2] = calibration.labels[draw]
    flags = np.zeros(2 * n, dtype=bool)
    flags[1::2] = True
    return AdaptBatch(images, labels, flags, j)
