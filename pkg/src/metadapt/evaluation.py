"""Metrics, the degradation suite, robustness/forgetting reports, and the synthetic benchmark."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .imaging import lab_to_rgb, rgb_to_lab
from .metadomain import LabeledDataset
from .model import Checkpoint, predict
from .seeding import derive_seed, rng_for
from .transforms import convolve_image, gaussian_blur, motion_kernel

DEGRADATION_KINDS = ("blur", "sensor_noise", "illumination_shift", "motion_blur", "overexposure")

_BLUR_SIGMA = (0.5, 1.0, 2.0)
_NOISE_STD = (0.02, 0.05, 0.1)
_GAMMA = (0.7, 0.5, 0.4)
_MOTION_LENGTH = (3, 5, 9)
_EXPOSURE = (1.3, 1.6, 2.0)


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: tuple[dict, ...]
    confusion: np.ndarray

    def summary(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall, "f1": self.f1}

    def to_dict(self) -> dict:
        return {**self.summary(), "per_class": list(self.per_class), "confusion": self.confusion.tolist()}


def compute_metrics(predictions: Sequence[int], labels: Sequence[int], num_classes: int) -> Metrics:
    """Accuracy plus macro precision/recall/F1; empty denominators count as 0."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError(f"predictions {pred.shape} and labels {true.shape} must be equal-length vectors")
    if len(true) == 0:
        raise ValueError("no samples to score")
    if min(pred.min(), true.min()) < 0 or max(pred.max(), true.max()) >= num_classes:
        raise ValueError(f"class indices must lie in 0..{num_classes - 1}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    precision = np.divide(tp, predicted, out=np.zeros(num_classes), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros(num_classes), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(num_classes), where=denom > 0)
    per_class = tuple(
        {"class": c, "precision": float(precision[c]), "recall": float(recall[c]), "f1": float(f1[c]), "support": int(support[c])}
        for c in range(num_classes)
    )
    return Metrics(
        accuracy=float(tp.sum() / len(true)),
        precision=float(precision.mean()),
        recall=float(recall.mean()),
        f1=float(f1.mean()),
        per_class=per_class,
        confusion=cm,
    )


def evaluate(ckpt: Checkpoint, dataset: LabeledDataset, split: str | None = "test") -> Metrics:
    ds = dataset.split(split) if split else dataset
    if ds.class_count != ckpt.encoder.num_classes:
        raise ValueError(
            f"checkpoint predicts {ckpt.encoder.num_classes} classes, dataset {dataset.domain_name!r} has {ds.class_count}"
        )
    return compute_metrics(predict(ckpt.params, ds.images, ckpt.encoder), ds.labels, ds.class_count)


# ---------------------------------------------------------------- degradations


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    severity: int = 1

    def __post_init__(self):
        if self.kind not in DEGRADATION_KINDS:
            raise ValueError(f"unknown degradation {self.kind!r}; expected one of {DEGRADATION_KINDS}")
        if self.severity not in (0, 1, 2, 3):
            raise ValueError("severity must be 1..3 (0 is the identity probe)")

    @property
    def label(self) -> str:
        return f"{self.kind}@{self.severity}"


def default_suite(severity: int = 2) -> list[DegradationSpec]:
    return [DegradationSpec(k, severity) for k in DEGRADATION_KINDS]


def apply_degradation(img: np.ndarray, spec: DegradationSpec, seed: int) -> np.ndarray:
    """Simulated acquisition artifact; output stays in ``[0, 1]``."""
    img = np.asarray(img, dtype=np.float64)
    if spec.severity == 0:
        return img.copy()
    s = spec.severity - 1
    rng = rng_for(seed, "degradation", spec.kind, spec.severity)
    if spec.kind == "blur":
        return gaussian_blur(img, _BLUR_SIGMA[s])
    if spec.kind == "sensor_noise":
        return np.clip(img + rng.normal(0.0, _NOISE_STD[s], size=img.shape), 0.0, 1.0)
    if spec.kind == "illumination_shift":
        gamma = _GAMMA[s] if rng.random() < 0.5 else 1.0 / _GAMMA[s]
        return np.clip(img, 0.0, 1.0) ** gamma
    if spec.kind == "motion_blur":
        return convolve_image(img, motion_kernel(_MOTION_LENGTH[s], float(rng.uniform(0.0, 180.0))))
    if spec.kind == "overexposure":
        return np.clip(img * _EXPOSURE[s], 0.0, 1.0)
    raise ValueError(spec.kind)


def degrade_dataset(dataset: LabeledDataset, spec: DegradationSpec, seed: int) -> LabeledDataset:
    imgs = np.stack([apply_degradation(img, spec, derive_seed(seed, i)) for i, img in enumerate(dataset.images)])
    return LabeledDataset(imgs, dataset.labels, dataset.splits, dataset.class_count, dataset.domain_name, dataset.paths)


# ---------------------------------------------------------------- reports


@dataclass
class RobustnessReport:
    clean: Metrics
    degraded: dict[str, Metrics] = field(default_factory=dict)

    @property
    def mean_accuracy_drop(self) -> float:
        if not self.degraded:
            return 0.0
        return float(np.mean([self.clean.accuracy - m.accuracy for m in self.degraded.values()]))

    def rows(self) -> list[dict]:
        out = [{"condition": "clean", **self.clean.summary(), "delta_accuracy": 0.0, "delta_f1": 0.0}]
        for name, m in self.degraded.items():
            out.append(
                {
                    "condition": name,
                    **m.summary(),
                    "delta_accuracy": m.accuracy - self.clean.accuracy,
                    "delta_f1": m.f1 - self.clean.f1,
                }
            )
        return out


def robustness_report(
    ckpt: Checkpoint,
    dataset: LabeledDataset,
    suite: Sequence[DegradationSpec],
    split: str | None = "test",
    seed: int = 0,
) -> RobustnessReport:
    """Clean metrics plus metrics under each degradation in ``suite``."""
    ds = dataset.split(split) if split else dataset
    report = RobustnessReport(evaluate(ckpt, ds, None))
    for spec in suite:
        report.degraded[spec.label] = evaluate(ckpt, degrade_dataset(ds, spec, seed), None)
    return report


@dataclass
class ForgettingReport:
    stages: list[str]
    domains: list[str]
    matrix: list[list[Metrics]]
    backward_transfer: dict[str, float | None]

    def accuracy_matrix(self) -> np.ndarray:
        return np.array([[m.accuracy for m in row] for row in self.matrix])

    def rows(self) -> list[dict]:
        out = []
        for stage, row in zip(self.stages, self.matrix):
            for dom, m in zip(self.domains, row):
                out.append({"stage": stage, "domain": dom, **m.summary()})
        return out


def forgetting_report(
    ckpts: Sequence[Checkpoint],
    domains: Sequence[LabeledDataset],
    split: str | None = "test",
    stage_names: Sequence[str] | None = None,
) -> ForgettingReport:
    """Stage x domain metric matrix and backward transfer of accuracy per domain.

    A domain's reference stage is the last stage whose checkpoint was most
    recently trained on it; domains never trained on get ``None``.
    """
    if not ckpts or not domains:
        raise ValueError("need at least one checkpoint and one domain")
    for c in ckpts:
        for d in domains:
            if c.encoder.num_classes != d.class_count:
                raise ValueError(
                    f"label mismatch: checkpoint has {c.encoder.num_classes} classes, domain {d.domain_name!r} {d.class_count}"
                )
    matrix = [[evaluate(c, d, split) for d in domains] for c in ckpts]
    bwt: dict[str, float | None] = {}
    for j, d in enumerate(domains):
        trained = [i for i, c in enumerate(ckpts) if c.history[-1] == d.domain_name]
        if not trained:
            bwt[d.domain_name] = None
        else:
            bwt[d.domain_name] = matrix[-1][j].accuracy - matrix[trained[-1]][j].accuracy
    names = list(stage_names) if stage_names else [f"{i}:{'>'.join(c.history)}" for i, c in enumerate(ckpts)]
    return ForgettingReport(names, [d.domain_name for d in domains], matrix, bwt)


def write_rows_csv(rows: Sequence[dict], path: str | Path) -> None:
    if not rows:
        raise ValueError("nothing to write")
    fields = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def write_confusion_csv(m: Metrics, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + [str(c) for c in range(m.confusion.shape[0])])
        for c, row in enumerate(m.confusion):
            w.writerow([str(c)] + [str(int(v)) for v in row])


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- synthetic benchmark


CLASS_NAMES = ("blob", "ring", "stripes", "cross", "dots")


@dataclass(frozen=True)
class SyntheticBenchmark:
    domain_a: LabeledDataset
    domain_b: LabeledDataset
    config: dict


def _split_tags(n_per_class: int) -> list[str]:
    n_train = int(np.floor(0.7 * n_per_class + 0.5))
    n_val = int(np.floor(0.15 * n_per_class + 0.5))
    return ["train"] * n_train + ["val"] * n_val + ["test"] * (n_per_class - n_train - n_val)


def _texture(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Foreground mask in [0, 1] for one class-conditional pattern."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.35 * size, 0.65 * size, size=2)
    r = np.hypot(yy - cy, xx - cx)
    region = float(rng.uniform(0.22, 0.32) * size)
    if cls == 0:  # blob
        return (r <= region).astype(np.float64)
    if cls == 1:  # ring
        width = rng.uniform(1.5, 2.5)
        return (np.abs(r - region) <= width).astype(np.float64)
    if cls == 2:  # stripes inside a disk
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(3.0, 4.5)
        phase = rng.uniform(0, period)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        return (((u + phase) % period) < period / 2).astype(np.float64) * (r <= region)
    if cls == 3:  # cross
        w = rng.uniform(1.5, 2.5)
        return (((np.abs(yy - cy) <= w) | (np.abs(xx - cx) <= w)) & (r <= region)).astype(np.float64)
    dots = np.zeros((size, size))  # scattered dots
    for _ in range(int(rng.integers(5, 9))):
        py, px = rng.uniform(3, size - 3, size=2)
        dots = np.maximum(dots, (np.hypot(yy - py, xx - px) <= 1.5).astype(np.float64))
    return dots


def _render(cls: int, size: int, rng: np.random.Generator, grain: float, noise_rng: np.random.Generator) -> np.ndarray:
    mask = _texture(cls, size, rng)
    bg_level = rng.uniform(0.35, 0.55)
    contrast = rng.uniform(0.2, 0.35) * (1 if rng.random() < 0.5 else -1)
    tint = rng.normal(0.0, 0.015, size=3)
    img = bg_level + tint + contrast * mask[..., None]
    img = img + noise_rng.normal(0.0, grain, size=(size, size, 1))
    return np.clip(img, 0.0, 1.0)


def shift_lab(img: np.ndarray, offset_a: float, offset_b: float) -> np.ndarray:
    lab = rgb_to_lab(img)
    lab[..., 1] += offset_a
    lab[..., 2] += offset_b
    return lab_to_rgb(lab)


def generate_synthetic_benchmark(
    seed: int,
    samples_per_class: int,
    num_classes: int = 3,
    size: int = 32,
    lab_offset: float = 8.0,
    blur_sigma: float = 1.0,
    grain: float = 0.08,
    offset_jitter: float = 1.0,
    sigma_jitter: float = 0.15,
) -> SyntheticBenchmark:
    """Two-domain benchmark: sharp neutral domain A and color-shifted, blurred domain B.

    Domain B is domain A's generator followed by an appearance shift: sample
    k of class c has the same pattern draw in both domains (film grain is
    drawn independently per domain), and B adds ``lab_offset`` to a* and b*
    and a gaussian blur of ``blur_sigma``, each with small per-image jitter.
    Splits are 70/15/15 per class.
    """
    if samples_per_class < 10:
        raise ValueError("samples_per_class must be >= 10")
    if not 2 <= num_classes <= len(CLASS_NAMES):
        raise ValueError(f"num_classes must be within 2..{len(CLASS_NAMES)}")
    tags = _split_tags(samples_per_class)
    domains = []
    for dom in ("A", "B"):
        images, labels, splits = [], [], []
        for c in range(num_classes):
            for k in range(samples_per_class):
                img = _render(c, size, rng_for(seed, "synthetic", c, k), grain, rng_for(seed, "grain", dom, c, k))
                if dom == "B":
                    rng = rng_for(seed, "synthetic-shift", c, k)
                    da, db = lab_offset + rng.normal(0, offset_jitter, size=2)
                    img = shift_lab(img, da, db)
                    img = gaussian_blur(img, max(0.0, blur_sigma + rng.uniform(-sigma_jitter, sigma_jitter)))
                images.append(img)
                labels.append(c)
                splits.append(tags[k])
        domains.append(
            LabeledDataset(np.stack(images), np.array(labels), np.array(splits, dtype=object), num_classes, f"domain_{dom.lower()}")
        )
    config = {
        "seed": seed,
        "samples_per_class": samples_per_class,
        "num_classes": num_classes,
        "size": size,
        "lab_offset": lab_offset,
        "blur_sigma": blur_sigma,
        "grain": grain,
        "offset_jitter": offset_jitter,
        "sigma_jitter": sigma_jitter,
        "class_names": list(CLASS_NAMES[:num_classes]),
    }
    return SyntheticBenchmark(domains[0], domains[1], config)
