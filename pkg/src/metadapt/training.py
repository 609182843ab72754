"""Training regimes: naive, fine-tuning (with or without random augmentation),
contrastive pre-training, and guided-tuning."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet
from .evaluation import compute_metrics
from .imaging import build_calibration_profile
from .losses import EmbeddingBatch, GuidedLossConfig, guided_total_loss, loss_and_grad, multi_positive_infonce_batch
from .metadomain import (
    InsufficientCalibrationError,
    LabeledDataset,
    assemble_adapt_batch,
    build_meta_domains,
    partition_meta_domains,
    sample_calibration,
    source_sharpness,
)
from .model import (
    Checkpoint,
    EncoderConfig,
    classification_loss_fn,
    encoder_forward,
    init_params,
    params_with_head,
    predict,
    weighted_classification_loss_fn,
)
from .seeding import derive_seed, rng_for
from .transforms import TransformPipeline, build_generic_pipeline, pipeline_apply

log = logging.getLogger(__name__)

REGIMES = ("naive", "finetune", "ct_pretrain", "finetune_random_augment", "guided")


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "naive"
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.1
    seed: int = 0
    n_views: int = 4
    temperature: float = 0.1
    standard_denominator: bool = False
    guided: GuidedLossConfig = field(default_factory=GuidedLossConfig)
    calibration_fraction: float = 0.15
    adapt_source_batch: int = 3
    augment_probability: float = 0.5
    generic_blur_sigma: float = 1.0
    freeze_encoder: bool = False
    # the mirrored reconstruction decoder is not implemented; must stay False
    reconstruction_decoder: bool = False

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.n_views < 1:
            raise ValueError("epochs >= 0, batch_size >= 1, lr >= 0 and n_views >= 1 required")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if not 0 < self.calibration_fraction <= 1:
            raise ValueError("calibration_fraction must lie in (0, 1]")
        if self.adapt_source_batch < 1:
            raise ValueError("adapt_source_batch must be >= 1")
        if self.reconstruction_decoder:
            raise ValueError("the reconstruction decoder is not part of this implementation")
        if isinstance(self.guided, Mapping):
            object.__setattr__(self, "guided", GuidedLossConfig(**self.guided))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**dict(d))


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Shuffled minibatch index arrays for one epoch, keyed only by (seed, epoch)."""
    perm = rng_for(seed, "batches", epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _grads_without_encoder(grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v for k, v in grads.items() if k.startswith("head.")}


def _snapshot(params: ParameterSet, enc: EncoderConfig, ds: LabeledDataset, split: str = "test") -> dict:
    part = ds.split(split)
    if len(part) == 0 or part.class_count != enc.num_classes:
        return {}
    m = compute_metrics(predict(params, part.images, enc), part.labels, part.class_count)
    return {"domain": ds.domain_name, "split": split, **m.summary()}


def _epoch_row(epoch: int, params: ParameterSet, enc: EncoderConfig, ds: LabeledDataset, role: str, loss: float) -> dict:
    row = {"epoch": epoch, "role": role, "domain": ds.domain_name, "train_loss": loss}
    val = ds.split("val") if len(ds.indices("val")) else None
    if val is not None and val.class_count == enc.num_classes:
        m = compute_metrics(predict(params, val.images, enc), val.labels, val.class_count)
        row.update({"val_accuracy": m.accuracy, "val_f1": m.f1})
    return row


def _resolve_init(
    dataset: LabeledDataset, init: Checkpoint | None, cfg: TrainConfig, encoder: EncoderConfig | None
) -> tuple[ParameterSet, EncoderConfig, list[str], list[str], int]:
    warnings: list[str] = []
    if init is None:
        enc = encoder or EncoderConfig(num_classes=dataset.class_count)
        if enc.num_classes != dataset.class_count:
            enc = replace(enc, num_classes=dataset.class_count)
        return init_params(enc, cfg.seed), enc, [], warnings, 0
    enc, params = init.encoder, init.params
    if enc.num_classes != dataset.class_count:
        warnings.append(
            f"head reinitialized: checkpoint has {enc.num_classes} classes, {dataset.domain_name} has {dataset.class_count}"
        )
        log.warning(warnings[-1])
        enc = replace(enc, num_classes=dataset.class_count)
        params = params_with_head(params, enc, cfg.seed)
    return params, enc, list(init.history), warnings, init.epoch


def _augment(pipe: TransformPipeline | None, images: np.ndarray, ids: np.ndarray) -> np.ndarray:
    if pipe is None:
        return images
    return np.stack([pipeline_apply(pipe, img, int(i)) for img, i in zip(images, ids)])


def generic_pipeline(dataset: LabeledDataset, cfg: TrainConfig, tag: str) -> TransformPipeline:
    train = dataset.images[dataset.indices("train")]
    profile = build_calibration_profile(list(train))
    return build_generic_pipeline(profile, derive_seed(cfg.seed, tag), cfg.generic_blur_sigma, cfg.augment_probability)


def train_supervised(
    dataset: LabeledDataset,
    init: Checkpoint | None,
    cfg: TrainConfig,
    encoder: EncoderConfig | None = None,
    resume: bool = False,
) -> Checkpoint:
    """Minibatch SGD on cross-entropy over the training split.

    ``init=None`` trains from a seeded random init (naive); a checkpoint
    fine-tunes it. Regime ``finetune_random_augment`` passes every batch
    through a generic self-profile pipeline. With ``resume=True`` epoch
    numbering continues from the checkpoint so a split run replays an
    uninterrupted one.
    """
    params, enc, history, warnings, start_epoch = _resolve_init(dataset, init, cfg, encoder)
    if not resume:
        start_epoch = 0
    loss_fn = classification_loss_fn(enc)
    train_idx = dataset.indices("train")
    if len(train_idx) == 0:
        raise ValueError(f"{dataset.domain_name} has no training samples")
    pipe = generic_pipeline(dataset, cfg, "random-augment") if cfg.regime == "finetune_random_augment" else None
    rows = list(init.log) if (resume and init is not None) else []
    n = len(train_idx)
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        losses = []
        for batch in epoch_batches(n, cfg.batch_size, cfg.seed, epoch):
            idx = train_idx[batch]
            images = _augment(pipe, dataset.images[idx], epoch * len(dataset) + idx)
            params, value = naive_step(params, (images, dataset.labels[idx]), cfg, loss_fn)
            losses.append(value)
        rows.append(_epoch_row(epoch + 1, params, enc, dataset, "train", float(np.mean(losses))))
    if not history or history[-1] != dataset.domain_name:
        history.append(dataset.domain_name)
    return Checkpoint(
        params,
        enc,
        cfg.to_dict(),
        history,
        start_epoch + cfg.epochs,
        _snapshot(params, enc, dataset),
        rows,
        (list(init.warnings) if init is not None else []) + warnings,
    )


def _contrastive_views(pipe: TransformPipeline, images: np.ndarray, ids: np.ndarray, n_views: int, stride: int) -> np.ndarray:
    views = np.empty((len(images), n_views) + images.shape[1:])
    for v in range(n_views):
        views[:, v] = _augment(pipe, images, ids + v * stride)
    return views


def ct_pretrain(
    dataset: LabeledDataset,
    cfg: TrainConfig,
    encoder: EncoderConfig | None = None,
    init: Checkpoint | None = None,
) -> Checkpoint:
    """Unsupervised multi-view contrastive training of the encoder.

    Each anchor gets ``n_views`` augmentations from a pipeline fitted to the
    dataset's own statistics; labels are never read and the classifier head
    keeps its initial values.
    """
    params, enc, history, warnings, _ = _resolve_init(dataset, init, cfg, encoder)
    train_idx = dataset.indices("train")
    if len(train_idx) < 2:
        raise ValueError("contrastive pre-training needs at least two samples (no negatives otherwise)")
    pipe = generic_pipeline(dataset, cfg, "contrastive-views")
    n, total = len(train_idx), len(dataset)
    rows = []
    for epoch in range(cfg.epochs):
        losses = []
        for batch in epoch_batches(n, cfg.batch_size, cfg.seed, epoch):
            if len(batch) < 2:
                continue
            idx = train_idx[batch]
            images = dataset.images[idx]
            ids = epoch * total * cfg.n_views + idx
            views = _contrastive_views(pipe, images, ids, cfg.n_views, total)
            stacked = np.concatenate([images, views.reshape((-1,) + images.shape[1:])])
            leaves = params.leaves()
            emb = encoder_forward(leaves, stacked, enc).embeddings
            b, d = len(idx), emb.shape[1]
            originals = ad.take_rows(emb, slice(0, b))
            view_emb = ad.reshape(ad.take_rows(emb, slice(b, None)), (b, cfg.n_views, d))
            loss = multi_positive_infonce_batch(
                EmbeddingBatch(originals, view_emb, cfg.temperature), cfg.standard_denominator
            )
            grads = ad.backward(loss, leaves)
            params = ad.sgd_step(params, grads, cfg.lr)
            losses.append(loss.item())
        rows.append({"epoch": epoch + 1, "role": "pretrain", "domain": dataset.domain_name, "train_loss": float(np.mean(losses))})
    if not history or history[-1] != dataset.domain_name:
        history.append(dataset.domain_name)
    return Checkpoint(params, enc, cfg.to_dict(), history, cfg.epochs, {}, rows, warnings)


@dataclass
class GuidedSetup:
    calibration: np.ndarray
    partitions: list[np.ndarray]
    meta_domains: list


def prepare_guidance(source: LabeledDataset, target: LabeledDataset, cfg: TrainConfig) -> GuidedSetup:
    cal = sample_calibration(target, cfg.calibration_fraction, derive_seed(cfg.seed, "cal"))
    if len(cal) < cfg.guided.k:
        raise InsufficientCalibrationError(
            f"calibration subset of {len(cal)} cannot fill K={cfg.guided.k} meta-domains; raise calibration_fraction"
        )
    parts = partition_meta_domains(cal, cfg.guided.k, derive_seed(cfg.seed, "partition"))
    metas = build_meta_domains(
        source, target, parts, source_sharpness(source), derive_seed(cfg.seed, "meta"), cfg.augment_probability
    )
    return GuidedSetup(cal, parts, metas)


def adapt_batches_for_step(step: int, source: LabeledDataset, target: LabeledDataset, setup: GuidedSetup, cfg: TrainConfig) -> list:
    """K adapt batches for optimizer step ``step``; batch j comes from meta-domain (step + j) mod K."""
    k = cfg.guided.k
    src_train = source.indices("train")
    out = []
    for j in range(k):
        pick = src_train[rng_for(cfg.seed, "adapt-src", step, j).integers(len(src_train), size=cfg.adapt_source_batch)]
        ab = assemble_adapt_batch(
            source.images[pick],
            source.labels[pick],
            step * k * len(source) + j * len(source) + pick,
            target,
            setup.calibration,
            setup.meta_domains,
            iteration=step,
            seed=derive_seed(cfg.seed, "adapt"),
            meta_domain=(step + j) % k,
        )
        out.append((ab.images, ab.labels))
    return out


def naive_step(params: ParameterSet, batch, cfg: TrainConfig, loss_fn) -> tuple[ParameterSet, float]:
    value, grads = loss_and_grad(params, batch, loss_fn)
    if cfg.freeze_encoder:
        grads = _grads_without_encoder(grads)
    return ad.sgd_step(params, grads, cfg.lr), value


def guided_step(params, target_batch, step, source, target, setup, cfg, loss_fn, fused=None):
    """One guided-tuning update; without guidance (both betas zero) it is exactly :func:`naive_step`."""
    adapt = adapt_batches_for_step(step, source, target, setup, cfg) if setup is not None else []
    res = guided_total_loss(params, target_batch, adapt, cfg.guided, loss_fn, fused)
    return ad.sgd_step(params, res.grads, cfg.lr), res


def guided_tune(
    source_ckpt: Checkpoint,
    source: LabeledDataset,
    target: LabeledDataset,
    cfg: TrainConfig,
    label_map: Mapping[int, int] | None = None,
) -> Checkpoint:
    """Adapt ``source_ckpt`` to ``target`` under the guided objective.

    Target minibatches follow exactly the schedule of :func:`train_supervised`.
    For every step, K adapt batches (one per meta-domain, rotating which one
    leads) mix calibration-guided source images with calibration samples.
    """
    if label_map is not None:
        target = target.relabel(dict(label_map), source.class_count)
    elif target.class_count != source.class_count:
        raise ValueError("source and target class spaces differ; supply an explicit label map")
    if source_ckpt.encoder.num_classes != source.class_count:
        raise ValueError("source checkpoint was not trained on the source class space")
    params, enc = source_ckpt.params, source_ckpt.encoder
    loss_fn = classification_loss_fn(enc)
    fused = weighted_classification_loss_fn(enc)
    gcfg = cfg.guided
    setup = prepare_guidance(source, target, cfg) if gcfg.active else None

    train_idx = target.indices("train")
    n = len(train_idx)
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        totals = []
        for batch in epoch_batches(n, cfg.batch_size, cfg.seed, epoch):
            idx = train_idx[batch]
            params, res = guided_step(params, (target.images[idx], target.labels[idx]), step, source, target, setup, cfg, loss_fn, fused)
            totals.append(res.total)
            step += 1
        row = _epoch_row(epoch + 1, params, enc, target, "target", float(np.mean(totals)))
        src_row = _epoch_row(epoch + 1, params, enc, source, "source", float("nan"))
        row.update({f"source_{k}": v for k, v in src_row.items() if k.startswith("val_")})
        rows.append(row)

    history = list(source_ckpt.history)
    if history[-1] != target.domain_name:
        history.append(target.domain_name)
    return Checkpoint(
        params,
        enc,
        cfg.to_dict(),
        history,
        cfg.epochs,
        _snapshot(params, enc, target),
        rows,
        list(source_ckpt.warnings),
    )
