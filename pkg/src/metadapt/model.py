"""Small convolutional encoder with a linear classifier head, plus checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, ParameterSet, Tensor
from .losses import cross_entropy
from .seeding import rng_for

CHECKPOINT_MAGIC = b"MDACKPT1"


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 32
    channels: tuple[int, ...] = (8, 16, 32)
    strides: tuple[int, ...] = (2, 2, 2)
    embedding_dim: int = 32
    num_classes: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if not self.channels or len(self.channels) != len(self.strides):
            raise ValueError("need at least one conv block and one stride per block")
        if self.embedding_dim < 2 or self.num_classes < 2 or self.input_size < 3:
            raise ValueError("embedding_dim and num_classes must be >= 2, input_size >= 3")

    @property
    def has_projection(self) -> bool:
        return self.embedding_dim != self.channels[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def encoder_param_names(cfg: EncoderConfig) -> list[str]:
    names = []
    for i in range(len(cfg.channels)):
        names += [f"conv{i}.weight", f"conv{i}.bias"]
    if cfg.has_projection:
        names.append("proj.weight")
    return names


def init_head(cfg: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    rng = rng_for(seed, "head-init")
    scale = np.sqrt(1.0 / cfg.embedding_dim)
    return {
        "head.weight": rng.normal(0.0, scale, size=(cfg.embedding_dim, cfg.num_classes)),
        "head.bias": np.zeros(cfg.num_classes),
    }


def init_params(cfg: EncoderConfig, seed: int) -> ParameterSet:
    """He-normal conv weights, zero biases, seeded."""
    rng = rng_for(seed, "encoder-init")
    arrays: dict[str, np.ndarray] = {}
    c_in = 3
    for i, c_out in enumerate(cfg.channels):
        fan_in = c_in * 9
        arrays[f"conv{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, 3, 3))
        arrays[f"conv{i}.bias"] = np.zeros(c_out)
        c_in = c_out
    if cfg.has_projection:
        arrays["proj.weight"] = rng.normal(0.0, np.sqrt(1.0 / c_in), size=(c_in, cfg.embedding_dim))
    arrays.update(init_head(cfg, seed))
    return ParameterSet(arrays)


class Forward(NamedTuple):
    embeddings: Tensor
    logits: Tensor


def _input_tensor(images: np.ndarray, cfg: EncoderConfig) -> Tensor:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != (cfg.input_size, cfg.input_size, 3):
        raise ContractViolation(
            f"expected images of shape (N, {cfg.input_size}, {cfg.input_size}, 3), got {images.shape}"
        )
    return ad.constant((images.transpose(0, 3, 1, 2) - 0.5) * 2.0)


def encoder_forward(params: Mapping[str, Tensor] | ParameterSet, images: np.ndarray, cfg: EncoderConfig) -> Forward:
    """Conv blocks -> global average pool -> (projection) -> embedding -> logits.

    Embeddings are returned unnormalized; the contrastive losses normalize them.
    """
    if isinstance(params, ParameterSet):
        params = {k: ad.constant(v) for k, v in params.items()}
    h = _input_tensor(images, cfg)
    for i, stride in enumerate(cfg.strides):
        w, b = params[f"conv{i}.weight"], params[f"conv{i}.bias"]
        h = ad.conv2d(h, w, stride=stride, padding=1)
        h = ad.relu(ad.add(h, ad.reshape(b, (1, -1, 1, 1))))
    emb = ad.mean(h, axis=(2, 3))
    if cfg.has_projection:
        emb = ad.matmul(emb, params["proj.weight"])
    logits = ad.add(ad.matmul(emb, params["head.weight"]), params["head.bias"])
    return Forward(emb, logits)


def normalized_embeddings(params, images: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    emb = encoder_forward(params, images, cfg).embeddings
    return ad.normalize_rows(emb).data


def predict_logits(params: ParameterSet, images: np.ndarray, cfg: EncoderConfig, chunk: int = 256) -> np.ndarray:
    out = [encoder_forward(params, images[i : i + chunk], cfg).logits.data for i in range(0, len(images), chunk)]
    return np.concatenate(out)


def predict(params: ParameterSet, images: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    return predict_logits(params, images, cfg).argmax(axis=1)


def classification_loss_fn(cfg: EncoderConfig):
    """``loss_fn(leaves, (images, labels))`` for the encoder's cross-entropy."""

    def loss_fn(leaves, batch):
        images, labels = batch
        return cross_entropy(encoder_forward(leaves, images, cfg).logits, labels)

    return loss_fn


def weighted_classification_loss_fn(cfg: EncoderConfig):
    """Weighted sum of per-batch cross-entropies computed in one forward pass."""

    def fn(leaves, batches, weights):
        images = np.concatenate([b[0] for b in batches])
        logits = encoder_forward(leaves, images, cfg).logits
        root, values, start = None, [], 0
        for (imgs, labels), w in zip(batches, weights):
            part = ad.take_rows(logits, slice(start, start + len(imgs)))
            ce = cross_entropy(part, labels)
            values.append(ce.item())
            term = ad.multiply(ce, w)
            root = term if root is None else ad.add(root, term)
            start += len(imgs)
        return root, values

    return fn


# ---------------------------------------------------------------- checkpoints


def config_digest(config: Mapping) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


@dataclass
class Checkpoint:
    params: ParameterSet
    encoder: EncoderConfig
    train_config: dict
    history: list[str]
    epoch: int = 0
    metrics: dict = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.history:
            raise ValueError("checkpoint history must name at least one training domain")
        expected = set(encoder_param_names(self.encoder)) | {"head.weight", "head.bias"}
        if set(self.params) != expected:
            raise ValueError(f"parameter names {sorted(self.params)} do not fit the encoder config")
        head = self.params["head.weight"].shape
        if head != (self.encoder.embedding_dim, self.encoder.num_classes):
            raise ValueError(f"head shape {head} inconsistent with encoder config")

    @property
    def config_digest(self) -> str:
        return config_digest(self.train_config)

    def header(self) -> dict:
        return {
            "format": "metadapt-checkpoint",
            "version": 1,
            "encoder": self.encoder.to_dict(),
            "train_config": self.train_config,
            "config_digest": self.config_digest,
            "history": list(self.history),
            "epoch": self.epoch,
            "metrics": self.metrics,
            "log": self.log,
            "warnings": self.warnings,
            "parameters": [{"name": k, "shape": list(v.shape)} for k, v in self.params.items()],
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode()
        blocks = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in self.params.values())
        return CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + blocks

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:8] != CHECKPOINT_MAGIC:
            raise ValueError("not a metadapt checkpoint")
        (n,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16 : 16 + n].decode())
        offset = 16 + n
        arrays = {}
        for entry in header["parameters"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
            offset += 8 * count
        if offset != len(raw):
            raise ValueError("checkpoint has trailing or missing parameter bytes")
        return cls(
            ParameterSet(arrays),
            EncoderConfig.from_dict(header["encoder"]),
            header["train_config"],
            list(header["history"]),
            int(header["epoch"]),
            header.get("metrics", {}),
            header.get("log", []),
            header.get("warnings", []),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def params_with_head(params: ParameterSet, cfg: EncoderConfig, seed: int) -> ParameterSet:
    """Replace the classifier head with a fresh one sized for ``cfg.num_classes``."""
    arrays = {k: v for k, v in params.items() if not k.startswith("head.")}
    arrays.update(init_head(cfg, seed))
    return ParameterSet(arrays)

