"""Training objectives.

* :func:`contrastive_loss` - pairwise InfoNCE; the denominator runs over the
  whole batch, anchor included.
* :func:`multi_positive_infonce` - anchor plus N augmented views against the
  other samples' originals. The positive is *not* part of the denominator, so
  the value can be negative; ``standard_denominator=True`` adds it back.
* :func:`cross_entropy` - mean negative log-likelihood under softmax.
* :func:`guided_total_loss` - target loss plus beta-weighted losses at K
  inner-step parameter sets, with first-order meta-gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, ParameterSet, Tensor

LossFn = Callable[[Mapping[str, Tensor], Any], Tensor]

_MASKED = -1e30


@dataclass(frozen=True)
class EmbeddingBatch:
    """Originals ``(n, d)`` and per-sample views ``(n, N, d)`` (views may be absent)."""

    originals: Tensor
    views: Tensor | None = None
    temperature: float = 0.1

    def __post_init__(self):
        if not self.temperature > 0:
            raise ContractViolation("temperature must be > 0")
        if self.originals.data.ndim != 2:
            raise ContractViolation("originals must be (n, d)")
        if self.views is not None:
            v = self.views.shape
            if len(v) != 3 or v[0] != self.originals.shape[0] or v[2] != self.originals.shape[1] or v[1] < 1:
                raise ContractViolation(f"views shape {v} does not match originals {self.originals.shape}")

    @property
    def size(self) -> int:
        return self.originals.shape[0]

    @property
    def n_views(self) -> int:
        return 0 if self.views is None else self.views.shape[1]


def _row(x: Tensor, i: int) -> Tensor:
    return ad.take_rows(x, i)


def contrastive_loss(i: int, j: int, batch: EmbeddingBatch) -> Tensor:
    """``-log exp(s_ij/t) / sum_k exp(s_ik/t)`` with k over the whole batch."""
    n = batch.size
    if i == j:
        raise ContractViolation("anchor and positive must differ")
    if n < 2 or not (0 <= i < n and 0 <= j < n):
        raise ContractViolation("indices out of range or batch too small")
    z = batch.originals
    zi = _row(z, i)
    sims = ad.stack([ad.cosine_similarity(zi, _row(z, k)) for k in range(n)])
    logits = ad.multiply(sims, 1.0 / batch.temperature)
    return ad.add(ad.logsumexp(logits), ad.multiply(_row(logits, j), -1.0))


def multi_positive_infonce(i: int, batch: EmbeddingBatch, standard_denominator: bool = False) -> Tensor:
    """Multi-positive loss for anchor ``i`` with weight ``1/(N+1)`` per term.

    Term ``k=0`` pairs the anchor with itself; terms ``k=1..N`` use its views.
    Each term's denominator sums over the originals of the other samples.
    """
    n, nv = batch.size, batch.n_views
    if nv < 1:
        raise ContractViolation("multi-positive loss needs at least one view per sample")
    if n < 2:
        raise ContractViolation("no negatives: batch has a single sample")
    z = batch.originals
    zi = _row(z, i)
    views_i = _row(batch.views, i)
    candidates = [zi] + [_row(views_i, k) for k in range(nv)]
    others = [j for j in range(n) if j != i]
    inv_t = 1.0 / batch.temperature
    terms = []
    for v in candidates:
        pos = ad.multiply(ad.cosine_similarity(v, zi), inv_t)
        den_idx = list(range(n)) if standard_denominator else others
        neg = ad.multiply(ad.stack([ad.cosine_similarity(v, _row(z, j)) for j in den_idx]), inv_t)
        terms.append(ad.add(pos, ad.multiply(ad.logsumexp(neg), -1.0)))
    alpha = 1.0 / (nv + 1)
    return ad.multiply(ad.sum(ad.stack(terms)), -alpha)


def multi_positive_infonce_batch(batch: EmbeddingBatch, standard_denominator: bool = False) -> Tensor:
    """Mean of :func:`multi_positive_infonce` over all anchors, vectorized."""
    n, nv = batch.size, batch.n_views
    if nv < 1:
        raise ContractViolation("multi-positive loss needs at least one view per sample")
    if n < 2:
        raise ContractViolation("no negatives: batch has a single sample")
    d = batch.originals.shape[1]
    z = ad.normalize_rows(batch.originals)
    views = ad.normalize_rows(ad.reshape(batch.views, (n * nv, d)))
    # per anchor: [z_i, v_i1 .. v_iN]
    cand = ad.reshape(ad.concat([ad.reshape(z, (n, 1, d)), ad.reshape(views, (n, nv, d))], axis=1), (n * (nv + 1), d))
    inv_t = 1.0 / batch.temperature
    sims = ad.multiply(ad.matmul(cand, ad.transpose(z)), inv_t)  # (n*(N+1), n)
    owner = np.repeat(np.arange(n), nv + 1)
    self_mask = owner[:, None] == np.arange(n)[None, :]
    pos = ad.sum(ad.multiply(sims, self_mask.astype(np.float64)), axis=1)
    den_logits = sims if standard_denominator else ad.add(sims, np.where(self_mask, _MASKED, 0.0))
    terms = ad.add(pos, ad.multiply(ad.logsumexp(den_logits, axis=1), -1.0))
    return ad.multiply(ad.mean(terms), -1.0)


def cross_entropy(logits: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or logits.shape[0] != len(labels):
        raise ContractViolation(f"logits {logits.shape} do not match {len(labels)} labels")
    c = logits.shape[1]
    if len(labels) == 0 or labels.min() < 0 or labels.max() >= c:
        raise ContractViolation(f"labels must lie in 0..{c - 1}")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = ad.sum(ad.multiply(ad.log_softmax(logits, axis=1), onehot), axis=1)
    return ad.multiply(ad.mean(picked), -1.0)


# ---------------------------------------------------------------- guided tuning


@dataclass(frozen=True)
class GuidedLossConfig:
    beta1: float = 0.5
    beta2: float = 0.5
    k: int = 2
    inner_lr: float = 0.05

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("beta weights must be >= 0")
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if not self.inner_lr >= 0:
            raise ValueError("inner_lr must be >= 0")

    @property
    def active(self) -> bool:
        return self.beta1 > 0 or self.beta2 > 0


def loss_and_grad(params: ParameterSet, batch, loss_fn: LossFn) -> tuple[float, dict[str, np.ndarray]]:
    leaves = params.leaves()
    root = loss_fn(leaves, batch)
    return root.item(), ad.backward(root, leaves)


def inner_meta_step(params: ParameterSet, adapt_batch, inner_lr: float, loss_fn: LossFn) -> ParameterSet:
    """One SGD step on the adapt batch; the result is a plain (detached) parameter set."""
    if inner_lr == 0:
        return params
    _, grads = loss_and_grad(params, adapt_batch, loss_fn)
    return ad.sgd_step(params, grads, inner_lr)


@dataclass
class GuidedLoss:
    """Value of the guided objective and its first-order gradient."""

    total: float
    target_term: float
    beta1_terms: list[float] = field(default_factory=list)
    beta2_terms: list[float] = field(default_factory=list)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    inner_params: list[ParameterSet] = field(default_factory=list)


def guided_total_loss(
    params: ParameterSet,
    target_batch,
    adapt_batches: Sequence,
    cfg: GuidedLossConfig,
    loss_fn: LossFn,
    weighted_loss_fn: Callable[[Mapping[str, Tensor], Sequence, Sequence[float]], tuple[Tensor, list[float]]]
    | None = None,
) -> GuidedLoss:
    """Target loss plus ``beta1/K`` target and ``beta2/K`` adapt losses at inner-step parameters.

    The gradient of each inner-step term is taken at its own inner parameters
    and applied to ``params`` directly (first-order: the inner step's Jacobian
    is treated as identity). With both betas zero only the target term is
    evaluated, so updates match plain fine-tuning bit for bit.

    ``weighted_loss_fn(leaves, batches, weights)`` may evaluate the weighted
    sum of losses over several batches in one pass, returning the root and the
    unweighted per-batch values; by default each batch goes through
    ``loss_fn`` separately.
    """
    if cfg.active and len(adapt_batches) != cfg.k:
        raise ContractViolation(f"expected {cfg.k} adapt batches, got {len(adapt_batches)}")
    target_value, grads = loss_and_grad(params, target_batch, loss_fn)
    out = GuidedLoss(total=target_value, target_term=target_value, grads=grads)
    if not cfg.active:
        return out
    w1, w2 = cfg.beta1 / cfg.k, cfg.beta2 / cfg.k
    total = dict(grads)
    for adapt in adapt_batches:
        theta_hat = inner_meta_step(params, adapt, cfg.inner_lr, loss_fn)
        out.inner_params.append(theta_hat)
        leaves = theta_hat.leaves()
        if weighted_loss_fn is not None:
            root, (v1, v2) = weighted_loss_fn(leaves, (target_batch, adapt), (w1, w2))
        else:
            l1 = loss_fn(leaves, target_batch)
            l2 = loss_fn(leaves, adapt)
            v1, v2 = l1.item(), l2.item()
            root = ad.add(ad.multiply(l1, w1), ad.multiply(l2, w2))
        g = ad.backward(root, leaves)
        for name in total:
            total[name] = total[name] + g[name]
        out.beta1_terms.append(v1)
        out.beta2_terms.append(v2)
    out.total = target_value + w1 * float(np.sum(out.beta1_terms)) + w2 * float(np.sum(out.beta2_terms))
    out.grads = total
    return out

