"""Invariance penalties and the composed invariant objective.

Two settings share the same composition ``sum_k L_k + lambda * penalty``:

* feature mode: ``L_k`` is the margin cross-entropy on the batch samples of
  subset ``k``; minimized over encoder and classifier, summed over every
  partition in the set.
* partition mode: ``L_k`` is the supervised contrastive loss weighted by the
  soft subset memberships; maximized over the soft partition with frozen
  features.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, EmptySubset
from .losses import (
    CifpIndicators,
    MarginHead,
    cross_entropy,
    margin_backward,
    margin_forward,
    SubsetContrast,
)
from .numkit import EncoderParams, encoder_backward, encoder_forward

log = logging.getLogger(__name__)

MODES = ("irmv1", "rex")


class InvarianceUndefined(UserWarning):
    """Fewer than two subsets are populated, so the penalty is vacuous."""


@dataclass
class InvariantLossConfig:
    mode: str = "irmv1"
    lam: float = 0.05
    temperature: float = 1.0  # contrastive temperature, partition mode only

    def __post_init__(self):
        self.mode = self.mode.lower()
        if self.mode not in MODES:
            raise ConfigurationError(f"invariance mode must be one of {MODES}, got {self.mode!r}")
        if self.lam < 0:
            raise ConfigurationError("lambda must be non-negative")

    @classmethod
    def feature_default(cls) -> "InvariantLossConfig":
        return cls("irmv1", 0.05)

    @classmethod
    def partition_default(cls) -> "InvariantLossConfig":
        return cls("rex", 0.2, temperature=0.2)


def irmv1_penalty(logits, labels):
    """Squared derivative of the mean cross-entropy wrt a scalar logit multiplier at 1.

    Returns ``(penalty, grad wrt logits)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n = z.shape[0]
    if n == 0:
        raise EmptySubset("IRMv1 penalty needs at least one sample")
    _, _, p = cross_entropy(z, labels)
    resid = p.copy()
    resid[np.arange(n), labels] -= 1.0
    d = float(np.sum(resid * z) / n)
    zbar = np.sum(p * z, axis=1, keepdims=True)
    dd = (resid + p * (z - zbar)) / n
    return d * d, 2.0 * d * dd


def rex_penalty(subset_losses):
    """Population variance of the subset losses and its gradient."""
    losses = np.asarray(subset_losses, dtype=np.float64)
    k = losses.size
    if k < 2:
        raise ConfigurationError("REx penalty needs at least two subset losses")
    # centre on the first loss so equal losses give exactly zero
    shifted = losses - losses[0]
    dev = shifted - shifted.mean()
    return float(np.mean(dev * dev)), 2.0 * dev / k


@dataclass
class PartitionTerms:
    value: float
    subset_losses: dict  # subset index -> loss, populated subsets only
    penalty: float
    weighted_penalty: float


@dataclass
class FeatureObjective:
    value: float
    grad_embeddings: np.ndarray
    grad_weights: np.ndarray
    terms: list = field(default_factory=list)  # one PartitionTerms per partition


def _penalty_block(cfg: InvariantLossConfig, logits, labels, groups):
    """Loss and penalty of one partition, given (subset, row indices) groups of the batch."""
    g = np.zeros_like(logits)
    losses, loss_grads, pen_grads = {}, {}, {}
    pen = 0.0
    for k, idx in groups:
        if len(idx) == 0:
            continue
        losses[k], loss_grads[k], _ = cross_entropy(logits[idx], labels[idx])
        if cfg.mode == "irmv1":
            pk, pen_grads[k] = irmv1_penalty(logits[idx], labels[idx])
            pen += pk
    coef = {k: 1.0 for k in losses}
    if cfg.mode == "rex":
        if len(losses) >= 2:
            keys = list(losses)
            pen, gl = rex_penalty([losses[k] for k in keys])
            for k, gk in zip(keys, gl):
                coef[k] += cfg.lam * gk
        elif len(groups) >= 2:
            warnings.warn("only one populated subset in batch; REx penalty set to 0",
                          InvarianceUndefined, stacklevel=3)
    for k, idx in groups:
        if k in losses:
            g[idx] += coef[k] * loss_grads[k]
            if k in pen_grads:
                g[idx] += cfg.lam * pen_grads[k]
    total = 0.0
    for k in losses:
        total += losses[k]
    value = total + cfg.lam * pen
    return value, g, PartitionTerms(value, losses, pen, cfg.lam * pen)


def subset_groups(partition, labels):
    p = np.asarray(partition)
    labels = np.asarray(labels)
    member = p[labels] == 1
    return [(k, np.flatnonzero(member[:, k])) for k in range(p.shape[1])]


def feature_objective(head: MarginHead, embeddings, labels, partitions, cfg: InvariantLossConfig,
                      indicators: CifpIndicators | None = None) -> FeatureObjective:
    """Sum over partitions of the invariant loss on margin logits.

    An empty partition list gives the plain (whole-batch) margin loss.
    """
    labels = np.asarray(labels)
    logits, cache = margin_forward(head, embeddings, labels, indicators)
    g = np.zeros_like(logits)
    value = 0.0
    terms = []
    if not partitions:
        v, gl, _ = cross_entropy(logits, labels)
        value, g, terms = v, gl, [PartitionTerms(v, {0: v}, 0.0, 0.0)]
    for part in partitions:
        v, gp, t = _penalty_block(cfg, logits, labels, subset_groups(part, labels))
        value += v
        g += gp
        terms.append(t)
    g_emb, g_w = margin_backward(cache, g)
    return FeatureObjective(value, g_emb, g_w, terms)


def softmax_rows(a):
    a = np.asarray(a, dtype=np.float64)
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class PartitionObjective:
    value: float
    grad: np.ndarray  # wrt memberships (or raw soft matrix via partition_objective)
    subset_losses: np.ndarray
    penalty: float
    participating: np.ndarray


def membership_objective(projections, labels, membership, cfg: InvariantLossConfig,
                         frozen: SubsetContrast | None = None) -> PartitionObjective:
    """Invariant contrastive objective for identity-level memberships (C x K, rows on the simplex).

    Subsets carrying no anchor weight do not take part in the penalty. Pass
    ``frozen`` to reuse precomputed similarities across calls.
    """
    labels = np.asarray(labels)
    if frozen is None:
        frozen = SubsetContrast(projections, labels, cfg.temperature)
    mem = np.asarray(membership, dtype=np.float64)
    c, k = mem.shape
    n = len(labels)
    losses = np.zeros(k)
    loss_grads = np.zeros((k, n))
    present = np.zeros(k, dtype=bool)
    derivs, deriv_grads = np.zeros(k), np.zeros((k, n))
    for j in range(k):
        w = mem[labels, j]
        if cfg.mode == "irmv1":
            (losses[j], loss_grads[j]), (derivs[j], deriv_grads[j]) = frozen.evaluate(w, scale_derivative=True)
        else:
            losses[j], loss_grads[j] = frozen.evaluate(w)
        present[j] = np.any(w[frozen.valid] > 0)

    coef = np.ones(k)
    if cfg.mode == "rex":
        if present.sum() >= 2:
            pen, gp = rex_penalty(losses[present])
            coef[present] += cfg.lam * gp
        else:
            pen = 0.0
            if k >= 2:
                warnings.warn("fewer than two populated subsets; REx penalty set to 0",
                              InvarianceUndefined, stacklevel=2)
        sample_grad = coef[:, None] * loss_grads
    else:
        pen = float(np.sum(derivs ** 2))
        sample_grad = loss_grads + cfg.lam * 2.0 * derivs[:, None] * deriv_grads
    grad = np.stack([np.bincount(labels, weights=sample_grad[j], minlength=c) for j in range(k)], axis=1)
    value = float(np.sum(losses) + cfg.lam * pen)
    return PartitionObjective(value, grad, losses, pen, present)


def softmax_backward(probs, grad_probs):
    inner = np.sum(probs * grad_probs, axis=1, keepdims=True)
    return probs * (grad_probs - inner)


def partition_objective(projections, labels, soft, cfg: InvariantLossConfig,
                        frozen: SubsetContrast | None = None) -> PartitionObjective:
    """Objective as a function of the raw soft partition; gradient flows through the row softmax."""
    probs = softmax_rows(soft)
    res = membership_objective(projections, labels, probs, cfg, frozen)
    res.grad = softmax_backward(probs, res.grad)
    return res


def invariant_loss(params: EncoderParams, head: MarginHead | None, partition, cfg: InvariantLossConfig,
                   batch, labels, mode: str = "feature"):
    """Run the encoder on ``batch`` and evaluate the invariant objective.

    ``mode="feature"``: ``partition`` is a hard partition or a list of them;
    returns ``(value, {"encoder": EncoderParams grads, "head": class-weight grads})``.

    ``mode="partition"``: ``partition`` is the raw soft matrix; the encoder is
    frozen and the only gradient returned is wrt the soft matrix.
    """
    emb, proj, cache = encoder_forward(params, batch)
    if mode == "partition":
        res = partition_objective(proj, labels, partition, cfg)
        return res.value, {"soft": res.grad}
    if mode != "feature":
        raise ConfigurationError(f"unknown objective mode {mode!r}")
    parts = partition if isinstance(partition, (list, tuple)) else [partition]
    res = feature_objective(head, emb, labels, parts, cfg)
    enc = encoder_backward(cache, res.grad_embeddings, None)
    return res.value, {"encoder": enc, "head": res.grad_weights}
