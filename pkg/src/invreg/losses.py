"""Margin-softmax classification losses and the supervised contrastive loss.

Every loss returns its value together with analytic gradients. Reductions are
means over the samples (or anchors) that take part, so penalty weights do not
depend on batch size.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateBatch, EmptySubset, NoNegatives, PreconditionError
from .numkit import as_matrix, l2_normalize, l2_normalize_backward

log = logging.getLogger(__name__)

VARIANTS = ("arcface", "cosface", "cifp", "cifp-cosface")
GAMMA_FLOOR = 1e-6
_SIN_FLOOR = 1e-8
_UNIT_TOL = 1e-6

# defaults used by the face-recognition literature for each variant
DEFAULT_MARGINS = {"arcface": 0.4, "cifp": 0.4, "cosface": 0.35, "cifp-cosface": 0.35}


@dataclass
class MarginHead:
    """Normalized classifier with a scale and an additive margin.

    ``weights`` rows are class prototypes; they are re-normalized every time
    logits are computed, so the stored rows need not be unit norm.
    """

    weights: np.ndarray
    scale: float = 64.0
    margin: float = 0.4
    variant: str = "arcface"
    target_far: float = 1e-2
    margin_cap: float = 1.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown margin variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.scale > 0:
            raise ConfigurationError("scale must be positive")
        if self.margin < 0:
            raise ConfigurationError("margin must be non-negative")
        if not 0 < self.target_far < 1:
            raise ConfigurationError("target_far must lie in (0, 1)")
        if self.margin_cap < 0:
            raise ConfigurationError("margin_cap must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def uses_indicators(self) -> bool:
        return self.variant.startswith("cifp")

    @property
    def angular(self) -> bool:
        return self.variant in ("arcface", "cifp")


def init_head(num_classes: int, embedding_dim: int, rng=None, **kwargs) -> MarginHead:
    rng = np.random.default_rng(0) if rng is None else rng
    w = rng.standard_normal((num_classes, embedding_dim))
    return MarginHead(l2_normalize(w)[0], **kwargs)


@dataclass
class CifpIndicators:
    instance: np.ndarray  # per-sample FPR gamma_i in [0, 1]
    overall: float  # batch mean, floored at GAMMA_FLOOR
    threshold: float

    @property
    def ratio(self) -> np.ndarray:
        return self.instance / self.overall


def cifp_indicators(cosines, labels, target_far: float = 1e-2, threshold: float | None = None) -> CifpIndicators:
    """Per-instance and overall false-positive indicators for a batch.

    The threshold is the empirical ``1 - target_far`` quantile of all
    negative-class cosines in the batch unless given explicitly. An instance's
    indicator is the fraction of its negative classes scoring at or above it.
    """
    cos = np.asarray(cosines, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = cos.shape
    if c < 2:
        raise NoNegatives("a single class leaves no negative cosines")
    neg = np.ones_like(cos, dtype=bool)
    neg[np.arange(n), labels] = False
    if threshold is None:
        if not 0 < target_far < 1:
            raise ConfigurationError("target_far must lie in (0, 1)")
        threshold = float(np.quantile(cos[neg], 1.0 - target_far))
    hits = (cos >= threshold) & neg
    gamma = hits.sum(axis=1) / (c - 1)
    overall = max(float(gamma.mean()), GAMMA_FLOOR)
    return CifpIndicators(gamma, overall, float(threshold))


def _angular_shift(c, delta):
    """cos(arccos(c) + delta) with the shifted angle clamped to pi.

    Entries with ``delta == 0`` pass through unchanged (derivative exactly 1),
    so zero margins reproduce plain cosine logits bit for bit.
    """
    c = np.asarray(c, dtype=np.float64)
    delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), c.shape)
    theta = np.arccos(np.clip(c, -1.0, 1.0))
    shifted = np.minimum(theta + delta, np.pi)
    value = np.cos(shifted)
    deriv = np.sin(shifted) / np.maximum(np.sin(theta), _SIN_FLOOR)
    deriv = np.where(theta + delta >= np.pi, 0.0, deriv)
    zero = delta == 0
    return np.where(zero, c, value), np.where(zero, 1.0, deriv)


@dataclass
class MarginCache:
    embeddings: np.ndarray
    unit_weights: np.ndarray
    weight_norms: np.ndarray
    dlogit_dcos: np.ndarray
    scale: float
    cosines: np.ndarray
    indicators: CifpIndicators | None


def check_labels(labels, n, num_classes):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ConfigurationError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ConfigurationError("labels must be integers")
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigurationError(f"labels must lie in [0, {num_classes})")
    return labels.astype(np.int64)


def margin_forward(head: MarginHead, embeddings, labels, indicators: CifpIndicators | None = None):
    """Scaled margin logits plus the cache needed by :func:`margin_backward`."""
    emb = as_matrix(embeddings, cols=head.weights.shape[1], name="embeddings")
    n = emb.shape[0]
    labels = check_labels(labels, n, head.num_classes)
    norms = np.sqrt(np.sum(emb * emb, axis=1))
    if n and np.max(np.abs(norms - 1.0)) > _UNIT_TOL:
        raise PreconditionError("embeddings must be unit norm")
    wn, wnorm = l2_normalize(head.weights)
    cos = emb @ wn.T
    rows = np.arange(n)

    target_shift = np.zeros_like(cos)
    target_shift[rows, labels] = head.margin
    neg_shift = np.zeros_like(cos)
    if head.uses_indicators:
        if indicators is None:
            indicators = cifp_indicators(cos, labels, head.target_far)
        delta = np.minimum(indicators.ratio, head.margin_cap)
        neg_shift[:] = delta[:, None]
        neg_shift[rows, labels] = 0.0

    if head.angular:
        val, deriv = _angular_shift(cos, target_shift + neg_shift)
    else:
        val = cos + target_shift + neg_shift
        deriv = np.ones_like(cos)
    logits = head.scale * val
    cache = MarginCache(emb, wn, wnorm, head.scale * deriv, head.scale, cos, indicators)
    return logits, cache


def margin_logits(head: MarginHead, embeddings, labels, indicators: CifpIndicators | None = None) -> np.ndarray:
    return margin_forward(head, embeddings, labels, indicators)[0]


def margin_backward(cache: MarginCache, grad_logits):
    """Map a logit gradient to (grad wrt embeddings, grad wrt raw class weights).

    CIFP indicators are held constant.
    """
    g_cos = np.asarray(grad_logits, dtype=np.float64) * cache.dlogit_dcos
    g_emb = g_cos @ cache.unit_weights
    g_wn = g_cos.T @ cache.embeddings
    g_w = l2_normalize_backward(cache.unit_weights, cache.weight_norms, g_wn)
    return g_emb, g_w


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy. Returns (value, grad wrt logits, probabilities)."""
    z = np.asarray(logits, dtype=np.float64)
    n = z.shape[0]
    shift = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shift), axis=1, keepdims=True))
    logp = shift - lse
    rows = np.arange(n)
    value = -float(np.mean(logp[rows, labels]))
    p = np.exp(logp)
    grad = p.copy()
    grad[rows, labels] -= 1.0
    return value, grad / n, p


def scale_derivatives(logits, labels, probs=None):
    """Per-sample d/dw CE(softmax(w * logits)) at w = 1: sum_j (p_j - [j = y]) z_j."""
    z = np.asarray(logits, dtype=np.float64)
    if probs is None:
        probs = cross_entropy(z, labels)[2]
    resid = probs.copy()
    resid[np.arange(z.shape[0]), labels] -= 1.0
    return np.sum(resid * z, axis=1)


@dataclass
class SubsetSelection:
    """Samples of a batch whose identity falls in subset ``k`` of ``partition``."""

    partition: np.ndarray | None
    k: int
    indices: np.ndarray

    @classmethod
    def resolve(cls, partition, k: int, labels) -> "SubsetSelection":
        p = np.asarray(partition)
        labels = np.asarray(labels)
        if not 0 <= k < p.shape[1]:
            raise ConfigurationError(f"subset index {k} out of range for K={p.shape[1]}")
        idx = np.flatnonzero(p[labels, k] == 1)
        return cls(p, k, idx)

    @classmethod
    def everything(cls, n: int) -> "SubsetSelection":
        return cls(None, 0, np.arange(n))


@dataclass
class ClsLossResult:
    value: float
    grad_embeddings: np.ndarray
    grad_weights: np.ndarray
    scale_derivatives: np.ndarray  # per selected sample, d loss_i / d w at w = 1
    logits: np.ndarray  # selected rows only


def cls_loss(head: MarginHead, embeddings, labels, selection: SubsetSelection | None = None,
             indicators: CifpIndicators | None = None) -> ClsLossResult:
    """Mean margin cross-entropy over the selected samples of a batch.

    Logits (and CIFP indicators) are computed on the whole batch; only the
    selected rows enter the loss. Gradients cover the whole batch, with zeros
    on unselected rows.
    """
    logits, cache = margin_forward(head, embeddings, labels, indicators)
    labels = np.asarray(labels)
    idx = selection.indices if selection is not None else np.arange(len(labels))
    if len(idx) == 0:
        raise EmptySubset(f"subset {selection.k} has no samples in this batch")
    value, g_sub, p = cross_entropy(logits[idx], labels[idx])
    g = np.zeros_like(logits)
    g[idx] = g_sub
    g_emb, g_w = margin_backward(cache, g)
    wd = scale_derivatives(logits[idx], labels[idx], p)
    return ClsLossResult(value, g_emb, g_w, wd, logits[idx])


# --- supervised contrastive ------------------------------------------------

@dataclass
class SupConResult:
    value: float
    grad_projections: np.ndarray
    grad_weights: np.ndarray
    n_anchors: int  # anchors with at least one positive
    skipped_anchors: int


def supcon_loss(projections, labels, weights=None, temperature: float = 1.0) -> SupConResult:
    """Supervised contrastive loss with per-anchor weights.

    For anchor ``i`` and each positive ``p`` (same identity, ``p != i``) the
    term is ``-log(exp(s_ip) / sum_{a != i} exp(s_ia))`` with ``s = z z^T / T``.
    Terms are summed over positives, multiplied by the anchor weight, summed
    over anchors and divided by the number of anchors that have a positive.
    Anchors without a positive are skipped and counted.
    """
    z = as_matrix(projections, name="projections")
    labels = np.asarray(labels)
    n = z.shape[0]
    if labels.shape != (n,):
        raise ConfigurationError(f"expected {n} labels, got shape {labels.shape}")
    if not temperature > 0:
        raise ConfigurationError("temperature must be positive")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ConfigurationError(f"expected {n} weights, got shape {w.shape}")
    off = ~np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & off
    npos = pos.sum(axis=1)
    valid = npos > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateBatch("no identity has two samples; supervised contrastive loss is undefined")
    if n_valid < n:
        log.debug("supcon: %d anchors without positives skipped", n - n_valid)

    sim = (z @ z.T) / temperature
    rowmax = np.where(off, sim, -np.inf).max(axis=1)
    expo = np.where(off, np.exp(sim - rowmax[:, None]), 0.0)
    denom = expo.sum(axis=1)
    lse = rowmax + np.log(denom)
    per_anchor = np.where(valid, npos * lse - np.sum(pos * sim, axis=1), 0.0)
    value = float(w @ per_anchor) / n_valid

    wv = w * valid
    q = expo / denom[:, None]
    g_sim = wv[:, None] * (npos[:, None] * q - pos) / n_valid
    g_z = (g_sim + g_sim.T) @ z / temperature
    return SupConResult(value, g_z, per_anchor / n_valid, n_valid, n - n_valid)


class SubsetContrast:
    """Contrastive subset loss on frozen projections, evaluated for many membership vectors.

    ``weights`` give each sample's membership in one subset and must be equal
    across the samples of an identity. For an anchor of identity ``y`` the
    positives and the other samples of ``y`` always count fully; samples of
    other identities enter the denominator with their membership. Terms are
    averaged over positives, then over anchors weighted by membership. With
    0/1 memberships this is the contrastive loss restricted to the subset.

    Similarities are computed once; each evaluation costs a few
    matrix-vector products.
    """

    def __init__(self, projections, labels, temperature: float = 1.0):
        z = as_matrix(projections, name="projections")
        self.labels = np.asarray(labels)
        n = z.shape[0]
        if self.labels.shape != (n,):
            raise ConfigurationError(f"expected {n} labels, got shape {self.labels.shape}")
        if not temperature > 0:
            raise ConfigurationError("temperature must be positive")
        off = ~np.eye(n, dtype=bool)
        sim = (z @ z.T) / temperature
        pos = (self.labels[:, None] == self.labels[None, :]) & off
        npos = pos.sum(axis=1)
        self.valid = npos > 0
        if not self.valid.any():
            raise DegenerateBatch("no identity has two samples; contrastive loss is undefined")
        self.n = n
        self.rowmax = np.where(off, sim, -np.inf).max(axis=1)
        expo = np.where(off, np.exp(sim - self.rowmax[:, None]), 0.0)
        self.own = np.sum(expo * pos, axis=1)
        self.own_sim = np.sum(expo * pos * sim, axis=1)
        self.other = np.where(pos, 0.0, expo)
        self.other_sim = self.other * sim
        self.pos_mean = np.where(self.valid, np.sum(pos * sim, axis=1) / np.maximum(npos, 1), 0.0)
        # identical features: every off-diagonal similarity equal
        self.degenerate = bool(n > 1 and np.ptp(sim[off]) == 0.0)

    def evaluate(self, weights, scale_derivative: bool = False):
        """Return ``(value, grad)``; with ``scale_derivative`` also ``(deriv, deriv_grad)``.

        ``deriv`` is the derivative of the loss wrt a common multiplier on all
        similarities, at 1.
        """
        u = np.asarray(weights, dtype=np.float64)
        if u.shape != (self.n,):
            raise ConfigurationError(f"expected {self.n} weights, got shape {u.shape}")
        act = self.valid & (u > 0)
        ma = u * act
        count = float(ma.sum())
        if count == 0:
            zero = (0.0, np.zeros(self.n))
            return (zero, zero) if scale_derivative else zero
        d = self.own + self.other @ u
        t = np.where(act, self.rowmax + np.log(d) - self.pos_mean, 0.0)
        value = float(ma @ t) / count
        grad = ((t - value) * act + self.other.T @ (ma / d)) / count
        if not scale_derivative:
            return value, grad
        mu = (self.own_sim + self.other_sim @ u) / d
        b = np.where(act, mu - self.pos_mean, 0.0)
        deriv = float(ma @ b) / count
        dgrad = ((b - deriv) * act + self.other_sim.T @ (ma / d) - self.other.T @ (ma * mu / d)) / count
        return (value, grad), (deriv, dgrad)
