"""Random instances and small oracles shared by the test modules."""
import numpy as np

from invreg.losses import MarginHead, cifp_indicators
from invreg.numkit import init_encoder, l2_normalize, l2_normalize_backward


def unit_rows(rng, n, d):
    return l2_normalize(rng.standard_normal((n, d)))[0]


def labels_with_pairs(rng, n, c):
    """Labels in [0, c) where every class present has at least two samples."""
    base = np.repeat(np.arange(c), 2)
    extra = rng.integers(0, c, size=max(n - len(base), 0))
    return rng.permutation(np.concatenate([base, extra]))[:max(n, len(base))]


def random_head(rng, c, d, variant="arcface", scale=4.0, margin=None):
    margin = {"arcface": 0.4, "cifp": 0.4, "cosface": 0.35, "cifp-cosface": 0.35}[variant] if margin is None else margin
    return MarginHead(rng.standard_normal((c, d)), scale=scale, margin=margin, variant=variant)


def through_normalization(fn):
    """Wrap ``fn(unit) -> (value, grad)`` as a function of raw rows."""
    def wrapped(raw):
        unit, norms = l2_normalize(raw)
        v, g = fn(unit)
        return v, l2_normalize_backward(unit, norms, g)
    return wrapped


def frozen_indicators(head, emb, labels):
    cos = emb @ l2_normalize(head.weights)[0].T
    return cifp_indicators(cos, labels, head.target_far)


def small_encoder(rng, d_in=5):
    return init_encoder(d_in, hidden=(6,), embedding_dim=4, head_hidden=(3,), projection_dim=3, rng=rng)


def sweep_tpr(genuine, impostor, fpr):
    """O(N^2) reference: try every candidate threshold and keep the smallest feasible one."""
    genuine = np.asarray(genuine, float)
    impostor = np.asarray(impostor, float)
    best = None
    for t in np.concatenate([impostor, [-np.inf]]):
        far = np.sum(impostor > t) / impostor.size
        if far <= fpr and (best is None or t < best):
            best = t
    return np.sum(genuine > best) / genuine.size


def supcon_brute(z, labels, weights, temperature):
    """Loop-level contrastive loss: per-anchor weighted sum over positives, / anchors with positives."""
    n = len(labels)
    total, anchors = 0.0, 0
    for i in range(n):
        pos = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not pos:
            continue
        anchors += 1
        den = sum(np.exp(z[i] @ z[a] / temperature) for a in range(n) if a != i)
        total += weights[i] * sum(-np.log(np.exp(z[i] @ z[p] / temperature) / den) for p in pos)
    return total / anchors
