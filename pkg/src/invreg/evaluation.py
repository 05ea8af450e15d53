"""Verification and fairness metrics, clustering diagnostics, and the
exhaustive partition oracle."""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, EvaluationError
from .invariance import InvariantLossConfig, membership_objective
from .losses import SubsetContrast
from .partition import from_assignments

log = logging.getLogger(__name__)

ORACLE_MAX_IDENTITIES = 12


class MetricWarning(UserWarning):
    pass


# --- verification ----------------------------------------------------------

def _allowed_false_positives(fpr_target: float, n_imp: int) -> int:
    c = int(math.floor(fpr_target * n_imp))
    while c + 1 <= n_imp and (c + 1) / n_imp <= fpr_target:
        c += 1
    while c > 0 and c / n_imp > fpr_target:
        c -= 1
    return c


def threshold_at_fpr(impostor_scores, fpr_target: float) -> float:
    """Smallest threshold whose strict false-accept rate stays within the budget."""
    imp = np.asarray(impostor_scores, dtype=np.float64)
    if imp.size == 0:
        raise EvaluationError("no impostor scores")
    if not 0 <= fpr_target <= 1:
        raise ConfigurationError("fpr_target must lie in [0, 1]")
    c = _allowed_false_positives(fpr_target, imp.size)
    if c >= imp.size:
        return -np.inf
    return float(np.sort(imp)[::-1][c])


def tpr_at_fpr(genuine_scores, impostor_scores, fpr_target: float) -> float:
    """True positive rate at the smallest threshold meeting the FPR budget.

    A pair is accepted when its score is strictly above the threshold.
    """
    gen = np.asarray(genuine_scores, dtype=np.float64)
    if gen.size == 0:
        raise EvaluationError("no genuine scores")
    tau = threshold_at_fpr(impostor_scores, fpr_target)
    return float(np.count_nonzero(gen > tau) / gen.size)


@dataclass
class PairList:
    first: np.ndarray
    second: np.ndarray
    genuine: np.ndarray
    group: np.ndarray

    def __post_init__(self):
        self.first = np.asarray(self.first, dtype=np.int64)
        self.second = np.asarray(self.second, dtype=np.int64)
        self.genuine = np.asarray(self.genuine, dtype=bool)
        self.group = np.asarray(self.group, dtype=object)
        n = len(self.first)
        if not (len(self.second) == len(self.genuine) == len(self.group) == n):
            raise ConfigurationError("pair arrays must have equal length")
        if np.any(self.first == self.second):
            raise ConfigurationError("self-pairs are not allowed")

    def __len__(self):
        return len(self.first)

    def validate(self, labels):
        labels = np.asarray(labels)
        same = labels[self.first] == labels[self.second]
        if np.any(same != self.genuine):
            raise ConfigurationError("genuine flags disagree with identity labels")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["first", "second", "genuine", "group"])
            for row in zip(self.first, self.second, self.genuine, self.group):
                w.writerow([int(row[0]), int(row[1]), int(row[2]), row[3]])

    @classmethod
    def read_csv(cls, path) -> "PairList":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([int(r["first"]) for r in rows], [int(r["second"]) for r in rows],
                   [r["genuine"] == "1" for r in rows], [r["group"] for r in rows])


@dataclass
class GroupReport:
    per_group: dict
    avg: float
    std: float
    fpr_target: float
    n_pairs: dict

    def to_json(self) -> str:
        doc = {"per_group": self.per_group, "avg": self.avg, "std": self.std,
               "fpr_target": self.fpr_target, "n_pairs": self.n_pairs}
        return json.dumps(doc, indent=2, sort_keys=True)

    def write(self, json_path, csv_path=None):
        Path(json_path).write_text(self.to_json() + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["group", "tpr", "n_pairs"])
                for name in sorted(self.per_group):
                    w.writerow([name, repr(self.per_group[name]), self.n_pairs[name]])


def group_report(scores_by_group: dict, fpr_target: float) -> GroupReport:
    """Per-group TPR@FPR, their mean and population standard deviation.

    ``scores_by_group`` maps a group name to ``(genuine_scores, impostor_scores)``.
    """
    per, counts = {}, {}
    for name, (gen, imp) in scores_by_group.items():
        gen, imp = np.asarray(gen), np.asarray(imp)
        if gen.size == 0 or imp.size == 0:
            warnings.warn(f"group {name!r} lacks genuine or impostor pairs; excluded", MetricWarning, stacklevel=2)
            continue
        per[str(name)] = tpr_at_fpr(gen, imp, fpr_target)
        counts[str(name)] = int(gen.size + imp.size)
    if not per:
        raise EvaluationError("no group has both genuine and impostor pairs")
    vals = np.array(list(per.values()))
    if len(vals) == 1:
        warnings.warn("single group: std reported as 0", MetricWarning, stacklevel=2)
    return GroupReport(per, float(vals.mean()), float(vals.std()), float(fpr_target), counts)


def pair_scores(embeddings, pairs: PairList) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    a, b = e[pairs.first], e[pairs.second]
    denom = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return np.sum(a * b, axis=1) / np.maximum(denom, 1e-12)


def scores_by_group(embeddings, pairs: PairList) -> dict:
    s = pair_scores(embeddings, pairs)
    out = {}
    for g in sorted(set(pairs.group.tolist()), key=str):
        sel = pairs.group == g
        out[str(g)] = (s[sel & pairs.genuine], s[sel & ~pairs.genuine])
    return out


def verification_report(embeddings, pairs: PairList, fpr_target: float = 1e-2) -> GroupReport:
    return group_report(scores_by_group(embeddings, pairs), fpr_target)


# --- clustering ------------------------------------------------------------

def _labels_of(p):
    p = np.asarray(p)
    return np.argmax(p, axis=1) if p.ndim == 2 else p


def adjusted_rand_index(partition_a, partition_b) -> float:
    """Adjusted Rand index from the pair-counting contingency table.

    Accepts label vectors or hard partition matrices. Inputs without any
    chance-correctable structure (e.g. a single cluster) give 0 with a warning.
    """
    a, b = _labels_of(partition_a), _labels_of(partition_b)
    if a.shape != b.shape:
        raise ConfigurationError("partitions cover different identity sets")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def pairs(x):
        x = np.asarray(x, dtype=np.float64)
        return x * (x - 1) / 2.0

    index = pairs(table).sum()
    sa, sb = pairs(table.sum(axis=1)).sum(), pairs(table.sum(axis=0)).sum()
    total = pairs(len(a))
    expected = sa * sb / total if total else 0.0
    max_index = (sa + sb) / 2.0
    if max_index == expected:
        warnings.warn("ARI undefined for trivial partitions; reporting 0", MetricWarning, stacklevel=2)
        return 0.0
    return float((index - expected) / (max_index - expected))


def cluster_quality(embeddings, labels) -> float:
    """Mean silhouette coefficient under cosine distance.

    Points in singleton clusters contribute 0; identical points give 0.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    uniq, inv = np.unique(labels, return_inverse=True)
    if len(uniq) < 2:
        raise ConfigurationError("silhouette needs at least two clusters")
    norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    u = x / norms
    dist = np.clip(1.0 - u @ u.T, 0.0, 2.0)
    dist[dist < 1e-12] = 0.0  # round-off between identical directions
    n = len(x)
    onehot = np.zeros((n, len(uniq)))
    onehot[np.arange(n), inv] = 1.0
    sizes = onehot.sum(axis=0)
    sums = dist @ onehot  # sum of distances from each point to each cluster
    own = sizes[inv]
    a = np.where(own > 1, sums[np.arange(n), inv] / np.maximum(own - 1, 1), 0.0)
    other = sums / sizes[None, :]
    other[np.arange(n), inv] = np.inf
    b = other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


# --- exhaustive partition oracle -------------------------------------------

@dataclass
class OracleResult:
    partition: np.ndarray
    value: float
    evaluated: int


def brute_force_partition_oracle(features, labels, num_identities: int,
                                 cfg: InvariantLossConfig | None = None) -> OracleResult:
    """Evaluate the partition objective on every non-trivial bipartition of the identities.

    Identity 0 is pinned to subset 0, so each bipartition is visited once.
    """
    if num_identities > ORACLE_MAX_IDENTITIES:
        raise ConfigurationError(
            f"exhaustive oracle limited to {ORACLE_MAX_IDENTITIES} identities "
            f"(2^(C-1)-1 bipartitions); got {num_identities}")
    if num_identities < 2:
        raise ConfigurationError("need at least two identities")
    cfg = cfg or InvariantLossConfig.partition_default()
    labels = np.asarray(labels)
    frozen = SubsetContrast(features, labels, cfg.temperature)
    best = None
    count = 0
    ids = np.arange(1, num_identities)
    for mask in range(1, 2 ** (num_identities - 1)):
        assign = np.zeros(num_identities, dtype=np.int64)
        assign[1:] = (mask >> (ids - 1)) & 1
        hard = from_assignments(assign, 2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            v = membership_objective(features, labels, hard, cfg, frozen).value
        count += 1
        if best is None or v > best[0]:
            best = (v, hard)
    return OracleResult(best[1], best[0], count)
