"""Confounder self-annotation: soft partitions, hardening, the maximization
loop over frozen features, and the growing partition set."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, EmptySubsetPartition, IngestionError, PartitionLearningFailed
from .invariance import InvariantLossConfig, membership_objective, partition_objective, softmax_rows
from .losses import SubsetContrast
from .numkit import encoder_forward

log = logging.getLogger(__name__)

POLICIES = ("keep_all", "most_recent")


class DegeneratePartition(UserWarning):
    """The frozen features do not distinguish between partitions."""


def normalize_partition(soft) -> np.ndarray:
    """Row softmax of the soft partition: confidence of each identity per subset."""
    s = np.asarray(soft, dtype=np.float64)
    if s.ndim != 2 or not np.all(np.isfinite(s)):
        raise ConfigurationError("soft partition must be a finite C x K matrix")
    return softmax_rows(s)


def check_hard_partition(p) -> np.ndarray:
    p = np.asarray(p)
    if p.ndim != 2:
        raise ConfigurationError("partition must be a C x K matrix")
    if not np.all((p == 0) | (p == 1)):
        raise ConfigurationError("hard partition entries must be 0 or 1")
    if not np.all(p.sum(axis=1) == 1):
        raise ConfigurationError("every identity must belong to exactly one subset")
    return p.astype(np.int8)


def harden_partition(soft, allow_empty: bool = False) -> np.ndarray:
    """Row-wise argmax of the normalized confidences; ties go to the lowest subset index.

    Raises :class:`EmptySubsetPartition` when a subset ends up with no
    identity, unless ``allow_empty``.
    """
    conf = normalize_partition(soft)
    c, k = conf.shape
    hard = np.zeros((c, k), dtype=np.int8)
    hard[np.arange(c), np.argmax(conf, axis=1)] = 1
    if not allow_empty and k > 1:
        empty = np.flatnonzero(hard.sum(axis=0) == 0)
        if empty.size:
            raise EmptySubsetPartition(f"subsets {empty.tolist()} received no identity")
    return hard


def assignments(p) -> np.ndarray:
    """Subset index per identity."""
    return np.argmax(np.asarray(p), axis=1)


def from_assignments(assign, k: int) -> np.ndarray:
    assign = np.asarray(assign)
    hard = np.zeros((len(assign), k), dtype=np.int8)
    hard[np.arange(len(assign)), assign] = 1
    return hard


@dataclass
class PartitionConfig:
    num_subsets: int = 2
    steps: int = 200
    lr: float = 0.5
    restarts: int = 5
    init_scale: float = 1.0  # standard-normal start
    seed: int = 0
    objective: InvariantLossConfig = field(default_factory=InvariantLossConfig.partition_default)

    def __post_init__(self):
        if self.num_subsets < 2:
            raise ConfigurationError("need at least two subsets")
        if self.steps < 0 or self.restarts < 1 or self.lr <= 0:
            raise ConfigurationError("steps >= 0, restarts >= 1 and lr > 0 required")


@dataclass
class PartitionResult:
    partition: np.ndarray
    soft: np.ndarray
    score: float
    restart_scores: list  # hardened objective per restart; None if rejected
    best_restart: int


def learn_partition_from_features(projections, labels, num_identities: int,
                                  cfg: PartitionConfig | None = None) -> PartitionResult:
    """Gradient ascent on the soft partition with the features held fixed.

    Each restart starts from a standard-normal soft matrix; the hardened
    result is scored with the same objective and the best valid restart wins
    (ties to the lowest restart index). Restarts whose hardening leaves a
    subset empty are rejected.
    """
    cfg = cfg or PartitionConfig()
    labels = np.asarray(labels)
    frozen = SubsetContrast(projections, labels, cfg.objective.temperature)
    rng = np.random.default_rng(cfg.seed)
    k = cfg.num_subsets
    best, scores = None, []
    present = np.bincount(labels, minlength=num_identities) > 0
    for r in range(cfg.restarts):
        soft = cfg.init_scale * rng.standard_normal((num_identities, k))
        for _ in range(cfg.steps):
            res = partition_objective(projections, labels, soft, cfg.objective, frozen)
            soft = soft + cfg.lr * res.grad
        try:
            hard = harden_partition(soft)
        except EmptySubsetPartition as exc:
            log.info("restart %d rejected: %s", r, exc)
            scores.append(None)
            continue
        if np.any(hard[present].sum(axis=0) == 0):
            log.info("restart %d rejected: a subset has no identity with samples", r)
            scores.append(None)
            continue
        score = membership_objective(projections, labels, hard, cfg.objective, frozen).value
        scores.append(score)
        if best is None or score > best[0]:
            best = (score, r, hard, soft)
    if best is None:
        raise PartitionLearningFailed(f"all {cfg.restarts} restarts produced an empty subset")
    if frozen.degenerate:
        warnings.warn("frozen features are identical; partition is arbitrary", DegeneratePartition, stacklevel=2)
    score, r, hard, soft = best
    return PartitionResult(hard, soft, score, scores, r)


def learn_partition(params, x, labels, num_identities: int, cfg: PartitionConfig | None = None) -> PartitionResult:
    """Partition learning on the projections of a frozen encoder (parameters are only read)."""
    _, proj, _ = encoder_forward(params, x)
    return learn_partition_from_features(proj, labels, num_identities, cfg)


# --- partition set ---------------------------------------------------------

@dataclass
class PartitionSet:
    members: list = field(default_factory=list)
    policy: str = "keep_all"

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigurationError(f"partition-set policy must be one of {POLICIES}")

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)


def update_partition_set(pset: PartitionSet, new) -> PartitionSet:
    new = check_hard_partition(new)
    if pset.members and pset.members[0].shape != new.shape:
        raise ConfigurationError(f"partition shape {new.shape} does not match set shape {pset.members[0].shape}")
    if pset.policy == "keep_all":
        return PartitionSet([*pset.members, new], pset.policy)
    return PartitionSet([new], pset.policy)


# --- files -----------------------------------------------------------------

def soft_path(path) -> Path:
    path = Path(path)
    stem = path.name[:-4] if path.name.endswith(".csv") else path.name
    return path.with_name(stem + ".soft.csv")


def write_partition_csv(path, partition, soft=None) -> Path:
    p = check_hard_partition(partition)
    c, k = p.shape
    path = Path(path)
    lines = [f"# identities={c} subsets={k}"] + [",".join(str(int(v)) for v in row) for row in p]
    path.write_text("\n".join(lines) + "\n")
    if soft is not None:
        s = np.asarray(soft, dtype=np.float64)
        rows = [",".join(repr(float(v)) for v in row) for row in s]
        soft_path(path).write_text("\n".join([lines[0], *rows]) + "\n")
    return path


def _read_header(line):
    try:
        fields = dict(tok.split("=") for tok in line.lstrip("#").split())
        return int(fields["identities"]), int(fields["subsets"])
    except (ValueError, KeyError):
        raise IngestionError("expected header '# identities=C subsets=K'", row=1) from None


def read_partition_csv(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise IngestionError("empty partition file")
    c, k = _read_header(lines[0])
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != c:
        raise IngestionError(f"header declares {c} identities, found {len(rows)} rows")
    out = np.zeros((c, k), dtype=np.int8)
    for i, ln in enumerate(rows):
        vals = ln.split(",")
        if len(vals) != k or any(v.strip() not in ("0", "1") for v in vals):
            raise IngestionError(f"expected {k} comma-separated 0/1 values", row=i + 2)
        out[i] = [int(v) for v in vals]
    try:
        return check_hard_partition(out)
    except ConfigurationError as exc:
        raise IngestionError(str(exc)) from None


def read_soft_csv(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    c, k = _read_header(lines[0])
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:] if ln.strip()])
    if data.shape != (c, k):
        raise IngestionError(f"soft matrix shape {data.shape} != ({c}, {k})")
    return data
