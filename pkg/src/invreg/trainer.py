"""Training orchestration: warmup, alternating partition discovery and
invariant feature learning, logging and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DegenerateBatch, DivergenceError, PartitionLearningFailed
from .invariance import MODES, InvariantLossConfig, feature_objective
from .losses import DEFAULT_MARGINS, VARIANTS, MarginHead, init_head, supcon_loss
from .numkit import (
    EncoderParams,
    LRSchedule,
    OptimizerState,
    encoder_backward,
    encoder_forward,
    init_encoder,
    sgd_step,
)
from .partition import POLICIES, PartitionConfig, PartitionSet, learn_partition, update_partition_set
from .synthdata import Dataset

log = logging.getLogger(__name__)


class TrainingWarning(UserWarning):
    pass


def default_schedule(epochs: int, warmup: int = 1) -> tuple:
    """Three partition events spread over the post-warmup epochs, the first right after warmup.

    With one warmup epoch this gives epochs 1, ceil(E/3)+1 and ceil(2E/3)+1.
    """
    start = max(warmup, 1)
    span = epochs - start + 1
    events = [start + math.ceil(k * span / 3) for k in range(3)]
    return tuple(sorted({e for e in events if e < epochs}))


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    warmup_epochs: int = 8
    schedule: tuple | None = None  # epochs that start with a partition event; None -> default_schedule
    num_subsets: int = 2
    lam_feature: float = 0.05
    mode_feature: str = "irmv1"
    lam_partition: float = 0.2
    mode_partition: str = "rex"
    temperature: float = 0.2
    variant: str = "arcface"
    scale: float = 64.0
    margin: float | None = None  # None -> variant default
    target_far: float = 1e-2
    margin_cap: float = 1.0
    policy: str = "keep_all"
    seed: int = 0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = (0.5, 0.85)
    hidden: tuple = (64,)
    embedding_dim: int = 32
    head_hidden: tuple = (16,)
    projection_dim: int = 8
    activation: str = "tanh"
    supcon_weight: float = 1.0  # trains the projection head only
    partition_steps: int = 200
    partition_lr: float = 0.5
    partition_restarts: int = 5
    partition_init_scale: float = 1.0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.head_hidden = tuple(self.head_hidden)
        self.milestones = tuple(self.milestones)
        if self.schedule is None:
            self.schedule = default_schedule(self.epochs, self.warmup_epochs)
        self.schedule = tuple(int(e) for e in self.schedule)
        if self.margin is None:
            self.margin = DEFAULT_MARGINS.get(self.variant, 0.4)
        if self.epochs < 1 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ConfigurationError("epochs >= 1, batch_size >= 1 and warmup_epochs >= 0 required")
        if self.warmup_epochs > self.epochs:
            raise ConfigurationError("warmup_epochs must not exceed epochs")
        if self.num_subsets < 2:
            raise ConfigurationError("num_subsets (K) must be at least 2")
        if self.lam_feature < 0 or self.lam_partition < 0 or self.supcon_weight < 0:
            raise ConfigurationError("lambda values and supcon_weight must be non-negative")
        if list(self.schedule) != sorted(set(self.schedule)):
            raise ConfigurationError("schedule must be strictly increasing")
        if self.schedule and self.schedule[0] < max(self.warmup_epochs, 1):
            raise ConfigurationError("partition schedule must start after at least one warmup epoch")
        if self.schedule and self.schedule[-1] >= self.epochs:
            raise ConfigurationError("partition events must fall inside the epoch budget")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}")
        if self.mode_feature not in MODES or self.mode_partition not in MODES:
            raise ConfigurationError(f"invariance modes must be one of {MODES}")
        if self.policy not in POLICIES:
            raise ConfigurationError(f"policy must be one of {POLICIES}")
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be positive")

    def feature_loss(self) -> InvariantLossConfig:
        return InvariantLossConfig(self.mode_feature, self.lam_feature)

    def partition_config(self, event: int) -> PartitionConfig:
        obj = InvariantLossConfig(self.mode_partition, self.lam_partition, temperature=self.temperature)
        return PartitionConfig(self.num_subsets, self.partition_steps, self.partition_lr, self.partition_restarts,
                               self.partition_init_scale, seed=self.seed * 1000 + event, objective=obj)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class TrainState:
    encoder: EncoderParams
    head: MarginHead
    optimizer: OptimizerState
    epoch: int = 0


def init_state(input_dim: int, num_identities: int, cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    enc = init_encoder(input_dim, cfg.hidden, cfg.embedding_dim, cfg.head_hidden, cfg.projection_dim,
                       cfg.activation, rng)
    head = init_head(num_identities, cfg.embedding_dim, rng, scale=cfg.scale, margin=cfg.margin,
                     variant=cfg.variant, target_far=cfg.target_far, margin_cap=cfg.margin_cap)
    sched = LRSchedule(cfg.lr, cfg.epochs, cfg.milestones)
    return TrainState(enc, head, OptimizerState(sched, cfg.momentum, cfg.weight_decay))


# --- log -------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    phase: str  # "warmup" | "feature"
    lr: float
    total: float
    cls: float  # plain margin loss when no partition is active
    partitions: list  # per partition: {"subset_losses": [...], "penalty": p, "weighted_penalty": lp}
    supcon: float  # weighted projection-head loss
    batches: int
    wall_time: float = 0.0

    def components_sum(self) -> float:
        s = self.cls + self.supcon
        for p in self.partitions:
            s += sum(p["subset_losses"]) + p["weighted_penalty"]
        return s

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_time")
        return d


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    partition_events: list = field(default_factory=list)

    def append(self, rec: EpochRecord):
        if self.epochs and rec.epoch <= self.epochs[-1].epoch:
            raise ConfigurationError("epoch records must be strictly increasing")
        self.epochs.append(rec)

    def write_jsonl(self, path, timing_path=None):
        """Deterministic per-epoch records; wall times go to ``timing_path`` when given."""
        lines = [json.dumps(r.to_dict(), sort_keys=True) for r in self.epochs]
        lines += [json.dumps({"partition_event": ev}, sort_keys=True) for ev in self.partition_events]
        Path(path).write_text("\n".join(lines) + "\n")
        if timing_path is not None:
            t = [json.dumps({"epoch": r.epoch, "wall_time": r.wall_time}) for r in self.epochs]
            Path(timing_path).write_text("\n".join(t) + "\n")


# --- steps -----------------------------------------------------------------

@dataclass
class StepOutcome:
    total: float
    cls: float
    partitions: list
    supcon: float


def _params_dict(state: TrainState) -> dict:
    d = dict(state.encoder.named())
    d["head.W"] = state.head.weights
    return d


def _apply(state: TrainState, grads_enc: EncoderParams, grad_w) -> None:
    params = _params_dict(state)
    grads = dict(grads_enc.named())
    grads["head.W"] = grad_w
    new = sgd_step(params, grads, state.optimizer)
    w = new.pop("head.W")
    state.encoder = EncoderParams.from_named(new, state.encoder.activation, state.encoder.generation + 1)
    state.head = MarginHead(w, state.head.scale, state.head.margin, state.head.variant,
                            state.head.target_far, state.head.margin_cap)


def _step(state: TrainState, partitions: list, x, y, cfg: TrainConfig) -> StepOutcome:
    emb, proj, cache = encoder_forward(state.encoder, x)
    if not (np.all(np.isfinite(emb)) and np.all(np.isfinite(proj))):
        raise DivergenceError(f"non-finite features at epoch {state.epoch}")
    obj = feature_objective(state.head, emb, y, partitions, cfg.feature_loss())
    sc_val, g_proj = 0.0, None
    if cfg.supcon_weight > 0:
        try:
            sc = supcon_loss(proj, y, temperature=cfg.temperature)
            sc_val = cfg.supcon_weight * sc.value
            g_proj = cfg.supcon_weight * sc.grad_projections
        except DegenerateBatch:
            pass
    total = obj.value + sc_val
    if not np.isfinite(total):
        raise DivergenceError(f"non-finite loss at epoch {state.epoch}: {total}")
    grads = encoder_backward(cache, obj.grad_embeddings, g_proj, projection_to_trunk=False)
    _apply(state, grads, obj.grad_weights)
    if partitions:
        parts = [{"subset_losses": [t.subset_losses.get(k, 0.0) for k in range(p.shape[1])],
                  "penalty": t.penalty, "weighted_penalty": t.weighted_penalty}
                 for p, t in zip(partitions, obj.terms)]
        return StepOutcome(total, 0.0, parts, sc_val)
    return StepOutcome(total, obj.value, [], sc_val)


def feature_step(state: TrainState, pset: PartitionSet, x, y, cfg: TrainConfig) -> StepOutcome:
    """One optimizer step on the summed invariant loss over every partition in ``pset``.

    Partitions are only read. An empty set falls back to the plain margin loss
    with a warning.
    """
    if len(pset) == 0:
        warnings.warn("empty partition set: plain supervised step", TrainingWarning, stacklevel=2)
    return _step(state, list(pset), x, y, cfg)


def supervised_step(state: TrainState, x, y, cfg: TrainConfig) -> StepOutcome:
    return _step(state, [], x, y, cfg)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _run_epoch(state: TrainState, data: Dataset, cfg: TrainConfig, rng, pset: PartitionSet | None,
               phase: str) -> EpochRecord:
    t0 = time.perf_counter()
    state.optimizer.epoch = state.epoch
    lr = state.optimizer.lr
    outs = []
    for idx in _batches(len(data), cfg.batch_size, rng):
        if pset is None or len(pset) == 0:
            outs.append(supervised_step(state, data.x[idx], data.y[idx], cfg))
        else:
            outs.append(feature_step(state, pset, data.x[idx], data.y[idx], cfg))
    nb = len(outs)
    parts = []
    if outs[0].partitions:
        for j, p0 in enumerate(outs[0].partitions):
            k = len(p0["subset_losses"])
            parts.append({
                "subset_losses": [sum(o.partitions[j]["subset_losses"][i] for o in outs) / nb for i in range(k)],
                "penalty": sum(o.partitions[j]["penalty"] for o in outs) / nb,
                "weighted_penalty": sum(o.partitions[j]["weighted_penalty"] for o in outs) / nb,
            })
    rec = EpochRecord(state.epoch, phase, lr, sum(o.total for o in outs) / nb, sum(o.cls for o in outs) / nb,
                      parts, sum(o.supcon for o in outs) / nb, nb, time.perf_counter() - t0)
    state.epoch += 1
    return rec


def _rngs(seed: int):
    shuffle, = np.random.SeedSequence(seed).spawn(2)[1:]
    return np.random.default_rng(shuffle)


def warmup(state: TrainState, data: Dataset, cfg: TrainConfig, rng=None, log_to: TrainLog | None = None) -> TrainState:
    """Plain margin-loss training for ``cfg.warmup_epochs`` epochs."""
    rng = rng if rng is not None else _rngs(cfg.seed)
    if cfg.warmup_epochs == 0:
        warnings.warn("no warmup epochs: partitions will be learned on untrained features", TrainingWarning,
                      stacklevel=2)
    for _ in range(cfg.warmup_epochs):
        rec = _run_epoch(state, data, cfg, rng, None, "warmup")
        if log_to is not None:
            log_to.append(rec)
    return state


@dataclass
class TrainResult:
    state: TrainState
    partitions: PartitionSet
    log: TrainLog
    discovered: list  # every learned partition in discovery order


def run_training(data: Dataset, cfg: TrainConfig, state: TrainState | None = None,
                 on_partition: Callable[[dict, np.ndarray], None] | None = None) -> TrainResult:
    """Warmup, then feature epochs with a partition event at each scheduled epoch.

    ``on_partition(event, partition)`` may add diagnostic fields to the event
    record before it is logged. A failed partition event is logged and
    training continues with the current set.
    """
    state = state or init_state(data.x.shape[1], data.num_identities, cfg)
    rng = _rngs(cfg.seed)
    tlog = TrainLog()
    warmup(state, data, cfg, rng, tlog)
    pset = PartitionSet(policy=cfg.policy)
    discovered = []
    schedule = set(cfg.schedule)
    while state.epoch < cfg.epochs:
        if state.epoch in schedule:
            event = {"epoch": state.epoch, "index": len(discovered)}
            try:
                res = learn_partition(state.encoder, data.x, data.y, data.num_identities,
                                      cfg.partition_config(state.epoch))
            except PartitionLearningFailed as exc:
                log.warning("partition event at epoch %d failed: %s", state.epoch, exc)
                event.update(status="failed", message=str(exc))
            else:
                pset = update_partition_set(pset, res.partition)
                discovered.append(res.partition)
                event.update(status="ok", score=res.score, restart_scores=res.restart_scores,
                             best_restart=res.best_restart, sizes=res.partition.sum(axis=0).tolist())
                if on_partition is not None:
                    on_partition(event, res.partition)
            tlog.partition_events.append(event)
        tlog.append(_run_epoch(state, data, cfg, rng, pset, "feature"))
    return TrainResult(state, pset, tlog, discovered)


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(directory, state: TrainState, cfg: TrainConfig) -> Path:
    """``params.bin`` (little-endian float64, concatenated) plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = _params_dict(state)
    entries, chunks, offset = [], [], 0
    for name in sorted(params):
        a = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.tobytes())
    (directory / "params.bin").write_bytes(b"".join(chunks))
    manifest = {
        "format": "invreg-checkpoint-1",
        "epoch": state.epoch,
        "seed": cfg.seed,
        "activation": state.encoder.activation,
        "head": {"scale": state.head.scale, "margin": state.head.margin, "variant": state.head.variant,
                 "target_far": state.head.target_far, "margin_cap": state.head.margin_cap},
        "params": entries,
        "config": cfg.to_dict(),
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(directory):
    """Returns ``(EncoderParams, MarginHead, manifest dict)``."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        flat = np.frombuffer((directory / "params.bin").read_bytes(), dtype="<f8")
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read checkpoint in {directory}: {exc}") from None
    params = {}
    for e in manifest["params"]:
        size = int(np.prod(e["shape"]))
        if e["offset"] + size > flat.size:
            raise ConfigurationError(f"checkpoint truncated at {e['name']}")
        params[e["name"]] = flat[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float64)
    w = params.pop("head.W")
    enc = EncoderParams.from_named(params, manifest["activation"])
    head = MarginHead(w, **manifest["head"])
    return enc, head, manifest


def embed(params: EncoderParams, x) -> np.ndarray:
    return encoder_forward(params, x)[0]
