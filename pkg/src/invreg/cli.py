"""Command-line entry point: ``invreg run | eval | partition | sweep``.

Exit codes: 0 success, 2 configuration or input validation failure, 3 numeric
failure during training. Set ``INVREG_LOG_LEVEL`` (e.g. ``DEBUG``) for more
log output.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import warnings
from dataclasses import fields
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ConfigurationError, DivergenceError, EvaluationError, IngestionError, PartitionLearningFailed
from .evaluation import (
    ORACLE_MAX_IDENTITIES,
    PairList,
    adjusted_rand_index,
    brute_force_partition_oracle,
    verification_report,
)
from .invariance import InvariantLossConfig
from .partition import PartitionConfig, learn_partition, write_partition_csv
from .synthdata import DatasetSpec, generate, load_csv, make_pairs, write_csv
from .trainer import TrainConfig, embed, load_checkpoint, run_training, save_checkpoint

log = logging.getLogger("invreg")

SPEC_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
LOG_ENV = "INVREG_LOG_LEVEL"
DEFAULT_SWEEP = [0.02, 0.05, 0.1, 0.2]

# config section -> {config key: TrainConfig field}
SECTIONS = {
    "model": {k: k for k in ("hidden", "embedding_dim", "head_hidden", "projection_dim", "activation")},
    "loss": {k: k for k in ("variant", "scale", "margin", "target_far", "margin_cap")},
    "invariance": {k: k for k in ("mode_feature", "lam_feature", "mode_partition", "lam_partition", "temperature")},
    "partition": {"num_subsets": "num_subsets", "schedule": "schedule", "policy": "policy",
                  "steps": "partition_steps", "lr": "partition_lr", "restarts": "partition_restarts",
                  "init_scale": "partition_init_scale"},
    "training": {k: k for k in ("epochs", "batch_size", "warmup_epochs", "lr", "momentum", "weight_decay",
                                "milestones", "seed", "supcon_weight")},
}

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_STR = {"type": "string"}
_INTS = {"type": "array", "items": _INT}
_NUMS = {"type": "array", "items": _NUM}
_TYPES = {
    "hidden": _INTS, "embedding_dim": _INT, "head_hidden": _INTS, "projection_dim": _INT, "activation": _STR,
    "variant": _STR, "scale": _NUM, "margin": {"type": ["number", "null"]}, "target_far": _NUM,
    "margin_cap": _NUM, "mode_feature": _STR, "lam_feature": _NUM, "mode_partition": _STR,
    "lam_partition": _NUM, "temperature": _NUM, "num_subsets": _INT,
    "schedule": {"type": ["array", "null"], "items": _INT}, "policy": _STR, "steps": _INT, "lr": _NUM,
    "restarts": _INT, "init_scale": _NUM, "epochs": _INT, "batch_size": _INT, "warmup_epochs": _INT,
    "momentum": _NUM, "weight_decay": _NUM, "milestones": _NUMS, "seed": _INT, "supcon_weight": _NUM,
}


def _section(keys) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": {k: _TYPES[k] for k in keys}}


_GROUP = {"type": "object", "additionalProperties": False, "required": ["name", "share", "images_per_identity",
                                                                         "consistency"],
          "properties": {"name": _STR, "share": _NUM, "images_per_identity": _INT, "consistency": _NUM,
                         "causal_noise": {"type": ["number", "null"]}}}
_SYNTH = {k: _NUM for k in ("causal_noise", "attribute_scale", "attribute_noise", "group_separation")}
_SYNTH.update({k: _INT for k in ("num_identities", "causal_dim", "attribute_dim", "test_images_per_identity",
                                 "pairs_per_group", "seed")})
SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["spec_version"],
    "properties": {
        "spec_version": {"const": SPEC_VERSION},
        **{name: _section(keys) for name, keys in SECTIONS.items()},
        "dataset": {
            "oneOf": [
                {"type": "object", "additionalProperties": False, "required": ["source"],
                 "properties": {"source": {"const": "synthetic"}, "groups": {"type": "array", "items": _GROUP,
                                                                            "minItems": 1}, **_SYNTH}},
                {"type": "object", "additionalProperties": False, "required": ["source", "train", "test"],
                 "properties": {"source": {"const": "csv"}, "train": _STR, "test": _STR, "pairs": _STR,
                                "pairs_per_group": _INT}},
            ]
        },
        "evaluation": {"type": "object", "additionalProperties": False, "properties": {"fpr": _NUM}},
        "sweep": {"type": "object", "additionalProperties": False,
                  "properties": {"lam_feature": {"type": "array", "items": _NUM, "minItems": 1}}},
    },
}


class ConfigError(ConfigurationError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# --- configuration -----------------------------------------------------------

def default_config() -> dict:
    """Every configurable value with its default; a valid config file by itself."""
    tc = TrainConfig()
    cfg = {"spec_version": SPEC_VERSION}
    for name, keys in SECTIONS.items():
        cfg[name] = {k: _jsonable(getattr(tc, f)) for k, f in keys.items()}
    ds = DatasetSpec().to_dict()
    cfg["dataset"] = {"source": "synthetic", **ds}
    cfg["evaluation"] = {"fpr": 1e-2}
    cfg["sweep"] = {"lam_feature": list(DEFAULT_SWEEP)}
    return cfg


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def resolve_config(raw: dict) -> dict:
    """Validate ``raw`` and fill in every default. Raises :class:`ConfigError` with a field path."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(path, exc.message) from None
    cfg = default_config()
    cfg["partition"]["schedule"] = None
    for key, value in raw.items():
        if key == "dataset":
            if value["source"] == "csv":
                cfg["dataset"] = {"source": "csv", "pairs": None, "pairs_per_group": 1000}
            cfg["dataset"].update(copy.deepcopy(value))
        elif isinstance(value, dict):
            cfg[key].update(copy.deepcopy(value))
        else:
            cfg[key] = value
    if cfg["dataset"]["source"] == "synthetic" and "groups" in raw.get("dataset", {}):
        cfg["dataset"]["groups"] = [{"causal_noise": None, **g} for g in cfg["dataset"]["groups"]]
    # the materialized schedule depends on epochs and warmup
    build_train_config(cfg)
    if cfg["partition"]["schedule"] is None:
        cfg["partition"]["schedule"] = list(build_train_config(cfg).schedule)
    if cfg["dataset"]["source"] == "synthetic":
        dataset_spec(cfg)
    fpr = cfg["evaluation"]["fpr"]
    if not 0 <= fpr <= 1:
        raise ConfigError("evaluation.fpr", "must lie in [0, 1]")
    return cfg


def build_train_config(cfg: dict, **overrides) -> TrainConfig:
    kw = {}
    for name, keys in SECTIONS.items():
        for k, f in keys.items():
            kw[f] = cfg[name][k]
    kw.update(overrides)
    try:
        return TrainConfig(**kw)
    except ConfigurationError as exc:
        raise ConfigError("training", str(exc)) from None


def dataset_spec(cfg: dict) -> DatasetSpec:
    d = {k: v for k, v in cfg["dataset"].items() if k != "source"}
    known = {f.name for f in fields(DatasetSpec)}
    try:
        return DatasetSpec(**{k: v for k, v in d.items() if k in known})
    except ConfigurationError as exc:
        raise ConfigError("dataset", str(exc)) from None


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return resolve_config(raw)


# --- data --------------------------------------------------------------------

class Experiment:
    """Training data, evaluation data and pairs for one resolved config."""

    def __init__(self, cfg: dict):
        ds = cfg["dataset"]
        if ds["source"] == "synthetic":
            bench = generate(dataset_spec(cfg))
            self.train, self.test, self.pairs, self.sidecar = bench.train, bench.test, bench.pairs, bench.sidecar
        else:
            self.train, _ = load_csv(ds["train"])
            self.test, self.sidecar = load_csv(ds["test"])
            if ds.get("pairs"):
                self.pairs = PairList.read_csv(ds["pairs"])
            else:
                self.pairs = default_pairs(self.test, self.sidecar, ds["pairs_per_group"], cfg["training"]["seed"])
        self.pairs.validate(self.test.y)

    def write(self, directory: Path):
        directory.mkdir(parents=True, exist_ok=True)
        write_csv(directory / "train.csv", self.train, self.sidecar)
        write_csv(directory / "test.csv", self.test, self.sidecar)
        self.pairs.write_csv(directory / "pairs.csv")


def default_pairs(data, sidecar, pairs_per_group: int, seed: int) -> PairList:
    groups = sidecar.identity_groups if sidecar is not None else np.array(["all"] * data.num_identities, dtype=object)
    return make_pairs(data.y, groups, pairs_per_group, np.random.default_rng(seed))


# --- commands ----------------------------------------------------------------

def _train_and_report(cfg: dict, exp: Experiment, out: Path, tc: TrainConfig) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    codes = exp.sidecar.group_codes() if exp.sidecar is not None else None

    def diagnose(event, partition):
        if codes is not None:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                event["ari_vs_groups"] = adjusted_rand_index(partition, codes)

    res = run_training(exp.train, tc, on_partition=diagnose)
    save_checkpoint(out / "checkpoint", res.state, tc)
    pdir = out / "partitions"
    pdir.mkdir(exist_ok=True)
    for i, p in enumerate(res.discovered):
        write_partition_csv(pdir / f"partition_{i}.csv", p)
    res.log.write_jsonl(out / "trainlog.jsonl", timing_path=out / "timing.jsonl")
    report = verification_report(embed(res.state.encoder, exp.test.x), exp.pairs, cfg["evaluation"]["fpr"])
    report.write(out / "metrics.json", out / "metrics.csv")
    manifest = {"spec_version": SPEC_VERSION, "config": cfg, "partitions": len(res.discovered),
                "partition_set_size": len(res.partitions), "epochs_run": res.state.epoch}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return json.loads(report.to_json())


def cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else resolve_config({"spec_version": SPEC_VERSION})
    if args.seed is not None:
        cfg = _with_seed(cfg, args.seed)
    if args.fpr is not None:
        cfg["evaluation"]["fpr"] = args.fpr
        cfg = resolve_config(cfg)
    out = Path(args.out)
    exp = Experiment(cfg)
    exp.write(out / "data")
    report = _train_and_report(cfg, exp, out, build_train_config(cfg))
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _with_seed(cfg: dict, seed: int) -> dict:
    cfg = copy.deepcopy(cfg)
    cfg["training"]["seed"] = seed
    if cfg["dataset"]["source"] == "synthetic":
        cfg["dataset"]["seed"] = seed
    return cfg


def cmd_sweep(args) -> int:
    cfg = load_config(args.config) if args.config else resolve_config({"spec_version": SPEC_VERSION})
    if args.seed is not None:
        cfg = _with_seed(cfg, args.seed)
    out = Path(args.out)
    exp = Experiment(cfg)
    exp.write(out / "data")
    rows = []
    for lam in cfg["sweep"]["lam_feature"]:
        sub = copy.deepcopy(cfg)
        sub["invariance"]["lam_feature"] = lam
        rep = _train_and_report(sub, exp, out / f"lam_{lam:g}", build_train_config(sub))
        rows.append({"lam_feature": lam, "avg": rep["avg"], "std": rep["std"], "per_group": rep["per_group"]})
        print(f"lam_feature={lam:g} avg={rep['avg']:.4f} std={rep['std']:.4f}")
    avgs = [r["avg"] for r in rows]
    summary = {"runs": rows, "avg_range": max(avgs) - min(avgs)}
    (out / "sweep.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"avg range {summary['avg_range']:.4f}")
    return EXIT_OK


def _load_model(path):
    try:
        return load_checkpoint(path)
    except (KeyError, TypeError) as exc:
        raise ConfigError("checkpoint", f"malformed manifest: {exc}") from None


def cmd_eval(args) -> int:
    enc, _, _ = _load_model(args.checkpoint)
    data, sidecar = load_csv(args.data)
    if data.x.shape[1] != enc.input_dim:
        raise ConfigError("data", f"{data.x.shape[1]} features but the checkpoint expects {enc.input_dim}")
    if sidecar is None:
        warnings.warn("no group sidecar: reporting overall metrics only", UserWarning, stacklevel=1)
        log.warning("no group sidecar: reporting overall metrics only")
    if args.pairs:
        pairs = PairList.read_csv(args.pairs)
        if sidecar is None:
            pairs = PairList(pairs.first, pairs.second, pairs.genuine, ["all"] * len(pairs))
    else:
        pairs = default_pairs(data, sidecar, args.pairs_per_group, args.seed or 0)
    pairs.validate(data.y)
    report = verification_report(embed(enc, data.x), pairs, args.fpr)
    if args.out:
        report.write(args.out)
    print(report.to_json())
    return EXIT_OK


def cmd_partition(args) -> int:
    enc, _, manifest = _load_model(args.checkpoint)
    data, sidecar = load_csv(args.data)
    if data.x.shape[1] != enc.input_dim:
        raise ConfigError("data", f"{data.x.shape[1]} features but the checkpoint expects {enc.input_dim}")
    tcfg = manifest.get("config", {})
    k = args.k if args.k is not None else tcfg.get("num_subsets", 2)
    obj = InvariantLossConfig(tcfg.get("mode_partition", "rex"), tcfg.get("lam_partition", 0.2),
                              temperature=tcfg.get("temperature", 0.2))
    pcfg = PartitionConfig(num_subsets=k, steps=tcfg.get("partition_steps", 200),
                           lr=tcfg.get("partition_lr", 0.5), restarts=tcfg.get("partition_restarts", 5),
                           init_scale=tcfg.get("partition_init_scale", 1.0),
                           seed=args.seed if args.seed is not None else 0, objective=obj)
    if args.oracle and (k != 2 or data.num_identities > ORACLE_MAX_IDENTITIES):
        raise ConfigError("oracle", f"exhaustive oracle needs K=2 and at most {ORACLE_MAX_IDENTITIES} identities")
    res = learn_partition(enc, data.x, data.y, data.num_identities, pcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_partition_csv(out, res.partition, res.soft)
    print(f"objective {res.score:.6f} sizes {res.partition.sum(axis=0).tolist()}")
    if sidecar is not None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            print(f"ARI group {adjusted_rand_index(res.partition, sidecar.group_codes()):.4f}")
    if args.oracle:
        from .numkit import encoder_forward
        proj = encoder_forward(enc, data.x)[1]
        best = brute_force_partition_oracle(proj, data.y, data.num_identities, obj)
        print(f"oracle {best.value:.6f} gap {best.value - res.score:.6g} ratio {res.score / best.value:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="invreg", description="Learned-partition invariance training experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="train on a configured dataset and write all artifacts")
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--fpr", type=float)
    r.set_defaults(func=cmd_run)
    s = sub.add_parser("sweep", help="one run per lambda_feature value")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sweep)
    e = sub.add_parser("eval", help="verification report for a checkpoint on a CSV dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--pairs")
    e.add_argument("--pairs-per-group", type=int, default=1000)
    e.add_argument("--fpr", type=float, default=1e-2)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)
    q = sub.add_parser("partition", help="learn one partition with a frozen checkpoint")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("-k", "--subsets", dest="k", type=int)
    q.add_argument("--seed", type=int)
    q.add_argument("--oracle", action="store_true")
    q.set_defaults(func=cmd_partition)
    d = sub.add_parser("defaults", help="print the fully resolved default config")
    d.set_defaults(func=lambda a: print(json.dumps(default_config(), indent=2)) or EXIT_OK)
    return p


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, IngestionError, EvaluationError, PartitionLearningFailed) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
