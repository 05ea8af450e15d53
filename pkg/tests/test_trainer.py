import copy
import warnings

import numpy as np
import pytest

import invreg.trainer as trainer
from invreg.errors import ConfigurationError, DivergenceError, PartitionLearningFailed
from invreg.evaluation import verification_report
from invreg.invariance import InvariantLossConfig, InvarianceUndefined, feature_objective
from invreg.losses import SubsetSelection, cls_loss
from invreg.numkit import encoder_forward
from invreg.partition import PartitionResult, PartitionSet, from_assignments, update_partition_set
from invreg.synthdata import DatasetSpec, generate
from invreg.trainer import (
    TrainConfig,
    TrainingWarning,
    default_schedule,
    embed,
    feature_step,
    init_state,
    load_checkpoint,
    run_training,
    save_checkpoint,
    supervised_step,
    warmup,
)


@pytest.fixture(scope="module")
def small():
    return generate(DatasetSpec(num_identities=20, seed=0))


def quick(**kw):
    base = dict(epochs=6, warmup_epochs=2, partition_steps=30, partition_restarts=2, batch_size=32)
    base.update(kw)
    return TrainConfig(**base)


def full_loss(state, data):
    emb = embed(state.encoder, data.x)
    return cls_loss(state.head, emb, data.y).value


def test_default_schedule():
    assert default_schedule(30, 1) == (1, 11, 21)
    assert default_schedule(21, 1) == (1, 8, 15)
    assert TrainConfig().schedule == (8, 16, 24)
    assert default_schedule(2, 1) == (1,)


@pytest.mark.parametrize("bad", [
    dict(num_subsets=1), dict(lam_feature=-1.0), dict(schedule=(0, 3)), dict(schedule=(3, 2)),
    dict(schedule=(40,)), dict(variant="softmax"), dict(policy="random"), dict(warmup_epochs=3, schedule=(2,)),
])
def test_config_validation(bad):
    with pytest.raises(ConfigurationError):
        TrainConfig(**bad)


def test_zero_warmup_warns_and_leaves_state(small):
    cfg = quick(warmup_epochs=0, schedule=(1,))
    state = init_state(small.train.x.shape[1], small.train.num_identities, cfg)
    before = {k: v.copy() for k, v in state.encoder.named().items()}
    with pytest.warns(TrainingWarning):
        warmup(state, small.train, cfg)
    assert all(np.array_equal(before[k], v) for k, v in state.encoder.named().items())
    assert state.epoch == 0


def test_one_warmup_epoch_lowers_loss():
    data = generate(DatasetSpec(seed=0)).train
    cfg = TrainConfig(warmup_epochs=1)
    state = init_state(data.x.shape[1], data.num_identities, cfg)
    start = full_loss(state, data)
    warmup(state, data, cfg)
    assert full_loss(state, data) < start


def test_trivial_partition_rex_equals_plain_step(small):
    cfg = quick(mode_feature="rex", lam_feature=1.0)
    x, y = small.train.x[:32], small.train.y[:32]
    a = init_state(x.shape[1], small.train.num_identities, cfg)
    b = copy.deepcopy(a)
    trivial = np.zeros((small.train.num_identities, 2), dtype=np.int8)
    trivial[:, 0] = 1
    with pytest.warns(InvarianceUndefined):
        feature_step(a, update_partition_set(PartitionSet(), trivial), x, y, cfg)
    supervised_step(b, x, y, cfg)
    for k, v in a.encoder.named().items():
        assert np.array_equal(v, b.encoder.named()[k])
    assert np.array_equal(a.head.weights, b.head.weights)


def test_lambda_zero_update_is_summed_subset_means(small):
    cfg = quick(lam_feature=0.0, supcon_weight=0.0, momentum=0.0, weight_decay=0.0)
    x, y = small.train.x[:40], small.train.y[:40]
    rng = np.random.default_rng(0)
    parts = [from_assignments(rng.integers(0, 2, small.train.num_identities), 2) for _ in range(2)]
    state = init_state(x.shape[1], small.train.num_identities, cfg)
    ref = copy.deepcopy(state)
    pset = PartitionSet(parts)
    feature_step(state, pset, x, y, cfg)
    # reference gradient: sum over partitions and subsets of per-subset mean losses
    emb, _, cache = encoder_forward(ref.encoder, x)
    g_w = np.zeros_like(ref.head.weights)
    for p in parts:
        for k in range(2):
            sel = SubsetSelection.resolve(p, k, y)
            if len(sel.indices):
                g_w += cls_loss(ref.head, emb, y, sel).grad_weights
    assert np.allclose(state.head.weights, ref.head.weights - cfg.lr * g_w, rtol=0, atol=1e-14)


def test_empty_partition_set_warns(small):
    cfg = quick()
    state = init_state(small.train.x.shape[1], small.train.num_identities, cfg)
    with pytest.warns(TrainingWarning):
        feature_step(state, PartitionSet(), small.train.x[:16], small.train.y[:16], cfg)


def test_full_objective_gradient_on_frozen_batch(small):
    from invreg.numkit import EncoderParams, encoder_backward, finite_diff_check
    cfg = quick(embedding_dim=4, hidden=(5,), head_hidden=(3,), projection_dim=3, scale=4.0)
    x, y = small.train.x[:8], small.train.y[:8]
    state = init_state(x.shape[1], small.train.num_identities, cfg)
    parts = [from_assignments(np.arange(small.train.num_identities) % 2, 2)]

    def f(named):
        enc = EncoderParams.from_named(named)
        emb, proj, cache = encoder_forward(enc, x)
        r = feature_objective(state.head, emb, y, parts, InvariantLossConfig("irmv1", 0.05))
        return r.value, encoder_backward(cache, r.grad_embeddings).named()

    assert finite_diff_check(f, state.encoder.named()).passed


def test_keep_all_collects_three(small):
    res = run_training(small.train, quick(epochs=9, warmup_epochs=1, schedule=None))
    assert len(res.partitions) == 3 == len(res.discovered)
    assert len(res.log.epochs) == 9
    assert [e.epoch for e in res.log.epochs] == list(range(9))


def test_most_recent_keeps_one(small):
    res = run_training(small.train, quick(epochs=9, warmup_epochs=1, policy="most_recent"))
    assert len(res.partitions) == 1 and len(res.discovered) == 3


def test_log_totals_equal_components(small):
    res = run_training(small.train, quick())
    for rec in res.log.epochs:
        assert abs(rec.total - rec.components_sum()) <= 1e-9


def test_replay_is_identical(small, tmp_path):
    a = run_training(small.train, quick(seed=5))
    b = run_training(small.train, quick(seed=5))
    a.log.write_jsonl(tmp_path / "a.jsonl")
    b.log.write_jsonl(tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    for k, v in a.state.encoder.named().items():
        assert v.tobytes() == b.state.encoder.named()[k].tobytes()


def test_encoder_untouched_by_partition_events(small, monkeypatch):
    seen = []
    real = trainer.learn_partition

    def spy(params, *args, **kw):
        before = {k: v.tobytes() for k, v in params.named().items()}
        out = real(params, *args, **kw)
        seen.append(before == {k: v.tobytes() for k, v in params.named().items()})
        return out

    monkeypatch.setattr(trainer, "learn_partition", spy)
    run_training(small.train, quick())
    assert seen and all(seen)


def test_lambda_zero_all_in_one_matches_plain(small, monkeypatch):
    c = small.train.num_identities
    one = np.zeros((c, 2), dtype=np.int8)
    one[:, 0] = 1
    monkeypatch.setattr(trainer, "learn_partition",
                        lambda *a, **k: PartitionResult(one, one.astype(float), 0.0, [0.0], 0))
    # most_recent: KeepAll would stack copies and double the loss
    inv = run_training(small.train, quick(lam_feature=0.0, policy="most_recent"))
    plain = run_training(small.train, quick(schedule=()))
    assert [r.total for r in inv.log.epochs] == [r.total for r in plain.log.epochs]


def test_failed_partition_event_is_logged(small, monkeypatch):
    def fail(*a, **k):
        raise PartitionLearningFailed("all restarts empty")

    monkeypatch.setattr(trainer, "learn_partition", fail)
    res = run_training(small.train, quick())
    assert len(res.partitions) == 0
    assert all(ev["status"] == "failed" for ev in res.log.partition_events)


def test_divergence(small):
    with pytest.raises(DivergenceError), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        run_training(small.train, quick(lr=1e300, activation="linear"))


def test_checkpoint_round_trip(small, tmp_path):
    res = run_training(small.train, quick())
    save_checkpoint(tmp_path / "ck", res.state, quick())
    enc, head, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["epoch"] == res.state.epoch and manifest["config"]["epochs"] == 6
    assert np.array_equal(embed(enc, small.test.x), embed(res.state.encoder, small.test.x))
    assert np.array_equal(head.weights, res.state.head.weights)


def test_checkpoint_missing(tmp_path):
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path)


@pytest.mark.slow
def test_longer_run_with_more_partitions_helps():
    bench = generate(DatasetSpec(seed=0))
    short = run_training(bench.train, TrainConfig(epochs=10, schedule=(8,)))
    long = run_training(bench.train, TrainConfig())
    a = verification_report(embed(short.state.encoder, bench.test.x), bench.pairs).avg
    b = verification_report(embed(long.state.encoder, bench.test.x), bench.pairs).avg
    assert b > a
