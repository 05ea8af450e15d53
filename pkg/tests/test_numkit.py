import numpy as np
import pytest
from hypothesis import given, strategies as st

from invreg.errors import ConfigurationError, UsageError
from invreg.numkit import (
    EncoderParams,
    LRSchedule,
    OptimizerState,
    as_matrix,
    encoder_backward,
    encoder_forward,
    finite_diff_check,
    init_encoder,
    l2_normalize,
    l2_normalize_backward,
    sgd_step,
)

from helpers import small_encoder


def loop_forward(params, x):
    """Explicit-loop re-implementation of the encoder forward pass."""
    def dense(h, w, b, last):
        out = np.zeros(w.shape[1])
        for j in range(w.shape[1]):
            acc = b[j]
            for i in range(w.shape[0]):
                acc += h[i] * w[i, j]
            out[j] = acc if last else np.tanh(acc)
        return out

    def norm(v):
        return v / max(np.sqrt(sum(t * t for t in v)), 1e-12)

    embs, projs = [], []
    for row in x:
        h = row
        for i, (w, b) in enumerate(zip(params.trunk_w, params.trunk_b)):
            h = dense(h, w, b, i == len(params.trunk_w) - 1)
        e = norm(h)
        h = e
        for i, (w, b) in enumerate(zip(params.head_w, params.head_b)):
            h = dense(h, w, b, i == len(params.head_w) - 1)
        embs.append(e)
        projs.append(norm(h))
    return np.array(embs), np.array(projs)


def test_forward_matches_loop_reference():
    rng = np.random.default_rng(3)
    for _ in range(5):
        p = init_encoder(7, hidden=(5, 4), embedding_dim=3, head_hidden=(4,), projection_dim=2, rng=rng)
        x = rng.standard_normal((6, 7))
        emb, proj, _ = encoder_forward(p, x)
        ref_e, ref_p = loop_forward(p, x)
        assert np.max(np.abs(emb - ref_e)) <= 1e-12
        assert np.max(np.abs(proj - ref_p)) <= 1e-12


def test_forward_outputs_unit_norm():
    rng = np.random.default_rng(0)
    p = init_encoder(8, rng=rng)
    emb, proj, _ = encoder_forward(p, rng.standard_normal((20, 8)) * 5)
    assert np.allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-9)
    assert np.allclose(np.linalg.norm(proj, axis=1), 1.0, atol=1e-9)


def test_constant_network_gives_identical_rows():
    p = init_encoder(3, hidden=(4,), embedding_dim=2, rng=np.random.default_rng(0))
    for w in p.trunk_w:
        w[:] = 0.0
    p.trunk_b[0][:] = [0.5, -1.0, 2.0, 0.0]
    p.trunk_b[1][:] = [1.0, 2.0]
    emb, _, _ = encoder_forward(p, np.zeros((4, 3)))
    expected = np.array([1.0, 2.0]) / np.sqrt(5.0)
    assert np.allclose(emb, expected, atol=1e-15)


def test_identity_network_returns_unit_input():
    eye = np.eye(3)
    p = EncoderParams([eye], [np.zeros(3)], [np.eye(3)], [np.zeros(3)], activation="linear")
    x = l2_normalize(np.random.default_rng(1).standard_normal((5, 3)))[0]
    emb, proj, _ = encoder_forward(p, x)
    assert np.allclose(emb, x, atol=1e-15)
    assert np.allclose(proj, x, atol=1e-15)


def test_dimension_mismatch():
    p = init_encoder(4)
    with pytest.raises(ConfigurationError):
        encoder_forward(p, np.zeros((2, 5)))


def test_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(2)
    p = small_encoder(rng)
    emb, proj, cache = encoder_forward(p, rng.standard_normal((4, 5)))
    g = encoder_backward(cache, np.zeros_like(emb), np.zeros_like(proj))
    assert all(np.all(v == 0) for v in g.named().values())


def test_scalar_network_hand_derivation():
    # 1 -> 1 (tanh) -> 2 linear, embedding e = r / |r|, loss = e . u
    w1, b1 = np.array([[0.7]]), np.array([0.1])
    w2, b2 = np.array([[1.5, -0.5]]), np.array([0.2, 0.3])
    p = EncoderParams([w1, w2], [b1, b2], [np.eye(2)], [np.zeros(2)])
    x = np.array([[0.4]])
    u = np.array([[0.3, -0.8]])
    emb, proj, cache = encoder_forward(p, x)
    g = encoder_backward(cache, u, None)
    h = np.tanh(0.7 * 0.4 + 0.1)
    r = h * w2[0] + b2
    nr = np.linalg.norm(r)
    e = r / nr
    dr = (u[0] - e * (e @ u[0])) / nr
    dh = dr @ w2[0]
    assert np.allclose(g.trunk_w[1][0], h * dr, atol=1e-14)
    assert np.allclose(g.trunk_b[1], dr, atol=1e-14)
    assert np.isclose(g.trunk_w[0][0, 0], dh * (1 - h * h) * 0.4, atol=1e-14)
    assert np.isclose(g.trunk_b[0][0], dh * (1 - h * h), atol=1e-14)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(7)
    p = small_encoder(rng)
    x = rng.standard_normal((4, 5))
    ue, up = rng.standard_normal((4, 4)), rng.standard_normal((4, 3))

    def loss(named):
        q = EncoderParams.from_named(named)
        emb, proj, cache = encoder_forward(q, x)
        g = encoder_backward(cache, ue, up)
        return np.sum(emb * ue) + np.sum(proj * up), g.named()

    rep = finite_diff_check(loss, p.named())
    assert rep.passed, str(rep)


def test_detached_projection_leaves_trunk_alone():
    rng = np.random.default_rng(8)
    p = small_encoder(rng)
    emb, proj, cache = encoder_forward(p, rng.standard_normal((3, 5)))
    g = encoder_backward(cache, np.zeros_like(emb), rng.standard_normal(proj.shape), projection_to_trunk=False)
    assert all(np.all(w == 0) for w in g.trunk_w)
    assert any(np.any(w != 0) for w in g.head_w)


def test_stale_cache_rejected():
    rng = np.random.default_rng(0)
    p = small_encoder(rng)
    emb, proj, cache = encoder_forward(p, rng.standard_normal((2, 5)))
    encoder_backward(cache, emb, proj)
    with pytest.raises(UsageError):
        encoder_backward(cache, emb, proj)
    _, _, cache2 = encoder_forward(p, rng.standard_normal((2, 5)))
    p.generation += 1
    with pytest.raises(UsageError):
        encoder_backward(cache2, emb, proj)


@given(st.integers(0, 10_000))
def test_normalization_gradient_is_tangent(seed):
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((3, 4)) * rng.uniform(0.1, 10)
    unit, norms = l2_normalize(raw)
    g = l2_normalize_backward(unit, norms, rng.standard_normal((3, 4)))
    # a tangent gradient cannot change the row norm
    assert np.all(np.abs(np.sum(raw * g, axis=1)) <= 1e-9 * np.linalg.norm(g, axis=1) * norms[:, 0] + 1e-12)


def test_sgd_zero_grad_no_decay_is_noop():
    p = {"a": np.array([1.0, -2.0])}
    out = sgd_step(p, {"a": np.zeros(2)}, OptimizerState(LRSchedule(0.1), momentum=0.9, weight_decay=0.0))
    assert np.array_equal(out["a"], p["a"])


def test_sgd_single_step_definition():
    p = {"a": np.array([1.0, -2.0])}
    g = {"a": np.array([0.5, 0.25])}
    st_ = OptimizerState(LRSchedule(0.1), momentum=0.0, weight_decay=5e-4)
    out = sgd_step(p, g, st_)
    assert np.allclose(out["a"], p["a"] - 0.1 * (g["a"] + 5e-4 * p["a"]), rtol=0, atol=1e-16)


def test_sgd_momentum_two_steps_hand_unrolled():
    wd, mu, lr = 1e-2, 0.9, 0.1
    p0 = np.array([1.0])
    g1, g2 = np.array([0.3]), np.array([-0.2])
    st_ = OptimizerState(LRSchedule(lr), momentum=mu, weight_decay=wd)
    p1 = sgd_step({"a": p0}, {"a": g1}, st_)["a"]
    p2 = sgd_step({"a": p1}, {"a": g2}, st_)["a"]
    b1 = g1 + wd * p0
    e1 = p0 - lr * b1
    b2 = mu * b1 + g2 + wd * e1
    assert np.allclose(p1, e1, atol=1e-16)
    assert np.allclose(p2, e1 - lr * b2, atol=1e-16)


def test_sgd_shape_mismatch():
    with pytest.raises(ConfigurationError):
        sgd_step({"a": np.zeros(2)}, {"a": np.zeros(3)}, OptimizerState())


def test_lr_schedule_milestones():
    s = LRSchedule(0.1, 20, (0.5, 0.85))
    assert s.lr_at(0) == 0.1
    assert s.lr_at(9) == 0.1
    assert np.isclose(s.lr_at(10), 0.01)
    assert np.isclose(s.lr_at(17), 0.001)


def test_finite_diff_quadratic():
    rep = finite_diff_check(lambda p: (0.5 * np.sum(p * p), p.copy()), np.array([0.3, -1.2, 2.0]))
    assert rep.passed and rep.max_rel_error < 1e-9


def test_finite_diff_flags_wrong_gradient():
    rep = finite_diff_check(lambda p: (0.5 * np.sum(p * p), 2 * p), np.array([0.3, -1.2]))
    assert not rep.passed


def test_finite_diff_non_finite_loss():
    rep = finite_diff_check(lambda p: (np.nan, p), np.ones(2))
    assert not rep.passed and "non-finite" in rep.message


def test_as_matrix_rejects_nan():
    with pytest.raises(ConfigurationError):
        as_matrix([[1.0, np.nan]])


def test_forward_is_deterministic():
    rng = np.random.default_rng(5)
    p = small_encoder(rng)
    x = rng.standard_normal((6, 5))
    a = encoder_forward(p, x)[0]
    b = encoder_forward(p.copy(), x.copy())[0]
    assert a.tobytes() == b.tobytes()
