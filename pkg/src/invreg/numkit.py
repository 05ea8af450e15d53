"""Dense numeric core: the MLP encoder with hand-written backprop, SGD with
momentum, and a central-difference gradient checker.

Everything runs in float64. Matrices are plain 2-D numpy arrays, row-major,
one sample per row.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigurationError, UsageError

NORM_EPS = 1e-12


def as_matrix(a, cols: int | None = None, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ConfigurationError(f"{name} must be 2-D, got shape {m.shape}")
    if cols is not None and m.shape[1] != cols:
        raise ConfigurationError(f"{name} has {m.shape[1]} columns, expected {cols}")
    if not np.all(np.isfinite(m)):
        raise ConfigurationError(f"{name} contains non-finite entries")
    return m


def l2_normalize(x: np.ndarray):
    """Row-wise unit normalization. Returns (normalized, norms)."""
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    norms = np.maximum(norms, NORM_EPS)
    return x / norms, norms


def l2_normalize_backward(unit: np.ndarray, norms: np.ndarray, grad: np.ndarray) -> np.ndarray:
    # d(x/|x|) = (I - u u^T) / |x|
    radial = np.sum(unit * grad, axis=1, keepdims=True)
    return (grad - unit * radial) / norms


# --- activations -----------------------------------------------------------

def _tanh(z):
    return np.tanh(z)


def _tanh_grad(z, h):
    return 1.0 - h * h


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, h):
    return (z > 0).astype(np.float64)


def _linear(z):
    return z


def _linear_grad(z, h):
    return np.ones_like(z)


ACTIVATIONS = {
    "tanh": (_tanh, _tanh_grad),
    "relu": (_relu, _relu_grad),
    "linear": (_linear, _linear_grad),
}


# --- encoder ---------------------------------------------------------------

@dataclass
class EncoderParams:
    """Weights of the feature extractor and its projection head.

    ``trunk`` maps inputs to the embedding, ``head`` maps the (normalized)
    embedding to the contrastive projection. Hidden layers use ``activation``;
    the last layer of each stack is linear and followed by L2 normalization.
    """

    trunk_w: list[np.ndarray]
    trunk_b: list[np.ndarray]
    head_w: list[np.ndarray]
    head_b: list[np.ndarray]
    activation: str = "tanh"
    generation: int = 0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        for ws, bs, name in ((self.trunk_w, self.trunk_b, "trunk"), (self.head_w, self.head_b, "head")):
            if len(ws) != len(bs) or not ws:
                raise ConfigurationError(f"{name} needs matching, non-empty weight/bias lists")
            for i, (w, b) in enumerate(zip(ws, bs)):
                if w.ndim != 2 or b.shape != (w.shape[1],):
                    raise ConfigurationError(f"{name} layer {i}: weight {w.shape} / bias {b.shape} mismatch")
                if i and ws[i - 1].shape[1] != w.shape[0]:
                    raise ConfigurationError(f"{name} layer {i}: input width {w.shape[0]} != {ws[i - 1].shape[1]}")
        if self.head_w[0].shape[0] != self.trunk_w[-1].shape[1]:
            raise ConfigurationError("projection head input width must equal embedding width")

    @property
    def input_dim(self) -> int:
        return self.trunk_w[0].shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.trunk_w[-1].shape[1]

    @property
    def projection_dim(self) -> int:
        return self.head_w[-1].shape[1]

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, ws, bs in (("trunk", self.trunk_w, self.trunk_b), ("head", self.head_w, self.head_b)):
            for i, (w, b) in enumerate(zip(ws, bs)):
                out[f"{prefix}.w{i}"] = w
                out[f"{prefix}.b{i}"] = b
        return out

    @classmethod
    def from_named(cls, named: Mapping[str, np.ndarray], activation="tanh", generation=0) -> "EncoderParams":
        def stack(prefix):
            n = sum(1 for k in named if k.startswith(prefix + ".w"))
            return ([np.asarray(named[f"{prefix}.w{i}"], dtype=np.float64) for i in range(n)],
                    [np.asarray(named[f"{prefix}.b{i}"], dtype=np.float64) for i in range(n)])

        tw, tb = stack("trunk")
        hw, hb = stack("head")
        return cls(tw, tb, hw, hb, activation=activation, generation=generation)

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            [w.copy() for w in self.trunk_w], [b.copy() for b in self.trunk_b],
            [w.copy() for w in self.head_w], [b.copy() for b in self.head_b],
            activation=self.activation, generation=self.generation,
        )

    def zeros_like(self) -> "EncoderParams":
        z = lambda arrs: [np.zeros_like(a) for a in arrs]  # noqa: E731
        return EncoderParams(z(self.trunk_w), z(self.trunk_b), z(self.head_w), z(self.head_b),
                             activation=self.activation)


def init_encoder(input_dim: int, hidden=(64,), embedding_dim=32, head_hidden=(16,), projection_dim=8,
                 activation="tanh", rng: np.random.Generator | None = None) -> EncoderParams:
    rng = np.random.default_rng(0) if rng is None else rng

    def stack(widths):
        ws, bs = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            ws.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
            bs.append(np.zeros(fan_out))
        return ws, bs

    tw, tb = stack([input_dim, *hidden, embedding_dim])
    hw, hb = stack([embedding_dim, *head_hidden, projection_dim])
    return EncoderParams(tw, tb, hw, hb, activation=activation)


@dataclass
class _StackCache:
    inputs: list
    pre: list
    post: list


@dataclass
class EncoderCache:
    params: EncoderParams
    generation: int
    trunk: _StackCache
    head: _StackCache
    embeddings: np.ndarray
    emb_norms: np.ndarray
    projections: np.ndarray
    proj_norms: np.ndarray
    used: bool = field(default=False)


def _stack_forward(ws, bs, x, act):
    f = ACTIVATIONS[act][0]
    inputs, pre, post = [], [], []
    h = x
    last = len(ws) - 1
    for i, (w, b) in enumerate(zip(ws, bs)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = z if i == last else f(z)
        post.append(h)
    return h, _StackCache(inputs, pre, post)


def _stack_backward(ws, cache: _StackCache, grad_out, act):
    df = ACTIVATIONS[act][1]
    gws, gbs = [None] * len(ws), [None] * len(ws)
    g = grad_out
    for i in reversed(range(len(ws))):
        if i != len(ws) - 1:
            g = g * df(cache.pre[i], cache.post[i])
        gws[i] = cache.inputs[i].T @ g
        gbs[i] = g.sum(axis=0)
        g = g @ ws[i].T
    return gws, gbs, g


def encoder_forward(params: EncoderParams, batch):
    """Embed a batch. Returns ``(embeddings, projections, cache)``; both outputs are row-wise unit norm."""
    x = as_matrix(batch, cols=params.input_dim, name="batch")
    raw, tc = _stack_forward(params.trunk_w, params.trunk_b, x, params.activation)
    emb, en = l2_normalize(raw)
    rawp, hc = _stack_forward(params.head_w, params.head_b, emb, params.activation)
    proj, pn = l2_normalize(rawp)
    cache = EncoderCache(params, params.generation, tc, hc, emb, en, proj, pn)
    return emb, proj, cache


def encoder_backward(cache: EncoderCache, grad_wrt_embeddings, grad_wrt_projections=None,
                     projection_to_trunk: bool = True) -> EncoderParams:
    """Backpropagate upstream gradients to every encoder parameter.

    With ``projection_to_trunk=False`` the projection loss trains only the
    head (the embedding is treated as a constant input to the head).
    """
    if cache.used:
        raise UsageError("encoder cache already consumed by a backward pass")
    if cache.params.generation != cache.generation:
        raise UsageError("encoder parameters changed since the forward pass")
    cache.used = True
    p = cache.params
    ge = np.asarray(grad_wrt_embeddings, dtype=np.float64)
    if ge.shape != cache.embeddings.shape:
        raise ConfigurationError(f"embedding gradient shape {ge.shape} != {cache.embeddings.shape}")
    if grad_wrt_projections is None:
        gp = np.zeros_like(cache.projections)
    else:
        gp = np.asarray(grad_wrt_projections, dtype=np.float64)
        if gp.shape != cache.projections.shape:
            raise ConfigurationError(f"projection gradient shape {gp.shape} != {cache.projections.shape}")

    g_rawp = l2_normalize_backward(cache.projections, cache.proj_norms, gp)
    hw, hb, g_head_in = _stack_backward(p.head_w, cache.head, g_rawp, p.activation)
    if projection_to_trunk:
        ge = ge + g_head_in
    g_raw = l2_normalize_backward(cache.embeddings, cache.emb_norms, ge)
    tw, tb, _ = _stack_backward(p.trunk_w, cache.trunk, g_raw, p.activation)
    return EncoderParams(tw, tb, hw, hb, activation=p.activation)


# --- optimizer -------------------------------------------------------------

@dataclass
class LRSchedule:
    """Piecewise-constant decay at fractions of the epoch budget."""

    base_lr: float = 0.1
    total_epochs: int = 30
    milestones: tuple = (0.5, 0.85)
    gamma: float = 0.1

    def lr_at(self, epoch: int) -> float:
        lr = self.base_lr
        for frac in self.milestones:
            if epoch >= int(np.ceil(frac * self.total_epochs)):
                lr *= self.gamma
        return lr


@dataclass
class OptimizerState:
    schedule: LRSchedule = field(default_factory=LRSchedule)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epoch: int = 0
    buffers: dict = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return self.schedule.lr_at(self.epoch)


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             state: OptimizerState) -> dict[str, np.ndarray]:
    """One SGD step with classic momentum; weight decay is added to the gradient.

    Returns new arrays; ``state.buffers`` is updated in place.
    """
    lr = state.lr
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        d = g + state.weight_decay * p if state.weight_decay else np.array(g, dtype=np.float64)
        buf = state.buffers.get(name)
        if buf is None or state.momentum == 0.0:
            buf = d
        else:
            if buf.shape != p.shape:
                raise ConfigurationError(f"momentum buffer for {name} has shape {buf.shape}")
            buf = state.momentum * buf + d
        state.buffers[name] = buf
        out[name] = p - lr * buf
    return out


# --- gradient checking -----------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    max_abs_error: float
    worst: tuple | None
    n_coords: int
    tolerance: float
    message: str = ""

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel={self.max_rel_error:.3e} max_abs={self.max_abs_error:.3e} "
                f"coords={self.n_coords} worst={self.worst} {self.message}").rstrip()


def finite_diff_check(loss_fn: Callable, params, tolerance: float = 1e-5, step: float = 1e-6,
                      floor: float = 1e-3) -> GradCheckReport:
    """Compare ``loss_fn``'s analytic gradient against central differences.

    ``params`` is an array or a dict of arrays; ``loss_fn(params)`` returns
    ``(value, grad)`` with ``grad`` shaped like ``params``. The per-coordinate
    error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps coordinates
    whose true gradient is ~0 from reporting pure round-off as relative error.
    """
    single = isinstance(params, np.ndarray)
    named = {"": params} if single else dict(params)
    base = {k: np.array(v, dtype=np.float64) for k, v in named.items()}

    def call(p):
        v, g = loss_fn(p[""] if single else p)
        return float(v), g

    value, grad = call(base)
    if not np.isfinite(value):
        return GradCheckReport(False, np.inf, np.inf, None, 0, tolerance, "non-finite loss at base point")
    grad = {"": grad} if single else grad

    worst_rel, worst_abs, worst = 0.0, 0.0, None
    n = 0
    for key, arr in base.items():
        analytic = np.asarray(grad[key], dtype=np.float64)
        if analytic.shape != arr.shape:
            return GradCheckReport(False, np.inf, np.inf, (key,), n, tolerance,
                                   f"gradient shape {analytic.shape} != parameter shape {arr.shape}")
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            fp, _ = call(base)
            arr[idx] = orig - step
            fm, _ = call(base)
            arr[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckReport(False, np.inf, np.inf, (key, idx), n, tolerance,
                                       "non-finite loss under perturbation")
            numeric = (fp - fm) / (2.0 * step)
            a = analytic[idx]
            abs_err = abs(a - numeric)
            rel = abs_err / max(abs(a), abs(numeric), floor)
            n += 1
            worst_abs = max(worst_abs, abs_err)
            if rel > worst_rel:
                worst_rel, worst = rel, (key, idx) if not single else idx
    return GradCheckReport(worst_rel <= tolerance, worst_rel, worst_abs, worst, n, tolerance)
