"""Small fully-connected networks with exact analytic gradients.

Parameters live in a flat float64 vector (:class:`ParamVector`) whose layout is
derived from a :class:`NetworkSpec`.  Every layer is stored as a row-major
``(out, in)`` weight matrix followed by its ``(out,)`` bias.  Hidden layers use
a rectifier whose derivative at exactly zero is taken to be zero.

All public functions are pure: they never modify their inputs.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np


class InvalidSpecError(ValueError):
    pass


class LayoutMismatchError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class ImmutableParamsError(RuntimeError):
    """Raised when an update is attempted on parameters flagged as fixed."""


class Head(enum.IntEnum):
    SOFTMAX_POLICY = 0
    SCALAR_VALUE = 1
    TANH_SCALAR = 2


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    head: Head = Head.SCALAR_VALUE
    n_actions: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "head", Head(self.head))
        if self.input_dim <= 0 or any(h <= 0 for h in self.hidden_dims):
            raise InvalidSpecError(f"layer sizes must be positive: {self}")
        if self.head is Head.SOFTMAX_POLICY and self.n_actions < 2:
            raise InvalidSpecError("a softmax policy needs at least two actions")

    @property
    def output_dim(self) -> int:
        return self.n_actions if self.head is Head.SOFTMAX_POLICY else 1

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)

    def to_ints(self) -> list[int]:
        return [self.input_dim, int(self.head), self.n_actions, len(self.hidden_dims), *self.hidden_dims]

    @classmethod
    def from_ints(cls, ints: Sequence[int]) -> "NetworkSpec":
        input_dim, head, n_actions, n_hidden, *hidden = ints
        if len(hidden) != n_hidden:
            raise InvalidSpecError("corrupt spec encoding")
        return cls(input_dim, tuple(hidden), Head(head), n_actions)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat parameters (or a gradient) for one network.

    The values array is made read-only on construction so instances behave as
    values.  ``trainable=False`` marks parameters that must stay fixed for a run.
    """

    spec: NetworkSpec
    values: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).ravel()
        if values.shape[0] != self.spec.n_params:
            raise LayoutMismatchError(
                f"expected {self.spec.n_params} values for {self.spec}, got {values.shape[0]}"
            )
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]

    @cached_property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out, pos = [], 0
        for o, i in self.spec.layer_shapes:
            w = self.values[pos:pos + o * i].reshape(o, i)
            pos += o * i
            out.append((w, self.values[pos:pos + o]))
            pos += o
        return out

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(self.spec, values, self.trainable)

    def frozen(self) -> "ParamVector":
        return ParamVector(self.spec, self.values, trainable=False)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.values, other.values)


# Gradients share the parameter layout.
GradVector = ParamVector


def zeros_like(params: ParamVector) -> ParamVector:
    return ParamVector(params.spec, np.zeros(len(params)))


def init_network(spec: NetworkSpec, seed: int | np.random.Generator) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chunks = []
    for o, i in spec.layer_shapes:
        bound = 1.0 / np.sqrt(i)
        chunks.append(rng.uniform(-bound, bound, size=o * i))
        chunks.append(np.zeros(o))
    return ParamVector(spec, np.concatenate(chunks))


# --------------------------------------------------------------------------
# batched forward / backward

def _as_batch(x, input_dim: int) -> np.ndarray:
    x = np.asarray(getattr(x, "features", x), dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != input_dim:
        raise LayoutMismatchError(f"input has {x.shape[-1]} features, network expects {input_dim}")
    return x


def forward(params: ParamVector, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Return pre-head outputs ``(T, out)`` and the layer inputs needed for backprop."""
    acts = [x]
    h = x
    layers = params.layers
    for w, b in layers[:-1]:
        h = h @ w.T + b
        np.maximum(h, 0.0, out=h)
        acts.append(h)
    w, b = layers[-1]
    return h @ w.T + b, acts


def backward(params: ParamVector, acts: list[np.ndarray], dout: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_t <dout_t, out_t>`` with respect to the flat parameters."""
    grads = []
    delta = dout
    layers = params.layers
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        a = acts[k]
        grads.append(delta.sum(axis=0))
        grads.append((delta.T @ a).ravel())
        if k:
            delta = (delta @ w) * (a > 0.0)
    return np.concatenate(grads[::-1])


def backward_per_sample(params: ParamVector, acts: list[np.ndarray], dout: np.ndarray) -> np.ndarray:
    """Like :func:`backward` but keeps one gradient row per sample, shape ``(T, P)``."""
    T = dout.shape[0]
    grads = []
    delta = dout
    layers = params.layers
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        a = acts[k]
        grads.append(delta)
        grads.append(np.einsum("to,ti->toi", delta, a).reshape(T, -1))
        if k:
            delta = (delta @ w) * (a > 0.0)
    return np.concatenate(grads[::-1], axis=1)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_head(params: ParamVector, *heads: Head) -> None:
    if params.spec.head not in heads:
        raise InvalidSpecError(f"operation needs a {'/'.join(h.name for h in heads)} head")


def _one_hot(actions, n: int) -> np.ndarray:
    actions = np.atleast_1d(np.asarray(actions))
    if actions.dtype.kind not in "iu" or np.any(actions < 0) or np.any(actions >= n):
        raise ValueError(f"invalid action index {actions} for {n} actions")
    out = np.zeros((actions.shape[0], n))
    out[np.arange(actions.shape[0]), actions] = 1.0
    return out


def action_inputs(obs, actions, n_actions: int) -> np.ndarray:
    """Concatenate observation features with a one-hot action encoding."""
    x = np.asarray(getattr(obs, "features", obs), dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    a = _one_hot(actions, n_actions)
    if a.shape[0] != x.shape[0]:
        a = np.broadcast_to(a, (x.shape[0], n_actions))
    out = np.concatenate([x, a], axis=1)
    return out[0] if single else out


# --------------------------------------------------------------------------
# policy

def policy_probs(theta: ParamVector, x) -> np.ndarray:
    _check_head(theta, Head.SOFTMAX_POLICY)
    z, _ = forward(theta, _as_batch(x, theta.spec.input_dim))
    return _softmax(z)


def policy_forward(theta: ParamVector, obs) -> np.ndarray:
    """Action distribution for a single observation."""
    return policy_probs(theta, obs)[0]


def log_probs(theta: ParamVector, x, actions) -> np.ndarray:
    _check_head(theta, Head.SOFTMAX_POLICY)
    z, _ = forward(theta, _as_batch(x, theta.spec.input_dim))
    actions = np.atleast_1d(np.asarray(actions))
    return _log_softmax(z)[np.arange(z.shape[0]), actions]


def _log_prob_dout(theta, x, actions):
    z, acts = forward(theta, _as_batch(x, theta.spec.input_dim))
    return _one_hot(actions, theta.spec.n_actions) - _softmax(z), acts


def grad_log_prob(theta: ParamVector, obs, action: int) -> GradVector:
    _check_head(theta, Head.SOFTMAX_POLICY)
    dout, acts = _log_prob_dout(theta, obs, action)
    return ParamVector(theta.spec, backward(theta, acts, dout))


def weighted_log_prob_grad(theta: ParamVector, x, actions, weights) -> GradVector:
    """``sum_t weights_t * grad log pi(a_t|s_t)`` in one backward pass."""
    _check_head(theta, Head.SOFTMAX_POLICY)
    dout, acts = _log_prob_dout(theta, x, actions)
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    return ParamVector(theta.spec, backward(theta, acts, dout * w))


def per_step_log_prob_grads(theta: ParamVector, x, actions) -> np.ndarray:
    _check_head(theta, Head.SOFTMAX_POLICY)
    dout, acts = _log_prob_dout(theta, x, actions)
    return backward_per_sample(theta, acts, dout)


# --------------------------------------------------------------------------
# scalar heads: value, intrinsic reward, reward predictor

def scalar_outputs(params: ParamVector, x) -> np.ndarray:
    _check_head(params, Head.SCALAR_VALUE, Head.TANH_SCALAR)
    z, _ = forward(params, _as_batch(x, params.spec.input_dim))
    z = z[:, 0]
    return np.tanh(z) if params.spec.head is Head.TANH_SCALAR else z


def _scalar_dout(params, x, upstream):
    z, acts = forward(params, _as_batch(x, params.spec.input_dim))
    d = np.asarray(upstream, dtype=np.float64).reshape(-1, 1) * np.ones_like(z)
    if params.spec.head is Head.TANH_SCALAR:
        d = d * (1.0 - np.tanh(z) ** 2)
    return d, acts


def value_forward(theta_v: ParamVector, obs) -> float:
    return float(scalar_outputs(theta_v, obs)[0])


def grad_value_mse(theta_v: ParamVector, obs, target: float) -> GradVector:
    """Gradient of 0.5 * (V(s) - target)**2."""
    _check_head(theta_v, Head.SCALAR_VALUE, Head.TANH_SCALAR)
    err = scalar_outputs(theta_v, obs) - target
    d, acts = _scalar_dout(theta_v, obs, err)
    return ParamVector(theta_v.spec, backward(theta_v, acts, d))


def mse_grad_batch(params: ParamVector, x, targets, scale: float = 1.0) -> GradVector:
    """Gradient of ``scale * sum_t 0.5 * (f(x_t) - target_t)**2``."""
    err = scalar_outputs(params, x) - np.asarray(targets, dtype=np.float64)
    d, acts = _scalar_dout(params, x, scale * err)
    return ParamVector(params.spec, backward(params, acts, d))


def _reward_n_actions(eta: ParamVector, obs) -> int:
    n_obs = np.asarray(getattr(obs, "features", obs)).shape[-1]
    return eta.spec.input_dim - n_obs


def reward_forward(eta: ParamVector, obs, action: int) -> float:
    """Intrinsic reward for one (observation, action) pair."""
    x = action_inputs(obs, action, _reward_n_actions(eta, obs))
    return float(scalar_outputs(eta, x)[0])


def reward_batch(eta: ParamVector, obs, actions) -> np.ndarray:
    obs = np.atleast_2d(obs)
    return scalar_outputs(eta, action_inputs(obs, actions, _reward_n_actions(eta, obs)))


def grad_reward(eta: ParamVector, obs, action: int) -> GradVector:
    x = action_inputs(obs, action, _reward_n_actions(eta, obs))
    d, acts = _scalar_dout(eta, x, 1.0)
    return ParamVector(eta.spec, backward(eta, acts, d))


def per_step_reward_grads(eta: ParamVector, obs, actions) -> np.ndarray:
    obs = np.atleast_2d(obs)
    x = action_inputs(obs, actions, _reward_n_actions(eta, obs))
    d, acts = _scalar_dout(eta, x, np.ones(x.shape[0]))
    return backward_per_sample(eta, acts, d)


# --------------------------------------------------------------------------
# optimizers

class OptKind(enum.Enum):
    SGD = "sgd"
    ADAM = "adam"
    RMSPROP = "rmsprop"


class Direction(enum.Enum):
    ASCENT = 1.0
    DESCENT = -1.0


@dataclass(frozen=True, eq=False)
class OptimizerState:
    """Optimizer hyperparameters plus moment accumulators.

    ``anneal_horizon`` > 0 makes the step size decay linearly from ``lr`` to
    zero over that many steps.  For RMSProp ``beta2`` is the decay factor.
    """

    kind: OptKind
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    anneal_horizon: int = 0
    step_count: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def sgd(cls, lr, anneal_horizon=0):
        return cls(OptKind.SGD, lr, anneal_horizon=anneal_horizon)

    @classmethod
    def adam(cls, lr, beta1=0.9, beta2=0.999, eps=1e-8, anneal_horizon=0):
        return cls(OptKind.ADAM, lr, beta1, beta2, eps, anneal_horizon)

    @classmethod
    def rmsprop(cls, lr, decay=0.99, eps=1e-5, anneal_horizon=0):
        return cls(OptKind.RMSPROP, lr, 0.0, decay, eps, anneal_horizon)

    def step_size(self, step: int | None = None) -> float:
        step = self.step_count if step is None else step
        if self.anneal_horizon <= 0:
            return self.lr
        return self.lr * max(0.0, 1.0 - step / self.anneal_horizon)

    def replace(self, **kw) -> "OptimizerState":
        d = dict(kind=self.kind, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                 anneal_horizon=self.anneal_horizon, step_count=self.step_count, m=self.m, v=self.v)
        d.update(kw)
        return OptimizerState(**d)


def apply_update(params: ParamVector, grad: GradVector, opt: OptimizerState,
                 direction: Direction = Direction.ASCENT) -> tuple[ParamVector, OptimizerState]:
    if not params.trainable:
        raise ImmutableParamsError("parameters are flagged immutable for this run")
    if grad.spec != params.spec or len(grad) != len(params):
        raise LayoutMismatchError("gradient layout does not match parameters")
    g = grad.values
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError("refusing to apply a non-finite gradient")
    if opt.m is not None and opt.m.shape != g.shape:
        raise LayoutMismatchError("optimizer accumulators do not match parameters")

    lr = opt.step_size()
    sign = direction.value
    t = opt.step_count + 1
    m = opt.m if opt.m is not None else np.zeros_like(g)
    v = opt.v if opt.v is not None else np.zeros_like(g)
    if opt.kind is OptKind.SGD:
        delta = lr * g
    elif opt.kind is OptKind.ADAM:
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
        m_hat = m / (1.0 - opt.beta1 ** t)
        v_hat = v / (1.0 - opt.beta2 ** t)
        delta = lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    else:
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
        delta = lr * g / (np.sqrt(v) + opt.eps)
    new = params.with_values(params.values + sign * delta)
    return new, opt.replace(step_count=t, m=m, v=v)


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"PFCK1"


def checkpoint_bytes(params: ParamVector) -> bytes:
    ints = params.spec.to_ints()
    head = CHECKPOINT_MAGIC + struct.pack(f"<I{len(ints)}q", len(ints), *ints)
    return head + params.values.astype("<f8").tobytes()


def save_checkpoint(params: ParamVector, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> ParamVector:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a PFCK1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    ints = struct.unpack_from(f"<{n}q", data, pos)
    pos += 8 * n
    spec = NetworkSpec.from_ints(ints)
    values = np.frombuffer(data, dtype="<f8", offset=pos)
    if values.shape[0] != spec.n_params:
        raise ValueError(f"{path}: truncated checkpoint")
    return ParamVector(spec, values.astype(np.float64))
