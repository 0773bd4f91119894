"""Batch, instance, mixed (XAN) and statistic-mixing normalization.

All layers take B x C x W x H activations.  Parameters may be plain arrays
or :class:`~fdglab.tensor.Tensor` leaves; gradients flow to whichever are
grad-enabled.  Running statistics are the only mutable state and change
only in ``"train"`` mode.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateReductionError, DimensionError

EPS = 1e-5
MOMENTUM = 0.1

IN_AXES = (2, 3)
BN_AXES = (0, 2, 3)
MODES = ("train", "eval")


@dataclass
class AffinePair:
    gamma: object
    beta: object

    @classmethod
    def identity(cls, channels):
        return cls(np.ones(channels), np.zeros(channels))


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = MOMENTUM

    @classmethod
    def fresh(cls, channels, momentum=MOMENTUM):
        return cls(np.zeros(channels), np.ones(channels), momentum)

    def update(self, batch_mean, batch_var):
        m = self.momentum
        self.mean = (1.0 - m) * self.mean + m * np.asarray(batch_mean).reshape(self.mean.shape)
        self.var = (1.0 - m) * self.var + m * np.asarray(batch_var).reshape(self.var.shape)


@dataclass
class XanLayerState:
    """Everything one XAN layer owns.

    ``w_in``/``w_bn`` are per-channel vectors of length C, or length-1
    vectors for a single per-layer weight.
    """

    in_side: AffinePair
    bn_side: AffinePair
    bn_running: RunningStats
    w_in: object
    w_bn: object
    epsilon: float = EPS

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @classmethod
    def init(cls, channels, rng, per_channel=True, eps=EPS, momentum=MOMENTUM):
        """Identity affines, fresh running stats, ``w_in = u``, ``w_bn = 1 - u``, u ~ U(0.3, 0.7)."""
        u = rng.uniform(0.3, 0.7, size=channels if per_channel else 1)
        return cls(AffinePair.identity(channels), AffinePair.identity(channels),
                   RunningStats.fresh(channels, momentum), u, 1.0 - u, eps)


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def _check_input(x):
    if x.ndim != 4:
        raise DimensionError(f"normalization expects B x C x W x H input, got rank {x.ndim}", axis=0)


def _channel(v, channels=None):
    """Reshape a per-channel (or length-1) vector to broadcast over B, W, H."""
    v = T.as_tensor(v)
    if channels is not None and v.shape[0] not in (1, channels):
        raise DimensionError(f"per-channel vector of length {v.shape[0]} for {channels} channels", axis=1)
    return T.reshape(v, (1, v.shape[0], 1, 1))


def _affine(xhat, affine):
    c = xhat.shape[1]
    return T.add(T.mul(xhat, _channel(affine.gamma, c)), _channel(affine.beta, c))


def _normalize(x, mu, var, affine, eps):
    return _affine(T.div(T.sub(x, mu), T.sqrt(T.add(var, eps))), affine)


def _check_in_extent(x):
    if x.shape[2] * x.shape[3] < 2:
        raise DegenerateReductionError(
            f"instance statistics need W*H >= 2, got {x.shape[2]}x{x.shape[3]}")


def _check_bn_extent(x):
    if x.shape[0] * x.shape[2] * x.shape[3] < 2:
        raise DegenerateReductionError(f"batch statistics need B*W*H >= 2, got shape {x.shape}")


def _running(running, c):
    return (T.Tensor(running.mean.reshape(1, c, 1, 1)),
            T.Tensor(running.var.reshape(1, c, 1, 1)))


def instance_norm(x, affine, eps=EPS):
    x = T.as_tensor(x)
    _check_input(x)
    _check_in_extent(x)
    xhat, _, _ = T.normalize(x, IN_AXES, eps)
    return _affine(xhat, affine)


def batch_norm(x, affine, running, mode="train", eps=EPS):
    x = T.as_tensor(x)
    _check_input(x)
    _check_mode(mode)
    if mode == "eval":
        mu, var = _running(running, x.shape[1])
        return _normalize(x, mu, var, affine, eps)
    _check_bn_extent(x)
    xhat, mu, var = T.normalize(x, BN_AXES, eps)
    running.update(mu, var)
    return _affine(xhat, affine)


def xan_forward(x, state, mode="train"):
    """``w_in * IN(x) + w_bn * BN(x)``, each branch with its own affine pair."""
    x = T.as_tensor(x)
    c = x.shape[1]
    in_branch = instance_norm(x, state.in_side, state.epsilon)
    bn_branch = batch_norm(x, state.bn_side, state.bn_running, mode, state.epsilon)
    return T.add(T.mul(_channel(state.w_in, c), in_branch),
                 T.mul(_channel(state.w_bn, c), bn_branch))


def mix_weights(w_in, w_bn):
    """Two-way softmax of the raw weights; returns (w~_in, w~_bn)."""
    a = T.sigmoid(T.sub(w_in, w_bn))
    return a, T.sub(1.0, a)


def stat_mix_forward(x, state, mode="train"):
    """Single normalization with IN and BN statistics blended before use.

    Uses the ``bn_side`` affine pair; ``in_side`` is ignored.
    """
    x = T.as_tensor(x)
    _check_input(x)
    _check_mode(mode)
    c = x.shape[1]
    _check_in_extent(x)
    mu_in, var_in = T.reduce_stats(x, IN_AXES)
    if mode == "train":
        _check_bn_extent(x)
        mu_bn, var_bn = T.reduce_stats(x, BN_AXES)
        state.bn_running.update(mu_bn.data, var_bn.data)
    else:
        mu_bn, var_bn = _running(state.bn_running, c)
    a, b = mix_weights(state.w_in, state.w_bn)
    a, b = _channel(a, c), _channel(b, c)
    mu = T.add(T.mul(a, mu_in), T.mul(b, mu_bn))
    var = T.add(T.mul(a, var_in), T.mul(b, var_bn))
    return _normalize(x, mu, var, state.bn_side, state.epsilon)
