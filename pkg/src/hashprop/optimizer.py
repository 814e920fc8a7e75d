"""SGD, momentum, Adagrad and their composition, dense or sparse.

Sparse steps touch only coordinates with a nonzero gradient.  Momentum
decay for skipped steps is applied lazily: when a coordinate is touched
again after ``dt`` steps, its velocity is decayed by ``gamma**(dt-1)`` and
the drift it would have caused in the meantime is applied in one go, so a
sparse trajectory equals the dense one up to rounding.

Network parameters and optimizer state are float32, update arithmetic is
float64.  The standalone step functions also accept float64 parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

SGD, MOMENTUM, ADAGRAD, COMBINED = 0, 1, 2, 3
KINDS = {"sgd": SGD, "momentum": MOMENTUM, "adagrad": ADAGRAD, "combined": COMBINED}

DEFAULT_GAMMA = 0.9
DEFAULT_EPS = 1e-8
LR_GRID = (1e-2, 1e-3, 1e-4)


@njit(cache=True, nogil=True, inline="always")
def _update(kind, th, v, G, last, k, g, t, eta, gamma, eps):
    """Apply one update with gradient ``g`` to flat coordinate ``k`` at step ``t``."""
    if kind == SGD:
        th[k] = np.float64(th[k]) - eta * g
        return
    if kind == ADAGRAD or kind == COMBINED:
        G[k] = np.float64(G[k]) + g * g
        g = g / np.sqrt(np.float64(G[k]) + eps)
        if kind == ADAGRAD:
            th[k] = np.float64(th[k]) - eta * g
            return
    theta = np.float64(th[k])
    vel = np.float64(v[k])
    dt = t - last[k]
    if dt > 1 and vel != 0.0:
        if gamma == 1.0:
            drift = dt - 1.0
        else:
            drift = gamma * (1.0 - gamma ** (dt - 1)) / (1.0 - gamma)
        theta -= vel * drift
        vel *= gamma ** (dt - 1)
    vel = gamma * vel + eta * g
    v[k] = vel
    th[k] = theta - np.float64(v[k])
    last[k] = t


@njit(cache=True, nogil=True)
def _step_flat(kind, th, v, G, last, grad, t, eta, gamma, eps, sparse):
    for k in range(th.shape[0]):
        g = np.float64(grad[k])
        if sparse and g == 0.0:
            continue
        _update(kind, th, v, G, last, k, g, t, eta, gamma, eps)


@dataclass
class OptimizerState:
    """Per-tensor optimizer state; ``step`` counts optimizer steps taken."""

    eta: float
    velocity: np.ndarray
    accum: np.ndarray
    last: np.ndarray
    gamma: float = DEFAULT_GAMMA
    eps: float = DEFAULT_EPS
    step: int = 0

    @classmethod
    def zeros_like(cls, theta, eta: float, gamma: float = DEFAULT_GAMMA,
                   eps: float = DEFAULT_EPS) -> "OptimizerState":
        theta = np.asarray(theta)
        dtype = theta.dtype if theta.dtype in (np.float32, np.float64) else np.float32
        return cls(eta, np.zeros(theta.shape, dtype), np.zeros(theta.shape, dtype),
                   np.zeros(theta.shape, np.int32), gamma, eps)

    def check(self):
        if np.any(self.accum < 0):
            raise ValueError("Adagrad accumulator went negative")


def _step(kind, theta, grad, state: OptimizerState, sparse: bool):
    if theta.dtype not in (np.float32, np.float64) or not theta.flags.c_contiguous:
        raise TypeError("parameters must be C-contiguous float32 or float64 arrays")
    if state.velocity.dtype != theta.dtype or state.velocity.shape != theta.shape:
        raise ValueError("optimizer state does not match the parameters")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {theta.shape}")
    state.step += 1
    _step_flat(kind, theta.reshape(-1), state.velocity.reshape(-1), state.accum.reshape(-1),
               state.last.reshape(-1), grad.reshape(-1), state.step, state.eta,
               state.gamma, state.eps, sparse)
    return theta


def sgd_step(theta, grad, state, sparse=False):
    return _step(SGD, theta, grad, state, sparse)


def momentum_step(theta, grad, state, sparse=False):
    """``v <- gamma v + eta g``; ``theta <- theta - v`` (in place)."""
    return _step(MOMENTUM, theta, grad, state, sparse)


def adagrad_step(theta, grad, state, sparse=False):
    """``G <- G + g^2``; ``theta <- theta - eta g / sqrt(G + eps)`` (in place)."""
    return _step(ADAGRAD, theta, grad, state, sparse)


def combined_step(theta, grad, state, sparse=False):
    """Adagrad-normalised gradient fed into the momentum recurrence."""
    return _step(COMBINED, theta, grad, state, sparse)


STEP_FUNCTIONS = {"sgd": sgd_step, "momentum": momentum_step,
                  "adagrad": adagrad_step, "combined": combined_step}


@dataclass
class NetworkOptimizer:
    """Optimizer state for every weight matrix and bias of a network.

    ``clock`` is the shared step counter used for lazy momentum decay; under
    asynchronous training it is incremented without synchronisation.
    """

    kind: str = "adagrad"
    eta: float = 1e-2
    gamma: float = DEFAULT_GAMMA
    eps: float = DEFAULT_EPS
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    clock: np.ndarray = field(default_factory=lambda: np.zeros(1, np.int64))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; choose from {sorted(KINDS)}")
        if not self.eta > 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")

    @property
    def code(self) -> int:
        return KINDS[self.kind]

    def attach(self, net) -> "NetworkOptimizer":
        self.weights = [OptimizerState.zeros_like(l.W, self.eta, self.gamma, self.eps)
                        for l in net.layers]
        self.biases = [OptimizerState.zeros_like(l.b, self.eta, self.gamma, self.eps)
                       for l in net.layers]
        self.clock[0] = 0
        return self
