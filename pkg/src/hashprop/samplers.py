"""Node-selection strategies: standard, vanilla dropout, adaptive dropout,
winner-take-all and LSH retrieval.

These functions select one layer's active set for one example.  The
training engine runs the same rules inside its compiled kernels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .lsh_index import DEFAULT_K, DEFAULT_L, DEFAULT_PROBES, LayerIndex
from .network import ActiveSet

STD, VD, AD, WTA, LSH = "std", "vd", "ad", "wta", "lsh"
SAMPLERS = (STD, VD, AD, WTA, LSH)
SAMPLER_CODES = {STD: 0, VD: 1, AD: 2, WTA: 3, LSH: 4}


@dataclass(frozen=True)
class SamplerConfig:
    variant: str = STD
    keep_prob: float = 0.5
    alpha: float = 1.0
    beta: float = 0.0
    k_frac: float = 0.05
    K: int = DEFAULT_K
    L: int = DEFAULT_L
    probes: int = DEFAULT_PROBES
    seed: int = 0

    def __post_init__(self):
        if self.variant not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.variant!r}; choose from {SAMPLERS}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must lie in (0, 1]")
        if not 0.0 < self.k_frac <= 1.0:
            raise ValueError("k_frac must lie in (0, 1]")
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise ValueError("alpha and beta must be finite")
        if self.probes < 1:
            raise ValueError("probes must be >= 1")

    @property
    def code(self) -> int:
        return SAMPLER_CODES[self.variant]

    @property
    def needs_dense_forward(self) -> bool:
        return self.variant in (STD, AD, WTA)

    def cap(self, n: int) -> int:
        return max(1, math.ceil(self.k_frac * n))

    def level(self) -> float:
        """Nominal fraction of active nodes this configuration targets."""
        if self.variant == STD:
            return 1.0
        if self.variant == VD:
            return self.keep_prob
        if self.variant == AD:
            return float(expit(self.beta))
        return self.k_frac

    @classmethod
    def at_level(cls, variant: str, level: float, **kw) -> "SamplerConfig":
        """Configuration of ``variant`` targeting ``level`` active fraction.

        For adaptive dropout the level sets ``beta`` so that a zero
        pre-activation is kept with probability ``level``.
        """
        if variant == VD:
            return cls(variant, keep_prob=level, **kw)
        if variant == AD:
            beta = math.log(level / (1.0 - level)) if level < 1.0 else 10.0
            return cls(variant, beta=kw.pop("beta", beta), **kw)
        if variant in (WTA, LSH):
            return cls(variant, k_frac=level, **kw)
        return cls(variant, **kw)


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def select_standard(n: int) -> ActiveSet:
    return ActiveSet(np.arange(n), 1.0, "all")


def select_dropout(n: int, keep_prob: float, rng=None) -> ActiveSet:
    """Keep each unit independently with probability ``keep_prob``.

    Kept activations are scaled by ``1 / keep_prob`` during training.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError("keep_prob must lie in (0, 1]")
    if keep_prob == 1.0:
        return ActiveSet(np.arange(n), 1.0, "vd")
    keep = _rng(rng).random(n) < keep_prob
    return ActiveSet(np.flatnonzero(keep), 1.0, "vd")


def adaptive_keep_prob(pre, alpha: float, beta: float) -> np.ndarray:
    return expit(alpha * np.asarray(pre, dtype=np.float64) + beta)


def select_adaptive(pre, alpha: float, beta: float, rng=None) -> ActiveSet:
    """Bernoulli retention with probability ``sigmoid(alpha * z + beta)``.

    If nothing survives, the unit with the largest pre-activation is kept and
    the set is flagged as a fallback.
    """
    pre = np.asarray(pre, dtype=np.float64)
    keep = _rng(rng).random(pre.size) < adaptive_keep_prob(pre, alpha, beta)
    ids = np.flatnonzero(keep)
    if ids.size == 0 and pre.size:
        return ActiveSet(np.array([int(np.argmax(pre))]), 1.0, "ad", fallback=True)
    return ActiveSet(ids, 1.0, "ad")


def select_wta(activations, k_frac: float) -> ActiveSet:
    """Indices of the ``ceil(k_frac * n)`` largest nonzero activations.

    Ties go to the lowest id.
    """
    a = np.asarray(activations, dtype=np.float64)
    k = max(1, math.ceil(k_frac * a.size))
    order = np.argsort(-a, kind="stable")[:k]
    order = order[a[order] > 0.0]
    return ActiveSet(np.sort(order), k_frac, "wta")


def select_lsh(index: LayerIndex, x, config: SamplerConfig, rng=None) -> ActiveSet:
    """Retrieve the active set from ``index`` without computing any inactive
    activation.  ``x`` must already include the trailing bias coordinate."""
    res = index.query(x, config.probes, config.cap(index.n), seed=_rng(rng))
    return ActiveSet(res.ids, config.k_frac, "lsh", res.fallback)
