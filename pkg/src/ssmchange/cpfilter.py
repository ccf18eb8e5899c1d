"""Particle approximation of the changepoint-delay posterior.

The delay ``D_n`` counts activities since (and including) the last
changepoint.  Given the particle set for ``D_{n-1}`` and the potentials at
``n - 1``, each particle ``d`` proposes a changepoint ``(1, d)`` with
probability ``lam`` and a continuation ``(d + 1, d)`` otherwise; ``B`` draws
from this ``2B``-point support give the particle set for ``D_n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from scipy.special import logsumexp

from .model import ActivityPanel, BoundModel
from .segment import SegmentEvaluator


class DegenerateWeightsError(FloatingPointError):
    """Every weight is zero: the model cannot explain the data or the cache is broken."""


@dataclass(frozen=True)
class DelayParticle:
    d: int
    log_weight: float
    cached_logmarg: float = 0.0
    suffstats: object = None


@dataclass(frozen=True)
class ParticleSet:
    """``B`` delay particles at activity ``n`` with normalised log weights.

    ``logmarg`` and ``suffstats`` hold per-delay values shared by duplicate
    particles: ``log p(y[j..n-1])`` for the particle's segment and the
    running EM statistics.
    """

    n: int
    delays: np.ndarray
    log_weights: np.ndarray
    ancestors: Optional[np.ndarray] = None
    logmarg: Mapping[int, float] = field(default_factory=dict)
    suffstats: Mapping[int, object] = field(default_factory=dict)

    def __post_init__(self):
        delays = np.asarray(self.delays, dtype=int)
        logw = np.asarray(self.log_weights, dtype=float)
        if delays.ndim != 1 or delays.shape != logw.shape or delays.size == 0:
            raise ValueError("delays and log_weights must be equal-length non-empty vectors")
        if delays.min() < 1 or delays.max() > self.n:
            raise ValueError(f"delays must lie in 1..{self.n}")
        total = logsumexp(logw)
        if not np.isfinite(total):
            raise DegenerateWeightsError("particle weights are all zero")
        if abs(total) > 1e-12:
            logw = logw - total
        object.__setattr__(self, "delays", delays)
        object.__setattr__(self, "log_weights", logw)

    @classmethod
    def initial(cls, B: int) -> "ParticleSet":
        """Activity 1 always starts a segment."""
        return cls(1, np.ones(B, dtype=int), np.full(B, -np.log(B)))

    @property
    def B(self) -> int:
        return self.delays.size

    @property
    def unique(self) -> list[int]:
        return sorted(int(d) for d in np.unique(self.delays))

    def log_masses(self) -> dict[int, float]:
        """Log probability of each unique delay (duplicates pooled)."""
        return {d: float(logsumexp(self.log_weights[self.delays == d])) for d in self.unique}

    def masses(self) -> dict[int, float]:
        return {d: float(np.exp(v)) for d, v in self.log_masses().items()}

    @property
    def particles(self) -> list[DelayParticle]:
        return [
            DelayParticle(int(d), float(w), self.logmarg.get(int(d), 0.0), self.suffstats.get(int(d)))
            for d, w in zip(self.delays, self.log_weights)
        ]


def _evaluator(bound, panel, evaluator):
    if evaluator is not None:
        return evaluator
    if bound is None or panel is None:
        raise ValueError("need either log potentials, an evaluator, or bound and panel")
    return SegmentEvaluator(bound, panel)


def _potentials_at(ps: ParticleSet, bound, panel, log_potentials, evaluator) -> dict[int, float]:
    if log_potentials is not None:
        missing = [d for d in ps.unique if d not in log_potentials]
        if missing:
            raise KeyError(f"missing potentials for delays {missing} at activity {ps.n}")
        return {d: float(log_potentials[d]) for d in ps.unique}
    return _evaluator(bound, panel, evaluator).log_potentials(ps.n, ps.unique)


def augmented_support(ps: ParticleSet, log_potentials: Mapping[int, float], lam: float, d_max: Optional[int] = None):
    """The ``2B`` candidates ``(new delay, previous delay)`` with log weights."""
    prev = ps.delays
    base = ps.log_weights + np.array([log_potentials[int(d)] for d in prev])
    log_cont = np.full(prev.size, np.log1p(-lam))
    if d_max is not None:
        capped = prev + 1 > d_max
        log_cont[capped] = -np.inf
    new = np.concatenate([np.ones_like(prev), prev + 1])
    ancestors = np.concatenate([prev, prev])
    cp_logw = base + np.log(lam)
    if d_max is not None:
        # the capped continuation mass is moved to the changepoint branch
        cp_logw = np.where(prev + 1 > d_max, base, cp_logw)
    logw = np.concatenate([cp_logw, base + log_cont])
    return new, ancestors, logw


def _resample(rng: np.random.Generator, probs: np.ndarray, B: int, systematic: bool) -> np.ndarray:
    if systematic:
        positions = (rng.random() + np.arange(B)) / B
        idx = np.searchsorted(np.cumsum(probs), positions, side="right")
        return np.minimum(idx, probs.size - 1)
    return rng.choice(probs.size, size=B, replace=True, p=probs)


def predict_and_resample(
    ps: ParticleSet,
    bound: Optional[BoundModel] = None,
    panel=None,
    rng_seed=None,
    *,
    lam: Optional[float] = None,
    log_potentials: Optional[Mapping[int, float]] = None,
    evaluator: Optional[SegmentEvaluator] = None,
    d_max: Optional[int] = None,
    systematic: bool = False,
    B: Optional[int] = None,
) -> ParticleSet:
    """Particle set approximating ``p(D_n | y[1..n-1])`` from the set at ``n - 1``.

    ``log_potentials`` are the potentials of activity ``n - 1`` at the
    delays in ``ps``; they are computed from ``bound``/``panel`` when omitted.
    ``rng_seed`` may be a seed or a ``numpy.random.Generator``.
    """
    if lam is None:
        if bound is None:
            raise ValueError("lam is required without a bound model")
        lam = bound.lam
    logG = _potentials_at(ps, bound, panel, log_potentials, evaluator)
    new, ancestors, logw = augmented_support(ps, logG, lam, d_max)
    total = logsumexp(logw)
    if not np.isfinite(total):
        raise DegenerateWeightsError(f"all augmented weights vanish at activity {ps.n + 1}")
    probs = np.exp(logw - total)
    probs /= probs.sum()
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    B = ps.B if B is None else B
    idx = _resample(rng, probs, B, systematic)
    delays = new[idx]
    logmarg = {}
    if evaluator is not None or (bound is not None and panel is not None):
        ev = _evaluator(bound, panel, evaluator)
        n = ps.n + 1
        for d in np.unique(delays):
            d = int(d)
            logmarg[d] = ev.logmarginal(n - d + 1, n - 1) if d > 1 else 0.0
    return ParticleSet(ps.n + 1, delays, np.full(B, -np.log(B)), ancestors[idx], logmarg)


def filtered_posterior(
    ps: ParticleSet,
    bound: Optional[BoundModel] = None,
    panel=None,
    *,
    log_potentials: Optional[Mapping[int, float]] = None,
    evaluator: Optional[SegmentEvaluator] = None,
) -> dict[int, float]:
    """Reweight predicted particles at ``n`` by the potentials of activity ``n``."""
    logG = _potentials_at(ps, bound, panel, log_potentials, evaluator)
    log_mass = ps.log_masses()
    logw = {d: log_mass[d] + logG[d] for d in log_mass}
    total = logsumexp(list(logw.values()))
    if not np.isfinite(total):
        raise DegenerateWeightsError(f"filtered weights vanish at activity {ps.n}")
    return {d: float(np.exp(v - total)) for d, v in logw.items()}


def backward_kernel(
    ps_prev: ParticleSet,
    d_n: int,
    bound: Optional[BoundModel] = None,
    panel=None,
    *,
    lam: Optional[float] = None,
    log_potentials: Optional[Mapping[int, float]] = None,
    evaluator: Optional[SegmentEvaluator] = None,
) -> dict[int, float]:
    """Distribution of ``D_{n-1}`` given ``D_n = d_n`` and ``y[1..n-1]``."""
    d_n = int(d_n)
    if d_n > 1:
        if d_n - 1 not in set(ps_prev.unique):
            raise ValueError(f"delay {d_n - 1} is not in the support at activity {ps_prev.n}")
        return {d_n - 1: 1.0}
    if d_n != 1:
        raise ValueError(f"invalid delay {d_n}")
    # p(D_n = 1 | D_{n-1}) is the same for every predecessor, so the kernel is
    # the filtered posterior at n - 1
    return filtered_posterior(ps_prev, bound, panel, log_potentials=log_potentials, evaluator=evaluator)


@dataclass(frozen=True)
class ExactDelayPosterior:
    """Row ``n - 1`` holds ``p(D_n = d | .)`` at column ``d - 1``; zero beyond ``d = n``."""

    predicted: np.ndarray
    filtered: np.ndarray
    log_potentials: np.ndarray
    log_marginal: float

    @property
    def N(self) -> int:
        return self.filtered.shape[0]


def exact_enumeration(
    bound: BoundModel,
    panel: ActivityPanel,
    evaluator: Optional[SegmentEvaluator] = None,
    max_N: int = 14,
) -> ExactDelayPosterior:
    """Exact predicted and filtered delay distributions by forward recursion."""
    N = panel.N
    if N > max_N:
        raise ValueError(f"exact enumeration is limited to N <= {max_N}, got {N}")
    ev = evaluator if evaluator is not None else SegmentEvaluator(bound, panel)
    lam = bound.lam
    pred = np.zeros((N, N))
    filt = np.zeros((N, N))
    logG = np.full((N, N), -np.inf)
    log_marginal = 0.0
    for n in range(1, N + 1):
        if n == 1:
            pred[0, 0] = 1.0
        else:
            pred[n - 1, 0] = lam
            pred[n - 1, 1:n] = (1.0 - lam) * filt[n - 2, : n - 1]
        pots = ev.log_potentials(n, range(1, n + 1))
        for d, g in pots.items():
            logG[n - 1, d - 1] = g
        with np.errstate(divide="ignore"):
            logw = np.log(pred[n - 1, :n]) + logG[n - 1, :n]
        norm = logsumexp(logw)
        log_marginal += norm
        filt[n - 1, :n] = np.exp(logw - norm)
    return ExactDelayPosterior(pred, filt, logG, float(log_marginal))
