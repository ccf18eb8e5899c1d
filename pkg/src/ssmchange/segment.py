"""Stacked segment models, segment log-marginals and changepoint potentials.

A segment of ``m`` activities is one state space model whose state stacks the
shared segment state with the ``m`` activity states.  Its filter
log-likelihood is the segment log-marginal; the log-potential of activity
``n`` at delay ``d`` is the increment of that log-marginal when activity ``n``
joins the segment started at ``j = n - d + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import scipy.linalg as sla

from . import kalman
from .kalman import StateSpaceInstance
from .model import ActivityPanel, BoundModel
from .suffstats import StatsLayout, SuffStats, segment_statistics


class StateDimensionError(ValueError):
    """Stacked segment state exceeds the configured maximum dimension."""


@dataclass(frozen=True)
class SegmentModel:
    m: int
    inst: StateSpaceInstance


def assemble(bound: BoundModel, m: int, max_state_dim: Optional[int] = None) -> SegmentModel:
    """Stack ``m`` activities sharing one segment state into one state space model."""
    if m < 1:
        raise ValueError(f"segment length must be >= 1, got {m}")
    P, M, K = bound.P, bound.M, bound.K
    dim = M + m * K
    if max_state_dim is not None and dim > max_state_dim:
        raise StateDimensionError(f"state dimension {dim} exceeds maximum {max_state_dim}")
    eye = np.eye(m)
    Z = np.hstack([np.tile(bound.Z_S, (m, 1)), np.kron(eye, bound.Z_A)])
    inst = StateSpaceInstance(
        Z=Z,
        Tmat=sla.block_diag(bound.T_S, np.kron(eye, bound.T_A)),
        H=np.kron(eye, bound.Sigma),
        Q=sla.block_diag(bound.Psi, np.kron(eye, bound.Delta)),
        a1=np.concatenate([bound.a1_S, np.tile(bound.a1_A, m)]),
        P1=sla.block_diag(bound.P1_S, np.kron(eye, bound.P1_A)),
    )
    return SegmentModel(m, inst)


def stack_observations(panel, j: int, k: int):
    """Observations of 1-based activities ``j..k`` as ``(T, m P)`` values and mask."""
    vals = panel.values[j - 1 : k]
    obs = panel.observed[j - 1 : k]
    m, T, P = vals.shape
    return (
        vals.transpose(1, 0, 2).reshape(T, m * P),
        obs.transpose(1, 0, 2).reshape(T, m * P),
    )


def segment_logmarginal(bound: BoundModel, panel: ActivityPanel, j: int, n: int, upto_t: Optional[int] = None) -> float:
    """``log p(y[j..n, 1..upto_t])`` when activities ``j..n`` form one segment."""
    if not 1 <= j <= n <= panel.N:
        raise ValueError(f"need 1 <= j <= n <= {panel.N}, got j={j}, n={n}")
    upto_t = panel.T if upto_t is None else upto_t
    if not 1 <= upto_t <= panel.T:
        raise ValueError(f"upto_t must lie in 1..{panel.T}")
    seg = assemble(bound, n - j + 1)
    Y, mask = stack_observations(panel, j, n)
    return kalman.filter(seg.inst, Y[:upto_t], mask[:upto_t]).loglik


@dataclass(frozen=True)
class SegmentResult:
    loglik: float
    cumulative_loglik: np.ndarray  # (T,)
    stats: Optional[SuffStats] = None


class PotentialCache:
    """Segment results keyed by ``(first, last)`` activity, valid for one bound model."""

    def __init__(self):
        self._store: dict[tuple[int, int], SegmentResult] = {}

    def get(self, key, need_stats: bool = False) -> Optional[SegmentResult]:
        res = self._store.get(key)
        if res is None or (need_stats and res.stats is None):
            return None
        return res

    def put(self, key, result: SegmentResult) -> None:
        self._store[key] = result

    def evict(self, min_first: int = 1, min_last: int = 0) -> None:
        """Drop segments starting before ``min_first`` or ending before ``min_last``."""
        self._store = {k: v for k, v in self._store.items() if k[0] >= min_first and k[1] >= min_last}

    def __len__(self):
        return len(self._store)

    def __contains__(self, key):
        return key in self._store


class SegmentEvaluator:
    """Evaluates segment log-marginals (and smoothed statistics) with caching.

    Requests are grouped by segment length and missingness pattern so that a
    single covariance recursion serves every segment in a group.
    """

    def __init__(self, bound: BoundModel, panel, cache: Optional[PotentialCache] = None, max_state_dim: Optional[int] = None):
        self.bound = bound
        self.panel = panel
        self.cache = cache if cache is not None else PotentialCache()
        self.max_state_dim = max_state_dim
        self._models: dict[int, SegmentModel] = {}
        self.layout = StatsLayout.of(bound)
        self.filter_passes = 0

    @property
    def T(self) -> int:
        return self.panel.values.shape[1]

    def model(self, m: int) -> SegmentModel:
        if m not in self._models:
            self._models[m] = assemble(self.bound, m, self.max_state_dim)
        return self._models[m]

    def _empty(self, stats: bool) -> SegmentResult:
        return SegmentResult(0.0, np.zeros(self.T), SuffStats.zeros(self.layout) if stats else None)

    def evaluate(self, spans: Iterable[tuple[int, int]], stats: bool = False) -> dict:
        """Results for each ``(j, k)``; ``k < j`` denotes the empty segment."""
        out, todo = {}, {}
        for j, k in spans:
            if k < j:
                out[(j, k)] = self._empty(stats)
                continue
            hit = self.cache.get((j, k), need_stats=stats)
            if hit is not None:
                out[(j, k)] = hit
                continue
            Y, mask = stack_observations(self.panel, j, k)
            group = todo.setdefault((k - j + 1, mask.tobytes()), ([], [], mask))
            if (j, k) not in group[0]:
                group[0].append((j, k))
                group[1].append(Y)
        for (m, _), (keys, Ys, mask) in todo.items():
            for key, res in zip(keys, self._run_group(m, keys, np.stack(Ys, axis=-1), mask, stats)):
                self.cache.put(key, res)
                out[key] = res
        return out

    def _run_group(self, m, keys, Y, mask, stats):
        inst = self.model(m).inst
        missing = not mask.all()
        res = kalman.filter_smooth_batch(inst, Y, mask, smooth=stats, return_covs=stats and missing)
        self.filter_passes += 1
        results = []
        for b in range(len(keys)):
            st = None
            if stats:
                st = segment_statistics(
                    self.bound,
                    m,
                    inst.Z,
                    res.means[:, :, b],
                    Y[:, :, b],
                    mask,
                    res.cov_sum,
                    res.cov_first,
                    res.cov_last,
                    res.lag_one_sum,
                    res.covs,
                )
            results.append(SegmentResult(float(res.loglik[b]), res.cumulative_loglik[:, b].copy(), st))
        return results

    def logmarginal(self, j: int, k: int) -> float:
        return self.evaluate([(j, k)])[(j, k)].loglik

    def log_potential(self, n: int, d: int) -> float:
        if not 1 <= d <= n:
            raise ValueError(f"delay {d} invalid at activity {n}")
        j = n - d + 1
        res = self.evaluate([(j, n), (j, n - 1)])
        return res[(j, n)].loglik - res[(j, n - 1)].loglik

    def log_potentials(self, n: int, delays: Iterable[int]) -> dict[int, float]:
        delays = sorted(set(int(d) for d in delays))
        spans = []
        for d in delays:
            if not 1 <= d <= n:
                raise ValueError(f"delay {d} invalid at activity {n}")
            spans += [(n - d + 1, n), (n - d + 1, n - 1)]
        res = self.evaluate(spans)
        return {d: res[(n - d + 1, n)].loglik - res[(n - d + 1, n - 1)].loglik for d in delays}


def log_potential(bound: BoundModel, panel: ActivityPanel, n: int, d: int, cache: Optional[PotentialCache] = None) -> float:
    """Log of the contribution of activity ``n`` to the likelihood given delay ``d``."""
    return SegmentEvaluator(bound, panel, cache).log_potential(n, d)
