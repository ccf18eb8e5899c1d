"""Real-time changepoint probability while an activity is being recorded.

For every unique predicted delay ``d`` the monitor keeps a pair of Kalman
filters on the stacked model of activities ``j..n`` (``j = n - d + 1``): one
consumes the current activity, the other treats it as missing.  Past
activities are consumed ``k = min(T - t, kstar)`` steps ahead of the
current time ``t``; their ratio gives the predictive likelihood of
``y[n, 1..t]`` given ``D_n = d``, which is combined with the predicted delay
masses by Bayes' rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from . import kalman
from .cpfilter import ParticleSet
from .model import BoundModel
from .segment import assemble, stack_observations


@dataclass
class _FilterPair:
    d: int
    inst: kalman.StateSpaceInstance
    hist_values: np.ndarray  # (T, (d - 1) P)
    hist_mask: np.ndarray
    with_state: tuple
    with_ll: float = 0.0
    without_state: tuple = None
    without_ll: float = 0.0
    without_t: int = 0
    loglik: float = 0.0  # current log p(y[n, 1..t] | D_n = d, past), up to truncation

    def rows(self, t: int, y: Optional[np.ndarray], obs: Optional[np.ndarray]):
        """Stacked observation at 1-based time ``t``; ``y=None`` marks the current activity missing."""
        P = self.inst.obs_dim - self.hist_values.shape[1]
        if y is None:
            y, obs = np.zeros(P), np.zeros(P, dtype=bool)
        return (
            np.concatenate([self.hist_values[t - 1], y]),
            np.concatenate([self.hist_mask[t - 1], obs]),
        )


@dataclass
class MonitorState:
    n: int
    T: int
    kstar: int
    log_prior: dict
    filters: dict
    t: int = 0
    posterior: dict = field(default_factory=dict)
    trajectory: list = field(default_factory=list)

    @property
    def p_changepoint(self) -> float:
        return self.posterior.get(1, 0.0)

    @property
    def n_filters(self) -> int:
        return sum(1 if f.d == 1 else 2 for f in self.filters.values())


def start_activity(ps: ParticleSet, bound: BoundModel, history, kstar: int = 0, T: Optional[int] = None) -> MonitorState:
    """Set up the filter bank for activity ``ps.n`` given the completed history.

    ``history`` holds activities ``1..n-1`` (an ``ActivityPanel`` or any
    object exposing ``values``/``observed`` arrays); for the first activity
    it may be ``None``, in which case ``T`` must be given.
    """
    if kstar < 0:
        raise ValueError("kstar must be >= 0")
    n = ps.n
    if history is not None and history.values.shape[0] < n - 1:
        raise ValueError(f"history has {history.values.shape[0]} activities, need {n - 1}")
    delays = ps.unique
    if not delays:
        raise ValueError("empty predicted support")
    if history is not None:
        T = history.values.shape[1]
    if T is None:
        raise ValueError("activity length T is unknown without history")
    filters = {}
    for d in delays:
        inst = assemble(bound, d).inst
        if d > 1:
            hv, hm = stack_observations(history, n - d + 1, n - 1)
        else:
            hv, hm = np.zeros((T, 0)), np.zeros((T, 0), dtype=bool)
        init = kalman.initial_state(inst)
        filters[d] = _FilterPair(d, inst, hv, hm, init, without_state=init)
    log_prior = ps.log_masses()
    ms = MonitorState(n=n, T=T, kstar=kstar, log_prior=log_prior, filters=filters)
    ms.posterior = {d: float(np.exp(v)) for d, v in log_prior.items()}
    return ms


def _run_missing(fp: _FilterPair, state, start: int, stop: int):
    """Advance from predicted ``state`` at time ``start`` through ``stop`` without the current activity."""
    ll = 0.0
    for s in range(start, stop + 1):
        y, obs = fp.rows(s, None, None)
        res = kalman.advance(fp.inst, state, y, obs)
        ll += res.loglik
        state = (res.next_mean, res.next_cov)
    return state, ll


def step(ms: MonitorState, y_nt, observed=None, t: Optional[int] = None):
    """Consume the next observation vector of the monitored activity.

    Returns the updated state and the posterior over delays.
    """
    t_new = ms.t + 1
    if t is not None and t != t_new:
        raise ValueError(f"expected time {t_new}, got {t} (late or duplicate observation)")
    y = np.asarray(y_nt, dtype=float).reshape(-1)
    obs = ~np.isnan(y) if observed is None else np.asarray(observed, dtype=bool).reshape(-1)
    y = np.where(obs, y, 0.0)
    if t_new > ms.T:
        raise ValueError(f"activity already complete at T = {ms.T}")
    for fp in ms.filters.values():
        if fp.d == 1:
            res = kalman.advance(fp.inst, fp.with_state, y, obs)
            fp.with_state = (res.next_mean, res.next_cov)
            fp.with_ll += res.loglik
            fp.loglik = fp.with_ll
            continue
        ys, os = fp.rows(t_new, y, obs)
        res = kalman.advance(fp.inst, fp.with_state, ys, os)
        fp.with_state = (res.next_mean, res.next_cov)
        fp.with_ll += res.loglik
        horizon = t_new + min(ms.T - t_new, ms.kstar)
        if horizon > fp.without_t:
            fp.without_state, inc = _run_missing(fp, fp.without_state, fp.without_t + 1, horizon)
            fp.without_ll += inc
            fp.without_t = horizon
        ahead = 0.0
        if horizon > t_new:
            _, ahead = _run_missing(fp, fp.with_state, t_new + 1, horizon)
        fp.loglik = fp.with_ll + ahead - fp.without_ll
    ms.t = t_new
    logw = {d: ms.log_prior[d] + fp.loglik for d, fp in ms.filters.items()}
    total = logsumexp(list(logw.values()))
    ms.posterior = {d: float(np.exp(v - total)) for d, v in logw.items()}
    ms.trajectory.append(ms.p_changepoint)
    return ms, ms.posterior


def alert(ms: MonitorState, delta: float) -> bool:
    """True when the current changepoint probability exceeds ``delta``."""
    return ms.p_changepoint > delta
