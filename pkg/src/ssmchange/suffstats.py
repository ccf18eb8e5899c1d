"""Fixed-dimension sufficient statistics of the complete-data Gaussian likelihood.

The vector collects, for one or more segments:

* ``n_cp``, ``n_cont``: changepoint / continuation event counts;
* ``n_obs``, ``R``: number of activity-time rows and the summed expected
  outer product of measurement residuals;
* ``n_seg``, ``A11``, ``A10``, ``A00``: number of segment-state transitions
  and the summed second moments ``E[s_t s_t']`` (t >= 2),
  ``E[s_t s_{t-1}']`` and ``E[s_{t-1} s_{t-1}']``;
* ``n_act``, ``B11``, ``B10``, ``B00``: the same for activity states, summed
  over activities.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .model import BoundModel


@dataclass(frozen=True)
class StatsLayout:
    P: int
    M: int
    K: int

    @cached_property
    def slices(self) -> dict:
        fields = [
            ("n_cp", ()),
            ("n_cont", ()),
            ("n_obs", ()),
            ("R", (self.P, self.P)),
            ("n_seg", ()),
            ("A11", (self.M, self.M)),
            ("A10", (self.M, self.M)),
            ("A00", (self.M, self.M)),
            ("n_act", ()),
            ("B11", (self.K, self.K)),
            ("B10", (self.K, self.K)),
            ("B00", (self.K, self.K)),
        ]
        out, start = {}, 0
        for name, shape in fields:
            size = int(np.prod(shape)) if shape else 1
            out[name] = (slice(start, start + size), shape)
            start += size
        out["_size"] = start
        return out

    @property
    def size(self) -> int:
        return self.slices["_size"]

    @classmethod
    def of(cls, bound: BoundModel) -> "StatsLayout":
        return cls(bound.P, bound.M, bound.K)


class SuffStats:
    """A flat statistics vector with named views; supports affine arithmetic."""

    __slots__ = ("layout", "vec")

    def __init__(self, layout: StatsLayout, vec=None):
        self.layout = layout
        if vec is None:
            vec = np.zeros(layout.size)
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (layout.size,):
            raise ValueError(f"expected vector of length {layout.size}, got {vec.shape}")
        self.vec = vec

    @classmethod
    def zeros(cls, layout: StatsLayout) -> "SuffStats":
        return cls(layout)

    def __getattr__(self, name):
        if name in ("layout", "vec") or name.startswith("__"):
            raise AttributeError(name)
        try:
            sl, shape = self.layout.slices[name]
        except KeyError:
            raise AttributeError(name) from None
        view = self.vec[sl]
        return float(view[0]) if not shape else view.reshape(shape)

    def set(self, **values) -> "SuffStats":
        """Copy with the named components replaced."""
        vec = self.vec.copy()
        for name, value in values.items():
            sl, _ = self.layout.slices[name]
            vec[sl] = np.ravel(value)
        return SuffStats(self.layout, vec)

    def _check(self, other: "SuffStats"):
        if not isinstance(other, SuffStats) or other.layout != self.layout:
            raise TypeError("statistics layouts differ")

    def __add__(self, other):
        self._check(other)
        return SuffStats(self.layout, self.vec + other.vec)

    def __sub__(self, other):
        self._check(other)
        return SuffStats(self.layout, self.vec - other.vec)

    def __mul__(self, c):
        return SuffStats(self.layout, self.vec * float(c))

    __rmul__ = __mul__

    def __neg__(self):
        return SuffStats(self.layout, -self.vec)

    def allclose(self, other: "SuffStats", atol=1e-8, rtol=1e-8) -> bool:
        self._check(other)
        return bool(np.allclose(self.vec, other.vec, atol=atol, rtol=rtol))

    def __repr__(self):
        return f"SuffStats(P={self.layout.P}, M={self.layout.M}, K={self.layout.K}, n_obs={self.n_obs:g})"


def weighted_sum(items, weights) -> SuffStats:
    items = list(items)
    if not items:
        raise ValueError("no statistics to combine")
    vec = sum(float(w) * s.vec for s, w in zip(items, weights))
    return SuffStats(items[0].layout, vec)


def _diag_block_sum(A: np.ndarray, offset: int, m: int, K: int) -> np.ndarray:
    blocks = A[offset:, offset:].reshape(m, K, m, K)
    return np.einsum("ikil->kl", blocks)


def segment_statistics(
    bound: BoundModel,
    m: int,
    Z: np.ndarray,
    means: np.ndarray,
    Y: np.ndarray,
    mask: np.ndarray,
    cov_sum: np.ndarray,
    cov_first: np.ndarray,
    cov_last: np.ndarray,
    lag_sum: np.ndarray,
    covs=None,
) -> SuffStats:
    """Expected complete-data statistics of one segment of ``m`` activities.

    ``means`` are smoothed stacked states ``(T, M + m K)``; ``Y``/``mask`` the
    stacked observations ``(T, m P)``; ``Z`` the stacked loading matrix.
    ``covs`` (per-time smoothed covariances) are needed only with missing data.
    """
    layout = StatsLayout.of(bound)
    P, M, K = bound.P, bound.M, bound.K
    T = means.shape[0]
    Xs = means[:, :M]
    Xa = means[:, M:].reshape(T, m, K)
    V_late = cov_sum - cov_first  # sum over t = 2..T
    V_early = cov_sum - cov_last  # sum over t = 1..T-1
    A11 = Xs[1:].T @ Xs[1:] + V_late[:M, :M]
    A00 = Xs[:-1].T @ Xs[:-1] + V_early[:M, :M]
    A10 = Xs[1:].T @ Xs[:-1] + lag_sum[:M, :M]
    B11 = np.einsum("tik,til->kl", Xa[1:], Xa[1:]) + _diag_block_sum(V_late, M, m, K)
    B00 = np.einsum("tik,til->kl", Xa[:-1], Xa[:-1]) + _diag_block_sum(V_early, M, m, K)
    B10 = np.einsum("tik,til->kl", Xa[1:], Xa[:-1]) + _diag_block_sum(lag_sum, M, m, K)

    resid = (Y - means @ Z.T).reshape(T, m, P)
    if mask.all():
        R = np.einsum("tip,tiq->pq", resid, resid)
        R += _diag_block_sum(Z @ cov_sum @ Z.T, 0, m, P)
    else:
        if covs is None:
            raise ValueError("per-time covariances are required with missing data")
        R = _residual_with_missing(bound.Sigma, Z, resid, mask.reshape(T, m, P), covs)
    return SuffStats(layout).set(
        n_obs=m * T,
        R=R,
        n_seg=T - 1,
        A11=A11,
        A10=A10,
        A00=A00,
        n_act=m * (T - 1),
        B11=B11,
        B10=B10,
        B00=B00,
    )


def _residual_with_missing(Sigma, Z, resid, mask, covs) -> np.ndarray:
    """Sum of E[e e'] where missing residual entries are imputed from the observed ones."""
    T, m, P = resid.shape
    R = np.zeros((P, P))
    for t in range(T):
        for i in range(m):
            obs = mask[t, i]
            rows = slice(i * P, (i + 1) * P)
            Zi = Z[rows]
            if obs.all():
                R += np.outer(resid[t, i], resid[t, i]) + Zi @ covs[t] @ Zi.T
                continue
            if not obs.any():
                R += Sigma
                continue
            o, u = np.flatnonzero(obs), np.flatnonzero(~obs)
            Zo = Zi[o]
            Eoo = np.outer(resid[t, i, o], resid[t, i, o]) + Zo @ covs[t] @ Zo.T
            C = np.linalg.solve(Sigma[np.ix_(o, o)], Sigma[np.ix_(o, u)]).T
            cond = Sigma[np.ix_(u, u)] - C @ Sigma[np.ix_(o, u)]
            E = np.empty((P, P))
            E[np.ix_(o, o)] = Eoo
            E[np.ix_(u, o)] = C @ Eoo
            E[np.ix_(o, u)] = (C @ Eoo).T
            E[np.ix_(u, u)] = C @ Eoo @ C.T + cond
            R += E
    return R
