"""Kalman filter, RTS smoother and lag-one covariance smoother with missing data.

Missing entries are removed from the measurement equation at their time point
(rows of ``Z`` and rows/columns of ``H`` are deleted), so a fully missing time
point contributes nothing to the log-likelihood and leaves the prediction
untouched.  Covariances use the Joseph-form update and are re-symmetrised
after every step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla

LOG_2PI = float(np.log(2.0 * np.pi))
PIVOT_TOL = 1e-10


class SingularInnovationError(np.linalg.LinAlgError):
    """Innovation covariance is numerically singular."""


@dataclass(frozen=True)
class StateSpaceInstance:
    """Time-invariant linear Gaussian state space model.

    ``y_t = Z x_t + e_t``, ``e_t ~ N(0, H)``; ``x_{t+1} = Tmat x_t + w_t``,
    ``w_t ~ N(0, Q)``; ``x_1 ~ N(a1, P1)``.
    """

    Z: np.ndarray
    Tmat: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    a1: np.ndarray
    P1: np.ndarray

    def __post_init__(self):
        Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        p, n = Z.shape
        shapes = {"Tmat": (n, n), "H": (p, p), "Q": (n, n), "P1": (n, n)}
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=float).reshape(shape)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "a1", np.asarray(self.a1, dtype=float).reshape(n))
        for name in ("H", "Q", "P1"):
            mat = getattr(self, name)
            if not np.allclose(mat, mat.T, atol=1e-12 * max(1.0, np.abs(mat).max())):
                raise ValueError(f"{name} must be symmetric")

    @property
    def obs_dim(self) -> int:
        return self.Z.shape[0]

    @property
    def state_dim(self) -> int:
        return self.Z.shape[1]


@dataclass(frozen=True)
class StepResult:
    filtered_mean: np.ndarray
    filtered_cov: np.ndarray
    next_mean: np.ndarray
    next_cov: np.ndarray
    loglik: float
    innovation: np.ndarray
    innovation_cov: np.ndarray


@dataclass(frozen=True)
class FilterOutput:
    predicted_mean: np.ndarray  # (T, n), a_{t|t-1}
    predicted_cov: np.ndarray  # (T, n, n)
    filtered_mean: np.ndarray  # (T, n), a_{t|t}
    filtered_cov: np.ndarray
    innovations: list  # per t, vector over observed entries
    innovation_covs: list
    loglik_increments: np.ndarray  # (T,)

    @property
    def loglik(self) -> float:
        return float(self.loglik_increments.sum())

    @property
    def cumulative_loglik(self) -> np.ndarray:
        return np.cumsum(self.loglik_increments)


@dataclass(frozen=True)
class SmootherOutput:
    mean: np.ndarray  # (T, n), E[x_t | y_{1:T}]
    cov: np.ndarray  # (T, n, n), Var[x_t | y_{1:T}]
    lag_one_cov: np.ndarray  # (T-1, n, n), entry t is Cov(x_{t+1}, x_t | y_{1:T})
    filtered: FilterOutput

    @property
    def loglik(self) -> float:
        return self.filtered.loglik


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _cholesky(F: np.ndarray) -> np.ndarray:
    try:
        L = np.linalg.cholesky(F)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovationError("innovation covariance is not positive definite") from exc
    if np.min(np.diag(L)) ** 2 < PIVOT_TOL:
        raise SingularInnovationError(
            f"innovation covariance pivot {np.min(np.diag(L)) ** 2:.3g} below {PIVOT_TOL}"
        )
    return L


def _solve_psd(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``A X = B`` for symmetric PSD ``A``; pseudo-inverse when singular."""
    if A.size and np.any(np.diag(A) > 0):
        try:
            c = sla.cho_factor(A, check_finite=False)
            if np.min(np.abs(np.diag(c[0]))) ** 2 > 1e-14 * np.max(np.diag(A)):
                return sla.cho_solve(c, B, check_finite=False)
        except np.linalg.LinAlgError:
            pass
    return sla.pinvh(A) @ B


def _observed_mask(y: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return ~np.isnan(y)
    return np.asarray(mask, dtype=bool)


def advance(inst: StateSpaceInstance, state, y, mask=None) -> StepResult:
    """One filter step from the predicted moments ``state = (a_{t|t-1}, P_{t|t-1})``.

    Returns the filtered moments at ``t``, the predicted moments for ``t + 1``,
    the log-likelihood increment and the innovation with its covariance.
    """
    a, Pm = state
    y = np.asarray(y, dtype=float)
    obs = _observed_mask(y, mask)
    if obs.any():
        Zo = inst.Z[obs]
        Ho = inst.H[np.ix_(obs, obs)]
        v = y[obs] - Zo @ a
        PZt = Pm @ Zo.T
        F = _sym(Zo @ PZt + Ho)
        L = _cholesky(F)
        gain = sla.cho_solve((L, True), PZt.T, check_finite=False).T
        af = a + gain @ v
        IKZ = np.eye(inst.state_dim) - gain @ Zo
        Pf = _sym(IKZ @ Pm @ IKZ.T + gain @ Ho @ gain.T)
        w = sla.solve_triangular(L, v, lower=True, check_finite=False)
        ll = -0.5 * (obs.sum() * LOG_2PI + 2.0 * np.log(np.diag(L)).sum() + w @ w)
    else:
        v = np.zeros(0)
        F = np.zeros((0, 0))
        af, Pf, ll = a, Pm, 0.0
    an = inst.Tmat @ af
    Pn = _sym(inst.Tmat @ Pf @ inst.Tmat.T + inst.Q)
    return StepResult(af, Pf, an, Pn, float(ll), v, F)


def initial_state(inst: StateSpaceInstance):
    return inst.a1.copy(), inst.P1.copy()


def filter(inst: StateSpaceInstance, obs, mask=None) -> FilterOutput:  # noqa: A001
    """Run the Kalman filter over ``obs`` of shape ``(T, obs_dim)``.

    ``mask`` flags observed entries; when omitted, NaN marks missing.
    """
    obs = np.asarray(obs, dtype=float).reshape(-1, inst.obs_dim)
    mask = _observed_mask(obs, mask).reshape(obs.shape)
    T, n = obs.shape[0], inst.state_dim
    pm, pc = np.empty((T, n)), np.empty((T, n, n))
    fm, fc = np.empty((T, n)), np.empty((T, n, n))
    innov, innov_cov, lls = [], [], np.empty(T)
    state = initial_state(inst)
    for t in range(T):
        pm[t], pc[t] = state
        step = advance(inst, state, obs[t], mask[t])
        fm[t], fc[t] = step.filtered_mean, step.filtered_cov
        innov.append(step.innovation)
        innov_cov.append(step.innovation_cov)
        lls[t] = step.loglik
        state = (step.next_mean, step.next_cov)
    return FilterOutput(pm, pc, fm, fc, innov, innov_cov, lls)


def smooth(inst: StateSpaceInstance, obs, mask=None) -> SmootherOutput:
    """Fixed-interval (RTS) smoother with lag-one covariances."""
    f = filter(inst, obs, mask)
    T, n = f.filtered_mean.shape
    mean = np.empty((T, n))
    cov = np.empty((T, n, n))
    lag = np.empty((max(T - 1, 0), n, n))
    mean[-1], cov[-1] = f.filtered_mean[-1], f.filtered_cov[-1]
    for t in range(T - 2, -1, -1):
        J = _solve_psd(f.predicted_cov[t + 1], inst.Tmat @ f.filtered_cov[t]).T
        mean[t] = f.filtered_mean[t] + J @ (mean[t + 1] - f.predicted_mean[t + 1])
        cov[t] = _sym(f.filtered_cov[t] + J @ (cov[t + 1] - f.predicted_cov[t + 1]) @ J.T)
        lag[t] = cov[t + 1] @ J.T
    return SmootherOutput(mean, cov, lag, f)


@dataclass(frozen=True)
class BatchResult:
    """Filter/smoother output for several series sharing one covariance recursion.

    ``means`` are smoothed when smoothing was requested, filtered otherwise.
    Covariance sums are data independent and hence shared by the batch.
    """

    loglik: np.ndarray  # (B,)
    cumulative_loglik: np.ndarray  # (T, B)
    means: np.ndarray  # (T, n, B)
    cov_sum: Optional[np.ndarray] = None  # sum_t V_t
    cov_first: Optional[np.ndarray] = None  # V_1
    cov_last: Optional[np.ndarray] = None  # V_T
    lag_one_sum: Optional[np.ndarray] = None  # sum_t Cov(x_{t+1}, x_t)
    covs: Optional[np.ndarray] = None  # (T, n, n) when requested


def filter_smooth_batch(
    inst: StateSpaceInstance,
    Y: np.ndarray,
    mask: np.ndarray,
    smooth: bool = True,
    return_covs: bool = False,
) -> BatchResult:
    """Filter (and optionally smooth) ``B`` series ``Y[T, obs_dim, B]`` with a common mask.

    Kalman gains and covariances do not depend on the data, so one recursion
    serves every series that has the same missingness pattern.
    """
    Y = np.asarray(Y, dtype=float)
    T, p, B = Y.shape
    mask = np.asarray(mask, dtype=bool).reshape(T, p)
    n = inst.state_dim
    a = np.repeat(inst.a1[:, None], B, axis=1)
    Pm = inst.P1.copy()
    cum = np.empty((T, B))
    total = np.zeros(B)
    if smooth:
        a_pred, a_filt = np.empty((T, n, B)), np.empty((T, n, B))
        P_pred, P_filt = np.empty((T, n, n)), np.empty((T, n, n))
    else:
        a_filt = np.empty((T, n, B))
    eye = np.eye(n)
    for t in range(T):
        obs = mask[t]
        if smooth:
            a_pred[t], P_pred[t] = a, Pm
        if obs.any():
            Zo = inst.Z[obs]
            Ho = inst.H[np.ix_(obs, obs)]
            V = Y[t][obs] - Zo @ a
            PZt = Pm @ Zo.T
            F = _sym(Zo @ PZt + Ho)
            L = _cholesky(F)
            gain = sla.cho_solve((L, True), PZt.T, check_finite=False).T
            a = a + gain @ V
            IKZ = eye - gain @ Zo
            Pf = _sym(IKZ @ Pm @ IKZ.T + gain @ Ho @ gain.T)
            W = sla.solve_triangular(L, V, lower=True, check_finite=False)
            total = total - 0.5 * (obs.sum() * LOG_2PI + 2.0 * np.log(np.diag(L)).sum() + (W * W).sum(axis=0))
        else:
            Pf = Pm
        cum[t] = total
        a_filt[t] = a
        if smooth:
            P_filt[t] = Pf
        a = inst.Tmat @ a
        Pm = _sym(inst.Tmat @ Pf @ inst.Tmat.T + inst.Q)
    if not smooth:
        return BatchResult(total, cum, a_filt)

    means = np.empty((T, n, B))
    means[-1] = a_filt[-1]
    Vn = P_filt[-1]
    cov_sum = Vn.copy()
    lag_sum = np.zeros((n, n))
    covs = np.empty((T, n, n)) if return_covs else None
    if return_covs:
        covs[-1] = Vn
    cov_last = Vn.copy()
    for t in range(T - 2, -1, -1):
        J = _solve_psd(P_pred[t + 1], inst.Tmat @ P_filt[t]).T
        means[t] = a_filt[t] + J @ (means[t + 1] - a_pred[t + 1])
        lag_sum += Vn @ J.T
        Vn = _sym(P_filt[t] + J @ (Vn - P_pred[t + 1]) @ J.T)
        cov_sum += Vn
        if return_covs:
            covs[t] = Vn
    return BatchResult(total, cum, means, cov_sum, Vn, cov_last, lag_sum, covs)
