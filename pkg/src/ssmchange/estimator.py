"""Scikit-learn style front end to the changepoint engine."""

from __future__ import annotations

import copy
import logging
from typing import Iterator, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import monitor as _monitor
from .model import DEFAULT_INIT_VAR, Family, ModelSpec, Theta, sim_spec, warmup_spec
from .onlineem import EngineConfig, GammaSchedule, OnlineEM
from .validation import check_panel, check_probability

logger = logging.getLogger(__name__)

DEFAULT_SIM_THETA = (1.0, 0.1, 1.0, 0.5)


def moment_theta(panel, sigma_alpha2: float = 0.1, n_pairs: Optional[int] = None) -> tuple:
    """Starting values ``(sigma_eps2, sigma_alpha2, sigma_d2, rho)`` for the simulation family.

    The difference of two consecutive activities cancels a shared segment
    state, leaving two independent AR(1)-plus-noise series.  Its lag 0..2
    autocovariances identify the noise variance, the AR coefficient and the
    innovation variance.  Medians over consecutive pairs (the first ``n_pairs``, or all)
    keep pairs straddling a changepoint from dominating.
    """
    v, o = panel.values, panel.observed
    rows = []
    limit = panel.N - 1 if n_pairs is None else min(panel.N - 1, n_pairs)
    for n in range(limit):
        z = v[n] - v[n + 1]
        ok = o[n] & o[n + 1]
        for p in range(panel.P):
            mask = ok[:, p]
            if mask.sum() < 4:
                continue
            zp = np.where(mask, z[:, p] - z[mask, p].mean(), 0.0)
            g = []
            for k in range(3):
                both = mask[k:] & mask[: mask.size - k]
                g.append(np.sum(zp[k:] * zp[: zp.size - k] * both) / max(both.sum(), 1))
            rows.append(g)
    if not rows:
        return DEFAULT_SIM_THETA
    g0, g1, g2 = np.median(np.asarray(rows), axis=0)
    if not (g0 > 0 and g1 > 0):
        return DEFAULT_SIM_THETA
    rho = float(np.clip(g2 / g1, 0.05, 0.95))
    stationary = g1 / (2 * rho)
    sigma_d2 = stationary * (1 - rho**2)
    sigma_eps2 = max(g0 / 2 - stationary, 0.05 * g0 / 2)
    return float(sigma_eps2), float(sigma_alpha2), float(sigma_d2), rho


def default_warmup_theta() -> Theta:
    return Theta.warmup(
        Sigma=np.diag([4.0, 0.05]),
        Psi=np.diag([1.0, 0.01, 0.05]),
        Delta=np.diag([1.0, 0.1]),
        rho_sp=0.5,
    )


class ChangepointDetector(BaseEstimator):
    """Doubly-online changepoint detector for panels of multivariate activities.

    Activities are processed in order.  After each one the detector holds
    the posterior probability that it started a new segment
    (``changepoint_proba_``) and, for every time point inside it, the
    probability available while it was still being recorded
    (``within_proba_``).  Parameters are learned on the fly by online EM.

    Parameters
    ----------
    family : {"sim", "warmup", "custom"}
        Model family.  ``"custom"`` requires ``model_spec``.
    lam : float
        Prior changepoint probability per activity.
    n_particles : int
        Number of delay particles.
    kstar : int
        Lookahead of the within-activity monitor; ``0`` uses no lookahead.
    delta : float
        Alert threshold used by :meth:`predict`.
    kappa, gamma_offset : float
        Step sizes ``gamma_n = (n + gamma_offset) ** -kappa``.
    burn_in : int
        Parameters stay frozen while ``n <= burn_in``.
    passes : int
        Number of sweeps over the panel; each warm-starts from the last.
    d_max : int or None
        Optional cap on the delay.
    init_var : float
        Diffuse initial variance of the simulation family.
    theta_init : tuple, Theta or None
        Starting parameters; a 4-tuple ``(sigma_eps2, sigma_alpha2,
        sigma_d2, rho)`` for the simulation family.  ``None`` derives them
        from moments of the data in the first fit call (see :func:`moment_theta`).
    learn : bool
        Disable to run with ``theta_init`` held fixed.
    systematic : bool
        Systematic instead of multinomial resampling.
    model_spec : ModelSpec or None
        Design for the custom family.
    random_state : int or None
    """

    def __init__(
        self,
        family: str = "sim",
        lam: float = 0.5,
        n_particles: int = 100,
        kstar: int = 0,
        delta: float = 0.5,
        kappa: float = 0.7,
        gamma_offset: float = 1.0,
        burn_in: int = 10,
        passes: int = 1,
        d_max: Optional[int] = None,
        init_var: float = DEFAULT_INIT_VAR,
        theta_init=None,
        learn: bool = True,
        systematic: bool = False,
        model_spec: Optional[ModelSpec] = None,
        random_state=None,
    ):
        self.family = family
        self.lam = lam
        self.n_particles = n_particles
        self.kstar = kstar
        self.delta = delta
        self.kappa = kappa
        self.gamma_offset = gamma_offset
        self.burn_in = burn_in
        self.passes = passes
        self.d_max = d_max
        self.init_var = init_var
        self.theta_init = theta_init
        self.learn = learn
        self.systematic = systematic
        self.model_spec = model_spec
        self.random_state = random_state

    # configuration helpers

    def _check_params(self):
        check_probability(self.lam, "lam", open_interval=True)
        check_probability(self.delta, "delta", open_interval=True)
        if int(self.n_particles) < 1:
            raise ValueError("n_particles must be >= 1")
        if int(self.kstar) < 0:
            raise ValueError("kstar must be >= 0")
        if int(self.passes) < 1:
            raise ValueError("passes must be >= 1")
        if not self.init_var > 0:
            raise ValueError("init_var must be > 0")
        Family.parse(self.family)

    def _spec(self, P: int) -> ModelSpec:
        fam = Family.parse(self.family)
        if fam is Family.SIM:
            return sim_spec(P=P, lam=self.lam, init_var=self.init_var)
        if fam is Family.WARMUP:
            if P != 2:
                raise ValueError(f"the warm-up family needs P = 2 variables, got {P}")
            return warmup_spec(self.lam)
        if self.model_spec is None:
            raise ValueError("family 'custom' requires model_spec")
        if self.model_spec.P != P:
            raise ValueError(f"model_spec has P = {self.model_spec.P}, data has P = {P}")
        return self.model_spec.with_lambda(self.lam)

    def _theta0(self, spec: ModelSpec, panel=None) -> Theta:
        init = self.theta_init
        if isinstance(init, Theta):
            return init
        if spec.family is Family.SIM:
            if init is None:
                vals = moment_theta(panel) if panel is not None else DEFAULT_SIM_THETA
            else:
                vals = tuple(float(v) for v in init)
            if len(vals) != 4:
                raise ValueError("theta_init for the simulation family is (sigma_eps2, sigma_alpha2, sigma_d2, rho)")
            return Theta.sim(*vals, P=spec.P)
        if spec.family is Family.WARMUP and init is None:
            return default_warmup_theta()
        raise ValueError("theta_init must be a Theta for this family")

    def _config(self) -> EngineConfig:
        return EngineConfig(
            n_particles=int(self.n_particles),
            gamma=GammaSchedule(kappa=self.kappa, c=self.gamma_offset),
            burn_in=int(self.burn_in),
            d_max=self.d_max,
            systematic=self.systematic,
            learn=self.learn,
        )

    def _new_engine(self, theta: Theta, T: int, seed) -> OnlineEM:
        return OnlineEM(self.spec_, theta, T, self._config(), seed=seed)

    # fitting

    def fit(self, X, y=None):
        """Run ``passes`` sweeps of the detector over the panel ``X``.

        ``X`` is an ``ActivityPanel`` or an ``(N, T, P)`` array with NaN for
        missing cells.
        """
        self._check_params()
        panel = check_panel(X)
        self.spec_ = self._spec(panel.P)
        theta = self._theta0(self.spec_, panel)
        self.trace_ = []
        for p in range(int(self.passes)):
            self._reset(panel.T)
            self.engine_ = self._new_engine(theta, panel.T, self._pass_rng(p))
            for n in range(panel.N):
                self._consume(panel.values[n], panel.observed[n], pass_index=p)
            theta = self.engine_.theta
            logger.info("pass %d done: theta=%s", p + 1, theta.params)
        return self

    def _pass_rng(self, p: int) -> np.random.Generator:
        """Independent stream for pass ``p``; the first pass of fit and partial_fit agree."""
        return np.random.default_rng(np.random.SeedSequence(self.random_state).spawn(p + 1)[p])

    def _reset(self, T: int):
        self.T_ = T
        self.changepoint_proba_ = np.zeros(0)
        self.within_proba_ = np.zeros((0, T))
        self.posteriors_ = []
        self.log_evidence_ = []

    def _consume(self, y, observed, pass_index: int = 0):
        eng = self.engine_
        within = None
        if int(self.kstar) > 0:
            within = self._monitor_activity(y, observed)
        rec = eng.update(y, observed)
        if within is None:
            within = rec.within
        self.changepoint_proba_ = np.append(self.changepoint_proba_, rec.p_changepoint)
        self.within_proba_ = np.vstack([self.within_proba_, within[None]])
        self.posteriors_.append(rec.posterior)
        self.log_evidence_.append(rec.log_evidence)
        self.trace_.append({"pass": pass_index + 1, "n": rec.n, "theta": rec.theta})
        self.theta_ = rec.theta
        return rec

    def _monitor_activity(self, y, observed) -> np.ndarray:
        eng = self.engine_
        ms = _monitor.start_activity(eng.predict(), eng.bound(), eng.buffer if eng.n else None, int(self.kstar), T=eng.T)
        out = np.empty(eng.T)
        y = np.where(observed, y, np.nan)
        for t in range(eng.T):
            ms, _ = _monitor.step(ms, y[t], observed[t])
            out[t] = ms.p_changepoint
        return out

    def partial_fit(self, X, y=None):
        """Feed further activities to the detector, continuing the current pass."""
        panel = check_panel(X)
        if not hasattr(self, "engine_"):
            self._check_params()
            self.spec_ = self._spec(panel.P)
            self.trace_ = []
            self._reset(panel.T)
            self.engine_ = self._new_engine(self._theta0(self.spec_, panel), panel.T, self._pass_rng(0))
        elif panel.T != self.T_ or panel.P != self.spec_.P:
            raise ValueError(f"activities must have shape {(self.T_, self.spec_.P)}")
        for n in range(panel.N):
            self._consume(panel.values[n], panel.observed[n])
        return self

    # outputs

    def predict_proba(self, X=None):
        """Changepoint probability of each activity.

        Without ``X`` this returns the probabilities of the activities already
        seen.  With ``X`` the new activities are scored on a copy of the
        detector, leaving the fitted state untouched.
        """
        check_is_fitted(self, "engine_")
        if X is None:
            return self.changepoint_proba_.copy()
        clone = copy.deepcopy(self)
        start = clone.changepoint_proba_.size
        clone.partial_fit(X)
        return clone.changepoint_proba_[start:]

    def predict(self, X=None):
        """Boolean alerts: changepoint probability above ``delta``."""
        return self.predict_proba(X) > self.delta

    def fit_predict(self, X, y=None):
        return self.fit(X).predict()

    def transform(self, X):
        """Per-activity posterior changepoint probabilities as a column."""
        return self.predict_proba(X)[:, None]

    def changepoints(self, delta: Optional[float] = None) -> np.ndarray:
        """1-based indices of activities flagged as changepoints."""
        delta = self.delta if delta is None else delta
        check_is_fitted(self, "engine_")
        return np.flatnonzero(self.changepoint_proba_ > delta) + 1

    def within_proba_at(self, t: int) -> np.ndarray:
        """Changepoint probability of every activity after ``t`` of its time points."""
        check_is_fitted(self, "engine_")
        if not 1 <= t <= self.T_:
            raise ValueError(f"t must lie in 1..{self.T_}")
        return self.within_proba_[:, t - 1].copy()

    def monitor(self, activity, kstar: Optional[int] = None) -> Iterator[dict]:
        """Stream ``(t, p_changepoint)`` records for the next activity.

        The fitted state is not modified; call :meth:`partial_fit` once the
        activity is complete.
        """
        check_is_fitted(self, "engine_")
        y = np.asarray(activity, dtype=float)
        if y.shape != (self.T_, self.spec_.P):
            raise ValueError(f"activity must have shape {(self.T_, self.spec_.P)}, got {y.shape}")
        eng = copy.deepcopy(self.engine_)
        k = int(self.kstar if kstar is None else kstar)
        ms = _monitor.start_activity(eng.predict(), eng.bound(), eng.buffer if eng.n else None, k, T=eng.T)
        for t in range(self.T_):
            ms, post = _monitor.step(ms, y[t], t=t + 1)
            yield {
                "n": ms.n,
                "t": t + 1,
                "p_changepoint": ms.p_changepoint,
                "alert": bool(ms.p_changepoint > self.delta),
            }
