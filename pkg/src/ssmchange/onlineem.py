"""Online EM with SMC delay filtering, plus a batch EM used for validation.

Per activity ``n`` the engine

1. resamples delay particles for ``D_n`` from the ``2B`` augmented support,
2. evaluates, for every unique delay, the potential of activity ``n`` and its
   individual contribution to the EM statistics (difference of smoothed
   complete-data statistics of the segment with and without activity ``n``),
3. updates the per-delay statistics by stochastic approximation mixed over
   the backward kernel,
4. reweights the particles into the filtered delay posterior,
5. averages the statistics under that posterior and maps them to a new
   parameter estimate (after a burn-in window).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from scipy.special import logsumexp

from .cpfilter import ParticleSet, filtered_posterior, predict_and_resample
from .model import ActivityPanel, BoundModel, Family, ModelSpec, SIM_PSI0, Theta, bind_design
from .segment import PotentialCache, SegmentEvaluator
from .suffstats import StatsLayout, SuffStats, weighted_sum

logger = logging.getLogger(__name__)

AR_CLAMP = 1.0 - 1e-6
VAR_FLOOR = 1e-8


class SingularStatisticsError(ValueError):
    """Sufficient statistics do not identify the parameters."""


@dataclass(frozen=True)
class GammaSchedule:
    """Step sizes ``gamma_n = (n + c) ** -kappa``."""

    kappa: float = 0.7
    c: float = 1.0

    def __post_init__(self):
        if not 0.5 < self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in (0.5, 1], got {self.kappa}")
        if not self.c >= 1.0:
            raise ValueError(f"c must be >= 1, got {self.c}")

    def __call__(self, n) -> float:
        return (n + self.c) ** (-self.kappa)


# --------------------------------------------------------------------------
# statistics recursion


def event_stats(layout: StatsLayout, d: int) -> SuffStats:
    return SuffStats.zeros(layout).set(**({"n_cp": 1.0} if d == 1 else {"n_cont": 1.0}))


def individual_contribution(
    bound: BoundModel,
    panel,
    n: int,
    d: int,
    evaluator: Optional[SegmentEvaluator] = None,
) -> SuffStats:
    """Contribution of activity ``n`` to the EM statistics given delay ``d``."""
    if not 1 <= d <= n:
        raise ValueError(f"delay {d} invalid at activity {n}")
    ev = evaluator if evaluator is not None else SegmentEvaluator(bound, panel)
    j = n - d + 1
    res = ev.evaluate([(j, n), (j, n - 1)], stats=True)
    return res[(j, n)].stats - res[(j, n - 1)].stats + event_stats(ev.layout, d)


def update_suffstats(
    prev_stats: Optional[Mapping[int, SuffStats]],
    increments: Mapping[int, SuffStats],
    gamma: float,
    kernels: Mapping[int, Mapping[int, float]],
) -> dict[int, SuffStats]:
    """Stochastic-approximation update of the per-delay statistics.

    ``kernels[d_n]`` is the backward kernel over previous delays.  With no
    previous statistics (first activity) the increments are returned as is.
    """
    if not prev_stats:
        return dict(increments)
    out = {}
    for d, incr in increments.items():
        kernel = kernels[d]
        mass = sum(kernel.values())
        if not mass > 0:
            raise ValueError(f"backward kernel for delay {d} has no mass")
        prev = weighted_sum([prev_stats[k] for k in kernel], [w / mass for w in kernel.values()])
        out[d] = (1.0 - gamma) * prev + gamma * incr
    return out


def aggregate_Q(stats: Mapping[int, SuffStats], posterior: Mapping[int, float]) -> SuffStats:
    """Posterior-weighted average of the per-delay statistics."""
    total = sum(posterior.values())
    return weighted_sum([stats[d] for d in posterior], [p / total for p in posterior.values()])


# --------------------------------------------------------------------------
# maximisation


def _sym(a):
    return 0.5 * (a + a.T)


def _floor_pd(a: np.ndarray) -> np.ndarray:
    a = _sym(a)
    w, v = np.linalg.eigh(a)
    if w.min() >= VAR_FLOOR:
        return a
    return _sym((v * np.maximum(w, VAR_FLOOR)) @ v.T)


def _transition_residual(T, A11, A10, A00):
    return A11 - T @ A10.T - A10 @ T.T + T @ A00 @ T.T


def _bound_entries(spec: ModelSpec, key_entries) -> tuple[np.ndarray, np.ndarray]:
    """Split ``T_A`` into its fixed part and the indicator of bound entries."""
    T0 = np.array(spec.T_A)
    E = np.zeros_like(T0)
    for _, i, j in key_entries:
        T0[i, j] = 0.0
        E[i, j] = 1.0
    return T0, E


def _ecm_activity(spec, Q, entries, rho0=0.0, tol=1e-12, max_iter=500):
    """Joint maximiser of a full ``Delta`` and a scalar coefficient bound into ``T_A``."""
    T0, E = _bound_entries(spec, entries)
    rho = rho0
    Delta = None
    for _ in range(max_iter):
        Delta = _floor_pd(_transition_residual(T0 + rho * E, Q.B11, Q.B10, Q.B00) / Q.n_act)
        W = np.linalg.inv(Delta)
        denom = np.trace(W @ E @ Q.B00 @ E.T)
        if not denom > 0:
            raise SingularStatisticsError("activity-state moments are singular")
        new = (np.trace(W @ Q.B10 @ E.T) - np.trace(W @ T0 @ Q.B00 @ E.T)) / denom
        new = float(np.clip(new, -AR_CLAMP, AR_CLAMP))
        if abs(new - rho) < tol:
            rho = new
            break
        rho = new
    Delta = _floor_pd(_transition_residual(T0 + rho * E, Q.B11, Q.B10, Q.B00) / Q.n_act)
    return Delta, rho


def maximize(spec: ModelSpec, Q: SuffStats, previous: Optional[Theta] = None) -> Theta:
    """Closed-form M-step: map aggregated statistics to parameters."""
    if Q.n_obs <= 0 or Q.n_seg <= 0 or Q.n_act <= 0:
        raise SingularStatisticsError(
            f"statistics carry no information (n_obs={Q.n_obs}, n_seg={Q.n_seg}, n_act={Q.n_act})"
        )
    P, M, K = spec.P, spec.M, spec.K
    seg_resid = _transition_residual(spec.T_S, Q.A11, Q.A10, Q.A00)
    if spec.family is Family.SIM:
        b00, b10, b11 = np.trace(Q.B00), np.trace(Q.B10), np.trace(Q.B11)
        if not b00 > 0:
            raise SingularStatisticsError("activity-state moments are singular")
        rho = float(np.clip(b10 / b00, -AR_CLAMP, AR_CLAMP))
        shape = np.kron(np.eye(P), SIM_PSI0)
        raw = {
            "sigma_eps2": np.trace(Q.R) / (P * Q.n_obs),
            "sigma_alpha2": np.trace(np.linalg.solve(shape, seg_resid)) / (M * Q.n_seg),
            "sigma_d2": (b11 - 2 * rho * b10 + rho**2 * b00) / (K * Q.n_act),
        }
        bad = [k for k, v in raw.items() if not v > 0]
        if bad:
            # approximated statistics can leave the moment cone early on
            raise SingularStatisticsError(f"non-positive variance estimates for {bad}")
        v = {k: max(float(x), VAR_FLOOR) for k, x in raw.items()}
        return Theta.sim(v["sigma_eps2"], v["sigma_alpha2"], v["sigma_d2"], rho, P=P)
    Sigma = _floor_pd(Q.R / Q.n_obs)
    Psi = _floor_pd(seg_resid / Q.n_seg)
    if spec.family is Family.WARMUP:
        rho0 = previous.scalars["rho_sp"] if previous is not None else 0.0
        Delta, rho = _ecm_activity(spec, Q, [("T_A", 1, 1)], rho0)
        return Theta.warmup(Sigma, Psi, Delta, rho)
    Delta = _floor_pd(_transition_residual(spec.T_A, Q.B11, Q.B10, Q.B00) / Q.n_act)
    return Theta.custom(Sigma, Psi, Delta)


# --------------------------------------------------------------------------
# batch EM over all segmentations


@dataclass(frozen=True)
class SegmentationPosterior:
    log_marginal: float
    segment_probs: dict  # (j, k) -> P(j..k is a segment | y)
    expected_changepoints: float


def segmentation_posterior(bound: BoundModel, panel, evaluator: Optional[SegmentEvaluator] = None, stats: bool = False):
    """Exact posterior over segmentations by forward/backward sums over segment spans.

    Returns the posterior together with the per-span segment results.
    """
    N = panel.values.shape[0]
    ev = evaluator if evaluator is not None else SegmentEvaluator(bound, panel)
    spans = [(j, k) for j in range(1, N + 1) for k in range(j, N + 1)]
    res = ev.evaluate(spans, stats=stats)
    lam = bound.lam
    log_lam, log_cont = np.log(lam), np.log1p(-lam)

    def seg_logw(j, k):
        # prior weight: a changepoint at j (unless j = 1) and continuations up to k
        return (log_lam if j > 1 else 0.0) + (k - j) * log_cont + res[(j, k)].loglik

    fwd = np.full(N + 1, -np.inf)  # fwd[i]: activities 1..i segmented
    fwd[0] = 0.0
    for i in range(1, N + 1):
        fwd[i] = logsumexp([fwd[j - 1] + seg_logw(j, i) for j in range(1, i + 1)])
    bwd = np.full(N + 2, -np.inf)  # bwd[k]: activities k+1..N segmented after a boundary at k
    bwd[N] = 0.0
    for k in range(N - 1, 0, -1):
        bwd[k] = logsumexp([seg_logw(k + 1, kk) + bwd[kk] for kk in range(k + 1, N + 1)])
    logZ = fwd[N]
    probs = {(j, k): float(np.exp(fwd[j - 1] + seg_logw(j, k) + bwd[k] - logZ)) for j, k in spans}
    n_cp = sum(p for (j, _), p in probs.items())
    return SegmentationPosterior(float(logZ), probs, n_cp), res


def batch_expected_stats(bound: BoundModel, panel, evaluator=None):
    post, res = segmentation_posterior(bound, panel, evaluator, stats=True)
    N = panel.values.shape[0]
    keys = list(post.segment_probs)
    Q = weighted_sum([res[k].stats for k in keys], [post.segment_probs[k] for k in keys])
    Q = Q.set(n_cp=post.expected_changepoints, n_cont=N - post.expected_changepoints)
    return Q, post.log_marginal


def batch_em(spec: ModelSpec, theta0: Theta, panel: ActivityPanel, n_iter: int = 15):
    """Offline EM; returns ``[(theta_it, loglik(theta_it)), ...]`` for ``n_iter + 1`` iterates."""
    theta = theta0
    out = []
    for it in range(n_iter + 1):
        bound = bind_design(spec, theta)
        Q, loglik = batch_expected_stats(bound, panel)
        out.append((theta, loglik))
        logger.debug("batch EM iteration %d: loglik %.6f", it, loglik)
        if it < n_iter:
            theta = maximize(spec, Q, previous=theta)
    return out


# --------------------------------------------------------------------------
# the online engine


@dataclass
class EngineConfig:
    n_particles: int = 100
    gamma: GammaSchedule = field(default_factory=GammaSchedule)
    burn_in: int = 10
    d_max: Optional[int] = None
    systematic: bool = False
    learn: bool = True
    max_state_dim: Optional[int] = None

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.d_max is not None and self.d_max < 1:
            raise ValueError("d_max must be >= 1")


@dataclass(frozen=True)
class StepRecord:
    """Outcome of processing one activity."""

    n: int
    predicted: dict  # p(D_n = d | y[1..n-1])
    posterior: dict  # p(D_n = d | y[1..n])
    log_potentials: dict
    theta_used: Theta
    theta: Theta
    within: np.ndarray  # (T,), p(D_n = 1 | y[n, 1..t], y[1..n-1]) with no lookahead
    log_evidence: float

    @property
    def p_changepoint(self) -> float:
        return self.posterior.get(1, 0.0)


class _ActivityBuffer:
    """Growable ``(n, T, P)`` store of processed activities."""

    def __init__(self, T: int, P: int, capacity: int = 64):
        self._values = np.zeros((capacity, T, P))
        self._observed = np.zeros((capacity, T, P), dtype=bool)
        self.n = 0

    def append(self, y: np.ndarray, observed: np.ndarray) -> None:
        if self.n == self._values.shape[0]:
            self._values = np.concatenate([self._values, np.zeros_like(self._values)])
            self._observed = np.concatenate([self._observed, np.zeros_like(self._observed)])
        self._values[self.n] = np.where(observed, y, 0.0)
        self._observed[self.n] = observed
        self.n += 1

    @property
    def values(self):
        return self._values[: self.n]

    @property
    def observed(self):
        return self._observed[: self.n]

    def panel(self) -> ActivityPanel:
        return ActivityPanel(self.values, self.observed)


class OnlineEM:
    """Between-online changepoint filter with online parameter estimation."""

    def __init__(self, spec: ModelSpec, theta0: Theta, T: int, config: Optional[EngineConfig] = None, seed=None):
        self.spec = spec
        self.theta = theta0
        self.config = config if config is not None else EngineConfig()
        self.T = T
        bind_design(spec, theta0)
        self.rng = np.random.default_rng(seed)
        self.layout = StatsLayout(spec.P, spec.M, spec.K)
        self.buffer = _ActivityBuffer(T, spec.P)
        self.particles: Optional[ParticleSet] = None
        self.log_potentials: dict = {}
        self.posterior: dict = {}
        self.stats: dict = {}
        self.Q: Optional[SuffStats] = None
        self._pending: Optional[ParticleSet] = None
        self._evaluator: Optional[SegmentEvaluator] = None
        self._evaluator_theta: Optional[Theta] = None
        self.skipped_updates = 0

    @property
    def n(self) -> int:
        return self.buffer.n

    def evaluator(self) -> SegmentEvaluator:
        if self._evaluator is None or self._evaluator_theta is not self.theta:
            bound = bind_design(self.spec, self.theta)
            self._evaluator = SegmentEvaluator(bound, self.buffer, PotentialCache(), self.config.max_state_dim)
            self._evaluator_theta = self.theta
        return self._evaluator

    def predict(self) -> ParticleSet:
        """Predicted particle set for the next activity (cached until it is observed)."""
        if self._pending is None:
            if self.particles is None:
                self._pending = ParticleSet.initial(self.config.n_particles)
            else:
                self._pending = predict_and_resample(
                    self.particles,
                    rng_seed=self.rng,
                    lam=self.spec.lam,
                    log_potentials=self.log_potentials,
                    d_max=self.config.d_max,
                    systematic=self.config.systematic,
                    B=self.config.n_particles,
                )
        return self._pending

    def update(self, y, observed=None) -> StepRecord:
        """Process one completed activity ``y`` of shape ``(T, P)``."""
        y = np.asarray(y, dtype=float)
        if y.shape != (self.T, self.spec.P):
            raise ValueError(f"activity must have shape {(self.T, self.spec.P)}, got {y.shape}")
        observed = ~np.isnan(y) if observed is None else np.asarray(observed, dtype=bool)
        ps = self.predict()
        self.buffer.append(y, observed)
        n = self.n
        theta_used = self.theta
        ev = self.evaluator()
        learn = self.config.learn
        delays = ps.unique
        spans = [(n - d + 1, k) for d in delays for k in (n, n - 1)]
        res = ev.evaluate(spans, stats=learn)
        logG = {d: res[(n - d + 1, n)].loglik - res[(n - d + 1, n - 1)].loglik for d in delays}
        posterior = filtered_posterior(ps, log_potentials=logG)
        log_mass = ps.log_masses()

        if learn:
            incr = {
                d: res[(n - d + 1, n)].stats - res[(n - d + 1, n - 1)].stats + event_stats(self.layout, d)
                for d in delays
            }
            if n == 1:
                stats = incr
            else:
                kernels = {d: ({d - 1: 1.0} if d > 1 else self.posterior) for d in delays}
                stats = update_suffstats(self.stats, incr, self.config.gamma(n), kernels)
            self.stats = stats
            self.Q = aggregate_Q(stats, posterior)
            if n > self.config.burn_in:
                try:
                    self.theta = maximize(self.spec, self.Q, previous=self.theta)
                except SingularStatisticsError as exc:
                    self.skipped_updates += 1
                    logger.warning("activity %d: parameter update skipped (%s)", n, exc)

        within = self._within_trajectory(n, delays, res, log_mass)
        log_evidence = float(logsumexp([log_mass[d] + logG[d] for d in delays]))
        self.particles = ps
        self.log_potentials = logG
        self.posterior = posterior
        self._pending = None
        # next step needs segments ending at n (denominators) and n + 1
        ev.cache.evict(min_first=n + 1 - max(delays), min_last=n)
        return StepRecord(
            n=n,
            predicted=ps.masses(),
            posterior=posterior,
            log_potentials=logG,
            theta_used=theta_used,
            theta=self.theta,
            within=within,
            log_evidence=log_evidence,
        )

    def _within_trajectory(self, n, delays, res, log_mass) -> np.ndarray:
        num = np.stack([res[(n - d + 1, n)].cumulative_loglik for d in delays])
        den = np.stack([res[(n - d + 1, n - 1)].cumulative_loglik for d in delays])
        logw = np.array([log_mass[d] for d in delays])[:, None] + num - den
        logw -= logsumexp(logw, axis=0)
        if delays[0] != 1:
            return np.zeros(self.T)
        return np.exp(logw[0])

    def run(self, panel: ActivityPanel):
        """Process every activity of ``panel`` in order; yields step records."""
        for n in range(panel.N):
            yield self.update(panel.values[n], panel.observed[n])

    def bound(self) -> BoundModel:
        return bind_design(self.spec, self.theta)
