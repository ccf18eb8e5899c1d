"""Synthetic activity panels and detection-quality evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import SIM_PSI0, SIM_SEGMENT_TRANSITION, ActivityPanel, SegmentIndex, Theta, sim_spec
from .onlineem import EngineConfig, OnlineEM

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimSpec:
    """Generative configuration; defaults are the full-scale study values."""

    N: int = 1000
    T: int = 120
    P: int = 2
    S: int = 50
    sigma_eps2: float = 1.0
    sigma_alpha2: float = 0.05
    sigma_d2: float = 5.0
    rho: float = 0.8
    lam: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.N < 1 or self.T < 1 or self.P < 1:
            raise ValueError("N, T and P must be positive")
        if not 0 <= self.S < self.N:
            raise ValueError(f"need 0 <= S < N, got S={self.S}, N={self.N}")
        if min(self.sigma_eps2, self.sigma_alpha2, self.sigma_d2) < 0:
            raise ValueError("variances must be non-negative")
        if not abs(self.rho) < 1:
            raise ValueError("|rho| must be < 1")

    @property
    def theta(self) -> Theta:
        return Theta.sim(self.sigma_eps2, self.sigma_alpha2, self.sigma_d2, self.rho, P=self.P)


@dataclass(frozen=True)
class SimScenario:
    spec: SimSpec
    truth: SegmentIndex
    segment_states: np.ndarray  # (S + 1, T, 2P)
    activity_states: np.ndarray  # (N, T, P)
    panel: ActivityPanel


def generate(spec: SimSpec, seed: Optional[int] = None) -> SimScenario:
    """Draw a panel with ``S`` changepoints placed uniformly at random in ``2..N``."""
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    N, T, P = spec.N, spec.T, spec.P
    cps = rng.choice(np.arange(2, N + 1), size=spec.S, replace=False) if spec.S else []
    truth = SegmentIndex(N, tuple(int(c) for c in cps))

    eye = np.eye(P)
    T_S = np.kron(eye, SIM_SEGMENT_TRANSITION)
    seg_chol = np.sqrt(spec.sigma_alpha2) * np.linalg.cholesky(np.kron(eye, SIM_PSI0))
    n_seg = len(truth.segments)
    seg_states = np.zeros((n_seg, T, 2 * P))
    for s in range(n_seg):
        a = np.zeros(2 * P)
        for t in range(T):
            a = T_S @ a + seg_chol @ rng.standard_normal(2 * P)
            seg_states[s, t] = a

    act_states = np.zeros((N, T, P))
    noise_d = np.sqrt(spec.sigma_d2)
    for n in range(N):
        a = np.zeros(P)
        for t in range(T):
            a = spec.rho * a + noise_d * rng.standard_normal(P)
            act_states[n, t] = a

    Z_S = np.kron(eye, np.array([[1.0, 0.0]]))
    values = np.empty((N, T, P))
    for s, (j, k) in enumerate(truth.segments):
        shared = seg_states[s] @ Z_S.T
        values[j - 1 : k] = shared[None] + act_states[j - 1 : k]
    values += np.sqrt(spec.sigma_eps2) * rng.standard_normal((N, T, P))
    panel = ActivityPanel(values, np.ones_like(values, dtype=bool))
    return SimScenario(spec, truth, seg_states, act_states, panel)


def score(detected, truth: SegmentIndex, N: Optional[int] = None) -> tuple[float, float]:
    """Sensitivity and specificity over activities ``2..N``.

    A rate whose denominator is empty is reported as NaN.
    """
    N = truth.N if N is None else N
    detected = {int(i) for i in detected}
    if any(not 1 <= i <= N for i in detected):
        raise ValueError(f"detected indices must lie in 1..{N}")
    positives = set(truth.changepoints) - {1}
    candidates = set(range(2, N + 1))
    negatives = candidates - positives
    detected &= candidates
    tp = len(detected & positives)
    tn = len(negatives - detected)
    sens = tp / len(positives) if positives else float("nan")
    spec = tn / len(negatives) if negatives else float("nan")
    return sens, spec


@dataclass(frozen=True)
class EngineSettings:
    """Detection engine settings used by sweeps."""

    n_particles: int = 100
    burn_in: int = 10
    kappa: float = 0.7
    gamma_offset: float = 1.0
    d_max: Optional[int] = None
    kstar: int = 0
    passes: int = 1
    theta_init: Optional[tuple] = None
    init_var: float = 1e7
    learn: bool = True


@dataclass
class ReplicationResult:
    seed: int
    truth: SegmentIndex
    between: np.ndarray  # (N,) p(D_n = 1 | y[1..n])
    within: dict  # t -> (N,) p(D_n = 1 | y[n, 1..t], y[1..n-1])
    theta: Theta


def run_replication(spec: SimSpec, settings: EngineSettings, seed: int, cut_points: Sequence[int] = ()) -> ReplicationResult:
    """Generate one scenario and run the detector over it."""
    from .estimator import ChangepointDetector

    scenario = generate(spec, seed)
    det = ChangepointDetector(
        family="sim",
        lam=spec.lam,
        n_particles=settings.n_particles,
        kstar=settings.kstar,
        burn_in=settings.burn_in,
        kappa=settings.kappa,
        gamma_offset=settings.gamma_offset,
        d_max=settings.d_max,
        passes=settings.passes,
        theta_init=settings.theta_init,
        init_var=settings.init_var,
        learn=settings.learn,
        random_state=seed,
    )
    det.fit(scenario.panel)
    within = {}
    for t in cut_points:
        within[int(t)] = det.within_proba_at(t)
    return ReplicationResult(seed, scenario.truth, det.changepoint_proba_.copy(), within, det.theta_)


@dataclass
class DetectionReport:
    """Per-threshold sensitivity/specificity, per replication and summarised.

    ``rates[mode][delta]`` is an ``(R, 2)`` array of (sensitivity,
    specificity) with one row per replication; ``mode`` is ``"between"`` or
    ``"within@t"``.
    """

    deltas: list
    seeds: list
    rates: dict = field(default_factory=dict)

    def summary(self) -> list[dict]:
        out = []
        for mode, by_delta in self.rates.items():
            for delta in self.deltas:
                arr = np.asarray(by_delta[delta], dtype=float)
                row = {"mode": mode, "delta": delta, "replications": arr.shape[0]}
                for col, name in enumerate(("sensitivity", "specificity")):
                    vals = arr[:, col]
                    row[name] = {
                        "median": float(np.nanmedian(vals)),
                        "q05": float(np.nanquantile(vals, 0.05)),
                        "q95": float(np.nanquantile(vals, 0.95)),
                        "values": vals.tolist(),
                    }
                out.append(row)
        return out


def report_from_replications(results: Sequence[ReplicationResult], deltas: Sequence[float]) -> DetectionReport:
    deltas = [float(d) for d in deltas]
    report = DetectionReport(deltas, [r.seed for r in results])
    modes = {"between": [r.between for r in results]}
    if results:
        for t in results[0].within:
            modes[f"within@{t}"] = [r.within[t] for r in results]
    for mode, probs in modes.items():
        report.rates[mode] = {}
        for delta in deltas:
            rows = []
            for res, p in zip(results, probs):
                detected = np.flatnonzero(np.asarray(p) > delta) + 1
                rows.append(score(detected, res.truth))
            report.rates[mode][delta] = np.array(rows)
    return report


def sweep(
    spec: SimSpec,
    settings: EngineSettings = EngineSettings(),
    deltas: Sequence[float] = (0.3, 0.5, 0.7, 0.9),
    replications: int = 20,
    cut_points: Optional[Sequence[int]] = None,
    base_seed: Optional[int] = None,
    n_jobs: int = 1,
) -> DetectionReport:
    """Replicate generation and detection; score every threshold.

    Within-activity detection is scored at ``cut_points`` (default
    ``T/3`` and ``2T/3``).
    """
    if any(not 0 < d < 1 for d in deltas):
        raise ValueError("thresholds must lie in (0, 1)")
    if cut_points is None:
        cut_points = (spec.T // 3, (2 * spec.T) // 3)
    base_seed = spec.seed if base_seed is None else base_seed
    seeds = [base_seed + r for r in range(replications)]
    if n_jobs == 1:
        results = [run_replication(spec, settings, s, cut_points) for s in seeds]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(delayed(run_replication)(spec, settings, s, cut_points) for s in seeds)
    return report_from_replications(results, deltas)


def spec_dict(spec: SimSpec) -> dict:
    return asdict(spec)
