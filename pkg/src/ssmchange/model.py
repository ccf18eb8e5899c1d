"""Model families, parameters, activity panels and segment bookkeeping.

A model family fixes the design of the per-activity state space model::

    y[n, t]      = Z_S a_seg[t] + Z_A a_act[n, t] + eps[n, t],   eps ~ N(0, Sigma)
    a_seg[t + 1] = T_S a_seg[t] + eta_seg[t],                     eta_seg ~ N(0, Psi)
    a_act[n,t+1] = T_A a_act[n, t] + eta_act[n, t],               eta_act ~ N(0, Delta)

where ``a_seg`` is shared by every activity in a segment and ``a_act`` is
private to activity ``n``.  A :class:`Theta` supplies the covariances and any
parametrised design entries; :func:`bind_design` resolves both into a
:class:`BoundModel` with plain numeric matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

DEFAULT_INIT_VAR = 1e7

# Shape of the segment-state noise for the simulation family (per variable).
SIM_PSI0 = np.array([[1.0 / 3.0, 0.5], [0.5, 1.0]])
SIM_SEGMENT_TRANSITION = np.array([[0.95, 1.0], [0.0, 0.90]])

_AR_LIMIT = 1.0


class Family(str, Enum):
    SIM = "SimFamily"
    WARMUP = "WarmupFamily"
    CUSTOM = "Custom"

    @classmethod
    def parse(cls, value: "str | Family") -> "Family":
        if isinstance(value, Family):
            return value
        aliases = {"sim": cls.SIM, "warmup": cls.WARMUP, "custom": cls.CUSTOM}
        key = str(value)
        if key.lower() in aliases:
            return aliases[key.lower()]
        return cls(key)


def _as_matrix(a, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-d matrix, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _as_vector(a, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float).reshape(-1)
    arr.setflags(write=False)
    return arr


def _check_psd(a: np.ndarray, name: str, strict: bool = False) -> None:
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got {a.shape}")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-10 * max(1.0, np.abs(a).max())):
        raise ValueError(f"{name} must be symmetric")
    if a.size == 0:
        return
    eig = np.linalg.eigvalsh(a)
    if strict and eig.min() <= 0.0:
        raise ValueError(f"{name} must be positive definite (min eigenvalue {eig.min():.3g})")
    if eig.min() < -1e-9 * max(1.0, eig.max()):
        raise ValueError(f"{name} must be positive semi-definite (min eigenvalue {eig.min():.3g})")


@dataclass(frozen=True)
class ModelSpec:
    """Design of a model family; entries bound to parameters are placeholders."""

    Z_S: np.ndarray
    Z_A: np.ndarray
    T_S: np.ndarray
    T_A: np.ndarray
    lam: float
    a1_S: np.ndarray
    P1_S: np.ndarray
    a1_A: np.ndarray
    P1_A: np.ndarray
    family: Family = Family.CUSTOM

    def __post_init__(self):
        for name in ("Z_S", "Z_A", "T_S", "T_A", "P1_S", "P1_A"):
            object.__setattr__(self, name, _as_matrix(getattr(self, name), name))
        for name in ("a1_S", "a1_A"):
            object.__setattr__(self, name, _as_vector(getattr(self, name), name))
        object.__setattr__(self, "family", Family.parse(self.family))
        object.__setattr__(self, "lam", float(self.lam))
        P, M = self.Z_S.shape
        if self.Z_A.shape[0] != P:
            raise ValueError(f"Z_A has {self.Z_A.shape[0]} rows, Z_S has {P}")
        K = self.Z_A.shape[1]
        if self.T_S.shape != (M, M) or self.P1_S.shape != (M, M) or self.a1_S.shape != (M,):
            raise ValueError("segment-state blocks inconsistent with M = %d" % M)
        if self.T_A.shape != (K, K) or self.P1_A.shape != (K, K) or self.a1_A.shape != (K,):
            raise ValueError("activity-state blocks inconsistent with K = %d" % K)
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"lam must lie in (0, 1), got {self.lam}")
        _check_psd(self.P1_S, "P1_S")
        _check_psd(self.P1_A, "P1_A")

    @property
    def P(self) -> int:
        return self.Z_S.shape[0]

    @property
    def M(self) -> int:
        return self.Z_S.shape[1]

    @property
    def K(self) -> int:
        return self.Z_A.shape[1]

    def with_lambda(self, lam: float) -> "ModelSpec":
        return _replace(self, lam=lam)


def _replace(obj, **changes):
    from dataclasses import replace

    return replace(obj, **changes)


# A design binding maps a parameter name to the (matrix, row, col) entries it fills.
DesignBindings = Mapping[str, Sequence[tuple[str, int, int]]]


@dataclass(frozen=True)
class Theta:
    """Estimable parameters: covariances plus named scalar design entries."""

    family: Family
    Sigma: np.ndarray
    Psi: np.ndarray
    Delta: np.ndarray
    scalars: Mapping[str, float] = field(default_factory=dict)
    design_bindings: DesignBindings = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        for name in ("Sigma", "Psi", "Delta"):
            mat = _as_matrix(getattr(self, name), name)
            _check_psd(mat, name, strict=True)
            object.__setattr__(self, name, mat)
        object.__setattr__(self, "scalars", {k: float(v) for k, v in self.scalars.items()})
        object.__setattr__(
            self,
            "design_bindings",
            {k: tuple(tuple(e) for e in v) for k, v in self.design_bindings.items()},
        )
        for key in self.design_bindings:
            if key not in self.scalars:
                raise ValueError(f"binding {key!r} has no value in scalars")
        for key in ("rho", "rho_sp"):
            if key in self.scalars and not abs(self.scalars[key]) < _AR_LIMIT:
                raise ValueError(f"|{key}| must be < 1, got {self.scalars[key]}")

    @classmethod
    def sim(cls, sigma_eps2: float, sigma_alpha2: float, sigma_d2: float, rho: float, P: int = 2) -> "Theta":
        """Parameters of the simulation family: (sigma_eps^2, sigma_alpha^2, sigma_d^2, rho)."""
        for name, v in (("sigma_eps2", sigma_eps2), ("sigma_alpha2", sigma_alpha2), ("sigma_d2", sigma_d2)):
            if not v > 0:
                raise ValueError(f"{name} must be > 0, got {v}")
        eye = np.eye(P)
        return cls(
            family=Family.SIM,
            Sigma=sigma_eps2 * eye,
            Psi=sigma_alpha2 * np.kron(eye, SIM_PSI0),
            Delta=sigma_d2 * eye,
            scalars={
                "sigma_eps2": sigma_eps2,
                "sigma_alpha2": sigma_alpha2,
                "sigma_d2": sigma_d2,
                "rho": rho,
            },
            design_bindings={"rho": [("T_A", i, i) for i in range(P)]},
        )

    @classmethod
    def warmup(cls, Sigma, Psi, Delta, rho_sp: float) -> "Theta":
        """Parameters of the heart-rate/speed warm-up family."""
        return cls(
            family=Family.WARMUP,
            Sigma=Sigma,
            Psi=Psi,
            Delta=Delta,
            scalars={"rho_sp": rho_sp},
            design_bindings={"rho_sp": [("T_A", 1, 1)]},
        )

    @classmethod
    def custom(cls, Sigma, Psi, Delta) -> "Theta":
        return cls(family=Family.CUSTOM, Sigma=Sigma, Psi=Psi, Delta=Delta)

    @property
    def params(self) -> np.ndarray:
        """Flat parameter vector in a family-specific order."""
        if self.family is Family.SIM:
            s = self.scalars
            return np.array([s["sigma_eps2"], s["sigma_alpha2"], s["sigma_d2"], s["rho"]])
        parts = [m[np.triu_indices(m.shape[0])] for m in (self.Sigma, self.Psi, self.Delta)]
        parts.append(np.array([self.scalars[k] for k in sorted(self.scalars)]))
        return np.concatenate(parts)

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "scalars": dict(self.scalars),
            "Sigma": self.Sigma.tolist(),
            "Psi": self.Psi.tolist(),
            "Delta": self.Delta.tolist(),
        }


@dataclass(frozen=True)
class BoundModel:
    """A model family with every design entry and covariance resolved."""

    Z_S: np.ndarray
    Z_A: np.ndarray
    T_S: np.ndarray
    T_A: np.ndarray
    Sigma: np.ndarray
    Psi: np.ndarray
    Delta: np.ndarray
    a1_S: np.ndarray
    P1_S: np.ndarray
    a1_A: np.ndarray
    P1_A: np.ndarray
    lam: float

    @property
    def P(self) -> int:
        return self.Z_S.shape[0]

    @property
    def M(self) -> int:
        return self.Z_S.shape[1]

    @property
    def K(self) -> int:
        return self.Z_A.shape[1]


def bind_design(spec: ModelSpec, theta: Theta) -> BoundModel:
    """Substitute ``theta`` into ``spec`` and return the numeric model."""
    if theta.family is not spec.family:
        raise ValueError(f"theta family {theta.family.value} does not match spec family {spec.family.value}")
    P, M, K = spec.P, spec.M, spec.K
    for name, mat, dim in (("Sigma", theta.Sigma, P), ("Psi", theta.Psi, M), ("Delta", theta.Delta, K)):
        if mat.shape != (dim, dim):
            raise ValueError(f"{name} has shape {mat.shape}, expected {(dim, dim)}")
    mats = {name: np.array(getattr(spec, name)) for name in ("Z_S", "Z_A", "T_S", "T_A")}
    for key, entries in theta.design_bindings.items():
        value = theta.scalars[key]
        for mat_name, i, j in entries:
            mats[mat_name][i, j] = value
    for mat in mats.values():
        mat.setflags(write=False)
    return BoundModel(
        Z_S=mats["Z_S"],
        Z_A=mats["Z_A"],
        T_S=mats["T_S"],
        T_A=mats["T_A"],
        Sigma=theta.Sigma,
        Psi=theta.Psi,
        Delta=theta.Delta,
        a1_S=spec.a1_S,
        P1_S=spec.P1_S,
        a1_A=spec.a1_A,
        P1_A=spec.P1_A,
        lam=spec.lam,
    )


def sim_spec(P: int = 2, lam: float = 0.5, init_var: float = DEFAULT_INIT_VAR) -> ModelSpec:
    """Simulation family: per variable a (level, slope) segment state and an AR(1) activity state."""
    eye = np.eye(P)
    return ModelSpec(
        Z_S=np.kron(eye, np.array([[1.0, 0.0]])),
        Z_A=eye,
        T_S=np.kron(eye, SIM_SEGMENT_TRANSITION),
        T_A=np.zeros((P, P)),
        lam=lam,
        a1_S=np.zeros(2 * P),
        P1_S=init_var * np.eye(2 * P),
        a1_A=np.zeros(P),
        P1_A=init_var * eye,
        family=Family.SIM,
    )


def warmup_spec(lam: float = 0.5) -> ModelSpec:
    """Heart rate / speed family: local linear trend + local level segment, RW + AR(1) activity."""
    return ModelSpec(
        Z_S=np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
        Z_A=np.eye(2),
        T_S=np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
        T_A=np.array([[1.0, 0.0], [0.0, 0.0]]),
        lam=lam,
        a1_S=np.array([80.0, 0.0, 0.0]),
        P1_S=np.diag([100.0, 1.0, 100.0]),
        a1_A=np.zeros(2),
        P1_A=10.0 * np.eye(2),
        family=Family.WARMUP,
    )


@dataclass(frozen=True)
class ActivityPanel:
    """Observed activities: ``values[n, t, p]`` valid where ``observed[n, t, p]``."""

    values: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        observed = np.array(self.observed, dtype=bool)
        if values.ndim != 3 or values.shape != observed.shape:
            raise ValueError(f"values {values.shape} and observed {observed.shape} must be equal 3-d shapes")
        if values.shape[0] < 1 or values.shape[1] < 1 or values.shape[2] < 1:
            raise ValueError("panel needs N, T, P >= 1")
        if not np.all(np.isfinite(values[observed])):
            raise ValueError("observed cells must be finite")
        values = np.where(observed, values, 0.0)
        values.setflags(write=False)
        observed.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "observed", observed)

    @classmethod
    def from_array(cls, arr) -> "ActivityPanel":
        """Build from an ``(N, T, P)`` array where NaN marks a missing cell."""
        arr = np.asarray(arr, dtype=float)
        if arr.ndim == 2:
            arr = arr[None]
        observed = ~np.isnan(arr)
        return cls(np.where(observed, arr, 0.0), observed)

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def P(self) -> int:
        return self.values.shape[2]

    def to_array(self) -> np.ndarray:
        """Dense copy with NaN at missing cells."""
        return np.where(self.observed, self.values, np.nan)

    def activities(self, start: int, stop: int) -> "ActivityPanel":
        """Sub-panel of 1-based activities ``start..stop`` inclusive."""
        return ActivityPanel(self.values[start - 1 : stop], self.observed[start - 1 : stop])

    def fully_observed(self, n: int) -> bool:
        return bool(self.observed[n - 1].all())


@dataclass(frozen=True)
class SegmentIndex:
    """Contiguous segmentation of activities ``1..N`` given by its changepoints."""

    N: int
    changepoints: tuple[int, ...]

    def __post_init__(self):
        cps = tuple(sorted(set(int(c) for c in self.changepoints) | {1}))
        if cps[-1] > self.N or cps[0] < 1:
            raise ValueError(f"changepoints must lie in 1..{self.N}")
        object.__setattr__(self, "changepoints", cps)

    @property
    def segments(self) -> list[tuple[int, int]]:
        """(first, last) activity of each segment, 1-based inclusive."""
        starts = list(self.changepoints)
        ends = [s - 1 for s in starts[1:]] + [self.N]
        return list(zip(starts, ends))

    @property
    def lengths(self) -> list[int]:
        return [k - j + 1 for j, k in self.segments]

    def delays(self) -> list[int]:
        return delays_from_segments(self)


def segment_from_delays(delays: Sequence[int], N: int) -> SegmentIndex:
    """Changepoints are the activities with delay 1."""
    delays = [int(d) for d in delays]
    if len(delays) != N:
        raise ValueError(f"expected {N} delays, got {len(delays)}")
    if N and delays[0] != 1:
        raise ValueError(f"first delay must be 1, got {delays[0]}")
    for n in range(1, N):
        if delays[n] not in (1, delays[n - 1] + 1):
            raise ValueError(
                f"invalid delay recursion at activity {n + 1}: {delays[n - 1]} -> {delays[n]}"
            )
    return SegmentIndex(N, tuple(n + 1 for n, d in enumerate(delays) if d == 1))


def delays_from_segments(seg: SegmentIndex) -> list[int]:
    out = []
    for j, k in seg.segments:
        out.extend(range(1, k - j + 2))
    return out
