"""Command line: simulate, fit, detect, monitor and evaluate.

Every command writes one JSON record per line to ``--output`` (default
stdout).  Each record carries the hash of the effective configuration and
the seed.  Failures produce a single ``{"type": "error", ...}`` record and a
nonzero exit status: 2 for invalid configuration or input, 1 otherwise.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .estimator import ChangepointDetector
from .model import ActivityPanel, Family
from .simlab import EngineSettings, SimSpec, generate, sweep

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


class ConfigError(ValueError):
    """Invalid configuration or input file."""


# configuration


@dataclass
class RunConfig:
    family: str = "sim"
    theta_init: Optional[list] = None
    lam: float = 0.5
    n_particles: int = 100
    kstar: int = 0
    delta: float = 0.5
    kappa: float = 0.7
    gamma_offset: float = 1.0
    burn_in: int = 10
    passes: int = 1
    d_max: Optional[int] = None
    init_var: float = 1e7
    seed: int = 0
    input: Optional[str] = None
    output: Optional[str] = None
    # simulation and evaluation
    N: int = 1000
    T: int = 120
    P: int = 2
    S: int = 50
    sigma_eps2: float = 1.0
    sigma_alpha2: float = 0.05
    sigma_d2: float = 5.0
    rho: float = 0.8
    deltas: list = field(default_factory=lambda: [0.3, 0.5, 0.7, 0.9])
    replications: int = 20
    cut_points: Optional[list] = None
    n_jobs: int = 1
    # monitor
    activity: Optional[int] = None

    def validate(self) -> "RunConfig":
        try:
            Family.parse(self.family)
        except ValueError as exc:
            raise ConfigError(f"unknown family {self.family!r}") from exc
        checks = [
            (0 < self.lam < 1, "lam must lie in (0, 1)"),
            (0 < self.delta < 1, "delta must lie in (0, 1)"),
            (self.n_particles >= 1, "n_particles must be >= 1"),
            (self.kstar >= 0, "kstar must be >= 0"),
            (0.5 < self.kappa <= 1, "kappa must lie in (0.5, 1]"),
            (self.gamma_offset > 0, "gamma_offset must be > 0"),
            (self.burn_in >= 0, "burn_in must be >= 0"),
            (self.passes >= 1, "passes must be >= 1"),
            (self.d_max is None or self.d_max >= 1, "d_max must be >= 1"),
            (self.init_var > 0, "init_var must be > 0"),
            (self.replications >= 1, "replications must be >= 1"),
            (all(0 < d < 1 for d in self.deltas), "deltas must lie in (0, 1)"),
            (self.activity is None or self.activity >= 1, "activity must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.theta_init is not None and Family.parse(self.family) is Family.SIM and len(self.theta_init) != 4:
            raise ConfigError("theta_init must be [sigma_eps2, sigma_alpha2, sigma_d2, rho]")
        try:
            self.sim_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def hash(self) -> str:
        payload = {k: v for k, v in dataclasses.asdict(self).items() if k not in ("input", "output")}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def sim_spec(self) -> SimSpec:
        return SimSpec(
            N=self.N,
            T=self.T,
            P=self.P,
            S=self.S,
            sigma_eps2=self.sigma_eps2,
            sigma_alpha2=self.sigma_alpha2,
            sigma_d2=self.sigma_d2,
            rho=self.rho,
            lam=self.lam,
            seed=self.seed,
        )

    def engine_settings(self) -> EngineSettings:
        return EngineSettings(
            n_particles=self.n_particles,
            burn_in=self.burn_in,
            kappa=self.kappa,
            gamma_offset=self.gamma_offset,
            d_max=self.d_max,
            kstar=self.kstar,
            passes=self.passes,
            theta_init=None if self.theta_init is None else tuple(self.theta_init),
            init_var=self.init_var,
        )

    def detector(self) -> ChangepointDetector:
        return ChangepointDetector(
            family=self.family,
            lam=self.lam,
            n_particles=self.n_particles,
            kstar=self.kstar,
            delta=self.delta,
            kappa=self.kappa,
            gamma_offset=self.gamma_offset,
            burn_in=self.burn_in,
            passes=self.passes,
            d_max=self.d_max,
            init_var=self.init_var,
            theta_init=None if self.theta_init is None else tuple(self.theta_init),
            random_state=self.seed,
        )


_FIELD_TYPES = {f.name: f for f in fields(RunConfig)}


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    """Config file values, then flag overrides (flags win)."""
    values = {}
    if path:
        try:
            values = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**values).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# CSV interchange


def ingest_csv(path) -> ActivityPanel:
    """Read ``activity,t,<vars...>`` rows into a dense panel.

    Empty fields are missing.  Activities are re-indexed ``1..N`` in order of
    appearance; ``T`` is the largest ``t`` and shorter activities are padded
    with missing cells.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        if len(header) < 3 or [h.strip() for h in header[:2]] != ["activity", "t"]:
            raise ConfigError(f"{path}: header must start with 'activity,t' and name at least one variable")
        P = len(header) - 2
        order: dict[str, int] = {}
        cells: dict[tuple[int, int], list] = {}
        T = 0
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != P + 2:
                raise ConfigError(f"{path}:{lineno}: expected {P + 2} fields, got {len(row)}")
            key, t_raw = row[0].strip(), row[1].strip()
            try:
                t = int(t_raw)
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: time index {t_raw!r} is not an integer") from None
            if t < 1:
                raise ConfigError(f"{path}:{lineno}: time index must be >= 1")
            n = order.setdefault(key, len(order))
            if (n, t) in cells:
                raise ConfigError(f"{path}:{lineno}: duplicate row for activity {key}, t={t}")
            vals = []
            for j, raw in enumerate(row[2:]):
                raw = raw.strip()
                if raw == "":
                    vals.append(math.nan)
                    continue
                try:
                    v = float(raw)
                except ValueError:
                    raise ConfigError(f"{path}:{lineno}: non-numeric value {raw!r} for {header[j + 2]}") from None
                if not math.isfinite(v):
                    raise ConfigError(f"{path}:{lineno}: non-finite value {raw!r}")
                vals.append(v)
            cells[(n, t)] = vals
            T = max(T, t)
    if not cells:
        raise ConfigError(f"{path}: no data rows")
    arr = np.full((len(order), T, P), np.nan)
    for (n, t), vals in cells.items():
        arr[n, t - 1] = vals
    return ActivityPanel.from_array(arr)


def write_csv(panel: ActivityPanel, path, names: Optional[Iterable[str]] = None) -> None:
    """Write every cell; ``repr`` floats keep the round trip bit-exact."""
    names = list(names) if names is not None else [f"y{p + 1}" for p in range(panel.P)]
    if len(names) != panel.P:
        raise ValueError(f"need {panel.P} variable names")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["activity", "t", *names])
        for n in range(panel.N):
            for t in range(panel.T):
                row = [n + 1, t + 1]
                for p in range(panel.P):
                    row.append(repr(float(panel.values[n, t, p])) if panel.observed[n, t, p] else "")
                w.writerow(row)


# record output


class RecordWriter:
    def __init__(self, cfg: RunConfig, stream):
        self.stream = stream
        self.base = {"config_hash": cfg.hash(), "seed": cfg.seed}

    def emit(self, kind: str, **payload) -> None:
        rec = {"type": kind, **self.base, **payload}
        self.stream.write(json.dumps(rec, default=_json_default) + "\n")
        self.stream.flush()


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serialisable: {type(obj).__name__}")


def _posterior_summary(post: dict) -> dict:
    delays = np.array(sorted(post))
    probs = np.array([post[d] for d in delays])
    top = np.argsort(-probs)[:5]
    return {
        "mean_delay": float(delays @ probs),
        "map_delay": int(delays[np.argmax(probs)]),
        "top": [[int(delays[i]), float(probs[i])] for i in top],
    }


def _require_input(cfg: RunConfig) -> ActivityPanel:
    if not cfg.input:
        raise ConfigError("--input is required")
    return ingest_csv(cfg.input)


# commands


def cmd_simulate(cfg: RunConfig, out: RecordWriter, args) -> None:
    if not args.data:
        raise ConfigError("--data (CSV destination) is required")
    sc = generate(cfg.sim_spec(), cfg.seed)
    write_csv(sc.panel, args.data)
    out.emit(
        "scenario",
        path=str(args.data),
        N=sc.panel.N,
        T=sc.panel.T,
        P=sc.panel.P,
        changepoints=list(sc.truth.changepoints),
        theta=dataclasses.asdict(cfg.sim_spec()),
    )


def cmd_fit(cfg: RunConfig, out: RecordWriter, args) -> None:
    panel = _require_input(cfg)
    det = cfg.detector().fit(panel)
    for rec in det.trace_:
        out.emit("theta", **{"pass": rec["pass"]}, n=rec["n"], theta=rec["theta"].to_dict())


def cmd_detect(cfg: RunConfig, out: RecordWriter, args) -> None:
    panel = _require_input(cfg)
    det = cfg.detector().fit(panel)
    for n, (p, post) in enumerate(zip(det.changepoint_proba_, det.posteriors_), start=1):
        out.emit("activity", n=n, p_changepoint=float(p), alert=bool(p > cfg.delta), **_posterior_summary(post))


def cmd_monitor(cfg: RunConfig, out: RecordWriter, args) -> None:
    panel = _require_input(cfg)
    n = panel.N if cfg.activity is None else cfg.activity
    if n > panel.N:
        raise ConfigError(f"activity {n} is beyond the {panel.N} activities in the input")
    det = cfg.detector()
    if n > 1:
        det.fit(panel.activities(1, n - 1))
    else:
        _prime(det, panel)
    for rec in det.monitor(panel.to_array()[n - 1]):
        out.emit("monitor", **rec)


def _prime(det: ChangepointDetector, panel: ActivityPanel) -> None:
    """Fit state with no history, so the first activity can be monitored."""
    det._check_params()
    det.spec_ = det._spec(panel.P)
    det.trace_ = []
    det._reset(panel.T)
    det.engine_ = det._new_engine(det._theta0(det.spec_, panel), panel.T, det._pass_rng(0))


def cmd_evaluate(cfg: RunConfig, out: RecordWriter, args) -> None:
    report = sweep(
        cfg.sim_spec(),
        cfg.engine_settings(),
        deltas=cfg.deltas,
        replications=cfg.replications,
        cut_points=cfg.cut_points,
        base_seed=cfg.seed,
        n_jobs=cfg.n_jobs,
    )
    for row in report.summary():
        out.emit("report", **row)


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "detect": cmd_detect,
    "monitor": cmd_monitor,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmchange", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig fields")
    common.add_argument("--input", help="activity CSV")
    common.add_argument("--output", help="record destination (default stdout)")
    common.add_argument("--seed", type=int)
    common.add_argument("--family")
    common.add_argument("--theta-init", dest="theta_init", type=float, nargs="+")
    common.add_argument("--lam", type=float)
    common.add_argument("--particles", dest="n_particles", type=int)
    common.add_argument("--kstar", type=int)
    common.add_argument("--delta", type=float)
    common.add_argument("--kappa", type=float)
    common.add_argument("--gamma-offset", dest="gamma_offset", type=float)
    common.add_argument("--burn-in", dest="burn_in", type=int)
    common.add_argument("--passes", type=int)
    common.add_argument("--d-max", dest="d_max", type=int)
    common.add_argument("--init-var", dest="init_var", type=float)
    common.add_argument("-v", "--verbose", action="store_true")
    sim = argparse.ArgumentParser(add_help=False)
    for name in ("N", "T", "P", "S"):
        sim.add_argument(f"--{name}", type=int)
    for name in ("sigma_eps2", "sigma_alpha2", "sigma_d2", "rho"):
        sim.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float)

    p = sub.add_parser("simulate", parents=[common, sim], help="generate a synthetic panel")
    p.add_argument("--data", help="CSV destination for the panel")
    sub.add_parser("fit", parents=[common], help="online EM; one theta record per activity and pass")
    sub.add_parser("detect", parents=[common], help="per-activity changepoint probabilities")
    p = sub.add_parser("monitor", parents=[common], help="within-activity probabilities for one activity")
    p.add_argument("--activity", type=int, help="1-based activity to monitor (default: the last)")
    p = sub.add_parser("evaluate", parents=[common, sim], help="replicated detection study")
    p.add_argument("--deltas", type=float, nargs="+")
    p.add_argument("--replications", type=int)
    p.add_argument("--cut-points", dest="cut_points", type=int, nargs="+")
    p.add_argument("--jobs", dest="n_jobs", type=int)
    return parser


_NON_CONFIG = {"command", "config", "verbose", "data"}


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    overrides = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
    stream = sys.stdout
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        _emit_error(stream, exc, None)
        return EXIT_CONFIG
    if cfg.output:
        stream = open(cfg.output, "w")
    try:
        COMMANDS[args.command](cfg, RecordWriter(cfg, stream), args)
        return 0
    except BrokenPipeError:
        # downstream reader closed early (e.g. piped into head)
        devnull = os.open(os.devnull, os.O_WRONLY)
        os.dup2(devnull, stream.fileno())
        return 0
    except ConfigError as exc:
        _emit_error(stream, exc, cfg)
        return EXIT_CONFIG
    except Exception as exc:  # report any failure as a record
        logger.debug("command failed", exc_info=True)
        _emit_error(stream, exc, cfg)
        return EXIT_RUNTIME
    finally:
        if stream is not sys.stdout:
            stream.close()


def _emit_error(stream, exc: Exception, cfg: Optional[RunConfig]) -> None:
    rec = {"type": "error", "error": type(exc).__name__, "message": str(exc)}
    if cfg is not None:
        rec.update(config_hash=cfg.hash(), seed=cfg.seed)
    stream.write(json.dumps(rec) + "\n")
    stream.flush()


if __name__ == "__main__":
    sys.exit(main())
