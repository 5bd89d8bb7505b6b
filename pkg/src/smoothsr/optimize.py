"""CMA-ES, a (1+1)-ES baseline and the staged-penalty experiment runner."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .encoding import ConfigError, decode
from .objective import Dataset, ObjectiveReport, Problem, TRACE_HEADER, load_problem_config

__all__ = [
    "OptimizerConfig",
    "GenerationRecord",
    "RunTrace",
    "CMAES",
    "CMAESError",
    "cmaes_minimize",
    "one_plus_one_es",
    "run_experiment",
    "TRACE_COLUMNS",
]

TRACE_COLUMNS = ("generation", "evaluations", "best_total", "best_r2", "op_penalty", "var_penalty", "sigma")

# f(x, evaluation_index) -> float or ObjectiveReport
Objective = Callable[[np.ndarray, int], "float | ObjectiveReport"]


class CMAESError(RuntimeError):
    """Numerical breakdown of the covariance matrix; ``state`` holds a snapshot."""

    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass
class OptimizerConfig:
    dimension: Optional[int] = None
    popsize: Optional[int] = None
    mean: Optional[list] = None
    sigma0: float = 0.5
    max_evals: int = 10_000
    target: Optional[float] = None
    seed: int = 0

    def resolved(self, dimension: Optional[int] = None) -> "OptimizerConfig":
        n = dimension if dimension is not None else self.dimension
        if n is None and self.mean is not None:
            n = len(self.mean)
        if n is None or n < 1:
            raise ConfigError("optimizer dimension must be >= 1")
        if self.dimension is not None and dimension is not None and self.dimension != dimension:
            raise ConfigError(f"optimizer dimension {self.dimension} does not match problem dimension {dimension}")
        mean = list(map(float, self.mean)) if self.mean is not None else [0.0] * n
        if len(mean) != n:
            raise ConfigError(f"initial mean has length {len(mean)}, expected {n}")
        lam = self.popsize if self.popsize is not None else 4 + int(3 * math.log(n))
        if lam < 2:
            raise ConfigError("population size must be >= 2")
        if not self.sigma0 > 0:
            raise ConfigError("sigma0 must be > 0")
        if self.max_evals < 0:
            raise ConfigError("max_evals must be >= 0")
        return OptimizerConfig(n, lam, mean, float(self.sigma0), int(self.max_evals), self.target, int(self.seed))

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown optimizer settings {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["mean"] is not None and all(v == 0.0 for v in d["mean"]):
            d["mean"] = "zeros"
        return d


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    evaluations: int
    best_total: float
    best_r2: float
    op_penalty: float
    var_penalty: float
    sigma: float

    def csv_row(self) -> list[str]:
        return [str(self.generation), str(self.evaluations),
                *(repr(float(v)) for v in (self.best_total, self.best_r2, self.op_penalty,
                                            self.var_penalty, self.sigma))]


@dataclass
class RunTrace:
    records: list[GenerationRecord] = field(default_factory=list)
    best_x: Optional[np.ndarray] = None
    best: Optional[ObjectiveReport | float] = None
    evaluations: int = 0
    stop_reason: str = ""
    formula: str = ""
    parameters: dict = field(default_factory=dict)

    @property
    def best_total(self) -> float:
        return _total(self.best)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(TRACE_COLUMNS)
            for rec in self.records:
                out.writerow(rec.csv_row())


def _total(value) -> float:
    t = float(value.total) if hasattr(value, "total") else float(value)
    return t if math.isfinite(t) else math.inf


class CMAES:
    """(mu/mu_w, lambda)-CMA-ES with default strategy parameters.

    Ask/tell interface; all randomness comes from one ``numpy`` generator
    seeded from the config, so a run is reproducible bit for bit.
    """

    def __init__(self, config: OptimizerConfig):
        cfg = config.resolved()
        self.config = cfg
        N, lam = cfg.dimension, cfg.popsize
        self.N, self.lam = N, lam
        self.mu = lam // 2
        raw = math.log((lam + 1) / 2) - np.log(np.arange(1, self.mu + 1))
        self.weights = raw / raw.sum()
        self.mueff = 1.0 / float(np.sum(self.weights**2))
        self.cc = (4 + self.mueff / N) / (N + 4 + 2 * self.mueff / N)
        self.cs = (self.mueff + 2) / (N + self.mueff + 5)
        self.c1 = 2 / ((N + 1.3) ** 2 + self.mueff)
        self.cmu = min(1 - self.c1, 2 * (self.mueff - 2 + 1 / self.mueff) / ((N + 2) ** 2 + self.mueff))
        self.damps = 1 + 2 * max(0.0, math.sqrt((self.mueff - 1) / (N + 1)) - 1) + self.cs
        self.chiN = math.sqrt(N) * (1 - 1 / (4 * N) + 1 / (21 * N**2))

        self.rng = np.random.default_rng(cfg.seed)
        self.mean = np.array(cfg.mean, dtype=float)
        self.sigma = cfg.sigma0
        self.pc = np.zeros(N)
        self.ps = np.zeros(N)
        self.C = np.eye(N)
        self.B = np.eye(N)
        self.D = np.ones(N)
        self.generation = 0
        self._z: Optional[np.ndarray] = None

    def parameters(self) -> dict:
        return {
            "popsize": self.lam, "mu": self.mu, "weights": self.weights.tolist(), "mueff": self.mueff,
            "cc": self.cc, "cs": self.cs, "c1": self.c1, "cmu": self.cmu, "damps": self.damps,
            "chiN": self.chiN, "sigma0": self.config.sigma0,
        }

    def state(self) -> dict:
        return {"generation": self.generation, "sigma": self.sigma, "mean": self.mean.copy(),
                "C": self.C.copy(), "ps": self.ps.copy(), "pc": self.pc.copy()}

    def ask(self) -> np.ndarray:
        """Sample ``lambda`` candidates as rows."""
        self._z = self.rng.standard_normal((self.lam, self.N))
        # symmetric root B D B^T: continuous in C, so equal streams give equal paths
        return self.mean + self.sigma * ((self._z @ self.B) * self.D) @ self.B.T

    def tell(self, X: np.ndarray, values) -> None:
        """Update mean, paths, step size and covariance from ranked candidates."""
        vals = np.array([_total(v) for v in values])
        order = np.argsort(vals, kind="stable")[: self.mu]
        old = self.mean
        y = (X[order] - old) / self.sigma
        ymean = self.weights @ y
        self.mean = old + self.sigma * ymean
        self.generation += 1

        zmean = self.B.T @ ymean / self.D  # C^(-1/2) y_w in the eigenbasis
        self.ps = (1 - self.cs) * self.ps + math.sqrt(self.cs * (2 - self.cs) * self.mueff) * (self.B @ zmean)
        ps_norm = float(np.linalg.norm(self.ps))
        hsig = ps_norm / math.sqrt(1 - (1 - self.cs) ** (2 * self.generation)) < (1.4 + 2 / (self.N + 1)) * self.chiN
        self.pc = (1 - self.cc) * self.pc + hsig * math.sqrt(self.cc * (2 - self.cc) * self.mueff) * ymean

        dh = (1 - hsig) * self.cc * (2 - self.cc)
        rank_mu = (y.T * self.weights) @ y
        self.C = ((1 + self.c1 * dh - self.c1 - self.cmu) * self.C
                  + self.c1 * np.outer(self.pc, self.pc) + self.cmu * rank_mu)
        self.sigma *= math.exp(min(1.0, (self.cs / self.damps) * (ps_norm / self.chiN - 1)))
        self._decompose()

    def _decompose(self) -> None:
        C = (self.C + self.C.T) / 2
        if not np.isfinite(C).all() or not math.isfinite(self.sigma):
            raise CMAESError("covariance matrix or step size became non-finite", self.state())
        evals, B = np.linalg.eigh(C)
        if evals.min() <= 0:
            floor = max(evals.max(), 0.0) * 1e-14
            if floor <= 0:
                raise CMAESError("covariance matrix is not positive definite", self.state())
            evals = np.maximum(evals, floor)
            C = (B * evals) @ B.T
        self.C, self.B, self.D = C, B, np.sqrt(evals)


def _evaluate(f: Objective, X: np.ndarray, index: int, pool: Optional[ThreadPoolExecutor]) -> list:
    if pool is None:
        return [f(x, index) for x in X]
    return list(pool.map(lambda x: f(x, index), X))


def _record(generation: int, evaluations: int, best, sigma: float) -> GenerationRecord:
    get = (lambda name: float(getattr(best, name))) if hasattr(best, "total") else (lambda name: math.nan)
    return GenerationRecord(generation, evaluations, _total(best), get("r_squared"), get("op_penalty"),
                            get("var_penalty"), float(sigma))


def cmaes_minimize(f: Objective, config: OptimizerConfig, *, threads: Optional[int] = None,
                   phase: Optional[Callable[[int], int]] = None) -> RunTrace:
    """Minimize ``f(x, evaluation_index)`` with CMA-ES.

    Generation 0 evaluates the initial mean.  Every candidate of a
    generation sees the same ``evaluation_index`` (the count at the start
    of the generation).  When ``phase`` maps that index to a new value,
    the tracked best is discarded, since totals under different penalty
    weights are not comparable; within a phase it never gets worse.
    Non-finite values rank last.
    """
    es = CMAES(config)
    cfg = es.config
    trace = RunTrace(parameters=es.parameters())
    pool = ThreadPoolExecutor(threads) if threads and threads > 1 else None
    try:
        x0 = es.mean.copy()
        best = f(x0, 0)
        best_x = x0
        evals = 1
        cur_phase = phase(0) if phase else 0
        trace.records.append(_record(0, evals, best, es.sigma))
        reason = ""
        while True:
            if cfg.target is not None and _total(best) <= cfg.target:
                reason = "target"
                break
            if evals >= cfg.max_evals:
                reason = "max_evals"
                break
            index = evals
            if phase and phase(index) != cur_phase:
                cur_phase = phase(index)
                best, best_x = None, None
            X = es.ask()
            values = _evaluate(f, X, index, pool)
            evals += len(X)
            i = int(np.argmin([_total(v) for v in values]))
            if best is None or _total(values[i]) < _total(best):
                best, best_x = values[i], X[i].copy()
            try:
                es.tell(X, values)
            except CMAESError as exc:
                exc.state["trace"] = trace
                raise
            trace.records.append(_record(es.generation, evals, best, es.sigma))
    finally:
        if pool is not None:
            pool.shutdown()
    trace.best, trace.best_x, trace.evaluations, trace.stop_reason = best, best_x, evals, reason
    return trace


def one_plus_one_es(f: Objective, config: OptimizerConfig) -> RunTrace:
    """(1+1)-ES with the 1/5th success rule; cheap elitist baseline."""
    cfg = config.resolved()
    rng = np.random.default_rng(cfg.seed)
    x = np.array(cfg.mean, dtype=float)
    fx = f(x, 0)
    sigma, evals = cfg.sigma0, 1
    trace = RunTrace(parameters={"sigma0": sigma, "success_rule": "1/5"})
    trace.records.append(_record(0, evals, fx, sigma))
    factor = math.exp(1 / 3)
    while evals < cfg.max_evals and not (cfg.target is not None and _total(fx) <= cfg.target):
        y = x + sigma * rng.standard_normal(x.size)
        fy = f(y, evals)
        evals += 1
        if _total(fy) <= _total(fx):
            x, fx = y, fy
            sigma *= factor
        else:
            sigma *= factor ** -0.25
        trace.records.append(_record(evals - 1, evals, fx, sigma))
    trace.best, trace.best_x, trace.evaluations = fx, x, evals
    trace.stop_reason = "target" if cfg.target is not None and _total(fx) <= cfg.target else "max_evals"
    return trace


def genotype_document(x: np.ndarray, problem: Problem) -> dict:
    return {"genotype": [float(v) for v in x], "total_dim": problem.dimension,
            "layout": problem.layout.config.to_dict()}


def write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_experiment(problem_config, optimizer_config: OptimizerConfig | dict, *, dataset: Optional[Dataset] = None,
                   out_dir=None, threads: Optional[int] = None, var_threshold: float = 0.05,
                   trace_evaluations: bool = False, manifest: Optional[dict] = None) -> RunTrace:
    """Optimize a smooth symbolic-regression problem under its penalty schedule.

    ``problem_config`` is a :class:`Problem`, a parsed JSON dict or a path.
    With ``out_dir`` the run writes ``trace.csv``, ``genotype.json``,
    ``formula.txt`` and ``manifest.json`` there (plus ``evaluations.csv``
    when ``trace_evaluations`` is set).
    """
    if isinstance(problem_config, Problem):
        problem = problem_config
        cfg_echo = {**problem.layout.config.to_dict(), "penalty": problem.penalty.to_dict()}
    else:
        problem, cfg_echo = load_problem_config(problem_config, dataset)
    if isinstance(optimizer_config, dict):
        optimizer_config = OptimizerConfig.from_dict(optimizer_config)
    opt = optimizer_config.resolved(problem.dimension)

    eval_rows: list[list[str]] = []
    counter = [0]

    def f(x, index):
        rep = problem(x, index)
        if trace_evaluations:
            eval_rows.append(rep.csv_row(counter[0]))
            counter[0] += 1
        return rep

    trace = cmaes_minimize(f, opt, threads=None if trace_evaluations else threads, phase=problem.penalty.phase)
    trace.formula = decode(trace.best_x, problem.layout, var_threshold).render()

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trace.write_csv(out / "trace.csv")
        write_json(out / "genotype.json", genotype_document(trace.best_x, problem))
        (out / "formula.txt").write_text(trace.formula + "\n", encoding="utf-8")
        if trace_evaluations:
            with open(out / "evaluations.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(TRACE_HEADER)
                w.writerows(eval_rows)
        payload = {
            "tool": "smoothsr", "version": __version__, "problem": cfg_echo,
            "optimizer": opt.to_dict(), "strategy_parameters": trace.parameters,
            "var_threshold": var_threshold, "evaluations": trace.evaluations,
            "stop_reason": trace.stop_reason, **(manifest or {}),
        }
        write_json(out / "manifest.json", payload)
    return trace
