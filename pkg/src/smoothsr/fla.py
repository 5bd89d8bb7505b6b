"""Fitness landscape analysis: neighborhoods, walks and trajectory measures."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .encoding import ConfigError

__all__ = [
    "Manipulator",
    "WalkTrace",
    "FlaReport",
    "MEASURE_LABELS",
    "parse_manipulator",
    "polynomial_delta",
    "mutate",
    "random_walk",
    "adaptive_walk",
    "auto_correlation",
    "correlation_length",
    "information_analysis",
    "fla_battery",
    "write_report_csv",
]

MEASURE_LABELS = (
    "auto correlation",
    "corr. length",
    "density basin information",
    "information content",
    "information stability",
    "partial inf. content",
    "up walk length",
    "up walk len. variance",
    "down walk length",
    "down walk len. variance",
)

KINDS = ("polynomial_one_position", "polynomial_all_position", "uniform_one_position")


@dataclass(frozen=True)
class Manipulator:
    kind: str
    contiguity: float = 2.0
    max_manipulation: float = 1.0
    uniform_bounds: tuple[float, float] = (-3.0, 3.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown manipulator kind {self.kind!r}; valid: {KINDS}")
        if self.contiguity < 0:
            raise ConfigError("contiguity must be >= 0")
        if not self.max_manipulation > 0:
            raise ConfigError("max_manipulation must be > 0")
        lo, hi = self.uniform_bounds
        if not lo < hi:
            raise ConfigError("uniform bounds must satisfy lo < hi")

    @property
    def name(self) -> str:
        if self.kind == "uniform_one_position":
            return "uni-1"
        pos = "1" if self.kind == "polynomial_one_position" else "all"
        return f"poly-{pos}-{self.contiguity:g}"

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "contiguity": self.contiguity,
                "max_manipulation": self.max_manipulation, "uniform_bounds": list(self.uniform_bounds)}


def parse_manipulator(name: str, max_manipulation: float = 1.0,
                      uniform_bounds: tuple[float, float] = (-3.0, 3.0)) -> Manipulator:
    """Parse ``poly-1-15``, ``poly-all-2`` or ``uni-1`` (case-insensitive)."""
    parts = name.strip().lower().split("-")
    if parts == ["uni", "1"]:
        return Manipulator("uniform_one_position", max_manipulation=max_manipulation,
                           uniform_bounds=uniform_bounds)
    if len(parts) == 3 and parts[0] == "poly" and parts[1] in ("1", "all"):
        try:
            c = float(parts[2])
        except ValueError:
            c = -1.0
        if c >= 0:
            kind = "polynomial_one_position" if parts[1] == "1" else "polynomial_all_position"
            return Manipulator(kind, c, max_manipulation, uniform_bounds)
    raise ConfigError(f"unknown manipulator {name!r}; valid names: poly-1-<c>, poly-all-<c>, uni-1 "
                      "(e.g. poly-1-15, poly-all-15, poly-1-2, poly-all-2, uni-1)")


def polynomial_delta(u, contiguity: float) -> np.ndarray:
    """Polynomial-mutation step in [-1, 1] for uniform draws ``u``."""
    u = np.asarray(u, dtype=float)
    p = 1.0 / (contiguity + 1.0)
    low = np.power(2.0 * np.minimum(u, 0.5), p) - 1.0
    high = 1.0 - np.power(2.0 * (1.0 - np.maximum(u, 0.5)), p)
    return np.where(u < 0.5, low, high)


def _one_position_draws(x, manipulator: Manipulator, rng: np.random.Generator, count: int):
    """Positions and new values for ``count`` single-coordinate moves."""
    pos = rng.integers(0, x.size, size=count)
    if manipulator.kind == "polynomial_one_position":
        u = rng.random(count)
        vals = x[pos] + polynomial_delta(u, manipulator.contiguity) * manipulator.max_manipulation
    else:
        lo, hi = manipulator.uniform_bounds
        vals = rng.uniform(lo, hi, size=count)
    return pos, vals


def mutate_many(x, manipulator: Manipulator, rng: np.random.Generator, count: int) -> np.ndarray:
    """``count`` independent neighbors of ``x`` as rows."""
    x = np.asarray(x, dtype=float)
    if manipulator.kind == "polynomial_all_position":
        u = rng.random((count, x.size))
        return x + polynomial_delta(u, manipulator.contiguity) * manipulator.max_manipulation
    pos, vals = _one_position_draws(x, manipulator, rng, count)
    out = np.repeat(x[None, :], count, axis=0)
    out[np.arange(count), pos] = vals
    return out


def mutate(x, manipulator: Manipulator, rng: np.random.Generator) -> np.ndarray:
    return mutate_many(x, manipulator, rng, 1)[0]


@dataclass
class WalkTrace:
    kind: str
    fitness: np.ndarray
    seed: Optional[int] = None
    manipulator: Optional[Manipulator] = None
    nonfinite: int = 0

    @property
    def steps(self) -> int:
        return len(self.fitness) - 1


def _clean(values: list[float]) -> tuple[np.ndarray, int]:
    f = np.asarray(values, dtype=float)
    bad = ~np.isfinite(f)
    if bad.any():
        worst = f[~bad].max() if (~bad).any() else 0.0
        f = np.where(bad, worst, f)
    return f, int(bad.sum())


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _clip(x, domain):
    return x if domain is None else np.clip(x, domain[0], domain[1])


def random_walk(start, steps: int, manipulator: Manipulator, objective: Callable[[np.ndarray], float],
                seed=None, domain: Optional[tuple[float, float]] = None) -> WalkTrace:
    """Unbiased walk; records the objective at all ``steps + 1`` points.

    With ``domain`` every point is clipped into ``[lo, hi]``.  Non-finite
    values are replaced by the worst (largest) finite value seen and
    counted in ``nonfinite``.
    """
    if steps < 1:
        raise ValueError("a random walk needs at least one step")
    rng = _rng(seed)
    x = _clip(np.array(start, dtype=float), domain)
    values = [float(objective(x))]
    for _ in range(steps):
        x = _clip(mutate(x, manipulator, rng), domain)
        values.append(float(objective(x)))
    f, bad = _clean(values)
    return WalkTrace("random", f, seed, manipulator, bad)


def adaptive_walk(start, direction: str, neighbors: int, max_steps: int, manipulator: Manipulator,
                  objective: Callable[[np.ndarray], float], seed=None, *,
                  batch_objective: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                  one_position_objective: Optional[Callable] = None,
                  domain: Optional[tuple[float, float]] = None) -> WalkTrace:
    """Best-improvement walk: move to the best of ``neighbors`` samples if it improves.

    ``direction="down"`` looks for smaller values, ``"up"`` for larger.
    Stops when no sample improves strictly or after ``max_steps`` moves;
    the walk length is ``trace.steps``.

    ``batch_objective(X)`` scores a neighbor matrix at once;
    ``one_position_objective(x, positions, values)`` scores single-coordinate
    neighbors without building them and is used for one-position kinds.
    """
    if direction not in ("up", "down"):
        raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
    if neighbors < 1:
        raise ValueError("neighbors must be >= 1")
    sign = 1.0 if direction == "down" else -1.0
    rng = _rng(seed)
    x = _clip(np.array(start, dtype=float), domain)
    fx = float(objective(x))
    values = [fx]
    single_coord = manipulator.kind != "polynomial_all_position"
    for _ in range(max_steps):
        if single_coord and one_position_objective is not None:
            pos, vals = _one_position_draws(x, manipulator, rng, neighbors)
            vals = _clip(vals, domain)
            fc = np.asarray(one_position_objective(x, pos, vals), dtype=float)
            cand = None
        else:
            cand = _clip(mutate_many(x, manipulator, rng, neighbors), domain)
            if batch_objective is not None:
                fc = np.asarray(batch_objective(cand), dtype=float)
            else:
                fc = np.array([objective(c) for c in cand], dtype=float)
        score = np.where(np.isfinite(fc), sign * fc, np.inf)
        i = int(np.argmin(score))
        if not score[i] < sign * fx:
            break
        if cand is None:
            x = x.copy()
            x[pos[i]] = vals[i]
        else:
            x = cand[i]
        fx = float(fc[i])
        values.append(fx)
    f, bad = _clean(values)
    return WalkTrace(direction, f, seed, manipulator, bad)


def _fitness(trace) -> np.ndarray:
    return np.asarray(trace.fitness if isinstance(trace, WalkTrace) else trace, dtype=float)


def _pearson(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0.0 or not math.isfinite(den):
        return None
    return max(-1.0, min(1.0, float(a @ b) / den))


def auto_correlation(trace, lag: int = 1, with_flag: bool = False):
    """Pearson correlation of ``(f_t, f_{t+lag})``; 0 (flagged) for flat walks."""
    f = _fitness(trace)
    if lag < 1 or len(f) <= lag + 1:
        raise ValueError(f"lag {lag} needs a walk longer than {lag + 1} points, got {len(f)}")
    r = _pearson(f[:-lag], f[lag:])
    value, degenerate = (0.0, True) if r is None else (r, False)
    return (value, degenerate) if with_flag else value


def correlation_length(trace) -> int:
    """Last lag whose autocorrelation is still significant (|rho| >= 2/sqrt(T - lag)).

    Scans lags 1..T//2; if significance never drops, returns T//2.
    """
    f = _fitness(trace)
    if len(f) < 10:
        raise ValueError("correlation length needs at least 10 points")
    T = len(f) - 1
    for lag in range(1, T // 2 + 1):
        r = _pearson(f[:-lag], f[lag:])
        if r is None or abs(r) < 2.0 / math.sqrt(T - lag):
            return lag - 1
    return T // 2


def information_analysis(trace, epsilon: float = 0.0) -> dict:
    """Information content, density-basin information, partial information content
    and information stability of a walk.

    Steps are coded as -1/0/1 with a dead zone ``|diff| <= epsilon``.
    """
    f = _fitness(trace)
    if len(f) < 3:
        raise ValueError("information analysis needs at least 3 points")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    diff = np.diff(f)
    stability = float(np.abs(diff).max())
    sym = np.where(diff > epsilon, 1, np.where(diff < -epsilon, -1, 0))
    pairs = 3 * (sym[:-1] + 1) + (sym[1:] + 1)
    prob = np.bincount(pairs, minlength=9) / len(pairs)
    same = np.array([0, 4, 8])
    other = np.setdiff1d(np.arange(9), same)

    def entropy(p, base):
        p = p[p > 0]
        return float(-(p * np.log(p)).sum() / math.log(base)) + 0.0

    nonzero = sym[sym != 0]
    runs = int(1 + np.count_nonzero(nonzero[1:] != nonzero[:-1])) if nonzero.size else 0
    return {
        "information_content": entropy(prob[other], 6),
        "density_basin_information": entropy(prob[same], 3),
        "partial_information_content": runs / len(sym),
        "information_stability": stability,
    }


@dataclass
class FlaReport:
    manipulator: Manipulator
    auto_correlation: float
    correlation_length: int
    information_content: float
    density_basin_information: float
    partial_information_content: float
    information_stability: float
    up_walk_length: Optional[float] = None
    up_walk_variance: Optional[float] = None
    down_walk_length: Optional[float] = None
    down_walk_variance: Optional[float] = None
    epsilon: float = 0.0
    degenerate: bool = False
    capped: dict = field(default_factory=dict)
    walks: dict = field(default_factory=dict, repr=False)

    def rows(self) -> list[Optional[float]]:
        """Values in the order of :data:`MEASURE_LABELS`."""
        return [self.auto_correlation, self.correlation_length, self.density_basin_information,
                self.information_content, self.information_stability, self.partial_information_content,
                self.up_walk_length, self.up_walk_variance, self.down_walk_length, self.down_walk_variance]

    def summary(self) -> dict:
        out = dict(zip(MEASURE_LABELS, self.rows()))
        out.update(manipulator=self.manipulator.to_dict(), epsilon=self.epsilon, degenerate=self.degenerate,
                   capped_walks=self.capped)
        return out


def report_from_walks(manipulator: Manipulator, random_trace: WalkTrace, up: Sequence[WalkTrace],
                      down: Sequence[WalkTrace], epsilon: float = 0.0) -> FlaReport:
    rho, degenerate = auto_correlation(random_trace, 1, with_flag=True)
    info = information_analysis(random_trace, epsilon)

    def stats(walks):
        if not walks:
            return None, None
        lengths = np.array([w.steps for w in walks], dtype=float)
        var = float(lengths.var(ddof=1)) if len(lengths) > 1 else 0.0
        return float(lengths.mean()), var

    up_mean, up_var = stats(up)
    down_mean, down_var = stats(down)
    return FlaReport(manipulator, rho, correlation_length(random_trace), info["information_content"],
                     info["density_basin_information"], info["partial_information_content"],
                     info["information_stability"], up_mean, up_var, down_mean, down_var, epsilon, degenerate,
                     walks={"random": random_trace, "up": list(up), "down": list(down)})


def walk_seed(base_seed: int, *path: int) -> np.random.SeedSequence:
    """Independent, scheduling-free RNG stream for one walk."""
    return np.random.SeedSequence([int(base_seed), *map(int, path)])


def fla_battery(problem, manipulators: Sequence[Manipulator], walk_length: int = 10_000,
                repetitions: int = 100, seed: int = 0, *, neighbors: int = 100, max_steps: int = 200,
                epsilon: float = 0.0, lambdas: tuple[float, float] = (0.0, 0.0),
                domain: Optional[tuple[float, float]] = (-3.0, 3.0),
                threads: Optional[int] = None) -> list[FlaReport]:
    """Random-walk measures and adaptive-walk length statistics per manipulator.

    ``problem`` is an :class:`~smoothsr.objective.Problem`; it is evaluated
    with the fixed penalty weights ``lambdas`` (default: correlation term
    only).  Adaptive walks stop after ``max_steps`` moves; how many did is
    reported in ``FlaReport.capped``.  Walks stay inside the box
    ``domain``.  Every walk draws its start (standard normal genotype) and
    its moves from its own seed, derived from ``seed``, the manipulator
    index and the walk index, so results do not depend on ``threads``.
    """
    lam_op, lam_var = lambdas
    dim = problem.dimension

    def single(x):
        return float(problem.total_batch(x, lam_op, lam_var)[0])

    def batch(X):
        return problem.total_batch(X, lam_op, lam_var)

    def one_pos(x, pos, vals):
        return problem.total_one_position(x, pos, vals, lam_op, lam_var)

    def job(spec):
        mi, kind, rep = spec
        manip = manipulators[mi]
        ss = walk_seed(seed, mi, ("random", "up", "down").index(kind), rep)
        start_ss, walk_ss = ss.spawn(2)
        start = np.random.default_rng(start_ss).standard_normal(dim)
        if kind == "random":
            return random_walk(start, walk_length, manip, single, walk_ss, domain)
        return adaptive_walk(start, kind, neighbors, max_steps, manip, single, walk_ss,
                             batch_objective=batch, one_position_objective=one_pos, domain=domain)

    specs = []
    for mi in range(len(manipulators)):
        specs.append((mi, "random", 0))
        specs += [(mi, d, r) for d in ("up", "down") for r in range(repetitions)]
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(job, specs))
    else:
        results = [job(s) for s in specs]
    by_spec = dict(zip(specs, results))
    reports = []
    for mi, manip in enumerate(manipulators):
        up = [by_spec[(mi, "up", r)] for r in range(repetitions)]
        down = [by_spec[(mi, "down", r)] for r in range(repetitions)]
        rep = report_from_walks(manip, by_spec[(mi, "random", 0)], up, down, epsilon)
        rep.capped = {"up": sum(w.steps >= max_steps for w in up), "down": sum(w.steps >= max_steps for w in down)}
        reports.append(rep)
    return reports


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_report_csv(reports: Sequence[FlaReport], path) -> None:
    """Grid CSV: one row per measure, one column per manipulator."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["measure", *(r.manipulator.name for r in reports)])
        columns = [r.rows() for r in reports]
        for i, label in enumerate(MEASURE_LABELS):
            out.writerow([label, *(_cell(col[i]) for col in columns)])


def write_walk_csv(trace: WalkTrace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["step", "fitness"])
        out.writerows([str(i), repr(float(v))] for i, v in enumerate(trace.fitness))
