"""Datasets, correlation fitness and decisiveness penalties."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoding import (ConfigError, GenotypeLayout, TreeConfig, build_layout, operator_mix_weights, predict,
                       predict_one_position)

__all__ = [
    "Dataset",
    "PenaltyConfig",
    "ObjectiveReport",
    "Problem",
    "poly10",
    "gen_poly10",
    "fitness_r2",
    "r_squared",
    "op_penalty",
    "var_penalty",
    "objective",
    "load_problem_config",
]

TRACE_HEADER = ("eval", "total", "fitness_term", "r2", "op_penalty", "var_penalty")


@dataclass(frozen=True)
class Dataset:
    rows: np.ndarray
    target: np.ndarray
    variable_names: tuple[str, ...] = ()

    def __post_init__(self):
        rows = np.array(self.rows, dtype=float, ndmin=2)
        target = np.array(self.target, dtype=float).ravel()
        names = tuple(self.variable_names) or tuple(f"x{i + 1}" for i in range(rows.shape[1]))
        if rows.shape[0] < 2:
            raise ConfigError(f"a dataset needs at least 2 rows, got {rows.shape[0]}")
        if target.shape[0] != rows.shape[0]:
            raise ConfigError(f"{rows.shape[0]} rows but {target.shape[0]} targets")
        if len(names) != rows.shape[1]:
            raise ConfigError(f"{rows.shape[1]} columns but {len(names)} variable names")
        if not (np.isfinite(rows).all() and np.isfinite(target).all()):
            raise ConfigError("dataset contains non-finite values")
        rows.setflags(write=False)
        target.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "variable_names", names)

    @property
    def num_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def num_vars(self) -> int:
        return self.rows.shape[1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow([*self.variable_names, "y"])
            for x, y in zip(self.rows, self.target):
                out.writerow([repr(float(v)) for v in (*x, y)])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or len(header) < 2:
                raise ConfigError(f"{path}: expected a header 'x1,...,xn,y'")
            try:
                data = np.array([[float(v) for v in row] for row in reader if row], dtype=float)
            except ValueError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        if data.ndim != 2 or data.shape[1] != len(header):
            raise ConfigError(f"{path}: ragged or empty data")
        return cls(data[:, :-1], data[:, -1], tuple(header[:-1]))


def poly10(X) -> np.ndarray:
    """x1*x2 + x3*x4 + x5*x6 + x1*x7*x9 + x3*x6*x10 on the columns of ``X``."""
    X = np.atleast_2d(X)
    x = [None, *X.T]
    return x[1] * x[2] + x[3] * x[4] + x[5] * x[6] + x[1] * x[7] * x[9] + x[3] * x[6] * x[10]


def gen_poly10(m: int = 500, seed: int = 0, range: tuple[float, float] = (-1.0, 1.0)) -> Dataset:
    lo, hi = range
    if m < 2:
        raise ConfigError(f"rows must be >= 2, got {m}")
    if not lo < hi:
        raise ConfigError(f"range must satisfy lo < hi, got {range}")
    X = np.random.default_rng(seed).uniform(lo, hi, size=(m, 10))
    return Dataset(X, poly10(X))


def r_squared(pred, target) -> np.ndarray:
    """Squared Pearson correlation along the last axis, 0 for degenerate rows."""
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(target, dtype=float)
    if y.shape[-1] < 2:
        return np.zeros(pred.shape[:-1]) if pred.ndim > 1 else 0.0
    with np.errstate(all="ignore"):
        finite = np.isfinite(pred).all(axis=-1)
        p = np.where(finite[..., None], pred, 0.0)
        spread = p.max(axis=-1) - p.min(axis=-1)
        flat = spread <= 1e-12 * np.abs(p).max(axis=-1)
        pc = p - p.mean(axis=-1, keepdims=True)
        yc = y - y.mean()
        num = (pc @ yc) ** 2
        den = np.einsum("...i,...i->...", pc, pc) * (yc @ yc)
        r2 = np.clip(num / den, 0.0, 1.0)
    ok = finite & ~flat & np.isfinite(r2) & (den > 0)
    out = np.where(ok, r2, 0.0)
    return float(out) if out.ndim == 0 else out


def fitness_r2(genotype, layout: GenotypeLayout, dataset: Dataset):
    """R^2 between smooth predictions and the target (batch-aware)."""
    return r_squared(predict(genotype, layout, dataset.rows), dataset.target)


def _node_indecision(raw, k: int) -> np.ndarray:
    return (1.0 - operator_mix_weights(raw).max(axis=-1)) / (1.0 - 1.0 / k)


def _leaf_spread(blocks, m_allow: int) -> np.ndarray:
    slots = blocks.shape[-1]
    mass = np.abs(blocks)
    total = mass.sum(axis=-1, keepdims=True)
    with np.errstate(all="ignore"):
        share = np.where(total > 0, mass / np.where(total > 0, total, 1.0), 0.0)
    top = -np.partition(-share, m_allow - 1, axis=-1)[..., :m_allow].sum(axis=-1)
    return np.where(total[..., 0] > 0, (1.0 - top) / (1.0 - m_allow / slots), 0.0)


def _scalar_or_array(out):
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def op_penalty(genotype, layout: GenotypeLayout):
    """Mean normalized indecision ``(1 - max w) / (1 - 1/k)`` over operator nodes."""
    g = layout.check(genotype)
    if layout.op_slots.size == 0:
        return _scalar_or_array(np.zeros(g.shape[:-1]))
    return _scalar_or_array(_node_indecision(g[..., layout.op_slots], layout.config.num_ops).mean(axis=-1))


def var_penalty(genotype, layout: GenotypeLayout, m_allow: int = 2):
    """Mean per-leaf mass outside the ``m_allow`` largest normalized weights.

    Normalized so that a uniform leaf scores 1 and a leaf with at most
    ``m_allow`` non-zero weights scores 0.  All-zero leaves score 0.
    """
    slots = layout.config.num_vars + 1
    if not 1 <= m_allow <= slots:
        raise ValueError(f"m_allow must lie in 1..{slots}, got {m_allow}")
    g = layout.check(genotype)
    if m_allow == slots:
        return _scalar_or_array(np.zeros(g.shape[:-1]))
    return _scalar_or_array(_leaf_spread(g[..., layout.var_slots], m_allow).mean(axis=-1))


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty weights, optionally staged by evaluation count.

    ``schedule`` entries are ``(start_evaluation, lambda_op, lambda_var)``;
    when given they override the flat ``lambda_op``/``lambda_var``.
    """

    lambda_op: float = 0.0
    lambda_var: float = 0.0
    var_allowance: int = 2
    schedule: tuple[tuple[int, float, float], ...] = ()

    def __post_init__(self):
        sched = tuple((int(s), float(a), float(b)) for s, a, b in self.schedule)
        object.__setattr__(self, "schedule", sched)
        if self.lambda_op < 0 or self.lambda_var < 0 or any(a < 0 or b < 0 for _, a, b in sched):
            raise ConfigError("penalty weights must be >= 0")
        if self.var_allowance < 1:
            raise ConfigError("var_allowance must be >= 1")
        if sched:
            starts = [s for s, _, _ in sched]
            if starts[0] != 0:
                raise ConfigError("schedule must start at evaluation 0")
            if any(b <= a for a, b in zip(starts, starts[1:])):
                raise ConfigError("schedule start evaluations must be strictly increasing")

    def lambdas(self, evaluation_index: int) -> tuple[float, float]:
        if not self.schedule:
            return self.lambda_op, self.lambda_var
        active = self.schedule[0]
        for entry in self.schedule:
            if entry[0] > evaluation_index:
                break
            active = entry
        return active[1], active[2]

    def phase(self, evaluation_index: int) -> int:
        return sum(1 for s, _, _ in self.schedule[1:] if s <= evaluation_index)

    def to_dict(self) -> dict:
        return {
            "lambda_op": self.lambda_op,
            "lambda_var": self.lambda_var,
            "var_allowance": self.var_allowance,
            "schedule": [list(e) for e in self.schedule],
        }


@dataclass(frozen=True)
class ObjectiveReport:
    fitness_term: float
    op_penalty: float
    var_penalty: float
    total: float
    r_squared: float
    lambda_op: float = 0.0
    lambda_var: float = 0.0

    def csv_row(self, evaluation: int) -> list[str]:
        vals = (self.total, self.fitness_term, self.r_squared, self.op_penalty, self.var_penalty)
        return [str(evaluation), *(repr(float(v)) for v in vals)]


@dataclass(frozen=True)
class Problem:
    """Tree layout + data + penalties: everything the objective needs."""

    layout: GenotypeLayout
    dataset: Dataset
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)

    def __post_init__(self):
        if self.layout.config.num_vars != self.dataset.num_vars:
            raise ConfigError(
                f"dataset has {self.dataset.num_vars} input columns but the tree "
                f"expects num_vars={self.layout.config.num_vars}"
            )

    @property
    def dimension(self) -> int:
        return self.layout.total_dim

    def terms(self, genotype):
        """(r2, op_penalty, var_penalty), batch-aware."""
        return (
            fitness_r2(genotype, self.layout, self.dataset),
            op_penalty(genotype, self.layout),
            var_penalty(genotype, self.layout, self.penalty.var_allowance),
        )

    def report(self, genotype, lambda_op: float, lambda_var: float) -> ObjectiveReport:
        r2, po, pv = self.terms(genotype)
        fit = 1.0 - r2
        return ObjectiveReport(fit, po, pv, fit + lambda_op * po + lambda_var * pv, r2, lambda_op, lambda_var)

    def __call__(self, genotype, evaluation_index: int = 0) -> ObjectiveReport:
        return self.report(genotype, *self.penalty.lambdas(evaluation_index))

    def total_batch(self, genotypes, lambda_op: float, lambda_var: float) -> np.ndarray:
        r2, po, pv = self.terms(np.atleast_2d(genotypes))
        return (1.0 - r2) + lambda_op * po + lambda_var * pv

    def total_one_position(self, genotype, positions, values, lambda_op: float,
                           lambda_var: float) -> np.ndarray:
        """Totals of neighbors that each change one coordinate of ``genotype``.

        Same numbers as :meth:`total_batch` on the expanded neighbor matrix
        (up to rounding), at a fraction of the cost.
        """
        lay = self.layout
        g = lay.check(genotype)
        positions = np.asarray(positions, dtype=np.intp)
        values = np.asarray(values, dtype=float)
        r2 = r_squared(predict_one_position(g, lay, self.dataset.rows, positions, values), self.dataset.target)

        k, n1, n_op = lay.config.num_ops, lay.config.num_vars + 1, lay.num_op_weights
        m_allow = self.penalty.var_allowance
        po = np.full(len(positions), op_penalty(g, lay))
        pv = np.full(len(positions), var_penalty(g, lay, m_allow))
        hit_op = np.flatnonzero(positions < n_op)
        if hit_op.size:
            node, r = np.divmod(positions[hit_op], k - 1)
            raw = g[lay.op_slots]
            base = _node_indecision(raw, k)
            blocks = raw[node].copy()
            blocks[np.arange(hit_op.size), r] = values[hit_op]
            po[hit_op] = np.clip(po[hit_op] + (_node_indecision(blocks, k) - base[node]) / len(raw), 0.0, 1.0)
        hit_var = np.flatnonzero(positions >= n_op)
        if hit_var.size and m_allow < n1:
            leaf, t = np.divmod(positions[hit_var] - n_op, n1)
            beta = g[lay.var_slots]
            base = _leaf_spread(beta, m_allow)
            blocks = beta[leaf].copy()
            blocks[np.arange(hit_var.size), t] = values[hit_var]
            pv[hit_var] = np.clip(pv[hit_var] + (_leaf_spread(blocks, m_allow) - base[leaf]) / len(beta), 0.0, 1.0)
        return (1.0 - r2) + lambda_op * po + lambda_var * pv


def objective(genotype, layout: GenotypeLayout, dataset: Dataset, penalty_config: PenaltyConfig,
              evaluation_index: int = 0) -> ObjectiveReport:
    return Problem(layout, dataset, penalty_config)(genotype, evaluation_index)


def _data_from_source(source: dict, base: Path) -> Dataset:
    kind = source.get("problem", "csv" if "path" in source else None)
    if kind == "poly10":
        return gen_poly10(int(source.get("rows", 500)), int(source.get("seed", 0)),
                          tuple(source.get("range", (-1.0, 1.0))))
    if kind == "csv":
        if "path" not in source:
            raise ConfigError("csv data source needs a 'path'")
        path = Path(source["path"])
        return Dataset.from_csv(path if path.is_absolute() else base / path)
    raise ConfigError(f"unknown data source {source!r}")


def load_problem_config(config: dict | str | Path, dataset: Dataset | None = None) -> tuple[Problem, dict]:
    """Build a :class:`Problem` from a JSON document (path or parsed dict).

    Keys: ``depth``, ``operators``, ``leaf_mode``, ``num_vars`` (optional,
    defaults to the data's column count), ``penalty`` (``lambda_op``,
    ``lambda_var``, ``var_allowance``, ``schedule``), ``data`` (either
    ``{"problem": "poly10", "rows", "seed", "range"}`` or ``{"path": ...}``).
    An explicit ``dataset`` overrides ``data``.
    """
    base = Path(".")
    if not isinstance(config, dict):
        base = Path(config).parent
        with open(config, encoding="utf-8") as fh:
            config = json.load(fh)
    if not isinstance(config, dict):
        raise ConfigError("problem config must be a JSON object")
    cfg = dict(config)
    if dataset is None:
        if "data" not in cfg:
            raise ConfigError("problem config has no 'data' source and no dataset was given")
        dataset = _data_from_source(cfg["data"], base)
    num_vars = int(cfg.get("num_vars", dataset.num_vars))
    tree = TreeConfig(int(cfg.get("depth", 5)), num_vars, tuple(cfg.get("operators", ("add", "mul"))),
                      cfg.get("leaf_mode", "op_fold"))
    pen = cfg.get("penalty", {})
    penalty = PenaltyConfig(float(pen.get("lambda_op", 0.0)), float(pen.get("lambda_var", 0.0)),
                            int(pen.get("var_allowance", 2)), tuple(map(tuple, pen.get("schedule", ()))))
    problem = Problem(build_layout(tree), dataset, penalty)
    cfg.update(tree.to_dict())
    cfg["penalty"] = penalty.to_dict()
    return problem, cfg

