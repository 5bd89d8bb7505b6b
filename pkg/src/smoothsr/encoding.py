"""Fixed-shape smooth expression trees.

A full binary tree of a given depth is laid out as a flat real vector.
Every node carrying operator weights owns ``k - 1`` raw values which are
squashed onto the probability simplex by logistic stick-breaking; every
leaf owns ``n + 1`` variable weights (one per input plus a constant slot).

Nodes are numbered breadth-first (root = 0, children of ``i`` are
``2i + 1`` and ``2i + 2``); leaves are the last ``2**(depth - 1)`` nodes,
left to right.  Operator slots come first in the vector, variable slots
after them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "CONST",
    "OPERATORS",
    "ConfigError",
    "StructureError",
    "TreeConfig",
    "GenotypeLayout",
    "Leaf",
    "CrispTree",
    "build_layout",
    "operator_mix_weights",
    "predict",
    "predict_one_position",
    "eval_smooth",
    "decode",
    "encode_crisp",
]

#: Marker used in a leaf term for the constant slot.
CONST = None

#: Known operator identifiers and their infix symbols.
OPERATORS = {"add": "+", "mul": "*", "sub": "-", "div": "/"}

_DIV_EPS = 1e-12


class ConfigError(ValueError):
    """Invalid tree configuration."""


class StructureError(ValueError):
    """A tree or vector does not fit a layout."""


def protected_div(a, b):
    """``a / b`` where ``|b| > 1e-12``, else 1."""
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    safe = np.abs(b) > _DIV_EPS
    with np.errstate(all="ignore"):
        out = np.where(safe, a / np.where(safe, b, 1.0), 1.0)
    return out


def _binary(op: str, x, y):
    if op == "add":
        return x + y
    if op == "mul":
        return x * y
    if op == "sub":
        return x - y
    if op == "div":
        return protected_div(x, y)
    raise ConfigError(f"unknown operator {op!r}")


@dataclass(frozen=True)
class TreeConfig:
    depth: int
    num_vars: int
    operators: tuple[str, ...] = ("add", "mul")
    leaf_mode: str = "op_fold"

    def __post_init__(self):
        object.__setattr__(self, "operators", tuple(self.operators))
        if int(self.depth) != self.depth or self.depth < 1:
            raise ConfigError(f"depth must be an integer >= 1, got {self.depth!r}")
        if int(self.num_vars) != self.num_vars or self.num_vars < 1:
            raise ConfigError(f"num_vars must be an integer >= 1, got {self.num_vars!r}")
        if self.leaf_mode not in ("op_fold", "linear"):
            raise ConfigError(f"leaf_mode must be 'op_fold' or 'linear', got {self.leaf_mode!r}")
        unknown = [op for op in self.operators if op not in OPERATORS]
        if unknown:
            raise ConfigError(f"unknown operators {unknown}; valid: {sorted(OPERATORS)}")
        if len(set(self.operators)) != len(self.operators):
            raise ConfigError(f"duplicate operators in {list(self.operators)}")
        if len(self.operators) < 2:
            raise ConfigError("at least two operators are required")

    @property
    def num_ops(self) -> int:
        return len(self.operators)

    @property
    def num_nodes(self) -> int:
        return 2**self.depth - 1

    @property
    def num_leaves(self) -> int:
        return 2 ** (self.depth - 1)

    @property
    def num_internal(self) -> int:
        return 2 ** (self.depth - 1) - 1

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "num_vars": self.num_vars,
            "operators": list(self.operators),
            "leaf_mode": self.leaf_mode,
        }


@dataclass(frozen=True)
class GenotypeLayout:
    """Index map from the flat genotype to per-node and per-leaf blocks.

    ``op_slots[i]`` holds the ``k - 1`` vector indices of the i-th node that
    carries operator weights (all nodes in ``op_fold`` mode, internal nodes
    only in ``linear`` mode).  ``var_slots[j]`` holds the ``n + 1`` indices
    of leaf ``j``; the last one is the constant slot.
    """

    config: TreeConfig
    op_slots: np.ndarray
    var_slots: np.ndarray
    total_dim: int

    @property
    def op_nodes(self) -> np.ndarray:
        """Breadth-first node ids that own an operator block."""
        cfg = self.config
        count = cfg.num_nodes if cfg.leaf_mode == "op_fold" else cfg.num_internal
        return np.arange(count)

    @property
    def num_op_weights(self) -> int:
        return int(self.op_slots.size)

    @property
    def num_var_weights(self) -> int:
        return int(self.var_slots.size)

    def check(self, genotype) -> np.ndarray:
        g = np.asarray(genotype, dtype=float)
        if g.shape[-1] != self.total_dim:
            raise StructureError(
                f"genotype has length {g.shape[-1]}, layout expects {self.total_dim}"
            )
        return g


def build_layout(config: TreeConfig) -> GenotypeLayout:
    k1 = config.num_ops - 1
    n_op_nodes = config.num_nodes if config.leaf_mode == "op_fold" else config.num_internal
    n_op = n_op_nodes * k1
    op_slots = np.arange(n_op, dtype=np.intp).reshape(n_op_nodes, k1)
    var_slots = n_op + np.arange(config.num_leaves * (config.num_vars + 1), dtype=np.intp)
    var_slots = var_slots.reshape(config.num_leaves, config.num_vars + 1)
    for arr in (op_slots, var_slots):
        arr.setflags(write=False)
    return GenotypeLayout(config, op_slots, var_slots, n_op + var_slots.size)


def operator_mix_weights(raw) -> np.ndarray:
    """Map ``k - 1`` unbounded raw values to ``k`` simplex weights.

    Stick-breaking with a logistic squash: the i-th operator takes the
    fraction ``sigmoid(raw[i])`` of what is left, the last operator takes
    the remainder.  Works on the last axis, so blocks can be stacked.

    >>> operator_mix_weights([0.0, 0.0]).tolist()
    [0.5, 0.25, 0.25]
    """
    raw = np.asarray(raw, dtype=float)
    take = expit(raw)
    keep = expit(-raw)
    shape = raw.shape[:-1] + (raw.shape[-1] + 1,)
    out = np.empty(shape)
    left = np.cumprod(keep, axis=-1)
    out[..., 0] = take[..., 0]
    out[..., 1:-1] = take[..., 1:] * left[..., :-1]
    out[..., -1] = left[..., -1]
    return out


def _leaf_values(beta, X, config, leaf_w):
    """Leaf outputs, shape ``(batch, leaves, rows)``."""
    n = config.num_vars
    coef, const = beta[..., :n], beta[..., n:]
    linear = (coef.reshape(-1, n) @ X.T).reshape(coef.shape[:-1] + (len(X),)) + const
    if config.leaf_mode == "linear":
        return linear
    out = 0.0
    for i, op in enumerate(config.operators):
        if op == "add":
            val = linear
        elif op == "mul":
            val = (np.prod(coef, axis=-1) * const[..., 0])[..., None] * np.prod(X, axis=1)
        elif op == "sub":
            val = 2.0 * coef[..., :1] * X[:, 0] - linear
        else:
            val = np.broadcast_to(coef[..., :1] * X[:, 0], linear.shape)
            for j in range(1, n):
                val = protected_div(val, coef[..., j : j + 1] * X[:, j])
            val = protected_div(val, const)
        out = out + leaf_w[..., i : i + 1] * val
    return out


def predict(genotype, layout: GenotypeLayout, X) -> np.ndarray:
    """Smooth evaluation over data rows.

    ``genotype`` may be one vector (returns shape ``(m,)``) or a stack of
    shape ``(b, D)`` (returns ``(b, m)``).  Overflow and NaN propagate;
    callers decide what a non-finite prediction is worth.
    """
    g = layout.check(genotype)
    single = g.ndim == 1
    G = np.atleast_2d(g)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    cfg = layout.config
    if X.shape[1] != cfg.num_vars:
        raise StructureError(f"rows have {X.shape[1]} columns, layout expects {cfg.num_vars}")
    k = cfg.num_ops
    w = operator_mix_weights(G[:, layout.op_slots]) if layout.op_slots.size else np.empty(
        (G.shape[0], 0, k)
    )
    beta = G[:, layout.var_slots]
    n_int = cfg.num_internal
    with np.errstate(all="ignore"):
        leaf_w = w[:, n_int:, :] if cfg.leaf_mode == "op_fold" else None
        vals = _leaf_values(beta, X, cfg, leaf_w)
        for level in range(cfg.depth - 2, -1, -1):
            first = 2**level - 1
            nw = w[:, first : 2 * first + 1, :, None]
            left, right = vals[:, 0::2], vals[:, 1::2]
            vals = sum(nw[:, :, i] * _binary(op, left, right) for i, op in enumerate(cfg.operators))
    out = vals[:, 0, :]
    return out[0] if single else out


def eval_smooth(genotype, layout: GenotypeLayout, row) -> float:
    """Smooth evaluation of a single data row."""
    return float(predict(genotype, layout, np.asarray(row, dtype=float)[None, :])[0])


@dataclass(frozen=True)
class Leaf:
    """Terms ``(variable index or CONST, coefficient)`` combined by ``op``."""

    terms: tuple[tuple[Optional[int], float], ...]
    op: str = "add"

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple((v, float(c)) for v, c in self.terms))
        if not self.terms:
            raise StructureError("a leaf needs at least one term")

    @property
    def variables(self) -> frozenset[int]:
        return frozenset(v for v, _ in self.terms if v is not CONST)

    def render(self) -> str:
        parts = [f"{c:.6g}" if v is CONST else f"{c:.6g}·x{v + 1}" for v, c in self.terms]
        return "(" + f" {OPERATORS[self.op]} ".join(parts) + ")"


@dataclass(frozen=True)
class CrispTree:
    """Discrete tree: one operator per internal node, term lists at leaves."""

    depth: int
    ops: tuple[str, ...]
    leaves: tuple[Leaf, ...]
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        object.__setattr__(self, "leaves", tuple(self.leaves))
        if len(self.ops) != 2 ** (self.depth - 1) - 1 or len(self.leaves) != 2 ** (self.depth - 1):
            raise StructureError(
                f"depth {self.depth} needs {2 ** (self.depth - 1) - 1} operators and "
                f"{2 ** (self.depth - 1)} leaves, got {len(self.ops)} and {len(self.leaves)}"
            )

    def render(self) -> str:
        def node(i: int, top: bool) -> str:
            if i >= len(self.ops):
                return self.leaves[i - len(self.ops)].render()
            s = f"{node(2 * i + 1, False)} {OPERATORS[self.ops[i]]} {node(2 * i + 2, False)}"
            return s if top else f"({s})"

        return node(0, True)

    def __str__(self) -> str:
        return self.render()

    def evaluate(self, X) -> np.ndarray:
        """Crisp evaluation on rows ``X`` (shape ``(m, n)``)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))

        def leaf(lf: Leaf):
            vals = [np.full(len(X), c) if v is CONST else c * X[:, v] for v, c in lf.terms]
            acc = vals[0]
            for v in vals[1:]:
                acc = _binary(lf.op, acc, v)
            return acc

        def node(i: int):
            if i >= len(self.ops):
                return leaf(self.leaves[i - len(self.ops)])
            return _binary(self.ops[i], node(2 * i + 1), node(2 * i + 2))

        with np.errstate(all="ignore"):
            return node(0)


def decode(genotype, layout: GenotypeLayout, var_threshold: float = 0.05) -> CrispTree:
    """Argmax operators and threshold variable weights into a crisp tree.

    A leaf keeps every term whose share of the leaf's absolute weight mass
    is at least ``var_threshold``; if none qualifies the largest is kept.
    """
    if not 0.0 < var_threshold < 1.0:
        raise ValueError(f"var_threshold must lie in (0, 1), got {var_threshold!r}")
    g = layout.check(genotype)
    if g.ndim != 1:
        raise StructureError("decode expects a single genotype vector")
    cfg = layout.config
    n = cfg.num_vars
    w = operator_mix_weights(g[layout.op_slots]) if layout.op_slots.size else np.empty((0, cfg.num_ops))
    choice = [cfg.operators[int(i)] for i in np.argmax(w, axis=1)]
    n_int = cfg.num_internal
    leaves, warnings = [], []
    for j, block in enumerate(g[layout.var_slots]):
        op = choice[n_int + j] if cfg.leaf_mode == "op_fold" else "add"
        mass = np.abs(block)
        total = mass.sum()
        if total == 0.0:
            warnings.append(f"leaf {j}: all variable weights are zero")
            leaves.append(Leaf(((CONST, 0.0),), op))
            continue
        keep = np.flatnonzero(mass / total >= var_threshold)
        if keep.size == 0:
            keep = np.array([int(np.argmax(mass))])
        terms = tuple((CONST if i == n else int(i), float(block[i])) for i in keep)
        leaves.append(Leaf(terms, op))
    return CrispTree(cfg.depth, tuple(choice[:n_int]), tuple(leaves), tuple(warnings))


def _saturate(index: int, k: int, s: float) -> np.ndarray:
    raw = np.zeros(k - 1)
    raw[:index] = -s
    if index < k - 1:
        raw[index] = s
    return raw


def encode_crisp(tree: CrispTree, layout: GenotypeLayout, saturation: float = 40.0) -> np.ndarray:
    """One-hot genotype reproducing ``tree`` under smooth evaluation.

    Raw operator values are pinned to ``+-saturation``; leaf coefficients
    are copied, unused slots stay zero.
    """
    if saturation < 10:
        raise ValueError(f"saturation must be >= 10, got {saturation!r}")
    cfg = layout.config
    if tree.depth != cfg.depth:
        raise StructureError(f"tree depth {tree.depth} does not match layout depth {cfg.depth}")
    g = np.zeros(layout.total_dim)
    node_ops: list[str] = list(tree.ops)
    if cfg.leaf_mode == "op_fold":
        node_ops += [lf.op for lf in tree.leaves]
    else:
        bad = [j for j, lf in enumerate(tree.leaves) if lf.op != "add"]
        if bad:
            raise StructureError(f"linear leaves must add their terms; leaves {bad} do not")
    for slots, op in zip(layout.op_slots, node_ops):
        if op not in cfg.operators:
            raise StructureError(f"operator {op!r} is not in {list(cfg.operators)}")
        g[slots] = _saturate(cfg.operators.index(op), cfg.num_ops, saturation)
    for slots, lf in zip(layout.var_slots, tree.leaves):
        for v, c in lf.terms:
            idx = cfg.num_vars if v is CONST else v
            if not 0 <= idx <= cfg.num_vars:
                raise StructureError(f"variable index {v} outside 0..{cfg.num_vars - 1}")
            g[slots[idx]] += c
    return g


def random_crisp_tree(config: TreeConfig, rng: np.random.Generator, max_terms: int = 1,
                      leaf_ops: Sequence[str] = ("add",)) -> CrispTree:
    """Draw a random crisp tree shaped for ``config`` (used for sampling and tests)."""
    ops = tuple(rng.choice(config.operators) for _ in range(config.num_internal))
    leaves = []
    for _ in range(config.num_leaves):
        count = int(rng.integers(1, max_terms + 1))
        slots = rng.choice(config.num_vars + 1, size=min(count, config.num_vars + 1), replace=False)
        terms = tuple(
            (CONST if s == config.num_vars else int(s), float(rng.uniform(-2, 2))) for s in slots
        )
        leaves.append(Leaf(terms, str(rng.choice(leaf_ops))))
    return CrispTree(config.depth, tuple(str(o) for o in ops), tuple(leaves))


def _leaf_folds(beta, X, config):
    """Per-leaf term matrix and fold values for the incremental evaluator."""
    ones = np.ones((len(X), 1))
    terms = beta[:, :, None] * np.hstack([X, ones]).T[None, :, :]  # (L, n+1, m)
    folds = {"sum": terms.sum(axis=1)}
    for op in config.operators:
        if op == "add":
            folds[op] = folds["sum"]
        elif op == "mul":
            folds[op] = terms.prod(axis=1)
            # product of all terms but one, via prefix and suffix products
            ones = np.ones_like(terms[:, :1])
            pre = np.cumprod(np.concatenate([ones, terms[:, :-1]], axis=1), axis=1)
            suf = np.cumprod(np.concatenate([ones, terms[:, :0:-1]], axis=1), axis=1)[:, ::-1]
            folds["excl"] = pre * suf
        elif op == "sub":
            folds[op] = 2.0 * terms[:, 0] - folds["sum"]
    return terms, folds


def predict_one_position(genotype, layout: GenotypeLayout, X, positions, values) -> np.ndarray:
    """Predictions for neighbors that each differ from ``genotype`` in one coordinate.

    Neighbor ``i`` sets coordinate ``positions[i]`` to ``values[i]``.  Only the
    changed node and its ancestors are recomputed, so this is much cheaper
    than :func:`predict` on the full neighbor matrix.  Returns ``(s, m)``.
    Operator sets containing ``div`` fall back to full evaluation.
    """
    g = layout.check(genotype)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    positions = np.asarray(positions, dtype=np.intp)
    values = np.asarray(values, dtype=float)
    cfg = layout.config
    if "div" in cfg.operators:
        G = np.repeat(g[None, :], len(positions), axis=0)
        G[np.arange(len(positions)), positions] = values
        return predict(G, layout, X)

    k, n, n_int = cfg.num_ops, cfg.num_vars, cfg.num_internal
    n_op = layout.num_op_weights
    raw = g[layout.op_slots]
    w = operator_mix_weights(raw) if raw.size else np.empty((0, k))
    beta = g[layout.var_slots]
    s = len(positions)

    with np.errstate(all="ignore"):
        terms, folds = _leaf_folds(beta, X, cfg)
        fold_stack = np.stack([folds[op] for op in cfg.operators], axis=1)  # (L, k, m)
        if cfg.leaf_mode == "op_fold":
            leaf_vals = np.einsum("lk,lkm->lm", w[n_int:], fold_stack)
        else:
            leaf_vals = folds["sum"]
        node_vals = np.empty((cfg.num_nodes, len(X)))
        node_vals[n_int:] = leaf_vals
        node_res = np.empty((n_int, k, len(X)))
        for i in range(n_int - 1, -1, -1):
            left, right = node_vals[2 * i + 1], node_vals[2 * i + 2]
            node_res[i] = [_binary(op, left, right) for op in cfg.operators]
            node_vals[i] = w[i] @ node_res[i]

        node = np.empty(s, dtype=np.intp)
        U = np.empty((s, len(X)))

        is_op = positions < n_op
        if is_op.any():
            idx = np.flatnonzero(is_op)
            p, r = np.divmod(positions[idx], k - 1)
            blocks = raw[p].copy()
            blocks[np.arange(len(idx)), r] = values[idx]
            wn = operator_mix_weights(blocks)
            inner = p < n_int
            src = np.empty((len(idx), k, len(X)))
            if inner.any():
                src[inner] = node_res[p[inner]]
            if (~inner).any():
                src[~inner] = fold_stack[p[~inner] - n_int]
            U[idx] = np.einsum("sk,skm->sm", wn, src)
            node[idx] = p
        if (~is_op).any():
            idx = np.flatnonzero(~is_op)
            leaf, t = np.divmod(positions[idx] - n_op, n + 1)
            xcol = np.where(t[:, None] < n, X.T[np.minimum(t, n - 1)], 1.0)
            new_term = values[idx, None] * xcol
            delta = new_term - terms[leaf, t]
            cols = []
            for op in cfg.operators:
                if op == "add":
                    cols.append(folds["sum"][leaf] + delta)
                elif op == "mul":
                    cols.append(folds["excl"][leaf, t] * new_term)
                else:
                    sign = np.where(t == 0, 1.0, -1.0)[:, None]
                    cols.append(folds["sub"][leaf] + sign * delta)
            if cfg.leaf_mode == "op_fold":
                U[idx] = sum(w[n_int + leaf, i][:, None] * c for i, c in enumerate(cols))
            else:
                U[idx] = folds["sum"][leaf] + delta
            node[idx] = n_int + leaf

        while True:
            active = np.flatnonzero(node > 0)
            if active.size == 0:
                break
            # climb only the deepest nodes so siblings always come from the cache
            depth_of = np.floor(np.log2(node[active] + 1)).astype(int)
            active = active[depth_of == depth_of.max()]
            p = node[active]
            q = (p - 1) // 2
            is_left = p % 2 == 1
            sib = node_vals[np.where(is_left, p + 1, p - 1)]
            mine = U[active]
            left = np.where(is_left[:, None], mine, sib)
            right = np.where(is_left[:, None], sib, mine)
            wq = w[q]
            U[active] = sum(wq[:, i, None] * _binary(op, left, right) for i, op in enumerate(cfg.operators))
            node[active] = q
    return U
