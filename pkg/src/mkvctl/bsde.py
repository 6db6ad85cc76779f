"""Penalized constrained-jump BSDE on the jump-history lattice.

The BSDE lives on the filtration of the marked point process only, so the
lattice enumerates its randomness and every equation is solved by exact
backward recursion. Drivers and terminal values are cached on the lattice,
which lets every penalty level reuse one set of inner simulations.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .control_opt import SimConfig, value_direct, value_direct_many
from .errors import SchemeInconsistency, TreeError
from .lattice import JumpHistoryTree, LatticeSolution, backward, build_tree
from .problem import BenchmarkProblem

DUAL_EPS = 1e-9
DEFAULT_SCHEDULE = (1, 2, 4, 8, 16, 32, 64, 128, 256)


def driver_eval(tree: JumpHistoryTree, node) -> float:
    """Inner-simulation driver at lattice node ``(i, prefix, mark)``.

    The particle average of ``f`` over the grid interval starting at the node
    (trapezoid in time), under the node's frozen control history.
    """
    i, pid, mark = node
    if not 0 <= i < tree.stop:
        raise TreeError(f"node index {i} outside [0, {tree.stop})")
    return tree.driver(i, pid, mark)


@dataclass
class PenalizedSolution:
    """``Y``, ``U`` and ``K`` per lattice level for penalty ``n``."""

    n: float
    Y: list
    U: list
    K: list
    dt: float
    tree: JumpHistoryTree = field(repr=False)

    @property
    def root(self) -> float:
        t = self.tree
        return float(sum(w * self.root_by_mark[m] for m, w in t.root_states))

    @property
    def root_by_mark(self) -> dict:
        states = self.tree.levels[0].states
        out = {}
        for m, _w in self.tree.root_states:
            k = np.flatnonzero((states[:, 0] == 0) & (states[:, 1] == m) & (states[:, 2] == 0))[0]
            out[m] = float(self.Y[0][k])
        return out

    def max_u_plus(self) -> float:
        vals = [np.nanmax(np.maximum(u, 0.0)) for u in self.U if u.size and np.isfinite(u).any()]
        return float(max(vals)) if vals else 0.0

    def trace_rows(self):
        """Rows ``(n, node_id, time, Y, K, max_U_plus)``; node ids are ``level:state``."""
        g = self.tree.grid
        for i, (y, k, u) in enumerate(zip(self.Y, self.K, self.U)):
            up = np.where(np.isnan(u), 0.0, np.maximum(u, 0.0)).max(axis=1) if u.size else np.zeros(len(y))
            for s in range(len(y)):
                yield (self.n, f"{i}:{s}", float(g.nodes[i]), float(y[s]), float(k[s]), float(up[s]))

    def to_csv(self, header: Optional[str] = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(header.rstrip("\n") + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "node_id", "time", "Y", "K", "max_U_plus"])
        for row in self.trace_rows():
            w.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4]), repr(row[5])])
        return buf.getvalue()


def _accumulate_k(tree: JumpHistoryTree, dK: list) -> list:
    """Forward accumulation of penalty increments; ``K = 0`` at the root.

    A lattice state reachable along several histories keeps the largest
    accumulated value, so ``K`` is nondecreasing along every path.
    """
    K = [np.zeros(len(lev.states)) for lev in tree.levels]
    for i in range(tree.stop):
        lev = tree.levels[i]
        nxt = np.full(len(tree.levels[i + 1].states), -np.inf)
        k_post = K[i] + dK[i]
        idx = lev.post_next[lev.c_idx]
        np.maximum.at(nxt, idx, k_post)
        has = lev.z_idx >= 0
        rows, cols = np.nonzero(has)
        np.maximum.at(nxt, lev.post_next[lev.z_idx[rows, cols]], k_post[rows])
        K[i + 1] = np.where(np.isfinite(nxt), nxt, 0.0)
    return K


def solve_penalized(n: float, tree: JumpHistoryTree) -> PenalizedSolution:
    """Backward recursion for penalty level ``n``.

    At each node ``Y = c + dt sum_a lam(a) n (Y(jump to a) - Y)+`` with ``c``
    the no-jump continuation (running reward plus next value); the jump term
    is taken at the node itself, which keeps the scheme monotone in ``n``.
    """
    if n < 0:
        raise ValueError("penalty level must be nonnegative")
    if not tree.levels or tree.levels[0] is None:
        raise TreeError("lattice is incomplete")
    sol = backward(tree, "penalized", n=float(n))
    K = _accumulate_k(tree, sol.dK)
    return PenalizedSolution(float(n), sol.Y, sol.U, K, tree.dt, tree)


def dual_value(n: float, tree: JumpHistoryTree, eps: float = DUAL_EPS) -> LatticeSolution:
    """Bang-bang intensity DP with ``nu`` in ``[eps, n]`` on the same lattice."""
    return backward(tree, "intensity", lo=eps, hi=float(n))


def dual_check(n: float, tree: JumpHistoryTree, eps: float = DUAL_EPS, relative: bool = True) -> float:
    """Discrepancy between the penalized root and the intensity-dual root.

    Relative to ``max(1, |Y|)`` unless ``relative=False``.
    """
    y = solve_penalized(n, tree).root
    d = dual_value(n, tree, eps).root
    diff = abs(y - d)
    return diff / max(1.0, abs(y)) if relative else diff


@dataclass
class MinimalSolution:
    Y: float
    trace: list          # [(n, Y_root, max_U_plus)]
    converged: bool
    constraint_ok: bool
    n_final: float
    max_u_plus: float
    final: PenalizedSolution = field(repr=False)

    def to_json(self) -> str:
        return json.dumps({"Y": self.Y, "converged": self.converged, "constraint_ok": self.constraint_ok,
                           "n_final": self.n_final, "max_U_plus": self.max_u_plus,
                           "trace": [{"n": n, "Y": y, "max_U_plus": u} for n, y, u in self.trace]})


def minimal_solution(tree: JumpHistoryTree, schedule: Sequence[float] = DEFAULT_SCHEDULE,
                     tolerance: float = 1e-3, mono_tol: float = 1e-9, constraint_c: float = 10.0,
                     early_stop: bool = False) -> MinimalSolution:
    """Monotone limit of the penalized roots along ``schedule``.

    Raises SchemeInconsistency if ``Y^n`` decreases by more than ``mono_tol``.
    ``converged`` means two successive roots differ by less than
    ``tolerance``; the constraint holds when ``max (U)+ <= constraint_c / n``
    at the last level computed.
    """
    sched = [float(n) for n in schedule]
    if not sched or any(b <= a for a, b in zip(sched, sched[1:])):
        raise ValueError("schedule must be nonempty and increasing")
    trace = []
    converged = False
    prev = None
    sol = None
    for n in sched:
        sol = solve_penalized(n, tree)
        y = sol.root
        trace.append((n, y, sol.max_u_plus()))
        if prev is not None:
            if y < prev - mono_tol:
                raise SchemeInconsistency(f"Y^n decreased from {prev!r} to {y!r} at n={n}")
            if abs(y - prev) < tolerance:
                converged = True
                if early_stop:
                    break
        prev = y
    n_final = trace[-1][0]
    mu = trace[-1][2]
    return MinimalSolution(trace[-1][1], trace, converged, mu <= constraint_c / n_final, n_final, mu, sol)


# ----------------------------------------------------------------------------
# cross-route checks

@dataclass(frozen=True)
class LatticeConfig:
    """Randomization settings shared by the lattice routes."""

    rate: float = 20.0
    rates: Optional[tuple] = None
    K_max: int = 3
    bounds: tuple = (0.1, 50.0)
    schedule: tuple = DEFAULT_SCHEDULE
    initial: int = 0

    def rate_vector(self, n_marks):
        if self.rates is not None:
            if len(self.rates) != n_marks:
                raise ValueError("one rate per catalog entry required")
            return np.asarray(self.rates, dtype=float)
        return np.full(n_marks, float(self.rate))


def _across(values):
    v = np.asarray(values, dtype=float)
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


def penalized_tree(problem, t, x, pi, catalog, sim: SimConfig, cfg: LatticeConfig, seed: int, **kw):
    from .lattice import initial_mark_law
    rates = cfg.rate_vector(len(catalog))
    init = initial_mark_law(rates, t, cfg.initial) if t > 0 else [(cfg.initial, 1.0)]
    return build_tree(problem, t, x, pi, list(catalog), rates, init, cfg.K_max, sim.n_steps, sim.N, seed,
                      M=sim.M, **kw)


def feynman_kac_check(problem: BenchmarkProblem, t, x, pi, catalog, sim: SimConfig = SimConfig(),
                      cfg: LatticeConfig = LatticeConfig(), repeats: int = 8) -> dict:
    """Minimal-solution root against the direct value, both averaged over ``repeats`` seeds."""
    ys, vs, rows = [], [], []
    for r in range(repeats):
        s = sim.with_seed(sim.seed + r)
        tree = penalized_tree(problem, t, x, pi, catalog, s, cfg, s.seed)
        ms = minimal_solution(tree, cfg.schedule)
        dv = value_direct(problem, t, x, pi, catalog, s)
        ys.append(ms.Y)
        vs.append(dv.value)
        rows.append({"seed": s.seed, "Y": ms.Y, "V_direct": dv.value, "converged": ms.converged,
                     "constraint_ok": ms.constraint_ok, "max_U_plus": ms.max_u_plus})
    y, sy = _across(ys)
    v, sv = _across(vs)
    return {"Y_t": y, "V_direct": v, "difference": abs(y - v), "combined_ci": math.hypot(sy, sv),
            "se_Y": sy, "se_V": sv, "per_seed": rows}


def dpp_check(problem: BenchmarkProblem, t, s, x, pi, catalog, sim: SimConfig = SimConfig(),
              cfg: LatticeConfig = LatticeConfig(), repeats: int = 8, subsample: int = 48,
              reps: int = 16) -> dict:
    """Randomized dynamic programming residual at the intermediate time ``s``.

    Left side: the randomized value at ``t``. Right side: intensity-optimized
    running reward on ``[t, s]`` plus, at each lattice node at ``s``, the mean
    of ``V(s, x_j, node law)`` over a subsample of the node's x-particles,
    each ``V`` from exhaustive catalog search on the node's population cloud.
    """
    grid = sim.grid(t, problem.horizon)
    k = grid.index_of(s)
    if not 0 < k < grid.n_steps:
        raise ValueError("need t < s < T on the simulation grid")
    tail = SimConfig(n_steps=grid.n_steps - k, N=sim.N, M=sim.M, seed=sim.seed)
    lo, hi = cfg.bounds
    lhs, rhs, rows = [], [], []
    for r in range(repeats):
        sr = sim.with_seed(sim.seed + r)
        full = penalized_tree(problem, t, x, pi, catalog, sr, cfg, sr.seed)
        left = backward(full, "intensity", lo=lo, hi=hi).root
        tail_r = tail.with_seed(sr.seed)
        pick = np.random.default_rng([sr.seed, 71])

        def term(xi, xx, law, _tail=tail_r, _pick=pick):
            idx = _pick.choice(xx.shape[0], size=min(subsample, xx.shape[0]), replace=False)
            vals, _se = value_direct_many(problem, s, xx[idx], xi, catalog, _tail, reps, step_offset=k)
            return float(vals.mean())

        part = penalized_tree(problem, t, x, pi, catalog, sr, cfg, sr.seed, stop=k, terminal_fn=term)
        right = backward(part, "intensity", lo=lo, hi=hi).root
        lhs.append(left)
        rhs.append(right)
        rows.append({"seed": sr.seed, "lhs": left, "rhs": right})
    a, sa = _across(lhs)
    b, sb = _across(rhs)
    return {"lhs": a, "rhs": b, "residual": abs(a - b), "combined_ci": math.hypot(sa, sb), "per_seed": rows}
