"""Poisson randomization of the control.

Marks are catalog step controls; the piecewise-constant process switches to
the mark of each jump. Intensity controls re-weight the reference Poisson
measure through the Doleans exponential, and the randomized value is the
supremum of the weighted gain over bounded intensities, computed by bang-bang
dynamic programming on the jump-history lattice.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DegenerateInput, DomainError, InvalidIntensity, TruncationWarning, UnsupportedInput
from .forward_sim import (CoupledSimulator, NoiseSource, StepControl, TimeGrid, ValueEstimate,
                          _initial_clouds, evaluate_control)
from .lattice import JumpHistoryTree, LatticeSolution, backward, build_tree, initial_mark_law
from .problem import BenchmarkProblem


@dataclass(frozen=True, eq=False)
class MarkIntensity:
    """Finite mark measure: ``rates[k]`` on catalog entry ``marks[k]``."""

    marks: tuple
    rates: np.ndarray

    def __post_init__(self):
        marks = tuple(int(m) for m in self.marks)
        rates = np.array(self.rates, dtype=float).reshape(-1)
        if len(marks) != len(rates) or not marks:
            raise DegenerateInput("one positive rate per mark required")
        if len(set(marks)) != len(marks):
            raise DegenerateInput("marks must be distinct")
        if np.any(~np.isfinite(rates)) or np.any(rates <= 0):
            raise DegenerateInput("rates must be strictly positive")
        rates.setflags(write=False)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "rates", rates)

    @property
    def total_rate(self) -> float:
        return float(self.rates.sum())

    @classmethod
    def uniform(cls, n_marks: int, rate: float = 1.0):
        return cls(tuple(range(n_marks)), np.full(n_marks, float(rate)))

    def position(self, catalog_index) -> int:
        return self.marks.index(int(catalog_index))


@dataclass(frozen=True)
class PoissonPath:
    """Jump times (strictly increasing) and catalog indices of their marks.

    ``initial`` is the catalog index in force before the first jump.
    """

    times: tuple
    marks: tuple
    initial: int = 0
    K_max: int = 64
    truncated: bool = False

    def __len__(self):
        return len(self.times)

    def mark_at(self, s) -> int:
        """Mark in force at ``s`` (right-continuous: a jump at ``s`` counts)."""
        k = int(np.searchsorted(self.times, s, side="right"))
        return self.initial if k == 0 else self.marks[k - 1]

    def count_before(self, s) -> int:
        return int(np.searchsorted(self.times, s, side="left"))


def sample_poisson_path(lam: MarkIntensity, horizon: float, K_max: int, seed, start: float = 0.0,
                        initial: int = 0) -> PoissonPath:
    """Compound Poisson path on ``(start, horizon]`` at rate ``lam.total_rate``,
    marks i.i.d. proportional to the rates, at most ``K_max`` jumps kept."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    total = lam.total_rate
    p = lam.rates / total
    times, marks = [], []
    s = start
    truncated = False
    while True:
        s += rng.exponential(1.0 / total)
        if s > horizon:
            break
        if len(times) >= K_max:
            truncated = True
            break
        times.append(s)
        marks.append(lam.marks[int(rng.choice(len(p), p=p))])
    return PoissonPath(tuple(times), tuple(marks), int(initial), int(K_max), truncated)


def truncation_probability(lam: MarkIntensity, horizon: float, K_max: int) -> float:
    from scipy.stats import poisson
    return float(poisson.sf(K_max, lam.total_rate * horizon))


def build_randomized_control(path: PoissonPath, catalog, s, history) -> int:
    """Action of the randomized control at ``s``: the current mark evaluated at ``min(s, T)``."""
    if s < 0:
        raise DomainError("time must be nonnegative")
    ctrl = catalog[path.mark_at(s)]
    return evaluate_control(ctrl, min(s, ctrl.horizon), history)


def build_shifted_control(path: PoissonPath, catalog, t, a0: int, s, history) -> int:
    """Action of the shifted randomized control started at ``t`` with action ``a0``.

    Before the first jump at or after ``t`` the action is ``a0``; afterwards
    the current mark is evaluated. At ``t = 0`` this is the unshifted control.
    """
    if s < t:
        raise DomainError(f"s={s} precedes t={t}")
    if t <= 0:
        return build_randomized_control(path, catalog, s, history)
    k = int(np.searchsorted(path.times, s, side="right"))
    if k == 0 or path.times[k - 1] < t:
        return int(a0)
    ctrl = catalog[path.marks[k - 1]]
    return evaluate_control(ctrl, min(s, ctrl.horizon), history)


# ----------------------------------------------------------------------------
# intensity controls

@dataclass(eq=False)
class IntensityControl:
    """Multipliers ``nu`` on the mark rates, piecewise constant on ``grid``.

    ``policy(i, history, initial)`` returns one multiplier per mark for grid
    interval ``i`` given the jumps ``((T_n, mark_n), ...)`` strictly before
    its left node and the mark in force at time 0. Outside the grid ``nu = 1``.
    """

    bounds: tuple
    grid: TimeGrid
    n_marks: int
    policy: Callable
    table: dict = field(default_factory=dict)

    def __post_init__(self):
        lo, hi = self.bounds
        if not (0 < lo <= hi < math.inf):
            raise InvalidIntensity(f"bounds must satisfy 0 < lo <= hi < inf, got {self.bounds}")

    @classmethod
    def constant(cls, value, grid: TimeGrid, n_marks: int, bounds=None):
        vec = np.broadcast_to(np.asarray(value, dtype=float), (n_marks,)).copy()
        bounds = bounds or (min(vec.min(), 1.0), max(vec.max(), 1.0))
        return cls(tuple(bounds), grid, n_marks, lambda i, hist, initial: vec)

    def values(self, i, history, initial) -> np.ndarray:
        nu = np.asarray(self.policy(i, tuple(history), initial), dtype=float)
        lo, hi = self.bounds
        if nu.shape != (self.n_marks,) or np.any(nu < lo * (1 - 1e-12)) or np.any(nu > hi * (1 + 1e-12)):
            raise InvalidIntensity(f"intensity {nu} outside [{lo}, {hi}] at interval {i}")
        return nu

    def to_json(self) -> str:
        return json.dumps({"bounds": list(self.bounds), "grid": [self.grid.t_start, self.grid.t_end, self.grid.n_steps],
                           "n_marks": self.n_marks, "entries": self.table}, sort_keys=True)


def _intervals(nu: IntensityControl, t_end):
    g = nu.grid
    for i in range(g.n_steps):
        a, b = g.nodes[i], min(g.nodes[i + 1], t_end)
        if b <= a:
            break
        yield i, a, b


def girsanov_weight(path: PoissonPath, nu: IntensityControl, lam: MarkIntensity, t_end: float) -> float:
    """Doleans exponential of the intensity change at ``t_end``.

    ``exp(sum_{T_n <= t_end} ln nu_{T_n}(mark_n) - int_0^{t_end} sum_a (nu_s(a) - 1) lam(a) ds)``,
    integrated exactly for the piecewise-constant ``nu``. A path holding
    ``K_max`` jumps is stopped at its last jump: the capped process has no
    intensity afterwards, so the compensator ends there.
    """
    times = np.asarray(path.times, dtype=float)
    end = float(t_end)
    if len(times) >= path.K_max:
        end = min(end, float(times[-1]) if len(times) else nu.grid.t_start)
    log_k = 0.0
    for i, a, b in _intervals(nu, end):
        before = int(np.searchsorted(times, a, side="left"))
        hist = tuple(zip(path.times[:before], path.marks[:before]))
        v = nu.values(i, hist, path.initial)
        log_k -= float(((v - 1.0) * lam.rates).sum()) * (b - a)
        # jumps booked on this interval: [a, b), closing the last one at the grid end
        last = i == nu.grid.n_steps - 1
        hi_j = int(np.searchsorted(times, nu.grid.nodes[i + 1], side="right" if last else "left"))
        for n in range(before, hi_j):
            if times[n] <= end:
                log_k += math.log(v[lam.position(path.marks[n])])
    return float(math.exp(log_k))


# ----------------------------------------------------------------------------
# randomized gain (outer Monte Carlo over Poisson paths)

def _interval_marks(path: PoissonPath, grid: TimeGrid):
    """Mark driving each simulation interval: the last jump before the interval's right node."""
    k = np.searchsorted(path.times, grid.nodes[1:], side="left")
    return [path.initial if kk == 0 else path.marks[kk - 1] for kk in k]


def _path_from(lam, t, horizon, K_max, rng, initial):
    """Reference path on ``[0, T]`` whose jump budget counts only jumps after ``t``."""
    post = sample_poisson_path(lam, horizon, K_max, rng, start=t, initial=initial)
    if t <= 0:
        return post
    pre = sample_poisson_path(lam, t, 1 << 30, rng, initial=initial)
    return PoissonPath(pre.times + post.times, pre.marks + post.marks, initial, K_max, post.truncated)


def randomized_gain(problem: BenchmarkProblem, t, x, pi, lam: MarkIntensity, nu: Optional[IntensityControl],
                    catalog, K_max: int, n_outer: int, M_inner: int, grid: TimeGrid, seed: int = 0,
                    initial: int = 0) -> ValueEstimate:
    """Girsanov-weighted Monte Carlo estimate of the randomized gain.

    Paths are drawn under the reference rates on ``[0, T]`` (at most
    ``K_max`` jumps after ``t``); for each, the
    particle system runs under the induced control (conditional law = the
    path's own population cloud) and the reward is weighted by ``kappa_T``.
    ``nu=None`` means the reference intensity.
    """
    rng = np.random.default_rng([seed, 29])
    noise = NoiseSource(seed, M_inner, M_inner, problem.coefficients.noise_dim)
    xi0, x0 = _initial_clouds(problem, x, pi, M_inner, M_inner, noise)
    sim = CoupledSimulator(problem, grid, noise)
    cache = {}
    vals = np.empty(n_outer)
    weights = np.empty(n_outer)
    n_trunc = 0
    for p in range(n_outer):
        path = _path_from(lam, t, problem.horizon, K_max, rng, initial)
        n_trunc += path.truncated
        seq = _interval_marks(path, grid)
        key = tuple(catalog[m].rule(catalog[m].interval(grid.nodes[i])) for i, m in enumerate(seq))
        reward = cache.get(key)
        if reward is None:
            xi, xx = xi0, x0
            law = sim.measure(xi)
            total = np.zeros(xx.shape[0])
            for i, m in enumerate(seq):
                axi, ax = sim.actions_for(catalog[m], i)
                xi, xx, law, r = sim.step(i, xi, xx, law, axi, ax)
                total += r
            reward = float((total + sim.terminal(xx, law)).mean())
            cache[key] = reward
        vals[p] = reward
        weights[p] = 1.0 if nu is None else girsanov_weight(path, nu, lam, problem.horizon)
    est = vals * weights
    frac = n_trunc / n_outer
    extra = {"truncated_fraction": frac, "mean_weight": float(weights.mean()), "distinct_paths": len(cache)}
    if frac > 0.01:
        extra["warning"] = "TruncationWarning"
        warnings.warn(f"{frac:.1%} of Poisson paths hit K_max={K_max}", TruncationWarning)
    se = float(est.std(ddof=1) / math.sqrt(n_outer)) if n_outer > 1 else 0.0
    return ValueEstimate(float(est.mean()), se, extra)


# ----------------------------------------------------------------------------
# randomized value by lattice dynamic programming

@dataclass
class RandomizedValue:
    value: float
    nu: IntensityControl
    tree: JumpHistoryTree
    solution: LatticeSolution
    truncation_probability: float
    root_by_mark: dict

    def nu_json(self) -> str:
        return self.nu.to_json()


def _lattice_policy(tree: JumpHistoryTree, sol: LatticeSolution, lo, hi, catalog_to_pos, root_mark=None,
                    fixed_root=False):
    """Turn the lattice's high-intensity masks into a path-level policy.

    Jumps before the lattice start only select the root mark. ``root_mark``
    is the lattice index of a start-only mark, used when no such jump
    occurred or always when ``fixed_root`` (the shifted start).
    """
    child = {v: k for k, v in tree.prefix_rules.items()}
    rule_ids = {r: k for k, r in enumerate(tree.rules)}
    index = [{tuple(st): k for k, st in enumerate(lev.states.tolist())} for lev in tree.levels]
    g = tree.grid
    A = tree.n_marks
    neutral = np.clip(np.ones(A), lo, hi)
    all_marks = list(tree.marks)

    def policy(i, history, initial):
        if i >= tree.stop:
            return neutral
        pre = [m for s, m in history if s < g.t_start]
        post = [(s, m) for s, m in history if s >= g.t_start]
        if root_mark is not None and (fixed_root or not pre):
            m0 = root_mark
        elif pre:
            m0 = catalog_to_pos.get(pre[-1])
        else:
            m0 = catalog_to_pos.get(initial)
        if m0 is None:
            return neutral
        times = [s for s, _ in post]
        pos = [catalog_to_pos.get(m) for _, m in post]
        if any(p is None for p in pos):
            return neutral
        pid = 0
        for k in range(i):
            nj = int(np.searchsorted(times, g.nodes[k + 1], side="left"))
            m_k = m0 if nj == 0 else pos[nj - 1]
            ctrl = all_marks[m_k] if m_k < len(all_marks) else None
            if ctrl is None:
                return neutral
            pid = child.get((pid, rule_ids.get(ctrl.rule(ctrl.interval(g.nodes[k])))))
            if pid is None:
                return neutral
        cur = m0 if not pos else pos[-1]
        k = index[i].get((pid, cur, len(pos)))
        if k is None:
            return neutral
        return np.where(sol.high[i][k], hi, lo)

    return policy


def _table(tree: JumpHistoryTree, sol: LatticeSolution, lo, hi, limit=200_000):
    out = {}
    for i in range(tree.stop):
        lev = tree.levels[i]
        for k, (pid, m, j) in enumerate(lev.states.tolist()):
            if j >= tree.K_max:
                continue
            out[f"{i}|{tree.prefix_signature(pid)}|{m}|{j}"] = np.where(sol.high[i][k], hi, lo).tolist()
            if len(out) >= limit:
                return out
    return out


def value_randomized(problem: BenchmarkProblem, t, x, pi, lam: MarkIntensity, catalog, bounds=(0.1, 50.0),
                     K_max: int = 3, n_steps: int = 20, N: int = 2000, seed: int = 0, initial: int = 0,
                     a0: Optional[int] = None, pre_t: str = "reference", tree: Optional[JumpHistoryTree] = None,
                     with_table: bool = False) -> RandomizedValue:
    """Randomized value by bang-bang backward induction on the jump lattice.

    ``initial`` is the catalog index of the mark in force at time 0; for
    ``t > 0`` the mark at ``t`` is distributed as under the reference rates
    (``pre_t="reference"``, intensity 1 before ``t``) or chosen by optimizing
    the intensity on ``[0, t)`` as well (``pre_t="optimized"``). With ``a0``
    the shifted problem is solved instead: action ``a0`` until the first jump
    after ``t``. ``n_steps`` discretizes ``[t, T]``.
    """
    lo, hi = float(bounds[0]), float(bounds[1])
    if not (0 < lo <= hi < math.inf):
        raise InvalidIntensity(f"bounds must satisfy 0 < lo <= hi < inf, got {bounds}")
    marks = [catalog[m] for m in lam.marks]
    pos = {m: k for k, m in enumerate(lam.marks)}
    root_mark, fixed_root = None, False
    if pre_t not in ("reference", "optimized"):
        raise ValueError(f"unknown pre_t {pre_t!r}")
    if a0 is not None:
        root_mark, fixed_root = len(marks), True
        c0 = catalog[0]
        start = StepControl(c0.grid, c0.L, np.full(c0.table.shape, int(a0)))
        init = [(start, 1.0)]
    elif initial in pos:
        if t > 0 and pre_t == "optimized":
            init = [(k, 1.0) for k in range(len(marks))]
        else:
            init = initial_mark_law(lam.rates, t, pos[initial])
    else:
        # the initial mark lies outside the rate support
        if t > 0 and pre_t == "optimized":
            raise UnsupportedInput("optimized intensities before t need the initial mark in the rate support")
        root_mark = len(marks)
        start = catalog[initial]
        if t > 0:
            law = initial_mark_law(lam.rates, t, -1)
            init = [(start if m == -1 else m, w) for m, w in law]
        else:
            init = [(start, 1.0)]
    if tree is None:
        tree = build_tree(problem, t, x, pi, marks, lam.rates, init, K_max, n_steps, N, seed)
    sol = backward(tree, "intensity", lo=lo, hi=hi)
    value = sol.root
    if a0 is None and t > 0 and pre_t == "optimized":
        value = _optimize_before(sol.root_by_mark, lam.rates, t, tree.dt, pos.get(initial), lo, hi)
    grid = tree.grid
    nu = IntensityControl((lo, hi), grid, len(marks), _lattice_policy(tree, sol, lo, hi, pos, root_mark, fixed_root),
                          _table(tree, sol, lo, hi) if with_table else {})
    return RandomizedValue(float(value), nu, tree, sol, tree.truncation_probability(), sol.root_by_mark)


def _optimize_before(values_at_t: dict, rates, t, dt, initial_pos, lo, hi) -> float:
    """Intensity-optimized mark law on ``[0, t)``: no running reward, terminal
    value ``values_at_t[mark]`` at ``t``, same lattice step as after ``t``."""
    from .lattice import _solve_bang_bang
    n = max(1, int(round(t / dt)))
    A = len(rates)
    v = np.array([values_at_t[m] for m in range(A)])
    lam_dt = np.asarray(rates) * (t / n)
    for _ in range(n):
        Z = np.tile(v, (A, 1))
        v, _mask = _solve_bang_bang(v.copy(), Z, lam_dt, lo, hi)
    return float(v[initial_pos]) if initial_pos is not None else float(v.max())
