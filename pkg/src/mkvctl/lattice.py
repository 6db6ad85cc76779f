"""Jump-history lattice shared by the randomized-control and BSDE routes.

Jumps of the mark process are registered on the simulation grid: a jump
during ``[s_i, s_{i+1})`` is booked at node ``i`` and its mark drives the
control from interval ``i`` on, with at most one jump per node and at most
``K_max`` jumps in total. A lattice state is ``(i, prefix, mark, jumps)``
where ``prefix`` identifies the sequence of per-interval control rules
applied so far; the particle clouds at node ``i`` depend on the history
only through ``prefix``, so every distinct prefix is simulated once.

Backward recursions on the lattice treat the jump term implicitly. Given
the no-jump continuation ``c`` and post-jump values ``z_a`` at the same
node, a state value ``y`` solves

    y = c + dt * sum_a lam_a * G(z_a - y)

with ``G(u) = n u+`` for the penalized equation and ``G(u) = max(hi u, lo u)``
for intensity optimization over ``[lo, hi]``. The latter is the value of
the discrete model that jumps to ``a`` with probability
``dt lam_a nu_a / (1 + dt sum lam nu)``, so it stays a proper expectation
for every intensity bound and is stable for any ``n``.
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import poisson

from .errors import CapacityError, TreeError
from .forward_sim import CoupledSimulator, NoiseSource, StepControl, TimeGrid, _initial_clouds
from .problem import BenchmarkProblem

DEFAULT_TREE_CAP = 2_000_000


@dataclass
class Level:
    """Index arrays for one time node of the lattice."""

    states: np.ndarray          # (S, 3) rows (prefix, mark, jumps)
    post_reward: np.ndarray     # (P,) interval reward of each post-jump state
    post_next: np.ndarray       # (P,) index of the continuation in the next level
    c_idx: np.ndarray           # (S,) post index of the no-jump continuation
    z_idx: np.ndarray           # (S, A) post index after jumping to each mark; -1 if no jump allowed


@dataclass
class JumpHistoryTree:
    """Prefix-compressed jump lattice with cached drivers and terminal values."""

    problem: BenchmarkProblem
    grid: TimeGrid
    marks: list                     # jump targets first, then extra start-only marks
    rates: np.ndarray
    K_max: int
    stop: int
    levels: list
    terminal: np.ndarray            # per prefix id at the stop node (indexed by prefix)
    terminal_prefixes: np.ndarray
    root_states: list               # [(mark, weight)]
    prefix_rules: dict              # prefix id -> (parent id, rule id)
    rules: list                     # rule id -> canonical rule
    seed: int
    n_prefixes: int
    n_sim_steps: int
    clouds_at_stop: dict = field(default_factory=dict)

    @property
    def dt(self):
        return self.grid.dt

    @property
    def n_marks(self):
        return len(self.rates)

    def truncation_probability(self) -> float:
        """Reference-measure probability of more than ``K_max`` jumps on the lattice horizon."""
        mean = float(self.rates.sum()) * self.dt * self.stop
        return float(poisson.sf(self.K_max, mean))

    def prefix_signature(self, pid) -> str:
        seq = []
        while pid in self.prefix_rules:
            pid, r = self.prefix_rules[pid]
            seq.append(r)
        return ".".join(str(r) for r in reversed(seq))

    def driver(self, i, pid, mark) -> float:
        """Interval-averaged running reward at lattice node ``(i, prefix)`` under ``mark``."""
        lev = self.levels[i]
        key = _find_state(lev.states, pid, mark, None)
        if key is None:
            raise TreeError(f"no state with prefix {pid} and mark {mark} at node {i}")
        return float(lev.post_reward[lev.c_idx[key]] / self.dt)


def _find_state(states, pid, mark, jumps):
    sel = (states[:, 0] == pid) & (states[:, 1] == mark)
    if jumps is not None:
        sel &= states[:, 2] == jumps
    hits = np.flatnonzero(sel)
    return int(hits[0]) if len(hits) else None


def build_tree(problem: BenchmarkProblem, t, x, pi, marks, rates, initial, K_max: int, n_steps: int,
               N: int, seed: int, M: Optional[int] = None, stop: Optional[int] = None,
               terminal_fn: Optional[Callable] = None, cap: int = DEFAULT_TREE_CAP,
               keep_stop_clouds: bool = False) -> JumpHistoryTree:
    """Simulate every reachable prefix and index the lattice.

    ``marks`` are the step controls in the support of ``rates``; ``initial``
    lists ``(control, weight)`` pairs for the mark in force at ``t``
    (controls not among ``marks`` are appended as extra non-jump-target
    marks). ``terminal_fn(xi, x, pi)`` overrides the terminal reward at the
    stop node (default: mean terminal reward ``g``).
    """
    rates = np.asarray(rates, dtype=float)
    marks = list(marks)
    n_targets = len(marks)
    if len(rates) != n_targets:
        raise TreeError("one rate per mark required")
    all_marks = list(marks)
    root_states = []
    for ctrl, w in initial:
        if isinstance(ctrl, (int, np.integer)):
            idx = int(ctrl)
        else:
            idx = next((k for k, m in enumerate(all_marks) if m is ctrl), None)
            if idx is None:
                all_marks.append(ctrl)
                idx = len(all_marks) - 1
        root_states.append((idx, float(w)))
    grid = TimeGrid(t, problem.horizon, n_steps)
    stop = n_steps if stop is None else int(stop)
    M = N if M is None else M
    noise = NoiseSource(seed, N, M, problem.coefficients.noise_dim)
    xi0, x0 = _initial_clouds(problem, x, pi, N, M, noise)
    sim = CoupledSimulator(problem, grid, noise)

    # canonical per-interval rule of every mark
    rule_ids, rules, rule_rep = {}, [], []
    mark_rule = np.zeros((len(all_marks), n_steps), dtype=int)
    for m, ctrl in enumerate(all_marks):
        for i in range(n_steps):
            key = ctrl.rule(ctrl.interval(grid.nodes[i]))
            rid = rule_ids.get(key)
            if rid is None:
                rid = len(rules)
                rule_ids[key] = rid
                rules.append(key)
                rule_rep.append(ctrl)
            mark_rule[m, i] = rid

    level_needed = [dict() for _ in range(stop + 1)]
    rewards = [dict() for _ in range(stop)]
    children = [dict() for _ in range(stop)]
    prefix_rules = {}
    terminal = {}
    stop_clouds = {}
    counter = {"pid": 1, "steps": 0, "states": 0}
    term = terminal_fn or (lambda xi, xx, law: float(np.mean(problem.coefficients.terminal(xx, law))))

    def visit(i, pid, xi, xx, law, needed):
        level_needed[i][pid] = needed
        counter["states"] += len(needed)
        if counter["states"] > cap:
            raise CapacityError(f"lattice exceeds {cap} states; reduce K_max, marks or n_steps")
        if i == stop:
            terminal[pid] = term(xi, xx, law)
            if keep_stop_clouds:
                stop_clouds[pid] = (xi, xx)
            return
        groups = {}
        for (m, j) in needed:
            groups.setdefault(mark_rule[m, i], set()).add((m, j))
            if j < K_max:
                for a in range(n_targets):
                    groups.setdefault(mark_rule[a, i], set()).add((a, j + 1))
        for rid in sorted(groups):
            if rules[rid][0] == "c":
                axi = ax = rules[rid][1]
            else:
                axi, ax = sim.actions_for(rule_rep[rid], i)
            xi2, xx2, law2, r = sim.step(i, xi, xx, law, axi, ax)
            counter["steps"] += 1
            cid = counter["pid"]
            counter["pid"] += 1
            prefix_rules[cid] = (pid, rid)
            rewards[i][(pid, rid)] = float(r.mean())
            children[i][(pid, rid)] = cid
            visit(i + 1, cid, xi2, xx2, law2, groups[rid])

    old = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old, 4 * stop + 100))
    try:
        visit(0, 0, xi0, x0, sim.measure(xi0), {(m, 0) for m, _ in root_states})
    finally:
        sys.setrecursionlimit(old)

    # index arrays per level, built backward so continuation indices exist
    levels = [None] * (stop + 1)
    next_index = None
    for i in range(stop, -1, -1):
        states = np.array(sorted((pid, m, j) for pid, need in level_needed[i].items() for (m, j) in need),
                          dtype=np.int64).reshape(-1, 3)
        index = {tuple(s): k for k, s in enumerate(states.tolist())}
        if i == stop:
            levels[i] = Level(states, np.zeros(0), np.zeros(0, dtype=np.int64),
                              np.zeros(len(states), dtype=np.int64),
                              -np.ones((len(states), n_targets), dtype=np.int64))
        else:
            posts, post_index = [], {}

            def post(pid, m, j):
                key = (pid, m, j)
                k = post_index.get(key)
                if k is None:
                    k = len(posts)
                    post_index[key] = k
                    posts.append(key)
                return k

            c_idx = np.zeros(len(states), dtype=np.int64)
            z_idx = -np.ones((len(states), n_targets), dtype=np.int64)
            for k, (pid, m, j) in enumerate(states.tolist()):
                c_idx[k] = post(pid, m, j)
                if j < K_max:
                    for a in range(n_targets):
                        z_idx[k, a] = post(pid, a, j + 1)
            post_reward = np.empty(len(posts))
            post_next = np.empty(len(posts), dtype=np.int64)
            for k, (pid, m, j) in enumerate(posts):
                rid = mark_rule[m, i]
                post_reward[k] = rewards[i][(pid, rid)]
                post_next[k] = next_index[(children[i][(pid, rid)], m, j)]
            levels[i] = Level(states, post_reward, post_next, c_idx, z_idx)
        next_index = index

    stop_states = levels[stop].states
    term_prefixes = stop_states[:, 0]
    term_vals = np.array([terminal[p] for p in term_prefixes.tolist()])
    return JumpHistoryTree(problem, grid, all_marks, rates, K_max, stop, levels, term_vals, term_prefixes,
                           root_states, prefix_rules, rules, seed, counter["pid"], counter["steps"],
                           stop_clouds)


# ----------------------------------------------------------------------------
# backward recursions

def _solve_penalized(c, Z, lam_dt, n):
    """Root of ``y = c + sum_a lam_dt_a n (z_a - y)+`` per row; rows of ``Z`` may hold NaN for absent edges."""
    S, A = Z.shape
    w = np.broadcast_to(lam_dt * n, (S, A)).copy()
    Zs = np.where(np.isnan(Z), -np.inf, Z)
    order = np.argsort(-Zs, axis=1, kind="stable")
    zs = np.take_along_axis(Zs, order, axis=1)
    ws = np.take_along_axis(w, order, axis=1)
    ws[~np.isfinite(zs)] = 0.0
    zfin = np.where(np.isfinite(zs), zs, 0.0)
    cw = np.concatenate([np.zeros((S, 1)), np.cumsum(ws, axis=1)], axis=1)
    cwz = np.concatenate([np.zeros((S, 1)), np.cumsum(ws * zfin, axis=1)], axis=1)
    # candidate k activates the k largest edges; the root is the candidate
    # whose piece of the monotone residual actually vanishes
    cands = (c[:, None] + cwz) / (1.0 + cw)
    resid = np.empty_like(cands)
    for k in range(A + 1):
        y = cands[:, k]
        resid[:, k] = y - c - (ws * np.maximum(zfin - y[:, None], 0.0)).sum(axis=1)
    k_best = np.argmin(np.abs(resid), axis=1)
    y = cands[np.arange(S), k_best]
    return y


def _solve_bang_bang(c, Z, lam_dt, lo, hi):
    """``max`` over intensity sets of the discrete jump model's value.

    Candidates give ``hi`` to the ``k`` largest post-jump values and ``lo``
    to the rest; the optimum is among them. Returns value and the chosen
    high-intensity mask.
    """
    S, A = Z.shape
    present = ~np.isnan(Z)
    Zs = np.where(present, Z, -np.inf)
    order = np.argsort(-Zs, axis=1, kind="stable")
    zs = np.take_along_axis(Zs, order, axis=1)
    lam = np.broadcast_to(lam_dt, (S, A))
    ls = np.take_along_axis(lam, order, axis=1) * np.isfinite(zs)
    zfin = np.where(np.isfinite(zs), zs, 0.0)
    hi_w = np.concatenate([np.zeros((S, 1)), np.cumsum(ls * hi, axis=1)], axis=1)
    hi_wz = np.concatenate([np.zeros((S, 1)), np.cumsum(ls * hi * zfin, axis=1)], axis=1)
    tot_lo = (ls * lo).sum(axis=1)
    tot_loz = (ls * lo * zfin).sum(axis=1)
    lo_w = tot_lo[:, None] - np.concatenate([np.zeros((S, 1)), np.cumsum(ls * lo, axis=1)], axis=1)
    lo_wz = tot_loz[:, None] - np.concatenate([np.zeros((S, 1)), np.cumsum(ls * lo * zfin, axis=1)], axis=1)
    vals = (c[:, None] + hi_wz + lo_wz) / (1.0 + hi_w + lo_w)
    n_present = present.sum(axis=1)
    vals[np.arange(A + 1)[None, :] > n_present[:, None]] = -np.inf
    k_best = np.argmax(vals, axis=1)
    y = vals[np.arange(S), k_best]
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(A)[None, :].repeat(S, 0), axis=1)
    mask = (rank < k_best[:, None]) & present
    return y, mask


@dataclass
class LatticeSolution:
    Y: list                      # per level: value of each state
    U: list                      # per level: (S, A) post-jump minus pre-jump value (NaN where no edge)
    dK: list                     # per level: penalty increment of each state
    high: list                   # per level: (S, A) high-intensity mask (intensity routes only)
    root: float
    root_by_mark: dict


def backward(tree: JumpHistoryTree, mode: str, n: float = 0.0, lo: float = 1.0, hi: float = 1.0) -> LatticeSolution:
    """Run one backward recursion over the lattice.

    ``mode="penalized"`` uses ``G(u) = n u+``; ``mode="intensity"`` maximizes
    over intensities in ``[lo, hi]`` (``lo == hi`` evaluates a fixed intensity).
    """
    lam_dt = tree.rates * tree.dt
    Ys, Us, dKs, highs = [None] * (tree.stop + 1), [None] * (tree.stop + 1), [None] * (tree.stop + 1), [None] * (tree.stop + 1)
    top = tree.levels[tree.stop]
    Ys[tree.stop] = tree.terminal.copy()
    Us[tree.stop] = np.full((len(top.states), tree.n_marks), np.nan)
    dKs[tree.stop] = np.zeros(len(top.states))
    highs[tree.stop] = np.zeros((len(top.states), tree.n_marks), dtype=bool)
    for i in range(tree.stop - 1, -1, -1):
        lev = tree.levels[i]
        vpost = lev.post_reward + Ys[i + 1][lev.post_next]
        c = vpost[lev.c_idx]
        Z = np.where(lev.z_idx >= 0, vpost[np.maximum(lev.z_idx, 0)], np.nan)
        if mode == "penalized":
            y = _solve_penalized(c, Z, lam_dt, n)
            high = np.zeros(Z.shape, dtype=bool)
        elif mode == "intensity":
            y, high = _solve_bang_bang(c, Z, lam_dt, lo, hi)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        U = Z - y[:, None]
        Ys[i], Us[i], highs[i] = y, U, high
        dKs[i] = n * (np.nan_to_num(np.maximum(U, 0.0)) * lam_dt).sum(axis=1) if mode == "penalized" else np.zeros(len(y))
    root_states = tree.levels[0].states
    by_mark = {}
    for m, w in tree.root_states:
        k = _find_state(root_states, 0, m, 0)
        by_mark[m] = float(Ys[0][k])
    root = float(sum(w * by_mark[m] for m, w in tree.root_states))
    return LatticeSolution(Ys, Us, dKs, highs, root, by_mark)


def initial_mark_law(rates, t, initial_mark, n_marks_total=None):
    """Reference law of the mark in force at ``t`` when the process starts at 0
    with ``initial_mark``: no jump with probability ``exp(-lambda(A) t)``,
    otherwise the last jump's mark, distributed proportionally to the rates."""
    rates = np.asarray(rates, dtype=float)
    total = rates.sum()
    p0 = math.exp(-total * t)
    law = [(initial_mark, p0)] if p0 > 0 else []
    if t > 0:
        for a, r in enumerate(rates):
            law.append((a, (1 - p0) * r / total))
    merged = {}
    for m, w in law:
        merged[m] = merged.get(m, 0.0) + w
    return [(m, w) for m, w in merged.items() if w > 0]
