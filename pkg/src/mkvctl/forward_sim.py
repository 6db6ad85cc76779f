"""Euler-Maruyama particle simulation of the coupled McKean-Vlasov pair.

The population cloud (``xi`` particles) supplies the law argument of every
coefficient through its empirical measure, evaluated at the left node of
each step. The tagged particles (``x`` particles) start from a fixed point
and feel the population only through that law.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateInput, DomainError, GridError, NumericalBlowup
from .measures import EmpiricalMeasure
from .problem import BenchmarkProblem

_TIME_TOL = 1e-12


# ----------------------------------------------------------------------------
# grids and step controls

class TimeGrid:
    """Uniform partition of ``[t_start, t_end]``; ``nodes`` may be a slice of a parent grid."""

    def __init__(self, t_start, t_end, n_steps, nodes=None):
        if not t_start < t_end:
            raise GridError("t_start must be < t_end")
        if n_steps < 1:
            raise GridError("n_steps must be >= 1")
        self.t_start, self.t_end, self.n_steps = float(t_start), float(t_end), int(n_steps)
        if nodes is None:
            nodes = np.linspace(self.t_start, self.t_end, self.n_steps + 1)
        self.nodes = np.asarray(nodes, dtype=float)
        self.nodes.setflags(write=False)

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    def index_of(self, s) -> int:
        """Index of node ``s``; raises :class:`GridError` if ``s`` is not a node."""
        k = int(round((s - self.t_start) / self.dt))
        if k < 0 or k > self.n_steps or abs(self.nodes[k] - s) > 1e-9 * max(1.0, abs(s)):
            raise GridError(f"{s} is not a grid node")
        return k

    def sub(self, k) -> "TimeGrid":
        """The tail grid starting at node ``k`` (nodes shared exactly)."""
        if not 0 <= k < self.n_steps:
            raise GridError(f"cannot restart at node {k}")
        return TimeGrid(self.nodes[k], self.t_end, self.n_steps - k, nodes=self.nodes[k:])

    def key(self):
        return (self.t_start, self.t_end, self.n_steps)

    def __repr__(self):
        return f"TimeGrid({self.t_start}, {self.t_end}, {self.n_steps})"


def history_bits(L: int) -> int:
    return 0 if L <= 1 else int(math.ceil(math.log2(L)))


@dataclass(frozen=True, eq=False)
class StepControl:
    """Piecewise-constant control on ``grid`` whose action on interval ``i`` is
    ``table[i, cell]``, ``cell`` being the sign pattern of the latest Brownian
    increments over the control grid."""

    grid: TimeGrid
    L: int
    table: np.ndarray

    def __post_init__(self):
        tab = np.array(self.table, dtype=int).reshape(self.grid.n_steps, self.L)
        if np.any(tab < 0):
            raise DegenerateInput("action indices must be nonnegative")
        tab.setflags(write=False)
        object.__setattr__(self, "table", tab)

    @classmethod
    def constant(cls, action: int, horizon: float, k: int = 1):
        return cls(TimeGrid(0.0, horizon, k), 1, np.full((k, 1), action))

    @classmethod
    def from_actions(cls, actions, horizon: float):
        acts = list(actions)
        return cls(TimeGrid(0.0, horizon, len(acts)), 1, np.array(acts)[:, None])

    @property
    def horizon(self):
        return self.grid.t_end

    def interval(self, s) -> int:
        T = self.grid.t_end
        if s < -_TIME_TOL or s > T + _TIME_TOL:
            raise DomainError(f"time {s} outside [0, {T}]")
        i = int(np.searchsorted(self.grid.nodes, s + _TIME_TOL * max(1.0, T), side="right")) - 1
        return min(max(i, 0), self.grid.n_steps - 1)

    def cells(self, i, increments) -> np.ndarray:
        """History cell per path at control interval ``i``.

        ``increments`` has shape ``(P, k)``: Brownian increments over each
        control interval (only columns ``< i`` are read).
        """
        increments = np.asarray(increments, dtype=float)
        if increments.ndim == 1:
            increments = increments[None, :]
        P = increments.shape[0]
        nb = history_bits(self.L)
        cell = np.zeros(P, dtype=int)
        for b in range(nb):
            j = i - 1 - b
            if j >= 0:
                cell += (increments[:, j] >= 0).astype(int) << b
        return cell % self.L

    def rule(self, i):
        """Canonical description of the behaviour on control interval ``i``."""
        row = self.table[i]
        if np.all(row == row[0]):
            return ("c", int(row[0]))
        return ("t", self.grid.key(), int(i), self.L, tuple(int(v) for v in row))

    def actions_at(self, s, increments) -> np.ndarray:
        i = self.interval(s)
        if self.L == 1:
            return np.full(np.atleast_2d(increments).shape[0], self.table[i, 0])
        return self.table[i][self.cells(i, increments)]

    def describe(self):
        return {"k": self.grid.n_steps, "L": self.L, "horizon": self.horizon, "table": self.table.tolist()}


def evaluate_control(ctrl: StepControl, s: float, history) -> int:
    """Action index of ``ctrl`` at time ``s`` for a single Brownian history.

    ``history`` lists the Brownian increments over the control intervals
    completed so far (entries beyond the current interval are ignored).
    """
    i = ctrl.interval(s)
    if ctrl.L == 1:
        return int(ctrl.table[i, 0])
    hist = np.zeros(ctrl.grid.n_steps)
    vals = np.asarray(history, dtype=float).ravel()[: ctrl.grid.n_steps]
    hist[: len(vals)] = vals
    return int(ctrl.table[i, ctrl.cells(i, hist[None, :])[0]])


# ----------------------------------------------------------------------------
# samplers for the initial law

@dataclass(frozen=True)
class EmpiricalSampler:
    """Draws ``n`` particles from an atomic law by largest-remainder allocation
    (deterministic; exact proportions whenever ``n`` permits)."""

    measure: EmpiricalMeasure

    def sample(self, n, rng):
        w = self.measure.weights
        raw = w * n
        counts = np.floor(raw).astype(int)
        rem = n - counts.sum()
        if rem > 0:
            order = np.argsort(-(raw - counts), kind="stable")
            counts[order[:rem]] += 1
        return np.repeat(self.measure.points, counts, axis=0)

    def law(self):
        return self.measure


@dataclass(frozen=True)
class GaussianSampler:
    mean: float = 0.0
    std: float = 1.0
    dim: int = 1

    def sample(self, n, rng):
        return self.mean + self.std * rng.normal(size=(n, self.dim))

    def law(self):
        return None


def as_sampler(pi):
    if isinstance(pi, EmpiricalMeasure):
        return EmpiricalSampler(pi)
    if hasattr(pi, "sample"):
        return pi
    raise DegenerateInput(f"cannot sample from {type(pi).__name__}")


# ----------------------------------------------------------------------------
# noise

class NoiseSource:
    """Counter-keyed Gaussian increments: the draws for step ``k`` depend only on
    ``(seed, stream, k)`` so any evaluation order gives identical numbers."""

    def __init__(self, seed, n_xi, n_x, noise_dim=1, paired=None):
        self.seed = int(seed)
        self.n_xi, self.n_x, self.d = int(n_xi), int(n_x), int(noise_dim)
        self.paired = (n_xi == n_x) if paired is None else paired
        self._cache = {}

    def standard(self, step):
        """Standard normal draws for step ``step``: ``(xi (N,d), x (M,d))``."""
        hit = self._cache.get(step)
        if hit is None:
            z_xi = np.random.default_rng([self.seed, 11, step]).normal(size=(self.n_xi, self.d))
            if self.paired:
                z_x = z_xi
            else:
                z_x = np.random.default_rng([self.seed, 13, step]).normal(size=(self.n_x, self.d))
            hit = (z_xi, z_x)
            self._cache[step] = hit
        return hit

    def initial_rng(self):
        return np.random.default_rng([self.seed, 17])

    def pre_history(self, times, which):
        """Brownian values (first component) at ``times`` (all <= start), per particle."""
        n = self.n_xi if (which == "xi" or self.paired) else self.n_x
        stream = 19 if (which == "xi" or self.paired) else 23
        rng = np.random.default_rng([self.seed, stream])
        out = np.zeros((n, len(times)))
        prev_t, prev = 0.0, np.zeros(n)
        for j, s in enumerate(times):
            prev = prev + math.sqrt(max(s - prev_t, 0.0)) * rng.normal(size=n)
            prev_t = s
            out[:, j] = prev
        return out


# ----------------------------------------------------------------------------
# simulator

def _trusted_measure(points):
    m = object.__new__(EmpiricalMeasure)
    w = np.full(points.shape[0], 1.0 / points.shape[0])
    object.__setattr__(m, "points", points)
    object.__setattr__(m, "weights", w)
    return m


@dataclass
class ParticleCloud:
    xi_particles: np.ndarray
    x_particles: np.ndarray
    brownian_state: np.ndarray
    time: float
    step: int


class CoupledSimulator:
    """Euler-Maruyama stepping of both clouds on ``grid`` with shared noise.

    ``step_offset`` is the index of ``grid``'s first node inside the grid the
    ``noise`` source is keyed on (non-zero for restarts).
    """

    def __init__(self, problem: BenchmarkProblem, grid: TimeGrid, noise: NoiseSource, step_offset=0):
        self.problem = problem
        self.coeffs = problem.coefficients
        self.actions = problem.space.actions
        self.grid = grid
        self.noise = noise
        self.offset = int(step_offset)
        self._incr = {}

    # Brownian history at control-grid resolution -------------------------
    def control_increments(self, ctrl_grid: TimeGrid, which="xi", base_start=None):
        """Per-particle Brownian increments over each control interval.

        Values at control nodes before the simulation start come from an
        independent pre-history; later ones come from the simulation noise,
        read at the last simulation node not after the control node.
        """
        key = (ctrl_grid.key(), which)
        hit = self._incr.get(key)
        if hit is not None:
            return hit
        start = self.grid.nodes[0] if base_start is None else base_start
        cn = ctrl_grid.nodes
        pre_times = [s for s in cn if s <= start + _TIME_TOL] + [start]
        pre = self.noise.pre_history(pre_times, which)
        b_start = pre[:, -1]
        z_idx = 0 if which == "xi" else 1
        sim_nodes = self.grid.nodes
        dts = np.diff(sim_nodes)
        vals = np.zeros((pre.shape[0], len(cn)))
        cum = b_start.copy()
        k = 0
        for j, s in enumerate(cn):
            if s <= start + _TIME_TOL:
                vals[:, j] = pre[:, j]
                continue
            while k < len(dts) and sim_nodes[k + 1] <= s + _TIME_TOL:
                z = self.noise.standard(self.offset + k)[z_idx][:, 0]
                cum = cum + math.sqrt(dts[k]) * z
                k += 1
            vals[:, j] = cum
        incr = np.diff(vals, axis=1)
        self._incr[key] = incr
        return incr

    def actions_for(self, ctrl: StepControl, i):
        """Action indices ``(xi, x)`` of ``ctrl`` on simulation interval ``i``."""
        s = self.grid.nodes[i]
        ci = ctrl.interval(s)
        if ctrl.L == 1 or np.all(ctrl.table[ci] == ctrl.table[ci, 0]):
            a = int(ctrl.table[ci, 0])
            return a, a
        ixi = ctrl.table[ci][ctrl.cells(ci, self.control_increments(ctrl.grid, "xi"))]
        if self.noise.paired:
            return ixi, ixi
        ix = ctrl.table[ci][ctrl.cells(ci, self.control_increments(ctrl.grid, "x"))]
        return ixi, ix

    def _action_vectors(self, idx, n):
        if np.isscalar(idx) or np.ndim(idx) == 0:
            return np.broadcast_to(self.actions[int(idx)], (n, self.actions.shape[1]))
        return self.actions[idx]

    def measure(self, xi):
        return _trusted_measure(xi)

    def step(self, i, xi, x, pi, act_xi, act_x):
        """One Euler step on interval ``i``.

        Returns ``(xi_next, x_next, pi_next, reward)`` where ``reward`` is the
        per-x-particle trapezoid integral of the running reward over the
        interval with the interval's action held at both ends.
        """
        c = self.coeffs
        s0, s1 = self.grid.nodes[i], self.grid.nodes[i + 1]
        dt = s1 - s0
        a_xi = self._action_vectors(act_xi, xi.shape[0])
        a_x = self._action_vectors(act_x, x.shape[0])
        z_xi, z_x = self.noise.standard(self.offset + i)
        sq = math.sqrt(dt)
        f0 = c.running(s0, x, pi, a_x)
        xi_next = xi + c.drift(s0, xi, pi, a_xi) * dt + np.einsum(
            "pnd,pd->pn", np.broadcast_to(c.diffusion(s0, xi, pi, a_xi), xi.shape + (z_xi.shape[1],)), z_xi) * sq
        x_next = x + c.drift(s0, x, pi, a_x) * dt + np.einsum(
            "pnd,pd->pn", np.broadcast_to(c.diffusion(s0, x, pi, a_x), x.shape + (z_x.shape[1],)), z_x) * sq
        if not (np.all(np.isfinite(xi_next)) and np.all(np.isfinite(x_next))):
            raise NumericalBlowup(f"non-finite state at node {i + 1}", node=i + 1)
        pi_next = self.measure(xi_next)
        f1 = c.running(s1, x_next, pi_next, a_x)
        return xi_next, x_next, pi_next, 0.5 * dt * (f0 + f1)

    def terminal(self, x, pi):
        return self.coeffs.terminal(x, pi)

    def run(self, xi0, x0, ctrl: StepControl, keep=False):
        """Simulate the whole grid under ``ctrl``.

        Returns per-x-particle total reward and, if ``keep``, the trajectory.
        """
        xi, x = np.array(xi0, dtype=float), np.array(x0, dtype=float)
        pi = self.measure(xi)
        total = np.zeros(x.shape[0])
        traj = [(xi, x)] if keep else None
        for i in range(self.grid.n_steps):
            axi, ax = self.actions_for(ctrl, i)
            xi, x, pi, r = self.step(i, xi, x, pi, axi, ax)
            total += r
            if keep:
                traj.append((xi, x))
        total += self.terminal(x, pi)
        return total, traj


def _initial_clouds(problem, x, xi_sampler, N, M, noise):
    sampler = as_sampler(xi_sampler)
    xi0 = np.asarray(sampler.sample(N, noise.initial_rng()), dtype=float).reshape(N, -1)
    x = np.asarray(x, dtype=float)
    if x.ndim <= 1:
        x0 = np.broadcast_to(np.atleast_1d(x), (M, problem.dim)).copy()
    else:
        x0 = x.copy()
    return xi0, x0


def _check_grid(grid, t, horizon):
    if abs(grid.t_start - t) > 1e-9 or abs(grid.t_end - horizon) > 1e-9:
        raise GridError(f"grid must span [{t}, {horizon}], got {grid}")


def simulate_coupled(problem: BenchmarkProblem, t, x, xi_sampler, ctrl: StepControl, grid: TimeGrid,
                     N: int, M: Optional[int] = None, seed: int = 0):
    """Trajectory of :class:`ParticleCloud` snapshots, one per grid node.

    With ``M == N`` the tagged particles share increments with the paired
    population particles; otherwise they get independent increments.
    """
    M = N if M is None else M
    if N < 2:
        raise DegenerateInput("need N >= 2 population particles")
    _check_grid(grid, t, problem.horizon)
    noise = NoiseSource(seed, N, M, problem.coefficients.noise_dim)
    xi0, x0 = _initial_clouds(problem, x, xi_sampler, N, M, noise)
    sim = CoupledSimulator(problem, grid, noise)
    _, traj = sim.run(xi0, x0, ctrl, keep=True)
    out = []
    bm = np.zeros(N)
    for k, (xi, xx) in enumerate(traj):
        if k > 0:
            bm = bm + math.sqrt(grid.nodes[k] - grid.nodes[k - 1]) * noise.standard(k - 1)[0][:, 0]
        out.append(ParticleCloud(xi, xx, bm.copy(), float(grid.nodes[k]), k))
    return out


@dataclass(frozen=True)
class ValueEstimate:
    mean: float
    std_error: float
    extra: dict = field(default_factory=dict)


def gain_estimate(problem: BenchmarkProblem, t, x, xi_sampler, ctrl: StepControl, grid: TimeGrid,
                  N: int, seed: int = 0, M: Optional[int] = None) -> ValueEstimate:
    """Monte Carlo gain of ``ctrl``: trapezoid running reward plus terminal reward,
    averaged over the tagged particles.

    ``std_error`` is conditional on the shared population cloud.
    """
    M = N if M is None else M
    if N < 2:
        raise DegenerateInput("need N >= 2 population particles")
    _check_grid(grid, t, problem.horizon)
    noise = NoiseSource(seed, N, M, problem.coefficients.noise_dim)
    xi0, x0 = _initial_clouds(problem, x, xi_sampler, N, M, noise)
    total, _ = CoupledSimulator(problem, grid, noise).run(xi0, x0, ctrl)
    se = float(total.std(ddof=1) / math.sqrt(len(total))) if len(total) > 1 else 0.0
    return ValueEstimate(float(total.mean()), se)


def flow_check(problem: BenchmarkProblem, t, s, x, xi_sampler, ctrl: StepControl, grid: TimeGrid,
               N: int, seed: int = 0, M: Optional[int] = None) -> dict:
    """Restart the simulation at node ``s`` from the stored clouds, replaying the
    same increments, and report the largest pathwise discrepancy on ``[s, T]``."""
    M = N if M is None else M
    if s < t - 1e-12:
        raise GridError("s must be >= t")
    k = grid.index_of(s)
    _check_grid(grid, t, problem.horizon)
    noise = NoiseSource(seed, N, M, problem.coefficients.noise_dim)
    xi0, x0 = _initial_clouds(problem, x, xi_sampler, N, M, noise)
    full = CoupledSimulator(problem, grid, noise)
    _, traj = full.run(xi0, x0, ctrl, keep=True)
    if k == grid.n_steps:
        return {"s": float(s), "xi": 0.0, "x": 0.0, "max": 0.0}
    restart = CoupledSimulator(problem, grid.sub(k), noise, step_offset=k)
    # the restarted controls read the same Brownian history as the full run
    restart._incr = full._incr
    xi_s, x_s = traj[k]
    _, traj2 = restart.run(xi_s.copy(), x_s.copy(), ctrl, keep=True)
    d_xi = max(float(np.max(np.abs(a[0] - b[0]))) for a, b in zip(traj[k:], traj2))
    d_x = max(float(np.max(np.abs(a[1] - b[1]))) for a, b in zip(traj[k:], traj2))
    return {"s": float(s), "xi": d_xi, "x": d_x, "max": max(d_xi, d_x)}


def write_trajectory_csv(path, trajectory, header_comment=None):
    """Long-format dump: step, time, particle_id, component, value, kind."""
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(["step", "time", "particle_id", "component", "value", "kind"])
        for snap in trajectory:
            for kind, arr in (("xi", snap.xi_particles), ("x", snap.x_particles)):
                for pid in range(arr.shape[0]):
                    for comp in range(arr.shape[1]):
                        w.writerow([snap.step, repr(snap.time), pid, comp, repr(float(arr[pid, comp])), kind])
