"""Direct value computation by exhaustive search over step controls.

Also houses the Krylov distance between controls, the disintegrated value
for finitely-valued initial conditions, and the stability probe.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import CapacityError, DegenerateInput, DomainError, UnsupportedInput
from .forward_sim import (CoupledSimulator, EmpiricalSampler, NoiseSource, StepControl, TimeGrid,
                          ValueEstimate, _initial_clouds, as_sampler)
from .measures import EmpiricalMeasure
from .problem import ActionSpace, BenchmarkProblem

DEFAULT_CATALOG_CAP = 4096


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings shared by every value route."""

    n_steps: int = 20
    N: int = 2000
    M: Optional[int] = None
    seed: int = 0

    def grid(self, t, horizon) -> TimeGrid:
        return TimeGrid(t, horizon, self.n_steps)

    def with_seed(self, seed) -> "SimConfig":
        return SimConfig(self.n_steps, self.N, self.M, seed)

    def to_dict(self):
        return {"n_steps": self.n_steps, "N": self.N, "M": self.M, "seed": self.seed}


@dataclass(frozen=True, eq=False)
class ControlCatalog:
    controls: tuple
    k: int
    M: int
    L: int
    horizon: float

    def __len__(self):
        return len(self.controls)

    def __getitem__(self, i) -> StepControl:
        return self.controls[i]

    def __iter__(self):
        return iter(self.controls)

    @classmethod
    def from_controls(cls, controls, n_actions=None):
        controls = tuple(controls)
        if not controls:
            raise DegenerateInput("empty catalog")
        c0 = controls[0]
        M = n_actions if n_actions is not None else int(max(int(c.table.max()) for c in controls)) + 1
        return cls(controls, c0.grid.n_steps, M, c0.L, c0.horizon)


def enumerate_step_controls(space: ActionSpace, k: int, L: int, cap: int = DEFAULT_CATALOG_CAP,
                            horizon: float = 1.0) -> ControlCatalog:
    """Every table of ``k`` intervals by ``L`` cells over the action indices.

    Ordering is lexicographic in the flattened table, so index 0 is the
    constant control on action 0.
    """
    if k < 1 or L < 1:
        raise DegenerateInput("k and L must be >= 1")
    M = len(space)
    size = M ** (k * L)
    if size > cap:
        raise CapacityError(f"catalog size {M}^{k * L} = {size} exceeds cap {cap}")
    grid = TimeGrid(0.0, horizon, k)
    controls = tuple(
        StepControl(grid, L, np.array(flat).reshape(k, L))
        for flat in itertools.product(range(M), repeat=k * L)
    )
    return ControlCatalog(controls, k, M, L, horizon)


def _behaviour(ctrl: StepControl, grid: TimeGrid):
    return tuple(ctrl.rule(ctrl.interval(s)) for s in grid.nodes[:-1])


@dataclass
class DirectValue:
    value: float
    argmax: int
    control: StepControl
    table: list = field(default_factory=list)  # (control_id, mean, std_error)

    def table_csv_rows(self):
        return [(i, m, se) for i, m, se in self.table]


def _gain_table(problem: BenchmarkProblem, grid: TimeGrid, xi0, x0, controls, noise: NoiseSource,
                step_offset=0, groups=None):
    """Gain of every control under common random numbers.

    ``groups`` splits the tagged particles into blocks (one per start point);
    the result then has one column per block.
    Controls with identical behaviour on ``grid`` are simulated once.
    """
    seen = {}
    means = []
    ses = []
    for ctrl in controls:
        sig = _behaviour(ctrl, grid)
        hit = seen.get(sig)
        if hit is None:
            sim = CoupledSimulator(problem, grid, noise, step_offset)
            total, _ = sim.run(xi0, x0, ctrl)
            if groups is None:
                blocks = [total]
            else:
                blocks = np.split(total, np.cumsum(groups)[:-1])
            m = np.array([b.mean() for b in blocks])
            se = np.array([b.std(ddof=1) / math.sqrt(len(b)) if len(b) > 1 else 0.0 for b in blocks])
            hit = (m, se)
            seen[sig] = hit
        means.append(hit[0])
        ses.append(hit[1])
    return np.array(means), np.array(ses)


def value_direct(problem: BenchmarkProblem, t, x, pi, catalog, sim: SimConfig = SimConfig()) -> DirectValue:
    """Largest catalog gain at ``(t, x, pi)``; all controls share one seed.

    Ties go to the lowest catalog index.
    """
    controls = list(catalog)
    if not controls:
        raise DegenerateInput("catalog is empty")
    M = sim.N if sim.M is None else sim.M
    grid = sim.grid(t, problem.horizon)
    noise = NoiseSource(sim.seed, sim.N, M, problem.coefficients.noise_dim)
    xi0, x0 = _initial_clouds(problem, x, pi, sim.N, M, noise)
    means, ses = _gain_table(problem, grid, xi0, x0, controls, noise)
    means, ses = means[:, 0], ses[:, 0]
    best = int(np.argmax(means))  # first maximal index
    table = [(i, float(means[i]), float(ses[i])) for i in range(len(controls))]
    return DirectValue(float(means[best]), best, controls[best], table)


def value_direct_many(problem: BenchmarkProblem, t, starts, cloud, catalog, sim: SimConfig, reps: int,
                      step_offset=0):
    """``V(t, x_j, law of cloud)`` for several start points sharing one population.

    ``cloud`` is the population array used as-is (no resampling); each start
    point gets ``reps`` tagged particles with independent increments.
    Returns ``(values, std_errors)`` per start point.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    if starts.shape[1] != problem.dim:
        starts = starts.reshape(-1, problem.dim)
    cloud = np.asarray(cloud, dtype=float).reshape(-1, problem.dim)
    n_starts = starts.shape[0]
    x0 = np.repeat(starts, reps, axis=0)
    grid = sim.grid(t, problem.horizon)
    noise = NoiseSource(sim.seed, cloud.shape[0], x0.shape[0], problem.coefficients.noise_dim, paired=False)
    means, ses = _gain_table(problem, grid, cloud, x0, list(catalog), noise, step_offset,
                             groups=[reps] * n_starts)
    best = np.argmax(means, axis=0)
    cols = np.arange(n_starts)
    return means[best, cols], ses[best, cols]


def _atoms(xi) -> EmpiricalMeasure:
    if isinstance(xi, EmpiricalMeasure):
        return xi
    if isinstance(xi, EmpiricalSampler):
        return xi.measure
    raise UnsupportedInput("initial condition must be finitely valued (an EmpiricalMeasure)")


def value_mkv(problem: BenchmarkProblem, t, xi, catalog, sim: SimConfig = SimConfig()) -> dict:
    """Disintegrated law-level value: sum over atoms ``x_k`` of ``p_k V(t, x_k, pi)``.

    Each atom is optimized on its own; ``pi`` is the law of ``xi``.
    """
    mu = _atoms(xi)
    per_atom = []
    total = 0.0
    var = 0.0
    for xk, pk in zip(mu.points, mu.weights):
        if pk == 0:
            continue
        dv = value_direct(problem, t, xk, mu, catalog, sim)
        per_atom.append({"x": xk.tolist(), "p": float(pk), "value": dv.value, "argmax": dv.argmax})
        total += pk * dv.value
        var += (pk * dv.table[dv.argmax][2]) ** 2
    return {"value": float(total), "std_error": float(math.sqrt(var)), "atoms": per_atom}


def joint_product_value(problem: BenchmarkProblem, t, xi, catalog, sim: SimConfig = SimConfig()) -> dict:
    """Optimize one control per atom jointly over the product catalog.

    Population particles started at atom ``k`` follow control ``k`` and all
    of them feed one common empirical law; tagged particles from each atom
    follow that atom's control. Product size is bounded by the catalog cap.
    """
    mu = _atoms(xi)
    keep = mu.weights > 0
    pts, w = mu.points[keep], mu.weights[keep]
    K = len(w)
    controls = list(catalog)
    if len(controls) ** K > DEFAULT_CATALOG_CAP:
        raise CapacityError(f"product catalog {len(controls)}^{K} exceeds cap {DEFAULT_CATALOG_CAP}")
    M = sim.N if sim.M is None else sim.M
    grid = sim.grid(t, problem.horizon)
    noise = NoiseSource(sim.seed, sim.N, M, problem.coefficients.noise_dim)
    sampler = EmpiricalSampler(EmpiricalMeasure(pts, w))
    xi0 = sampler.sample(sim.N, noise.initial_rng())
    # atom label of each population particle; tagged particles split the same way
    xi_lab = np.concatenate([np.full(c, k) for k, c in enumerate(_counts(w, sim.N))])
    x_lab = np.concatenate([np.full(c, k) for k, c in enumerate(_counts(w, M))])
    x0 = pts[x_lab]
    best, best_idx = -np.inf, None
    for combo in itertools.product(range(len(controls)), repeat=K):
        ctrl_xi = [controls[c] for c in combo]
        total = _run_mixed(problem, grid, noise, xi0, x0, ctrl_xi, xi_lab, x_lab)
        val = float(sum(w[k] * total[x_lab == k].mean() for k in range(K)))
        if val > best:
            best, best_idx = val, combo
    return {"value": best, "argmax": list(best_idx)}


def _counts(w, n):
    raw = np.asarray(w) * n
    counts = np.floor(raw).astype(int)
    rem = n - counts.sum()
    if rem > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:rem]] += 1
    return counts


def _run_mixed(problem, grid, noise, xi0, x0, ctrls, xi_lab, x_lab):
    sim = CoupledSimulator(problem, grid, noise)
    xi, x = xi0.copy(), x0.copy()
    pi = sim.measure(xi)
    total = np.zeros(x.shape[0])
    for i in range(grid.n_steps):
        a_xi = np.empty(xi.shape[0], dtype=int)
        a_x = np.empty(x.shape[0], dtype=int)
        for k, c in enumerate(ctrls):
            axi, ax = sim.actions_for(c, i)
            a_xi[xi_lab == k] = axi if np.ndim(axi) == 0 else np.asarray(axi)[xi_lab == k]
            a_x[x_lab == k] = ax if np.ndim(ax) == 0 else np.asarray(ax)[x_lab == k]
        xi, x, pi, r = sim.step(i, xi, x, pi, a_xi, a_x)
        total += r
    return total + sim.terminal(x, pi)


# ----------------------------------------------------------------------------
# Krylov metric

def krylov_distance(alpha: StepControl, beta: StepControl, space: ActionSpace, n_paths: int = 1000,
                    seed: int = 0) -> float:
    """``E[int_0^T rho(alpha_t, beta_t) dt]``; exact when both controls ignore history."""
    T = alpha.horizon
    if abs(beta.horizon - T) > 1e-12:
        raise DomainError("controls must share the horizon")
    nodes = np.union1d(alpha.grid.nodes, beta.grid.nodes)
    widths = np.diff(nodes)
    mids = 0.5 * (nodes[:-1] + nodes[1:])
    if alpha.L == 1 and beta.L == 1:
        total = 0.0
        for s, w in zip(mids, widths):
            ia = alpha.table[alpha.interval(s), 0]
            ib = beta.table[beta.interval(s), 0]
            total += w * float(space.rho(ia, ib))
        return float(total)
    rng = np.random.default_rng(seed)
    # Brownian values on the merged node set, then increments per control grid
    b = np.concatenate([np.zeros((n_paths, 1)),
                        np.cumsum(rng.normal(size=(n_paths, len(widths))) * np.sqrt(widths), axis=1)], axis=1)

    def incr(ctrl):
        idx = np.searchsorted(nodes, ctrl.grid.nodes - 1e-12)
        return np.diff(b[:, idx], axis=1)

    inc_a, inc_b = incr(alpha), incr(beta)
    total = np.zeros(n_paths)
    for s, w in zip(mids, widths):
        ia_int, ib_int = alpha.interval(s), beta.interval(s)
        ia = alpha.table[ia_int][alpha.cells(ia_int, inc_a)]
        ib = beta.table[ib_int][beta.cells(ib_int, inc_b)]
        total += w * space.rho(ia, ib)
    return float(total.mean())


# ----------------------------------------------------------------------------
# stability probe

def flip_tail(alpha: StepControl, width_steps: int, refine: int, new_action: int) -> StepControl:
    """``alpha`` written on a grid ``refine`` times finer, with the last
    ``width_steps`` fine intervals switched to ``new_action``."""
    if alpha.L != 1:
        raise UnsupportedInput("tail flips are defined for history-free controls")
    k = alpha.grid.n_steps * refine
    table = np.repeat(alpha.table, refine, axis=0)
    if width_steps > 0:
        table[k - width_steps:, :] = new_action
    return StepControl(TimeGrid(0.0, alpha.horizon, k), 1, table)


def stability_probe(problem: BenchmarkProblem, t, x, pi, alpha: StepControl, levels: Sequence[int] = (1, 2, 4, 8),
                    sim: SimConfig = SimConfig(n_steps=64), new_action: Optional[int] = None) -> list:
    """Gain changes along controls converging to ``alpha`` in the Krylov metric.

    Level ``j`` flips the final ``1/j`` of ``alpha``'s last interval to
    ``new_action``. The simulation grid must resolve every flip point.
    Returns rows ``{"level", "width", "krylov", "delta_J"}`` plus a zero row.
    """
    space = problem.space
    if new_action is None:
        last = int(alpha.table[-1, 0])
        new_action = (last + 1) % len(space)
    base = value_direct(problem, t, x, pi, [alpha], sim).value
    k = alpha.grid.n_steps
    rows = [{"level": 0, "width": 0.0, "krylov": 0.0, "delta_J": 0.0}]
    for j in levels:
        refine = int(j)
        if sim.n_steps % (k * refine) != 0:
            raise DomainError(f"n_steps={sim.n_steps} does not resolve level {j}")
        beta = flip_tail(alpha, 1, refine, new_action)
        d = krylov_distance(alpha, beta, space)
        val = value_direct(problem, t, x, pi, [beta], sim).value
        rows.append({"level": refine, "width": alpha.horizon / (k * refine), "krylov": d,
                     "delta_J": abs(val - base)})
    return rows
