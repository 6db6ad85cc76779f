"""Coefficient sets, finite action spaces, assumption audits and benchmarks.

Coefficients are vectorised over particles: for ``P`` particles of state
dimension ``n`` and actions of dimension ``q``

* ``drift(t, x, pi, a)``     -> ``(P, n)``
* ``diffusion(t, x, pi, a)`` -> ``(P, n, d)``
* ``running(t, x, pi, a)``   -> ``(P,)``
* ``terminal(x, pi)``        -> ``(P,)``

where ``x`` has shape ``(P, n)``, ``a`` has shape ``(P, q)`` and ``pi`` is an
:class:`~mkvctl.measures.EmpiricalMeasure`.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DegenerateInput, UnsupportedBenchmark
from .measures import EmpiricalMeasure, empirical_from_samples, moment_norm, wasserstein2

RHO_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class ActionSpace:
    actions: np.ndarray
    metric_scale: float = 1.0

    def __post_init__(self):
        acts = np.array(self.actions, dtype=float)
        if acts.ndim == 1:
            acts = acts[:, None]
        if acts.shape[0] == 0:
            raise DegenerateInput("action space is empty")
        if not np.all(np.isfinite(acts)):
            raise DegenerateInput("actions must be finite")
        if self.metric_scale <= 0:
            raise DegenerateInput("metric_scale must be positive")
        d = np.linalg.norm(acts[:, None, :] - acts[None, :, :], axis=2)
        if np.any(d[~np.eye(len(acts), dtype=bool)] == 0):
            raise DegenerateInput("actions must be pairwise distinct")
        acts.setflags(write=False)
        object.__setattr__(self, "actions", acts)

    def __len__(self):
        return self.actions.shape[0]

    @property
    def dim(self) -> int:
        return self.actions.shape[1]

    def rho(self, i, j):
        """Bounded metric between action indices (works on arrays)."""
        diff = self.actions[np.asarray(i)] - self.actions[np.asarray(j)]
        return np.minimum(1.0 - RHO_EPS, self.metric_scale * np.linalg.norm(diff, axis=-1))


def default_growth(c_h=1.0):
    def h(r):
        return c_h * (1.0 + r * r)

    return h


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    drift: Callable
    diffusion: Callable
    running: Callable
    terminal: Callable
    state_dim: int = 1
    noise_dim: int = 1
    lipschitz_L: float = 1.0
    growth_p: float = 2.0
    growth_h: Callable = field(default_factory=default_growth)


@dataclass(frozen=True, eq=False)
class BenchmarkProblem:
    name: str
    coefficients: CoefficientSet
    space: ActionSpace
    horizon: float
    analytic_value: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.coefficients.state_dim


# ----------------------------------------------------------------------------
# assumption audit

def _random_measure(rng, n, scale):
    k = int(rng.integers(1, 6))
    pts = rng.normal(scale=scale, size=(k, n))
    w = rng.dirichlet(np.ones(k))
    w /= w.sum()
    return EmpiricalMeasure(pts, w)


def assumption_audit(coeffs: CoefficientSet, space: ActionSpace, n_probes: int, seed: int,
                     horizon: float = 1.0, scale: float = 2.0) -> dict:
    """Spot-check the Lipschitz and growth constants declared on ``coeffs``.

    Violations are reported in the returned dict, never raised.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    rng = np.random.default_rng([seed, 7001])
    n = coeffs.state_dim
    L, p, h = coeffs.lipschitz_L, coeffs.growth_p, coeffs.growth_h
    max_b = max_s = 0.0
    max_growth = 0.0
    for _ in range(n_probes):
        t = float(rng.uniform(0, horizon))
        a = space.actions[rng.integers(len(space))][None, :]
        x, x2 = rng.normal(scale=scale, size=(2, 1, n))
        pi, pi2 = _random_measure(rng, n, scale), _random_measure(rng, n, scale)
        denom = float(np.linalg.norm(x - x2) + wasserstein2(pi, pi2))
        if denom > 1e-12:
            db = np.linalg.norm(coeffs.drift(t, x, pi, a) - coeffs.drift(t, x2, pi2, a))
            ds = np.linalg.norm(coeffs.diffusion(t, x, pi, a) - coeffs.diffusion(t, x2, pi2, a))
            max_b = max(max_b, float(db) / denom)
            max_s = max(max_s, float(ds) / denom)
        bound = h(moment_norm(pi)) * (1.0 + float(np.linalg.norm(x)) ** p)
        size = abs(float(coeffs.running(t, x, pi, a)[0])) + abs(float(coeffs.terminal(x, pi)[0]))
        if bound > 0:
            max_growth = max(max_growth, size / bound)
        elif size > 0:
            max_growth = math.inf
    violations = []
    if max_b + max_s > L * (1 + 1e-9):
        violations.append(f"lipschitz: observed {max_b + max_s:.6g} > declared L={L}")
    if max_growth > 1 + 1e-9:
        violations.append(f"growth: |f|+|g| exceeds h(|pi|_2)(1+|x|^p) by factor {max_growth:.6g}")
    return {
        "n_probes": n_probes,
        "max_lipschitz_ratio_drift": max_b,
        "max_lipschitz_ratio_diffusion": max_s,
        "max_growth_ratio": max_growth,
        "violations": violations,
        "passed": not violations,
    }


# ----------------------------------------------------------------------------
# linear-quadratic benchmark and its Riccati oracle

@dataclass(frozen=True)
class LQParams:
    """dX = (a + kappa (mean - X)) ds + sigma dB, reward -(r a^2/2 + eps (X-mean)^2/2),
    terminal reward -c (X-mean)^2 / 2."""

    kappa: float = 1.0
    sigma: float = 0.4
    r: float = 1.0
    eps: float = 1.0
    c: float = 1.0
    horizon: float = 1.0
    actions: tuple = (-0.1, 0.0, 0.1)

    def to_dict(self):
        d = dict(self.__dict__)
        d["actions"] = list(self.actions)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "actions" in d:
            d["actions"] = tuple(float(a) for a in d["actions"])
        return cls(**d)


def _riccati_rhs(y, p: LQParams):
    P, R, _ = y
    return np.array([P * P / p.r + 2 * p.kappa * P - p.eps, 2 * p.kappa * R - p.eps, -0.5 * p.sigma**2 * P])


def lq_riccati_value(params: LQParams, t: float, x, pi: EmpiricalMeasure, step: Optional[float] = None) -> float:
    """Value of the LQ mean-field benchmark from RK4 on the Riccati system.

    The value is ``-R(t) (x - mean(pi))^2 / 2 - phi(t)`` where ``P`` is the
    fluctuation Riccati solution, ``R`` the mean-gap coefficient and ``phi``
    the accumulated noise cost; all integrated backward from ``T``.
    """
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    if xs.size != 1 or pi.dim != 1:
        raise UnsupportedBenchmark("LQ oracle is scalar-state only")
    if params.r <= 0:
        raise UnsupportedBenchmark("control cost r must be positive")
    T = params.horizon
    h = T / 2000 if step is None else step
    span = T - t
    y = np.array([params.c, params.c, 0.0])
    if span > 0:
        n = max(1, int(math.ceil(span / h - 1e-12)))
        hh = -span / n
        for _ in range(n):
            k1 = _riccati_rhs(y, params)
            k2 = _riccati_rhs(y + 0.5 * hh * k1, params)
            k3 = _riccati_rhs(y + 0.5 * hh * k2, params)
            k4 = _riccati_rhs(y + hh * k3, params)
            y = y + hh / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    gap = float(xs[0] - pi.mean()[0])
    return float(-0.5 * y[1] * gap * gap - y[2])


def lq_problem(params: LQParams = LQParams()) -> BenchmarkProblem:
    p = params

    def drift(t, x, pi, a):
        return a + p.kappa * (pi.mean() - x)

    def diffusion(t, x, pi, a):
        return np.full((x.shape[0], 1, 1), p.sigma)

    def running(t, x, pi, a):
        return -(0.5 * p.r * a[:, 0] ** 2 + 0.5 * p.eps * (x[:, 0] - pi.mean()[0]) ** 2)

    def terminal(x, pi):
        return -0.5 * p.c * (x[:, 0] - pi.mean()[0]) ** 2

    amax = max(abs(a) for a in p.actions)
    coeffs = CoefficientSet(
        drift, diffusion, running, terminal,
        lipschitz_L=2 * p.kappa + 1e-12, growth_p=2.0,
        growth_h=default_growth(max(1.0, 0.5 * p.r * amax**2 + p.eps + p.c)),
    )
    return BenchmarkProblem(
        "systemic-risk-lq", coeffs, ActionSpace(np.array(p.actions)), p.horizon,
        analytic_value=lambda t, x, pi: lq_riccati_value(p, t, x, pi),
        params={"lq": p.to_dict()},
    )


# ----------------------------------------------------------------------------
# registry

def _zeros_like_state(x):
    return np.zeros_like(x)


def zero_problem(horizon=1.0) -> BenchmarkProblem:
    coeffs = CoefficientSet(
        drift=lambda t, x, pi, a: np.zeros_like(x),
        diffusion=lambda t, x, pi, a: np.zeros((x.shape[0], x.shape[1], 1)),
        running=lambda t, x, pi, a: np.zeros(x.shape[0]),
        terminal=lambda x, pi: np.zeros(x.shape[0]),
        lipschitz_L=1.0, growth_h=default_growth(0.0),
    )
    return BenchmarkProblem("zero", coeffs, ActionSpace([-1.0, 1.0]), horizon,
                            analytic_value=lambda t, x, pi: 0.0)


def drift_only(actions=(-1.0, 1.0), horizon=1.0, running="zero") -> BenchmarkProblem:
    """Drift equals the action; terminal reward is the state itself.

    ``running="x"`` adds the running reward ``f = x`` used for Euler-bias checks.
    """
    cmax = max(actions)

    def drift(t, x, pi, a):
        return np.broadcast_to(a[:, :1], x.shape).copy()

    if running == "x":
        def f(t, x, pi, a):
            return x[:, 0].copy()
    else:
        def f(t, x, pi, a):
            return np.zeros(x.shape[0])

    def analytic(t, x, pi):
        x0 = float(np.atleast_1d(x)[0])
        if running == "x":
            tau = horizon - t
            return x0 + cmax * tau + x0 * tau + 0.5 * cmax * tau**2
        return x0 + cmax * (horizon - t)

    coeffs = CoefficientSet(
        drift=drift,
        diffusion=lambda t, x, pi, a: np.zeros((x.shape[0], x.shape[1], 1)),
        running=f, terminal=lambda x, pi: x[:, 0].copy(),
        lipschitz_L=1.0, growth_p=1.0, growth_h=default_growth(2.0),
    )
    return BenchmarkProblem("drift-only", coeffs, ActionSpace(list(actions)), horizon,
                            analytic_value=analytic, params={"running": running})


def mean_field_drift(kappa=1.0, sigma=0.0, horizon=1.0) -> BenchmarkProblem:
    def drift(t, x, pi, a):
        return kappa * (pi.mean() - x)

    def diffusion(t, x, pi, a):
        return np.full((x.shape[0], x.shape[1], 1), sigma)

    def terminal(x, pi):
        return -((x[:, 0] - pi.mean()[0]) ** 2)

    coeffs = CoefficientSet(
        drift, diffusion, running=lambda t, x, pi, a: np.zeros(x.shape[0]), terminal=terminal,
        lipschitz_L=2 * kappa + 1e-12, growth_p=2.0, growth_h=default_growth(4.0),
    )
    return BenchmarkProblem("mean-field-drift", coeffs, ActionSpace([-1.0, 1.0]), horizon,
                            params={"kappa": kappa, "sigma": sigma})


def two_action_toy(kappa=1.0, sigma=0.5, weight=1.0, mean_bonus=0.5, spread_cost=1.0,
                   horizon=1.0) -> BenchmarkProblem:
    """1-D, actions {-1, +1}: the action is a drift, rewarded by ``+weight`` on the
    first half of the horizon and ``-weight`` on the second, with a terminal
    bonus on the population mean and a penalty on the gap to it."""
    half = 0.5 * horizon

    def drift(t, x, pi, a):
        return a + kappa * (pi.mean() - x)

    def diffusion(t, x, pi, a):
        return np.full((x.shape[0], 1, 1), sigma)

    def running(t, x, pi, a):
        w = weight if t < half - 1e-12 else -weight
        return w * a[:, 0] - 0.5 * spread_cost * (x[:, 0] - pi.mean()[0]) ** 2

    def terminal(x, pi):
        return mean_bonus * pi.mean()[0] - 0.5 * spread_cost * (x[:, 0] - pi.mean()[0]) ** 2

    coeffs = CoefficientSet(
        drift, diffusion, running, terminal,
        lipschitz_L=2 * kappa + 1e-12, growth_p=2.0,
        growth_h=default_growth(weight + mean_bonus + spread_cost),
    )
    return BenchmarkProblem("two-action-toy", coeffs, ActionSpace([-1.0, 1.0]), horizon,
                            params=dict(kappa=kappa, sigma=sigma, weight=weight,
                                        mean_bonus=mean_bonus, spread_cost=spread_cost))


_FACTORIES = {
    "zero": lambda horizon=1.0, **kw: zero_problem(horizon),
    "drift-only": lambda horizon=1.0, actions=(-1.0, 1.0), running="zero", **kw: drift_only(
        tuple(actions), horizon, running),
    "mean-field-drift": lambda horizon=1.0, kappa=1.0, sigma=0.0, **kw: mean_field_drift(kappa, sigma, horizon),
    "systemic-risk-lq": lambda horizon=None, lq=None, actions=None, **kw: lq_problem(
        _lq_params(lq, horizon, actions)),
    "two-action-toy": lambda horizon=1.0, **kw: two_action_toy(horizon=horizon, **{
        k: v for k, v in kw.items() if k in ("kappa", "sigma", "weight", "mean_bonus", "spread_cost")}),
}


def _lq_params(lq, horizon, actions):
    d = dict(lq or {})
    if horizon is not None:
        d["horizon"] = horizon
    if actions is not None:
        d["actions"] = [float(np.ravel(a)[0]) for a in actions]
    return LQParams.from_dict(d)


def registry() -> list:
    """Default instances of every registered benchmark."""
    return [factory() for factory in _FACTORIES.values()]


def get_problem(name: str, **params) -> BenchmarkProblem:
    if name not in _FACTORIES:
        raise ConfigError(f"unknown problem {name!r}", "/name")
    return _FACTORIES[name](**params)


def problem_from_config(cfg: dict) -> BenchmarkProblem:
    """Build a benchmark from a JSON-style dict.

    Keys: ``name`` (required), ``dimension`` (must be 1 for the shipped
    problems), ``actions``, ``horizon``, ``lq`` (LQ parameter object) and
    ``params`` (factory keyword arguments).
    """
    if "name" not in cfg:
        raise ConfigError("missing problem name", "/name")
    name = cfg["name"]
    if cfg.get("dimension", 1) != 1:
        raise ConfigError("shipped benchmarks are one-dimensional", "/dimension")
    kw = dict(cfg.get("params", {}))
    if "horizon" in cfg:
        kw["horizon"] = float(cfg["horizon"])
    if "actions" in cfg:
        kw["actions"] = cfg["actions"]
    if "lq" in cfg:
        kw["lq"] = cfg["lq"]
    prob = get_problem(name, **kw)
    if "actions" in cfg and name not in ("drift-only", "systemic-risk-lq"):
        prob = BenchmarkProblem(prob.name, prob.coefficients, ActionSpace(cfg["actions"]),
                                prob.horizon, prob.analytic_value, prob.params)
    return prob


def load_problem(path) -> BenchmarkProblem:
    with open(path) as fh:
        return problem_from_config(json.load(fh))


def gaussian_cloud_with_moments(mean, var, n, seed):
    """Empirical measure with exactly the requested mean and variance."""
    z = np.random.default_rng(seed).normal(size=n)
    z = (z - z.mean()) / z.std()
    return empirical_from_samples(mean + math.sqrt(var) * z)
