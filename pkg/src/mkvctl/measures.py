"""Weighted point clouds standing in for laws with finite second moment.

All measures in the pipeline come from particle clouds, so a single atomic
representation is used everywhere, together with an exact 2-Wasserstein
distance (quantile coupling in 1-D, transport LP otherwise).
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog

from .errors import CapacityError, DegenerateInput, DimensionError

WEIGHT_TOL = 1e-12
DEFAULT_LP_CAP = 256 * 256


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Atoms ``points`` (shape ``(k, n)``) carrying probability ``weights``."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.array(self.weights, dtype=float).reshape(-1)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise DegenerateInput("measure needs at least one atom")
        if w.shape[0] != pts.shape[0]:
            raise DegenerateInput("one weight per atom required")
        if not np.all(np.isfinite(pts)):
            raise DegenerateInput("atoms must be finite")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise DegenerateInput("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > WEIGHT_TOL * max(1, len(w)):
            raise DegenerateInput(f"weights sum to {w.sum()!r}, not 1")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def variance(self) -> np.ndarray:
        c = self.points - self.mean()
        return self.weights @ (c * c)

    def second_moment(self) -> float:
        return float(self.weights @ np.sum(self.points**2, axis=1))

    def sample(self, n, rng) -> np.ndarray:
        idx = rng.choice(len(self), size=n, p=self.weights)
        return self.points[idx].copy()

    # serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d) -> "EmpiricalMeasure":
        return cls(np.asarray(d["points"], dtype=float), np.asarray(d["weights"], dtype=float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text) -> "EmpiricalMeasure":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(self.dim)] + ["weight"])
        for p, wt in zip(self.points, self.weights):
            w.writerow([repr(float(v)) for v in p] + [repr(float(wt))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text) -> "EmpiricalMeasure":
        rows = list(csv.reader(io.StringIO(text)))
        body = [r for r in rows[1:] if r]
        arr = np.array([[float(v) for v in r] for r in body])
        return cls(arr[:, :-1], arr[:, -1])


def empirical_from_samples(samples) -> EmpiricalMeasure:
    """Uniformly weighted measure on ``samples`` (input order preserved)."""
    arr = np.asarray(samples, dtype=float)
    if arr.size == 0:
        raise DegenerateInput("no samples")
    if arr.ndim == 1:
        arr = arr[:, None]
    if not np.all(np.isfinite(arr)):
        raise DegenerateInput("samples contain NaN or Inf")
    n = arr.shape[0]
    return EmpiricalMeasure(arr, np.full(n, 1.0 / n))


def dirac(x) -> EmpiricalMeasure:
    return EmpiricalMeasure(np.atleast_1d(np.asarray(x, dtype=float))[None, :], [1.0])


def moment_norm(mu: EmpiricalMeasure) -> float:
    """Square root of the second moment, i.e. the distance to the Dirac mass at 0."""
    return float(np.sqrt(mu.second_moment()))


def _w2_squared_1d(x, wx, y, wy) -> float:
    ix, iy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    x, wx, y, wy = x[ix], wx[ix], y[iy], wy[iy]
    if len(x) == len(y) and np.allclose(wx, 1.0 / len(x), rtol=0, atol=1e-15) and np.allclose(
        wy, 1.0 / len(y), rtol=0, atol=1e-15
    ):
        return float(np.mean((x - y) ** 2))
    # quantile coupling on the merged CDF grid
    cx, cy = np.cumsum(wx), np.cumsum(wy)
    cx[-1] = cy[-1] = 1.0
    grid = np.union1d(cx, cy)
    lo = np.concatenate([[0.0], grid[:-1]])
    mass = grid - lo
    keep = mass > 0
    mid = 0.5 * (lo + grid)[keep]
    qx = x[np.minimum(np.searchsorted(cx, mid, side="left"), len(x) - 1)]
    qy = y[np.minimum(np.searchsorted(cy, mid, side="left"), len(y) - 1)]
    return float(np.sum(mass[keep] * (qx - qy) ** 2))


def _w2_squared_lp(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    a, b = mu.weights, nu.weights
    ia, ib = np.flatnonzero(a > 0), np.flatnonzero(b > 0)
    X, Y, a, b = mu.points[ia], nu.points[ib], a[ia], b[ib]
    cost = np.sum((X[:, None, :] - Y[None, :, :]) ** 2, axis=2)
    m, n = cost.shape
    if m == n and np.allclose(a, 1.0 / m, atol=1e-15) and np.allclose(b, 1.0 / n, atol=1e-15):
        # uniform equal-size case: optimal plan is a permutation (Birkhoff)
        r, c = linear_sum_assignment(cost)
        return float(cost[r, c].sum() / m)
    rows = sparse.kron(sparse.eye(m), np.ones((1, n)))
    cols = sparse.kron(np.ones((1, m)), sparse.eye(n))
    A_eq = sparse.vstack([rows, cols]).tocsr()
    b_eq = np.concatenate([a, b])
    # normalise marginals exactly so the LP is feasible to machine precision
    b_eq[m:] *= a.sum() / b.sum()
    res = linprog(
        cost.ravel(),
        A_eq=A_eq,
        b_eq=b_eq,
        bounds=(0, None),
        method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(max(res.fun, 0.0))


def wasserstein2(mu: EmpiricalMeasure, nu: EmpiricalMeasure, cap: int = DEFAULT_LP_CAP,
                 method: str = "auto") -> float:
    """Exact 2-Wasserstein distance between two atomic measures.

    ``method="lp"`` forces the transport LP even in one dimension (used to
    cross-check the quantile coupling). Supports whose product exceeds
    ``cap`` raise :class:`CapacityError`; the caller should subsample.
    """
    if mu.dim != nu.dim:
        raise DimensionError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if mu.dim == 1 and method != "lp":
        val = _w2_squared_1d(mu.points[:, 0], mu.weights, nu.points[:, 0], nu.weights)
    else:
        if len(mu) * len(nu) > cap:
            raise CapacityError(f"support product {len(mu) * len(nu)} exceeds cap {cap}")
        val = _w2_squared_lp(mu, nu)
    return float(np.sqrt(max(val, 0.0)))


def subsample(mu: EmpiricalMeasure, k: int, rng) -> EmpiricalMeasure:
    """Uniform subsample of ``k`` atoms drawn by weight, for use above the LP cap."""
    if len(mu) <= k:
        return mu
    return empirical_from_samples(mu.sample(k, rng))
