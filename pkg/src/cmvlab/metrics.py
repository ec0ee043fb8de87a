"""Distances, entropies, convergence rates and Monte Carlo semigroup estimates.

All measures handled here are uniform empirical measures with equal atom
counts, represented as ``(n, k)`` arrays of atoms.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

# lexicographic tie-break is exact but costs O(n^2) assignment solves
_TIE_BREAK_MAX_N = 16


@dataclass(frozen=True)
class TransportPlan:
    """Optimal matching between two equal-size uniform clouds.

    ``assignment[i]`` is the index of the atom of the second cloud that the
    i-th atom of the first cloud is sent to; ``cost`` is the mean squared
    displacement of the matching.
    """

    assignment: np.ndarray
    cost: float


def _as_atoms(a) -> np.ndarray:
    atoms = np.asarray(getattr(a, "atoms", a), dtype=float)
    if atoms.ndim == 1:
        atoms = atoms[:, None]
    if atoms.ndim != 2 or atoms.shape[0] < 1:
        raise ValueError("expected a non-empty (n, k) array of atoms")
    return atoms


def _cost_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=-1)


def _lexicographic_optimum(cost: np.ndarray, best: float) -> np.ndarray:
    n = cost.shape[0]
    perm = np.empty(n, dtype=int)
    rows = list(range(n))
    cols = list(range(n))
    fixed = 0.0
    tol = 1e-12 * max(1.0, abs(best))
    for i in range(n):
        rows.remove(i)
        for j in sorted(cols):
            rest = [c for c in cols if c != j]
            if rows:
                sub = cost[np.ix_(rows, rest)]
                r, c = linear_sum_assignment(sub)
                total = fixed + cost[i, j] + sub[r, c].sum()
            else:
                total = fixed + cost[i, j]
            if total <= best + tol:
                perm[i] = j
                fixed += cost[i, j]
                cols.remove(j)
                break
    return perm


def w2_exact(a, b) -> tuple[float, TransportPlan]:
    """Exact quadratic Wasserstein distance between equal-size uniform clouds.

    In one dimension the sorted (comonotone) matching is optimal and is used
    directly; otherwise the assignment problem is solved exactly.  Among
    optimal matchings the lexicographically smallest permutation is returned
    for clouds of at most 16 atoms (and always in one dimension, where the
    stable sort is used).
    """
    x, y = _as_atoms(a), _as_atoms(b)
    if x.shape != y.shape:
        raise ValueError(
            f"w2_exact needs equal atom counts and dimensions, got {x.shape} and {y.shape}"
        )
    n = x.shape[0]
    if x.shape[1] == 1:
        ix = np.argsort(x[:, 0], kind="stable")
        iy = np.argsort(y[:, 0], kind="stable")
        perm = np.empty(n, dtype=int)
        perm[ix] = iy
    else:
        cost = _cost_matrix(x, y)
        r, c = linear_sum_assignment(cost)
        perm = np.empty(n, dtype=int)
        perm[r] = c
        if n <= _TIE_BREAK_MAX_N:
            perm = _lexicographic_optimum(cost, cost[r, c].sum())
    sq = float(((x - y[perm]) ** 2).sum(axis=1).mean())
    return math.sqrt(sq), TransportPlan(assignment=perm, cost=sq)


def w2_squared_1d(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Batched squared W2 between 1D uniform clouds along the last axis."""
    xs = np.sort(x, axis=-1)
    ys = np.sort(y, axis=-1)
    return ((xs - ys) ** 2).mean(axis=-1)


def w2_squared_many(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared W2 for stacks of clouds of shape ``(..., n, k)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("cloud stacks must have identical shapes")
    if a.shape[-1] == 1:
        return w2_squared_1d(a[..., 0], b[..., 0])
    lead = a.shape[:-2]
    flat_a = a.reshape((-1,) + a.shape[-2:])
    flat_b = b.reshape((-1,) + b.shape[-2:])
    out = np.empty(flat_a.shape[0])
    for i in range(flat_a.shape[0]):
        cost = _cost_matrix(flat_a[i], flat_b[i])
        r, c = linear_sum_assignment(cost)
        out[i] = cost[r, c].mean()
    return out.reshape(lead)


def w2_modified(a, b, t: float, m: int) -> float:
    """W2 under the kinetic metric that divides the first ``m`` coordinates by ``t``."""
    if t <= 0:
        raise ValueError("t must be positive")
    x, y = _as_atoms(a).copy(), _as_atoms(b).copy()
    x[:, :m] /= t
    y[:, :m] /= t
    return w2_exact(x, y)[0]


def rho(x, y, t: float, m: int) -> np.ndarray:
    """Pointwise kinetic distance between state vectors (last axis)."""
    if t <= 0:
        raise ValueError("t must be positive")
    diff = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return np.sqrt(((diff[..., :m] / t) ** 2).sum(axis=-1) + (diff[..., m:] ** 2).sum(axis=-1))


@dataclass(frozen=True)
class SinkhornResult:
    distance: float
    epsilon: float
    iterations: int
    converged: bool


def w2_sinkhorn(a, b, epsilon: float | None = None, max_iter: int = 500, tol: float = 1e-6) -> SinkhornResult:
    """Entropic approximation of W2 for large clouds (log-domain Sinkhorn).

    ``epsilon`` defaults to 1e-2 times the median pairwise squared distance.
    Potentials are warm-started by halving the regularisation from the
    largest cost down to ``epsilon``.  Iteration stops when every row
    marginal is within relative ``tol``.  The returned distance is the
    square root of the transport cost of the regularised plan, so it
    over-estimates the exact W2 once converged.
    """
    x, y = _as_atoms(a), _as_atoms(b)
    n, m = x.shape[0], y.shape[0]
    cost = _cost_matrix(x, y)
    if epsilon is None:
        epsilon = 1e-2 * float(np.median(cost))
        if epsilon <= 0:
            epsilon = 1e-12
    log_a = np.full(n, -math.log(n))
    log_b = np.full(m, -math.log(m))
    f = np.zeros(n)
    g = np.zeros(m)

    def sweep(eps):
        f = -eps * logsumexp((g[None, :] - cost) / eps + log_b[None, :], axis=1)
        return f, -eps * logsumexp((f[:, None] - cost) / eps + log_a[:, None], axis=0)

    eps = max(float(cost.max()), epsilon)
    while eps > epsilon:
        for _ in range(10):
            f, g = sweep(eps)
        eps = max(eps / 2, epsilon)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        f, g = sweep(epsilon)
        # columns are exact after the g update; stop once the rows are too
        rows = logsumexp((f[:, None] + g[None, :] - cost) / epsilon + log_b[None, :], axis=1)
        if np.abs(np.expm1(rows)).max() < tol:
            converged = True
            break
    log_plan = (f[:, None] + g[None, :] - cost) / epsilon + log_a[:, None] + log_b[None, :]
    transport = float((np.exp(log_plan) * cost).sum())
    return SinkhornResult(math.sqrt(max(transport, 0.0)), epsilon, it, converged)


def entropy_gaussian(m0, v0, m1, v1) -> float:
    """Relative entropy Ent(N(m1, v1) | N(m0, v0)).

    Scalars are treated as one-dimensional means and variances.
    """
    m0 = np.atleast_1d(np.asarray(m0, dtype=float))
    m1 = np.atleast_1d(np.asarray(m1, dtype=float))
    v0 = np.atleast_2d(np.asarray(v0, dtype=float))
    v1 = np.atleast_2d(np.asarray(v1, dtype=float))
    k = m0.shape[0]
    if m1.shape != (k,) or v0.shape != (k, k) or v1.shape != (k, k):
        raise ValueError("inconsistent Gaussian dimensions")
    for name, v in (("v0", v0), ("v1", v1)):
        if not np.allclose(v, v.T, rtol=0, atol=1e-14 * max(1.0, np.abs(v).max())):
            raise ValueError(f"{name} is not symmetric")
        try:
            np.linalg.cholesky(v)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"{name} is not positive definite") from exc
    l0 = np.linalg.cholesky(v0)
    l1 = np.linalg.cholesky(v1)
    dm = m1 - m0
    z = np.linalg.solve(l0, dm)
    trace_term = np.trace(np.linalg.solve(v0, v1))
    logdet = 2.0 * (np.log(np.diag(l0)).sum() - np.log(np.diag(l1)).sum())
    return float(0.5 * (trace_term - k + z @ z + logdet))


@dataclass(frozen=True)
class RateSpec:
    """Dimension and moment order selecting a branch of the chaos rate."""

    d: int
    q: float

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be positive")
        if not self.q > 2:
            raise ValueError("moment order q must exceed 2")
        if self.d <= 4 and self.q == 4:
            raise ValueError("q = 4 is excluded for d <= 4")
        if self.d > 4 and math.isclose(self.q, self.d / (self.d - 2)):
            raise ValueError("q = d/(d-2) is excluded for d > 4")

    @property
    def branch(self) -> str:
        if self.d < 4:
            return "d<4"
        return "d=4" if self.d == 4 else "d>4"


def rate_Rdq(N, spec: RateSpec):
    """Empirical-measure convergence rate for ``N`` i.i.d. samples."""
    n = np.asarray(N, dtype=float)
    if np.any(n < 1):
        raise ValueError("N must be at least 1")
    moment = n ** (-(spec.q - 2.0) / spec.q)
    if spec.d < 4:
        main = n ** -0.5
    elif spec.d == 4:
        main = n ** -0.5 * np.log1p(n)
    else:
        main = n ** (-2.0 / spec.d)
    out = main + moment
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PowerLawFit:
    exponent: float
    intercept: float
    r2: float

    def __call__(self, n):
        return np.exp(self.intercept) * np.asarray(n, dtype=float) ** self.exponent


def fit_power_law(ns, values) -> PowerLawFit:
    """Least-squares fit of ``log value = intercept + exponent * log n``."""
    x = np.log(np.asarray(ns, dtype=float))
    yv = np.asarray(values, dtype=float)
    if x.shape != yv.shape or x.size < 4:
        raise ValueError("need at least 4 (n, value) points")
    if np.any(yv <= 0) or not np.all(np.isfinite(yv)):
        raise ValueError("power-law fit needs positive finite values")
    y = np.log(yv)
    xm, ym = x.mean(), y.mean()
    sxx = ((x - xm) ** 2).sum()
    slope = float(((x - xm) * (y - ym)).sum() / sxx)
    intercept = float(ym - slope * xm)
    ss_tot = ((y - ym) ** 2).sum()
    ss_res = ((y - intercept - slope * x) ** 2).sum()
    r2 = 1.0 if ss_tot == 0 else float(1.0 - ss_res / ss_tot)
    return PowerLawFit(slope, intercept, r2)


def loglog_slope(xs, ys) -> float:
    """Least-squares slope on log-log axes; no minimum point count."""
    x = np.log(np.asarray(xs, dtype=float))
    y = np.log(np.asarray(ys, dtype=float))
    xm = x.mean()
    return float(((x - xm) * (y - y.mean())).sum() / ((x - xm) ** 2).sum())


@dataclass(frozen=True)
class TestFunction:
    """Strictly positive bounded test function ``eps + exp(-|x - z|^2 / (2 rho^2))``.

    ``kind="constant"`` is the flat limit and evaluates to ``value``.
    """

    __test__ = False

    kind: str = "bump"
    eps: float = 0.1
    center: tuple = (0.0,)
    width: float = 1.0
    value: float = 1.0

    def __post_init__(self):
        if self.kind == "bump":
            if not self.eps > 0:
                raise ValueError("eps must be positive so that log f is finite")
            if not self.width > 0:
                raise ValueError("width must be positive")
        elif self.kind == "constant":
            if not self.value > 0:
                raise ValueError("constant test function must be positive")
        else:
            raise ValueError(f"unknown test function kind {self.kind!r}")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "constant":
            return np.full(x.shape[:-1], self.value)
        z = np.asarray(self.center, dtype=float)
        r2 = ((x - z) ** 2).sum(axis=-1)
        return self.eps + np.exp(-r2 / (2.0 * self.width**2))

    def gaussian_mean(self, mean, var) -> float:
        """Exact expectation under N(mean, var * I)."""
        if self.kind == "constant":
            return self.value
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        k = mean.size
        z = np.broadcast_to(np.asarray(self.center, dtype=float), mean.shape)
        w2 = self.width**2
        scale = (w2 / (w2 + var)) ** (k / 2.0)
        return float(self.eps + scale * math.exp(-((mean - z) ** 2).sum() / (2.0 * (w2 + var))))

    @classmethod
    def from_dict(cls, d: dict) -> "TestFunction":
        d = dict(d)
        if "center" in d:
            d["center"] = tuple(np.atleast_1d(d["center"]).tolist())
        return cls(**d)


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float


def estimate_semigroup(f: TestFunction, clouds, mode: str = "mean_of_f") -> Estimate:
    """Monte Carlo value of ``P_t f`` or ``P_t log f`` from conditional clouds.

    ``clouds`` has shape ``(R, M, k)``: one cloud per common-noise replica.
    Each cloud average integrates out the private noise; averaging across
    replicas integrates out the common noise.
    """
    clouds = np.asarray(clouds, dtype=float)
    if clouds.ndim == 2:
        clouds = clouds[None]
    vals = f(clouds)
    if mode == "mean_of_f":
        per = vals.mean(axis=-1)
    elif mode == "mean_of_log_f":
        per = np.log(vals).mean(axis=-1)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    r = per.size
    se = float(per.std(ddof=1) / math.sqrt(r)) if r > 1 else float("nan")
    return Estimate(float(per.mean()), se)


def harnack_gap(f: TestFunction, clouds_mu, clouds_nu) -> Estimate:
    """``P_t log f(nu0) - log P_t f(mu0)`` with a delta-method standard error."""
    a = np.log(f(np.asarray(clouds_nu, dtype=float))).mean(axis=-1)
    b = f(np.asarray(clouds_mu, dtype=float)).mean(axis=-1)
    bm = b.mean()
    value = float(a.mean() - math.log(bm))
    lin = a - b / bm
    se = float(lin.std(ddof=1) / math.sqrt(lin.size)) if lin.size > 1 else float("nan")
    return Estimate(value, se)


def jackknife_stderr(values, groups=None) -> float:
    """Jackknife standard error of a sample mean, leaving out one group at a time."""
    v = np.asarray(values, dtype=float)
    n = v.size
    if n < 2:
        return float("nan")
    if groups is None:
        return float(v.std(ddof=1) / math.sqrt(n))
    g = np.asarray(groups)
    labels, inv = np.unique(g, return_inverse=True)
    if labels.size < 2:
        return float(v.std(ddof=1) / math.sqrt(n))
    sums = np.bincount(inv, weights=v)
    counts = np.bincount(inv)
    total = v.sum()
    loo = (total - sums) / (n - counts)
    G = labels.size
    return float(math.sqrt((G - 1) / G * ((loo - loo.mean()) ** 2).sum()))


def brute_force_w2(a, b) -> float:
    """Exhaustive minimum over permutations; only for tiny clouds (testing oracle)."""
    x, y = _as_atoms(a), _as_atoms(b)
    n = x.shape[0]
    best = math.inf
    for perm in itertools.permutations(range(n)):
        c = ((x - y[list(perm)]) ** 2).sum(axis=1).mean()
        best = min(best, c)
    return math.sqrt(best)
