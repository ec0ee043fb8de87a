"""Couplings by change of measure and their Girsanov entropy costs.

Each engine simulates a reference process X and a coupled process Y on the
same noise.  Y carries a steering drift that drives it onto X by the horizon
t0; the Girsanov density R that removes the steering turns Y back into a
solution started from the second initial law.  ``E[R log R]`` is the entropy
cost reported by the engines.

Two sampling measures are supported:

* ``measure="P"``: private increments are plain Brownian increments and the
  cost is estimated by ``mean(R log R)``.
* ``measure="Q"``: private increments are drawn so that the reweighted
  Brownian motion is the driver (``dW = dW_hat + gamma h``).  Then the cost
  is ``E_Q[log R]``, which equals the P-expectation of ``R log R`` for the
  discrete scheme as well, without the heavy tails of R.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import simpson
from scipy.linalg import cho_factor, cho_solve, expm

from .metrics import jackknife_stderr
from .model import HamiltonianModel, ScenarioModel, Variant
from .paths import StreamKind, TimeGrid, sample_common, stream
from .simulate import InitialLaw, advance, cloud_noise, evolve_clouds, initial_uniforms

GAMMA_MAX = 1e3
TAINT_FRACTION = 1e-3


class NotControllableNumerically(RuntimeError):
    """The Gramian is too ill-conditioned to steer the kinetic system."""


# --- schedule --------------------------------------------------------------------


@dataclass(frozen=True)
class CouplingSchedule:
    """``xi(t) = (1 - exp(kappa (t - t0))) / kappa`` solving ``-xi' + kappa xi = 1``, ``xi(t0) = 0``."""

    kappa: float
    t0: float

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kappa * self.t0 < 1e-200:
            # below this expm1 sees subnormal arguments; t0 - t is exact to far below an ulp
            return self.t0 - t
        return -np.expm1(self.kappa * (t - self.t0)) / self.kappa

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        return -np.exp(self.kappa * (t - self.t0))


def xi_schedule(kappa: float, t0: float) -> CouplingSchedule:
    if not t0 > 0:
        raise ValueError("t0 must be positive")
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    return CouplingSchedule(float(kappa), float(t0))


def coupling_rate(model: ScenarioModel) -> float:
    """Rate of the bridge schedule: 3K + K_tilde in the state-dependent case, 4K otherwise."""
    if model.variant is Variant.CASE1:
        return 3 * model.K + model.K_tilde
    return 4 * model.K


def bridge_grid(t0: float, n: int, delta_frac: float = 2.0**-7, levels: int = 12) -> tuple[TimeGrid, int]:
    """Grid on [0, t0] refined geometrically toward t0, and the index of the cutoff knot.

    Uniform steps of size H = t0/n end at t0 - H; then knots t0 - H 2^-j for
    j = 1..levels.  The cutoff t0 (1 - delta_frac) is inserted, knots between
    it and t0 are dropped, and t0 itself closes the grid.  Step sizes stay at
    most half the remaining time, which keeps the bridge drift stable.
    """
    if not 0 < delta_frac < 1:
        raise ValueError("delta_frac must lie in (0, 1)")
    if n < 1:
        raise ValueError("need at least one coarse step")
    H = t0 / n
    base = np.linspace(0.0, t0, n + 1)[:-1]
    tail = t0 - H * 0.5 ** np.arange(1, levels + 1)
    cut = t0 * (1.0 - delta_frac)
    knots = np.concatenate([base, tail])
    knots = knots[knots < cut * (1 - 1e-13)]
    knots = np.concatenate([knots, [cut, t0]])
    return TimeGrid(knots), knots.size - 2


# --- Girsanov accumulation -------------------------------------------------------


@dataclass(eq=False)
class GirsanovAccumulator:
    """Running ``log R`` and ``1/2 int |gamma|^2`` for a batch of paths.

    ``gamma`` arrays have shape ``(R, ..., d)``; everything after the first
    axis is summed into a single density per replica, except that
    ``per_unit`` keeps the quadratic cost per component of the second axis
    (per particle in the interacting engines).
    """

    n_paths: int
    gamma_max: float = GAMMA_MAX
    keep_history: bool = False
    log_r: np.ndarray = field(init=False)
    half_quad: np.ndarray = field(init=False)
    clamp_events: np.ndarray = field(init=False)
    max_gamma_norm: np.ndarray = field(init=False)
    per_unit: np.ndarray | None = field(init=False, default=None)
    history: list = field(init=False, default_factory=list)
    steps: int = field(init=False, default=0)

    def __post_init__(self):
        self.log_r = np.zeros(self.n_paths)
        self.half_quad = np.zeros(self.n_paths)
        self.clamp_events = np.zeros(self.n_paths, dtype=np.int64)
        self.max_gamma_norm = np.zeros(self.n_paths)

    def clamp(self, gamma: np.ndarray) -> np.ndarray:
        """Cap each |gamma| (last axis) at gamma_max, counting capped entries per replica."""
        norm = np.linalg.norm(gamma, axis=-1, keepdims=True)
        over = norm > self.gamma_max
        if np.any(over):
            gamma = np.where(over, gamma * (self.gamma_max / np.where(over, norm, 1.0)), gamma)
            self.clamp_events += over.reshape(self.n_paths, -1).sum(axis=1)
        return gamma

    def update(self, gamma: np.ndarray, dW: np.ndarray, h: float) -> None:
        sq = (gamma**2).sum(axis=-1)
        lin = (gamma * dW).sum(axis=-1)
        if sq.ndim > 1:
            unit = 0.5 * sq.reshape(self.n_paths, sq.shape[1], -1).sum(axis=2) * h
            self.per_unit = unit if self.per_unit is None else self.per_unit + unit
        sq_r = sq.reshape(self.n_paths, -1).sum(axis=1)
        self.log_r += lin.reshape(self.n_paths, -1).sum(axis=1) - 0.5 * sq_r * h
        self.half_quad += 0.5 * sq_r * h
        self.max_gamma_norm = np.maximum(
            self.max_gamma_norm, np.sqrt(sq.reshape(self.n_paths, -1).max(axis=1))
        )
        self.steps += 1
        if self.keep_history:
            self.history.append((gamma.copy(), dW.copy(), float(h)))

    def recompute_log_r(self) -> np.ndarray:
        """``log R`` rebuilt from the stored history (consistency check)."""
        total = np.zeros(self.n_paths)
        for gamma, dW, h in self.history:
            total += ((gamma * dW).sum(axis=-1) - 0.5 * (gamma**2).sum(axis=-1) * h).reshape(
                self.n_paths, -1
            ).sum(axis=1)
        return total


# --- results ---------------------------------------------------------------------


@dataclass(eq=False)
class CouplingResult:
    """Per-replica coupling records and ensemble estimates."""

    engine: str
    measure: str
    t0: float
    cutoff: float
    terminal_gap: np.ndarray
    log_r: np.ndarray
    half_quad: np.ndarray
    clamped: np.ndarray
    max_gamma: np.ndarray
    diverged: np.ndarray
    n_steps: int
    gap_tol: float
    gap_vectors: np.ndarray | None = None

    @property
    def ok(self) -> np.ndarray:
        return ~self.diverged & np.isfinite(self.log_r)

    @property
    def success(self) -> np.ndarray:
        return self.ok & (self.terminal_gap < self.gap_tol)

    @property
    def entropy_cost_samples(self) -> np.ndarray:
        """Per-replica contributions whose mean estimates ``E[R log R]``."""
        lr = self.log_r[self.ok]
        if self.measure == "Q":
            return lr
        return np.exp(lr) * lr

    @property
    def entropy_cost(self) -> float:
        return float(self.entropy_cost_samples.mean())

    @property
    def entropy_cost_stderr(self) -> float:
        return jackknife_stderr(self.entropy_cost_samples)

    @property
    def quad_cost(self) -> float:
        """Mean of 1/2 int |gamma|^2; same expectation as the entropy cost under Q."""
        return float(self.half_quad[self.ok].mean())

    @property
    def quad_cost_stderr(self) -> float:
        return jackknife_stderr(self.half_quad[self.ok])

    def density_mean(self) -> tuple[float, float]:
        """``E_P[R]`` (P mode) or ``E_Q[1/R]`` (Q mode), both equal to 1, with stderr."""
        sign = 1.0 if self.measure == "P" else -1.0
        r = np.exp(sign * self.log_r[self.ok])
        return float(r.mean()), jackknife_stderr(r)

    @property
    def clamp_fraction(self) -> float:
        return float(self.clamped.sum()) / max(1, self.n_steps * self.terminal_gap.size)

    @property
    def diverged_fraction(self) -> float:
        return float(self.diverged.mean())

    @property
    def tainted(self) -> bool:
        return self.clamp_fraction > TAINT_FRACTION or self.diverged_fraction > TAINT_FRACTION

    def summary(self) -> dict:
        mean_r, se_r = self.density_mean()
        return {
            "engine": self.engine,
            "measure": self.measure,
            "t0": self.t0,
            "cutoff": self.cutoff,
            "replicas": int(self.terminal_gap.size),
            "entropy_cost": self.entropy_cost,
            "entropy_cost_stderr": self.entropy_cost_stderr,
            "quad_cost": self.quad_cost,
            "quad_cost_stderr": self.quad_cost_stderr,
            "density_mean": mean_r,
            "density_stderr": se_r,
            "median_gap": float(np.median(self.terminal_gap[self.ok])),
            "success_rate": float(self.success.mean()),
            "clamp_fraction": self.clamp_fraction,
            "diverged": int(self.diverged.sum()),
            "tainted": self.tainted,
        }


# --- shared replica machinery ----------------------------------------------------


def _run_chunks(fn: Callable[[np.ndarray], dict], replicas: int, chunk: int, workers: int) -> dict:
    """Apply ``fn`` to consecutive replica-id chunks and concatenate in id order."""
    ids = np.arange(replicas)
    parts = [ids[i : i + chunk] for i in range(0, replicas, chunk)]
    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(fn, parts))
    else:
        outs = [fn(p) for p in parts]
    return {key: np.concatenate([o[key] for o in outs]) for key in outs[0]}


def _auto_chunk(n_steps: int, M: int, k: int, budget: int = 1 << 22) -> int:
    return int(max(1, min(512, budget // max(1, n_steps * M * k))))


@dataclass(frozen=True)
class _ReplicaNoise:
    common: np.ndarray
    private: np.ndarray
    cloud: np.ndarray
    u_tag: np.ndarray
    u_cloud: np.ndarray


def _replica_noise(rids, seed, grid, M, d_w, d_b, k, quiet=False) -> _ReplicaNoise:
    common = np.stack([sample_common(grid, d_b, seed, r) for r in rids])
    private = np.stack(
        [stream(seed, r, StreamKind.PRIVATE, 0).standard_normal((grid.n_steps, d_w)) for r in rids]
    ) * np.sqrt(grid.steps)[None, :, None]
    cloud = np.stack([cloud_noise(seed, r, grid, M, d_w) for r in rids])
    u_tag = np.stack([initial_uniforms(seed, r, 1, 1, k)[0] for r in rids])
    u_cloud = np.stack([initial_uniforms(seed, r, 0, M, k) for r in rids])
    if quiet:
        common, private, cloud = np.zeros_like(common), np.zeros_like(private), np.zeros_like(cloud)
    return _ReplicaNoise(common, private, cloud, u_tag, u_cloud)


def _check_measure(measure: str) -> str:
    measure = measure.upper()
    if measure not in ("P", "Q"):
        raise ValueError("measure must be 'P' or 'Q'")
    return measure


# --- Case 1 and Case 2 bridges ---------------------------------------------------


def _couple_bridge(
    model: ScenarioModel,
    mu0: InitialLaw,
    nu0: InitialLaw,
    t0: float,
    *,
    case: int,
    n_steps: int,
    delta_frac: float,
    levels: int,
    M: int,
    replicas: int,
    seed: int,
    measure: str,
    gamma_max: float,
    gap_tol: float,
    workers: int,
    kappa: float | None,
    chunk: int | None,
) -> CouplingResult:
    measure = _check_measure(measure)
    grid, cut = bridge_grid(t0, n_steps, delta_frac, levels)
    sched = xi_schedule(coupling_rate(model) if kappa is None else kappa, t0)
    xi = sched(grid.knots)
    hs = grid.steps
    k = model.dim_x
    cloud_steps = grid.n_steps if case == 2 else cut

    def run(rids: np.ndarray) -> dict:
        R = rids.size
        nz = _replica_noise(rids, seed, grid, M, model.dim_w, model.dim_b, k)
        init = np.stack([mu0.quantile(nz.u_cloud), nu0.quantile(nz.u_cloud)], axis=1)
        clouds = evolve_clouds(model, grid, init, nz.common, nz.cloud, record=[], n_steps=cloud_steps)
        means = clouds.means
        if case == 2:
            eta = clouds.eta(nz.common)
            eta_mu, eta_nu = eta[:, 0], eta[:, 1]
            off = (eta_nu[:, -1:] - eta_nu) - (eta_mu[:, -1:] - eta_mu)
        x = mu0.quantile(nz.u_tag)
        y = nu0.quantile(nz.u_tag)
        acc = GirsanovAccumulator(R, gamma_max)
        with np.errstate(all="ignore"):
            for kk in range(cut):
                t, h = grid.knots[kk], hs[kk]
                z = y - x if case == 1 else y - x + off[:, kk]
                gamma = acc.clamp(model.sigma_pinv_apply(t, x, z) / xi[kk])
                dW = nz.private[:, kk]
                if measure == "Q":
                    dW = dW + gamma * h
                acc.update(gamma, dW, h)
                dB = nz.common[:, kk]
                bridge = -model.sigma_diag(t, y) * gamma
                x_new = advance(model, t, h, x, means[:, 0, kk], dW, dB)
                y = advance(model, t, h, y, means[:, 1, kk], dW, dB, extra=bridge)
                x = x_new
        zc = y - x if case == 1 else y - x + off[:, cut]
        gap = np.linalg.norm(zc, axis=1)
        div = clouds.diverged | ~np.isfinite(gap) | ~np.isfinite(acc.log_r)
        return {
            "gap": gap,
            "log_r": acc.log_r,
            "half_quad": acc.half_quad,
            "clamped": acc.clamp_events,
            "max_gamma": acc.max_gamma_norm,
            "diverged": div,
        }

    size = chunk or _auto_chunk(grid.n_steps, 2 * M, k)
    out = _run_chunks(run, replicas, size, workers)
    return CouplingResult(
        engine=f"case{case}",
        measure=measure,
        t0=float(t0),
        cutoff=float(grid.knots[cut]),
        terminal_gap=out["gap"],
        log_r=out["log_r"],
        half_quad=out["half_quad"],
        clamped=out["clamped"],
        max_gamma=out["max_gamma"],
        diverged=out["diverged"],
        n_steps=cut,
        gap_tol=gap_tol,
    )


def couple_case1(
    model: ScenarioModel,
    mu0: InitialLaw,
    nu0: InitialLaw,
    t0: float,
    *,
    n_steps: int = 100,
    delta_frac: float = 2.0**-7,
    levels: int = 12,
    M: int = 1024,
    replicas: int = 1000,
    seed: int = 0,
    measure: str = "P",
    gamma_max: float = GAMMA_MAX,
    gap_tol: float = 0.05,
    workers: int = 1,
    kappa: float | None = None,
    chunk: int | None = None,
) -> CouplingResult:
    """Bridge coupling when the common-noise coefficient depends on the state only.

    The steering drift is ``-sigma(Y) gamma`` with
    ``gamma = sigma^*(sigma sigma^*)^{-1}(X) (Y - X) / xi(t)``.
    """
    if model.variant is not Variant.CASE1:
        raise ValueError("couple_case1 needs a CASE1 scenario")
    return _couple_bridge(
        model, mu0, nu0, t0, case=1, n_steps=n_steps, delta_frac=delta_frac, levels=levels, M=M,
        replicas=replicas, seed=seed, measure=measure, gamma_max=gamma_max, gap_tol=gap_tol,
        workers=workers, kappa=kappa, chunk=chunk,
    )


def couple_case2(
    model: ScenarioModel,
    mu0: InitialLaw,
    nu0: InitialLaw,
    t0: float,
    *,
    n_steps: int = 100,
    delta_frac: float = 2.0**-7,
    levels: int = 12,
    M: int = 1024,
    replicas: int = 1000,
    seed: int = 0,
    measure: str = "P",
    gamma_max: float = GAMMA_MAX,
    gap_tol: float = 0.05,
    workers: int = 1,
    kappa: float | None = None,
    chunk: int | None = None,
) -> CouplingResult:
    """Bridge coupling when the common-noise coefficient depends on the measure.

    Both clouds are evolved first to obtain the common-noise integrals,
    including their values at t0.  The coupled pair then runs with target
    ``Y - X + (eta_nu(t0) - eta_nu(t)) - (eta_mu(t0) - eta_mu(t))``, which is
    the gap between the shifted processes.
    """
    if model.variant is not Variant.CASE2:
        raise ValueError("couple_case2 needs a CASE2 scenario")
    return _couple_bridge(
        model, mu0, nu0, t0, case=2, n_steps=n_steps, delta_frac=delta_frac, levels=levels, M=M,
        replicas=replicas, seed=seed, measure=measure, gamma_max=gamma_max, gap_tol=gap_tol,
        workers=workers, kappa=kappa, chunk=chunk,
    )


# --- kinetic control -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HamiltonianControlPlan:
    """Steering control for the kinetic model on a grid.

    ``alpha`` and ``alpha_prime`` have shape ``(..., n+1, d)``.
    """

    grid: TimeGrid
    Q_t0: np.ndarray
    v: np.ndarray
    V: np.ndarray
    alpha: np.ndarray
    alpha_prime: np.ndarray

    @property
    def alpha_step(self) -> np.ndarray:
        """Average of alpha' over each step, ``(alpha_{k+1} - alpha_k) / h_k``."""
        return np.diff(self.alpha, axis=-2) / self.grid.steps[:, None]


def _exp_neg(A: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``exp(-s A)`` stacked over the times ``s``."""
    if not np.any(A):
        return np.broadcast_to(np.eye(A.shape[0]), s.shape + A.shape).copy()
    return np.stack([expm(-si * A) for si in s])


def gramian(A: np.ndarray, M: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """``int_0^t0 s(t0-s)/t0^2 e^{-sA} M M^* e^{-sA^*} ds`` by composite Simpson on the grid."""
    s = grid.knots
    t0 = grid.t_end
    E = _exp_neg(A, s) @ M
    w = s * (t0 - s) / t0**2
    integrand = w[:, None, None] * (E @ np.swapaxes(E, -1, -2))
    Q = simpson(integrand, x=s, axis=0)
    return 0.5 * (Q + Q.T)


def hamiltonian_control(
    model: HamiltonianModel,
    t0: float,
    v: np.ndarray,
    eta_mu: np.ndarray | None,
    eta_nu: np.ndarray | None,
    grid: TimeGrid | None = None,
    n_steps: int = 200,
) -> HamiltonianControlPlan:
    """Control that steers the coupled kinetic pair onto each other at t0.

    ``v`` holds the initial gaps ``Y0 - X0`` with shape ``(..., m+d)``;
    ``eta_mu``/``eta_nu`` hold the common-noise integrals at the knots,
    shape ``(..., n+1, d)`` (``None`` means identically zero).
    """
    grid = grid or TimeGrid.uniform(t0, n_steps)
    if abs(grid.t_end - t0) > 1e-12 * max(1.0, t0):
        raise ValueError("grid must end at t0")
    A, Mm = model.A, model.M
    m, d = model.m, model.d
    s = grid.knots
    Q = gramian(A, Mm, grid)
    if np.linalg.cond(Q) > 1e12:
        raise NotControllableNumerically(f"Gramian condition number {np.linalg.cond(Q):.3g} exceeds 1e12")
    factor = cho_factor(Q)
    v = np.asarray(v, dtype=float)
    lead = v.shape[:-1]
    v1, v2 = v[..., :m], v[..., m:]
    zeros = np.zeros(lead + (s.size, d))
    eta_mu = zeros if eta_mu is None else np.broadcast_to(eta_mu, zeros.shape)
    eta_nu = zeros if eta_nu is None else np.broadcast_to(eta_nu, zeros.shape)
    delta = eta_mu[..., -1, :] - eta_nu[..., -1, :]
    frac = (s / t0)[:, None]
    g = (1 - frac) * v2[..., None, :] + frac * delta[..., None, :] + eta_nu - eta_mu
    E = _exp_neg(A, s)
    EM = E @ Mm
    V = simpson(np.einsum("kij,...kj->...ki", EM, g), x=s, axis=-2)
    lam = cho_solve(factor, (v1 + V).reshape(-1, m).T).T.reshape(lead + (m,))
    EMt = np.swapaxes(EM, -1, -2)  # M^* e^{-sA^*}
    steer = np.einsum("kij,...j->...ki", EMt, lam)
    w = (s * (t0 - s) / t0**2)[:, None]
    dw = ((t0 - 2 * s) / t0**2)[:, None]
    alpha = frac * (delta - v2)[..., None, :] - w * steer
    MtAt = np.einsum("ij,kjl->kil", Mm.T @ A.T, np.swapaxes(E, -1, -2))  # M^* A^* e^{-sA^*}
    steer_d = np.einsum("kij,...j->...ki", MtAt, lam)
    alpha_prime = ((delta - v2) / t0)[..., None, :] - dw * steer + w * steer_d
    return HamiltonianControlPlan(grid, Q, v, V, alpha, alpha_prime)


def couple_hamiltonian(
    model: HamiltonianModel,
    mu0: InitialLaw,
    nu0: InitialLaw,
    t0: float,
    *,
    n_steps: int = 200,
    M: int = 1024,
    replicas: int = 1000,
    seed: int = 0,
    measure: str = "P",
    gamma_max: float = GAMMA_MAX,
    gap_tol: float = 0.05,
    workers: int = 1,
    quiet: bool = False,
    chunk: int | None = None,
) -> CouplingResult:
    """Kinetic coupling: Y's velocity block gets the control ``alpha'`` and sees X's drift.

    ``quiet=True`` zeroes every noise increment, leaving the pure control
    problem.  The recorded gap is the full signed difference ``Y - X`` at t0
    (kept in ``gap_vectors``).
    """
    if not isinstance(model, HamiltonianModel):
        raise TypeError("couple_hamiltonian needs a HamiltonianModel")
    measure = _check_measure(measure)
    grid = TimeGrid.uniform(t0, n_steps)
    hs = grid.steps
    k = model.dim_x
    Q_check = gramian(model.A, model.M, grid)
    if np.linalg.cond(Q_check) > 1e12:
        raise NotControllableNumerically("Gramian condition number exceeds 1e12")

    def run(rids: np.ndarray) -> dict:
        R = rids.size
        nz = _replica_noise(rids, seed, grid, M, model.dim_w, model.dim_b, k, quiet)
        init = np.stack([mu0.quantile(nz.u_cloud), nu0.quantile(nz.u_cloud)], axis=1)
        clouds = evolve_clouds(model, grid, init, nz.common, nz.cloud, record=[])
        means = clouds.means
        eta = clouds.eta(nz.common)
        x = mu0.quantile(nz.u_tag)
        y = nu0.quantile(nz.u_tag)
        plan = hamiltonian_control(model, t0, y - x, eta[:, 0], eta[:, 1], grid)
        ctrl = plan.alpha_step
        acc = GirsanovAccumulator(R, gamma_max)
        with np.errstate(all="ignore"):
            for kk in range(grid.n_steps):
                t, h = grid.knots[kk], hs[kk]
                bx = model.drift(t, x, means[:, 0, kk])
                by = model.drift(t, y, means[:, 1, kk])
                gamma = acc.clamp(model.sigma_pinv_apply(t, y, by - bx - ctrl[:, kk]))
                dW = nz.private[:, kk]
                if measure == "Q":
                    dW = dW + gamma * h
                acc.update(gamma, dW, h)
                dB = nz.common[:, kk]
                x_new = advance(model, t, h, x, means[:, 0, kk], dW, dB)
                # Y's velocity drift is X's drift plus the control; advance() adds b(Y, nu)
                y = advance(model, t, h, y, means[:, 1, kk], dW, dB, extra=bx + ctrl[:, kk] - by)
                x = x_new
        diff = y - x
        gap = np.linalg.norm(diff, axis=1)
        div = clouds.diverged | ~np.isfinite(gap) | ~np.isfinite(acc.log_r)
        return {
            "gap": gap,
            "diff": diff,
            "log_r": acc.log_r,
            "half_quad": acc.half_quad,
            "clamped": acc.clamp_events,
            "max_gamma": acc.max_gamma_norm,
            "diverged": div,
        }

    size = chunk or _auto_chunk(grid.n_steps, 2 * M, k)
    out = _run_chunks(run, replicas, size, workers)
    return CouplingResult(
        engine="hamiltonian",
        measure=measure,
        t0=float(t0),
        cutoff=float(t0),
        terminal_gap=out["gap"],
        log_r=out["log_r"],
        half_quad=out["half_quad"],
        clamped=out["clamped"],
        max_gamma=out["max_gamma"],
        diverged=out["diverged"],
        n_steps=grid.n_steps,
        gap_tol=gap_tol,
        gap_vectors=out["diff"],
    )


def steering_gap(
    model: HamiltonianModel,
    v: np.ndarray,
    t0: float,
    n_steps: int = 256,
    levels: int = 4,
) -> float:
    """Noise-free terminal gap of the controlled kinetic pair, Richardson-extrapolated.

    The pair starts at ``(0, v)`` and is integrated with n, 2n, 4n, ... Euler
    steps; the signed terminal differences are combined by Romberg
    elimination of the h, h^2, ... error terms.
    """
    k = model.dim_x
    mu0 = InitialLaw("point", tuple([0.0] * k))
    nu0 = InitialLaw("point", tuple(np.asarray(v, dtype=float).tolist()))
    table = []
    for j in range(levels):
        res = couple_hamiltonian(model, mu0, nu0, t0, n_steps=n_steps * 2**j, M=2, replicas=1, quiet=True)
        table.append(res.gap_vectors[0])
    for order in range(1, levels):
        table = [(2**order * table[i + 1] - table[i]) / (2**order - 1) for i in range(len(table) - 1)]
    return float(np.linalg.norm(table[0]))


# --- particle systems ------------------------------------------------------------


@dataclass(eq=False)
class EntropyCostEstimate:
    """Girsanov cost of turning independent limit copies into the N-particle system.

    ``per_particle`` has shape ``(R, N)``: ``1/2 int |gamma^i|^2`` for each
    particle; ``log_r`` is the joint density per replica.
    """

    N: int
    measure: str
    per_particle: np.ndarray
    log_r: np.ndarray
    diverged: np.ndarray
    clamped: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.per_particle.sum(axis=1)

    @property
    def per_particle_cost(self) -> float:
        ok = ~self.diverged
        return float(self.total[ok].mean() / self.N)

    @property
    def per_particle_stderr(self) -> float:
        return jackknife_stderr(self.total[~self.diverged] / self.N)

    def k_share(self, k: int) -> float:
        """Mean cost carried by a block of k particles (blocks partition the N particles)."""
        if k < 1 or self.N % k:
            raise ValueError("k must divide N")
        blocks = self.per_particle[~self.diverged].reshape(-1, self.N // k, k).sum(axis=2)
        return float(blocks.mean())

    def summary(self) -> dict:
        return {
            "N": self.N,
            "measure": self.measure,
            "per_particle_cost": self.per_particle_cost,
            "per_particle_stderr": self.per_particle_stderr,
            "diverged": int(self.diverged.sum()),
            "clamped": int(self.clamped.sum()),
        }


def couple_particle_system(
    model: ScenarioModel,
    N: int,
    initial_N_system: InitialLaw,
    initial_limit: InitialLaw,
    t0: float,
    *,
    n_steps: int = 100,
    M: int = 1024,
    replicas: int = 64,
    seed: int = 0,
    measure: str = "Q",
    gamma_max: float = GAMMA_MAX,
    workers: int = 1,
    chunk: int | None = None,
) -> EntropyCostEstimate:
    """Change of measure from N conditionally independent limit copies to the N-system.

    The conditional law of the limit equation is a reference cloud of M
    atoms started from ``initial_limit`` on the replica's common path.  The
    copies start from the N-system's initial points; particle i uses its own
    keyed private stream and initial uniform.  In the kinetic model the copies
    start from the limit initial points instead and carry the steering
    controls built from the initial gaps.
    """
    measure = _check_measure(measure)
    ham = isinstance(model, HamiltonianModel)
    grid = TimeGrid.uniform(t0, n_steps)
    hs = grid.steps
    k = model.dim_x

    def run(rids: np.ndarray) -> dict:
        R = rids.size
        common = np.stack([sample_common(grid, model.dim_b, seed, r) for r in rids])
        cloud = np.stack([cloud_noise(seed, r, grid, M, model.dim_w) for r in rids])
        u_cloud = np.stack([initial_uniforms(seed, r, 0, M, k) for r in rids])
        ref = evolve_clouds(model, grid, initial_limit.quantile(u_cloud)[:, None], common, cloud, record=[])
        mu_mean = ref.means[:, 0]
        private = np.empty((R, N, grid.n_steps, model.dim_w))
        u = np.empty((R, N, k))
        for a, r in enumerate(rids):
            for i in range(N):
                private[a, i] = stream(seed, r, StreamKind.PRIVATE, 1 + i).standard_normal(
                    (grid.n_steps, model.dim_w)
                )
                u[a, i] = initial_uniforms(seed, r, 1000 + i, 1, k)[0]
        private *= np.sqrt(hs)[None, None, :, None]
        acc = GirsanovAccumulator(R, gamma_max)
        if ham:
            x = initial_limit.quantile(u)
            y = initial_N_system.quantile(u)
            eta = ref.eta(common)[:, 0]
            plan = hamiltonian_control(model, t0, y - x, eta[:, None], eta[:, None], grid)
            ctrl = plan.alpha_step
        else:
            x = initial_N_system.quantile(u)
        with np.errstate(all="ignore"):
            for kk in range(grid.n_steps):
                t, h = grid.knots[kk], hs[kk]
                mu_k = mu_mean[:, None, kk]
                dB = common[:, None, kk]
                if ham:
                    bx = model.drift(t, x, mu_k)
                    by = model.drift(t, y, y.mean(axis=1, keepdims=True))
                    gamma = acc.clamp(model.sigma_pinv_apply(t, y, by - bx - ctrl[:, :, kk]))
                else:
                    emp = x.mean(axis=1, keepdims=True)
                    gamma = acc.clamp(
                        model.sigma_pinv_apply(t, x, model.drift(t, x, emp) - model.drift(t, x, mu_k))
                    )
                dW = private[:, :, kk]
                if measure == "Q":
                    dW = dW + gamma * h
                acc.update(gamma, dW, h)
                if ham:
                    x_new = advance(model, t, h, x, mu_k, dW, dB)
                    y = advance(
                        model, t, h, y, y.mean(axis=1, keepdims=True), dW, dB,
                        extra=bx + ctrl[:, :, kk] - by,
                    )
                    x = x_new
                else:
                    x = advance(model, t, h, x, mu_k, dW, dB)
        per = acc.per_unit if acc.per_unit is not None else np.zeros((R, N))
        div = ref.diverged | ~np.isfinite(acc.log_r)
        return {"per": per, "log_r": acc.log_r, "div": div, "clamped": acc.clamp_events}

    size = chunk or _auto_chunk(grid.n_steps, M + N, k)
    out = _run_chunks(run, replicas, size, workers)
    return EntropyCostEstimate(N, measure, out["per"], out["log_r"], out["div"], out["clamped"])


def analytic_ou_entropy(delta: float, t: float, a: float, s: float) -> float:
    """``delta^2 / (2 v_t)`` with the conditional OU variance ``v_t = s^2 (1 - e^{-2at}) / (2a)``."""
    v = s * s * t if a == 0 else s * s * -math.expm1(-2 * a * t) / (2 * a)
    return delta * delta / (2 * v)
