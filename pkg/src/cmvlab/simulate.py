"""Euler-Maruyama integration of clouds, interacting systems and kinetic models.

The conditional law given the common noise is represented by a cloud of M
particles that share one common path; the cloud's empirical mean at each
knot is what the coefficients see.  The batched integrators work on arrays
with leading replica and cloud axes so that one Python loop over knots
advances every replica at once.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtri

from .model import HamiltonianModel, ScenarioModel
from .paths import NoiseBundle, StreamKind, TimeGrid, sample_common, stream


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Uniform empirical measure on ``atoms`` of shape ``(n, k)``."""

    atoms: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        if a.ndim != 2 or a.shape[0] < 1:
            raise ValueError("an empirical measure needs at least one atom")
        object.__setattr__(self, "atoms", a)

    @property
    def n(self) -> int:
        return self.atoms.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n, 1.0 / self.n)

    @property
    def mean(self) -> np.ndarray:
        return self.atoms.mean(axis=0)


@dataclass(frozen=True)
class InitialLaw:
    """Initial distribution: ``point``, ``gaussian`` (diagonal) or ``two_point``.

    Points are produced from uniforms through coordinatewise quantile maps,
    so two laws fed the same uniforms are coupled comonotonically.  For the
    supported families that coupling attains W2 in one dimension and for
    pure translations in any dimension.
    """

    kind: str
    loc: tuple = (0.0,)
    var: tuple | float = 1.0
    other: tuple = (1.0,)
    weight: float = 0.5

    def __post_init__(self):
        if self.kind not in ("point", "gaussian", "two_point"):
            raise ValueError(f"unknown initial law {self.kind!r}")
        if self.kind == "gaussian" and np.any(np.asarray(self.var, dtype=float) <= 0):
            raise ValueError("gaussian variance must be positive")
        if self.kind == "two_point" and not 0 < self.weight < 1:
            raise ValueError("two_point weight must be in (0, 1)")

    @property
    def dim(self) -> int:
        return len(self.loc)

    def quantile(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        loc = np.asarray(self.loc, dtype=float)
        if self.kind == "point":
            return np.broadcast_to(loc, u.shape).copy()
        if self.kind == "gaussian":
            sd = np.sqrt(np.broadcast_to(np.asarray(self.var, dtype=float), loc.shape))
            return loc + sd * ndtri(u)
        other = np.asarray(self.other, dtype=float)
        pick = u[..., :1] < self.weight
        return np.where(pick, loc, other)

    def sample(self, u: np.ndarray) -> np.ndarray:
        return self.quantile(u)

    def mean(self) -> np.ndarray:
        loc = np.asarray(self.loc, dtype=float)
        if self.kind == "two_point":
            return self.weight * loc + (1 - self.weight) * np.asarray(self.other, dtype=float)
        return loc

    def shifted(self, offset) -> "InitialLaw":
        off = np.asarray(offset, dtype=float)
        loc = tuple((np.asarray(self.loc) + off).tolist())
        other = tuple((np.asarray(self.other) + off).tolist()) if self.kind == "two_point" else self.other
        return InitialLaw(self.kind, loc, self.var, other, self.weight)

    @classmethod
    def from_dict(cls, d: dict) -> "InitialLaw":
        d = dict(d)
        for key in ("loc", "other"):
            if key in d:
                d[key] = tuple(np.atleast_1d(np.asarray(d[key], dtype=float)).tolist())
        if "var" in d and np.ndim(d["var"]):
            d["var"] = tuple(np.asarray(d["var"], dtype=float).tolist())
        return cls(**d)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "loc": list(self.loc)}
        if self.kind == "gaussian":
            out["var"] = list(self.var) if isinstance(self.var, tuple) else self.var
        if self.kind == "two_point":
            out["other"] = list(self.other)
            out["weight"] = self.weight
        return out


def initial_uniforms(seed: int, replica_id: int, index: int, n: int, k: int) -> np.ndarray:
    """Uniforms in (0, 1) for initial points; keyed so they never depend on other counts."""
    u = stream(seed, replica_id, StreamKind.INITIAL, index).random((n, k))
    return np.clip(u, 1e-300, 1.0 - 1e-16)


def particle_uniforms(seed: int, replica_id: int, N: int, k: int) -> np.ndarray:
    """One uniform row per particle, particle i keyed by i (independent of N)."""
    rows = [initial_uniforms(seed, replica_id, 1000 + i, 1, k)[0] for i in range(N)]
    return np.array(rows).reshape(N, k)


def em_step(x, t: float, h: float, drift, diff_private, diff_common, dW, dB) -> np.ndarray:
    """Single Euler-Maruyama step ``x + drift h + diff_private dW + diff_common dB``."""
    if not h > 0:
        raise ValueError("step size must be positive")
    x = np.asarray(x, dtype=float)
    return (
        x
        + np.asarray(drift, dtype=float) * h
        + np.asarray(diff_private, dtype=float) @ np.asarray(dW, dtype=float)
        + np.asarray(diff_common, dtype=float) @ np.asarray(dB, dtype=float)
    )


def advance(model: ScenarioModel, t: float, h: float, x: np.ndarray, mean: np.ndarray, dW, dB, extra=None):
    """Euler-Maruyama step for stacked states using the model's diagonal noises.

    ``mean`` must broadcast against ``x``; ``extra`` is an additional drift on
    the noisy block (controls, bridge terms).
    """
    if isinstance(model, HamiltonianModel):
        m = model.m
        inc = model.drift(t, x, mean) * h + model.sigma_diag(t, x) * dW
        inc = inc + model.sigma_tilde_diag(t, x, mean) * dB
        if extra is not None:
            inc = inc + extra * h
        return np.concatenate([x[..., :m] + model.linear_drift(x) * h, x[..., m:] + inc], axis=-1)
    inc = model.drift(t, x, mean) * h + model.sigma_diag(t, x) * dW
    inc = inc + model.sigma_tilde_diag(t, x, mean) * dB
    if extra is not None:
        inc = inc + extra * h
    return x + inc


@dataclass(eq=False)
class CloudTrajectory:
    """One cloud on one common path.

    ``states[j]`` is the cloud at knot ``record[j]``; ``means[k]`` is the
    cloud mean at every knot.
    """

    grid: TimeGrid
    M: int
    states: np.ndarray
    record: np.ndarray
    means: np.ndarray
    common_path_key: tuple
    diverged: bool = False

    def measure(self, j: int = -1) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states[j])


@dataclass(eq=False)
class TrajectorySet:
    """N-particle interacting system on one noise bundle (all knots stored)."""

    grid: TimeGrid
    states: np.ndarray
    diverged: bool = False

    @property
    def N(self) -> int:
        return self.states.shape[1]

    def empirical(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states[k])


@dataclass(eq=False)
class CloudBatch:
    """Result of evolving C coupled clouds for R replicas.

    means: ``(R, C, n+1, k)``; st_diag: ``(R, C, n, d)`` diagonals of
    sigma_tilde used at each step (for common-noise integrals); states:
    ``(R, C, len(record), M, k)``; diverged: ``(R,)``.
    """

    means: np.ndarray
    st_diag: np.ndarray
    states: np.ndarray
    record: np.ndarray
    diverged: np.ndarray
    noisy: slice = field(default=slice(None))

    def eta(self, common: np.ndarray) -> np.ndarray:
        """Common-noise integrals ``(R, C, n+1, d)`` by the left-point rule."""
        incr = self.st_diag * common[:, None, :, :]
        zero = np.zeros(incr.shape[:2] + (1, incr.shape[-1]))
        return np.concatenate([zero, np.cumsum(incr, axis=2)], axis=2)


def evolve_clouds(
    model: ScenarioModel,
    grid: TimeGrid,
    init: np.ndarray,
    common: np.ndarray,
    noise: np.ndarray,
    record: Sequence[int] | None = None,
    n_steps: int | None = None,
) -> CloudBatch:
    """Evolve clouds ``init`` of shape ``(R, C, M, k)``.

    Clouds of one replica share ``common[r]`` (shape ``(n, d_b)``) and the
    atom-level noise ``noise[r]`` (shape ``(n, M, d_w)``); they differ only
    in their initial atoms, which couples them atom by atom.
    """
    x = np.array(init, dtype=float)
    R, C, M, k = x.shape
    steps = grid.n_steps if n_steps is None else n_steps
    record = np.arange(steps + 1) if record is None else np.asarray(record, dtype=int)
    hs = grid.steps
    noisy = model.noisy_slice
    d = noisy.stop - noisy.start
    means = np.empty((R, C, steps + 1, k))
    st_diag = np.empty((R, C, steps, d))
    states = np.empty((R, C, record.size, M, k))
    rec_pos = {int(kk): j for j, kk in enumerate(record)}
    with np.errstate(all="ignore"):
        for kk in range(steps + 1):
            mean = x.mean(axis=2)
            means[:, :, kk] = mean
            if kk in rec_pos:
                states[:, :, rec_pos[kk]] = x
            if kk == steps:
                break
            t = grid.knots[kk]
            mb = mean[:, :, None, :]
            dB = common[:, None, None, kk, :]
            dW = noise[:, None, kk, :, :]
            st = model.sigma_tilde_diag(t, x, mb)
            st_diag[:, :, kk] = np.broadcast_to(st, x.shape[:-1] + (d,)).mean(axis=2)
            x = advance(model, t, hs[kk], x, mb, dW, dB)
    diverged = ~np.isfinite(means).all(axis=(1, 2, 3))
    return CloudBatch(means, st_diag, states, record, diverged, noisy)


def cloud_noise(seed: int, replica_id: int, grid: TimeGrid, M: int, d_w: int, index: int = 0) -> np.ndarray:
    """Atom-level private noise ``(n, M, d_w)`` of one replica's clouds."""
    rng = stream(seed, replica_id, StreamKind.CLOUD, index)
    z = rng.standard_normal((grid.n_steps, M, d_w))
    return z * np.sqrt(grid.steps)[:, None, None]


def simulate_limit_cloud(
    model: ScenarioModel,
    grid: TimeGrid,
    M: int,
    seed: int,
    replica_id: int = 0,
    initial: InitialLaw | np.ndarray | None = None,
    common: np.ndarray | None = None,
    record: Sequence[int] | None = None,
) -> CloudTrajectory:
    """Self-consistent cloud approximation of the conditional law on one common path."""
    if M < 2:
        raise ValueError("a cloud needs M >= 2")
    k = model.dim_x
    if initial is None:
        initial = InitialLaw("point", tuple([0.0] * k))
    if isinstance(initial, InitialLaw):
        init = initial.quantile(initial_uniforms(seed, replica_id, 0, M, k))
    else:
        init = np.asarray(initial, dtype=float).reshape(M, k)
    if common is None:
        common = sample_common(grid, model.dim_b, seed, replica_id)
    noise = cloud_noise(seed, replica_id, grid, M, model.dim_w)
    batch = evolve_clouds(model, grid, init[None, None], common[None], noise[None], record)
    return CloudTrajectory(
        grid=grid,
        M=M,
        states=batch.states[0, 0],
        record=batch.record,
        means=batch.means[0, 0],
        common_path_key=(int(seed), int(replica_id)),
        diverged=bool(batch.diverged[0]),
    )


def evolve_interacting(
    model: ScenarioModel,
    grid: TimeGrid,
    init: np.ndarray,
    common: np.ndarray,
    private: np.ndarray,
    record: Sequence[int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched N-particle system: init ``(R, N, k)``, private ``(R, N, n, d_w)``.

    Returns states at the recorded knots ``(R, len(record), N, k)`` and the
    divergence flags ``(R,)``.
    """
    x = np.array(init, dtype=float)
    R, N, k = x.shape
    n = grid.n_steps
    record = np.arange(n + 1) if record is None else np.asarray(record, dtype=int)
    rec_pos = {int(kk): j for j, kk in enumerate(record)}
    out = np.empty((R, record.size, N, k))
    hs = grid.steps
    with np.errstate(all="ignore"):
        for kk in range(n + 1):
            if kk in rec_pos:
                out[:, rec_pos[kk]] = x
            if kk == n:
                break
            mean = x.mean(axis=1, keepdims=True)
            x = advance(model, grid.knots[kk], hs[kk], x, mean, private[:, :, kk, :], common[:, None, kk, :])
    diverged = ~np.isfinite(out).all(axis=(1, 2, 3))
    return out, diverged


def simulate_interacting(model: ScenarioModel, bundle: NoiseBundle, initial) -> TrajectorySet:
    """Mean-field N-particle system with common noise on one bundle."""
    init = np.asarray(initial, dtype=float).reshape(bundle.N, model.dim_x)
    states, div = evolve_interacting(
        model, bundle.grid, init[None], bundle.common[None], bundle.private[None]
    )
    return TrajectorySet(bundle.grid, states[0], bool(div[0]))


def simulate_hamiltonian(
    model: HamiltonianModel,
    noise: NoiseBundle | np.ndarray,
    mode: str = "interacting",
    initial=None,
    grid: TimeGrid | None = None,
    M: int = 1024,
    seed: int = 0,
    replica_id: int = 0,
    record: Sequence[int] | None = None,
) -> CloudTrajectory | TrajectorySet:
    """Kinetic model as a limit cloud (``noise`` is a common path) or as an N-system (a bundle)."""
    if not isinstance(model, HamiltonianModel):
        raise TypeError("simulate_hamiltonian needs a HamiltonianModel")
    if mode == "interacting":
        if not isinstance(noise, NoiseBundle):
            raise TypeError("interacting mode needs a NoiseBundle")
        return simulate_interacting(model, noise, initial)
    if mode == "limit_cloud":
        if grid is None:
            raise ValueError("limit_cloud mode needs the grid of the common path")
        return simulate_limit_cloud(model, grid, M, seed, replica_id, initial, np.asarray(noise), record)
    raise ValueError(f"unknown mode {mode!r}")


def export_trajectories_csv(path: str | Path, rows: Iterable[tuple[int, int, int, float, np.ndarray]]) -> None:
    """CSV with columns replica, particle, knot, t, x0, x1, ..."""
    rows = list(rows)
    k = len(np.atleast_1d(rows[0][4])) if rows else 1
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replica", "particle", "knot", "t"] + [f"x{j}" for j in range(k)])
        for rep, part, knot, t, x in rows:
            w.writerow([rep, part, knot, repr(float(t))] + [repr(float(v)) for v in np.atleast_1d(x)])


def trajectory_rows(traj: TrajectorySet | CloudTrajectory, replica: int = 0):
    """Rows for :func:`export_trajectories_csv` from a stored trajectory."""
    if isinstance(traj, TrajectorySet):
        knots = range(traj.states.shape[0])
        states = traj.states
    else:
        knots = traj.record
        states = traj.states
    for j, kk in enumerate(knots):
        t = traj.grid.knots[kk]
        for i, x in enumerate(states[j]):
            yield replica, i, int(kk), t, x
