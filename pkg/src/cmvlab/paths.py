"""Time grids, reproducible Brownian increments and common-noise integrals.

Randomness is keyed, not sequential: every stream is a Philox generator
seeded by ``SeedSequence(seed, spawn_key=(replica_id, kind, index))``.  The
common path of a replica therefore never depends on how many particles are
simulated alongside it, and particle ``i`` sees the same private noise
whatever ``N`` is.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np


class StreamKind(IntEnum):
    COMMON = 0
    PRIVATE = 1
    CLOUD = 2
    INITIAL = 3
    AUX = 4


def stream(seed: int, replica_id: int, kind: StreamKind, index: int = 0) -> np.random.Generator:
    """Independent generator for one (seed, replica, kind, index) key."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replica_id), int(kind), int(index)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing knots starting at 0."""

    knots: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        if k.ndim != 1 or k.size < 2:
            raise ValueError("a grid needs at least two knots")
        if k[0] != 0.0:
            raise ValueError("grids start at t = 0")
        if not np.all(np.diff(k) > 0):
            raise ValueError("knots must be strictly increasing")
        k.setflags(write=False)
        object.__setattr__(self, "knots", k)

    @classmethod
    def uniform(cls, T: float, n: int) -> "TimeGrid":
        if T <= 0 or n < 1:
            raise ValueError("need T > 0 and n >= 1")
        return cls(np.linspace(0.0, T, n + 1))

    @classmethod
    def geometric(cls, T: float, n: int, levels: int = 12, ratio: float = 0.5) -> "TimeGrid":
        """Uniform steps on [0, T - H] followed by knots T - H*ratio^j, j = 1..levels, then T."""
        base = np.linspace(0.0, T, n + 1)
        H = T / n
        tail = T - H * ratio ** np.arange(1, levels + 1)
        return cls(np.concatenate([base[:-1], tail, [T]]))

    @property
    def t_end(self) -> float:
        return float(self.knots[-1])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.knots)

    @property
    def n_steps(self) -> int:
        return self.knots.size - 1

    def refine(self) -> "TimeGrid":
        """Insert the midpoint of every step."""
        mids = 0.5 * (self.knots[:-1] + self.knots[1:])
        out = np.empty(2 * self.knots.size - 1)
        out[0::2] = self.knots
        out[1::2] = mids
        return TimeGrid(out)

    def index_of(self, t: float, atol: float = 1e-12) -> int:
        i = int(np.argmin(np.abs(self.knots - t)))
        if abs(self.knots[i] - t) > atol * max(1.0, abs(t)):
            raise ValueError(f"{t} is not a knot of this grid")
        return i


@dataclass(frozen=True, eq=False)
class NoiseBundle:
    """Common increments ``(n, d_b)`` and private increments ``(N, n, d_w)`` for one replica."""

    grid: TimeGrid
    common: np.ndarray
    private: np.ndarray
    seed: int
    replica_id: int

    @property
    def N(self) -> int:
        return self.private.shape[0]

    def common_path(self) -> np.ndarray:
        """Values B at the knots (prefix sums), starting with 0."""
        return np.vstack([np.zeros((1, self.common.shape[1])), np.cumsum(self.common, axis=0)])


def brownian_increments(rng: np.random.Generator, grid: TimeGrid, dim: int) -> np.ndarray:
    z = rng.standard_normal((grid.n_steps, dim))
    return z * np.sqrt(grid.steps)[:, None]


def sample_common(grid: TimeGrid, d_b: int, seed: int, replica_id: int) -> np.ndarray:
    return brownian_increments(stream(seed, replica_id, StreamKind.COMMON), grid, d_b)


def sample_private(grid: TimeGrid, d_w: int, seed: int, replica_id: int, index: int) -> np.ndarray:
    return brownian_increments(stream(seed, replica_id, StreamKind.PRIVATE, index), grid, d_w)


def sample_noise_bundle(grid: TimeGrid, d_w: int, d_b: int, N: int, seed: int, replica_id: int) -> NoiseBundle:
    """Common path keyed by (seed, replica) and private path i keyed by (seed, replica, i)."""
    if N < 0:
        raise ValueError("N must be nonnegative")
    common = sample_common(grid, d_b, seed, replica_id)
    private = np.empty((N, grid.n_steps, d_w))
    for i in range(N):
        private[i] = sample_private(grid, d_w, seed, replica_id, i)
    return NoiseBundle(grid, common, private, int(seed), int(replica_id))


@dataclass(frozen=True, eq=False)
class CommonIntegralPath:
    """Values of the common-noise integral at every knot (first value is 0)."""

    grid: TimeGrid | None
    values: np.ndarray

    def at(self, k: int) -> np.ndarray:
        return self.values[..., k, :]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[..., -1, :]


def accumulate_common_integral(sigma_tilde_values, common, grid: TimeGrid | None = None) -> CommonIntegralPath:
    """Left-point Ito sum ``eta_{k+1} = eta_k + sigma_tilde_k @ dB_k``.

    ``sigma_tilde_values`` has shape ``(..., n, d, d_b)`` (one matrix per
    step) and ``common`` has shape ``(..., n, d_b)``.
    """
    st = np.asarray(sigma_tilde_values, dtype=float)
    db = np.asarray(common, dtype=float)
    if st.ndim < 3 or db.ndim < 2 or st.shape[-3] != db.shape[-2] or st.shape[-1] != db.shape[-1]:
        raise ValueError(f"misaligned sigma_tilde {st.shape} and increments {db.shape}")
    incr = np.einsum("...ij,...j->...i", st, db)
    zero = np.zeros(incr.shape[:-2] + (1, incr.shape[-1]))
    return CommonIntegralPath(grid, np.concatenate([zero, np.cumsum(incr, axis=-2)], axis=-2))


_MAGIC = b"CMVN"


def dump_bundle(bundle: NoiseBundle, path: str | Path) -> None:
    """Binary replay dump: header then little-endian float64 knots, common, private."""
    n = bundle.grid.n_steps
    d_b = bundle.common.shape[1]
    N, _, d_w = bundle.private.shape
    header = _MAGIC + struct.pack("<qqqqqq", n, d_b, d_w, N, bundle.seed, bundle.replica_id)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(bundle.grid.knots.astype("<f8").tobytes())
        fh.write(bundle.common.astype("<f8").tobytes())
        fh.write(bundle.private.astype("<f8").tobytes())


def load_bundle(path: str | Path) -> NoiseBundle:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError("not a noise bundle dump")
    n, d_b, d_w, N, seed, rid = struct.unpack("<qqqqqq", raw[4:52])
    data = np.frombuffer(raw[52:], dtype="<f8")
    knots = data[: n + 1]
    off = n + 1
    common = data[off : off + n * d_b].reshape(n, d_b)
    off += n * d_b
    private = data[off : off + N * n * d_w].reshape(N, n, d_w)
    return NoiseBundle(TimeGrid(knots.copy()), common.copy(), private.copy(), seed, rid)
