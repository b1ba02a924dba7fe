"""Time grids, seeded Brownian noise ensembles, discrete process containers,
and empirical estimators of the S2 / M2 / A2 norms.

Two independent Brownian motions drive everything downstream: W (forward,
d-dimensional, one increment stream per Monte Carlo path) and B (backward,
l-dimensional, a single realized path per experiment).  Noise is generated
from counter-based Philox substreams keyed by (seed, stream id), so path k's
increments never depend on how many paths were requested or on any execution
order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

__all__ = [
    "TimeGrid",
    "NoiseEnsemble",
    "ProcessSample",
    "build_grid",
    "sample_noise",
    "coarsen_noise",
    "empirical_norm",
    "save_paths_csv",
    "load_paths_csv",
]

# Substream ids at or above this value are reserved for realizations of B;
# ids below it index W paths.  Keeps the two families collision-free for any
# practical path count.
_B_STREAM_BASE = 1 << 62

# Tolerance for the monotonicity check on K-like processes.
_K_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Discrete time mesh on [0, T].

    Nodes must start at 0, end at the horizon and be strictly increasing.
    ``build_grid`` produces the uniform mesh; custom node vectors are allowed
    as long as they respect the endpoints.
    """

    horizon: float
    num_steps: int
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        object.__setattr__(self, "nodes", nodes)
        if self.horizon <= 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if nodes.shape != (self.num_steps + 1,):
            raise ValueError("nodes must have length num_steps + 1")
        if nodes[0] != 0.0:
            raise ValueError("first node must be 0")
        if abs(nodes[-1] - self.horizon) > 1e-12 * max(1.0, self.horizon):
            raise ValueError("last node must equal the horizon")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("nodes must be strictly increasing")
        nodes.setflags(write=False)

    @property
    def dt(self) -> np.ndarray:
        """Step sizes, length ``num_steps``."""
        return np.diff(self.nodes)

    def index_of(self, t: float) -> int:
        """Index of the node equal to ``t`` (within 1e-12 relative)."""
        idx = int(np.argmin(np.abs(self.nodes - t)))
        if abs(self.nodes[idx] - t) > 1e-12 * max(1.0, self.horizon):
            raise ValueError(f"t={t} is not a grid node")
        return idx


def build_grid(T: float, N: int) -> TimeGrid:
    """Uniform time grid with N steps on [0, T].

    Parameters
    ----------
    T : float
        Horizon, strictly positive.
    N : int
        Number of steps, at least 1.
    """
    if T <= 0:
        raise ValueError(f"horizon must be positive, got {T}")
    if N < 1:
        raise ValueError(f"need at least one step, got {N}")
    return TimeGrid(horizon=float(T), num_steps=int(N), nodes=np.linspace(0.0, float(T), int(N) + 1))


def _stream(seed: int, stream_id: int) -> np.random.Generator:
    # Counter-based generator: the (seed, stream) pair fully determines the
    # draw, independent of call ordering or thread layout.
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(stream_id)]))


@dataclass(frozen=True, eq=False)
class NoiseEnsemble:
    """Sampled increments of W (per path) and one realized path of B.

    ``w_increments`` has shape (num_paths, N, d) and ``b_increments`` shape
    (N, l); every component has variance dt per step.  B is deliberately a
    single path: the solution of the backward equation is a random field over
    the B-randomness, and the path-wise regression runs over W only.
    """

    grid: TimeGrid
    num_paths: int
    w_increments: np.ndarray
    b_increments: np.ndarray
    seed: int
    b_stream: int = 0

    def __post_init__(self):
        N = self.grid.num_steps
        if self.w_increments.shape[:2] != (self.num_paths, N):
            raise ValueError("w_increments must have shape (num_paths, N, d)")
        if self.b_increments.shape[0] != N:
            raise ValueError("b_increments must have shape (N, l)")
        self.w_increments.setflags(write=False)
        self.b_increments.setflags(write=False)

    @property
    def d(self) -> int:
        return self.w_increments.shape[2]

    @property
    def ell(self) -> int:
        return self.b_increments.shape[1]

    def b_path(self) -> np.ndarray:
        """Cumulative B path, shape (N+1, l), starting at 0."""
        out = np.zeros((self.grid.num_steps + 1, self.ell))
        np.cumsum(self.b_increments, axis=0, out=out[1:])
        return out


def sample_noise(grid: TimeGrid, num_paths: int, d: int = 1, ell: int = 1,
                 seed: int = 0, b_stream: int = 0) -> NoiseEnsemble:
    """Sample the two independent Brownian increment families.

    Parameters
    ----------
    grid : TimeGrid
    num_paths : int
        Number of W paths (>= 1).
    d, ell : int
        Dimensions of W and B.
    seed : int
        Master seed; identical seeds reproduce the ensemble bit for bit.
    b_stream : int
        Index of the B realization; use 0, 1, ... to loop over independent
        B paths in batch experiments without touching the W streams.
    """
    if num_paths < 1 or d < 1 or ell < 1:
        raise ValueError("num_paths, d and ell must all be >= 1")
    N = grid.num_steps
    scale = np.sqrt(grid.dt)[:, None]
    w = np.empty((num_paths, N, d))
    for k in range(num_paths):
        w[k] = _stream(seed, k).standard_normal((N, d)) * scale
    b = _stream(seed, _B_STREAM_BASE + b_stream).standard_normal((N, ell)) * scale
    return NoiseEnsemble(grid=grid, num_paths=num_paths, w_increments=w,
                         b_increments=b, seed=seed, b_stream=b_stream)


def coarsen_noise(ens: NoiseEnsemble, factor: int) -> NoiseEnsemble:
    """Aggregate increments onto a grid that is ``factor`` times coarser.

    The coarse ensemble realizes the same Brownian paths, which makes nested
    refinement studies (strong error, self-convergence) possible.
    """
    N = ens.grid.num_steps
    if factor < 1 or N % factor != 0:
        raise ValueError(f"factor {factor} must divide the step count {N}")
    nodes = ens.grid.nodes[::factor]
    grid = TimeGrid(horizon=ens.grid.horizon, num_steps=N // factor, nodes=nodes.copy())
    w = ens.w_increments.reshape(ens.num_paths, N // factor, factor, ens.d).sum(axis=2)
    b = ens.b_increments.reshape(N // factor, factor, ens.ell).sum(axis=1)
    return NoiseEnsemble(grid=grid, num_paths=ens.num_paths, w_increments=w,
                         b_increments=b, seed=ens.seed, b_stream=ens.b_stream)


@dataclass(frozen=True, eq=False)
class ProcessSample:
    """Discrete adapted process sample, shape (num_paths, N+1, dim).

    ``kind`` tags the role: "Y" for value-like, "Z" for integrand-like, "K"
    for reflection-increment processes.  K-like samples must start at 0 and
    be componentwise non-decreasing in time; this is checked at construction.
    """

    grid: TimeGrid
    values: np.ndarray
    kind: str = "Y"

    def __post_init__(self):
        if self.kind not in ("Y", "Z", "K"):
            raise ValueError(f"unknown process kind {self.kind!r}")
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 3 or vals.shape[1] != self.grid.num_steps + 1:
            raise ValueError("values must have shape (num_paths, N+1, dim)")
        if vals.shape[0] < 1:
            raise ValueError("need at least one path")
        if self.kind == "K":
            if np.any(np.abs(vals[:, 0]) > _K_TOL):
                raise ValueError("K-like process must start at 0")
            if np.any(np.diff(vals, axis=1) < -_K_TOL):
                raise ValueError("K-like process must be non-decreasing")
        vals.setflags(write=False)

    @property
    def num_paths(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


def empirical_norm(p: ProcessSample, kind: str, start: int = 0, stop: int | None = None) -> float:
    """Empirical norm estimator over the window [start, stop] of node indices.

    kind "S2": mean over paths of the running sup of |.|^2;
    kind "M2": mean over paths of the left-endpoint time integral of ||.||^2;
    kind "A2": mean over paths of the squared value at the last window node.
    """
    if p.values.size == 0:
        raise ValueError("empty sample")
    n_nodes = p.grid.num_steps + 1
    stop = n_nodes - 1 if stop is None else stop
    if not (0 <= start <= stop <= n_nodes - 1):
        raise ValueError(f"bad window [{start}, {stop}]")
    sq = np.sum(p.values[:, start:stop + 1] ** 2, axis=2)
    if kind == "S2":
        return float(np.mean(np.max(sq, axis=1)))
    if kind == "M2":
        if stop == start:
            return 0.0
        dt = p.grid.dt[start:stop]
        return float(np.mean(np.sum(sq[:, :-1] * dt, axis=1)))
    if kind == "A2":
        return float(np.mean(sq[:, -1]))
    raise ValueError(f"unknown norm kind {kind!r}")


def save_paths_csv(path, values: np.ndarray) -> None:
    """Dump a 3-D (path, step, component) array to CSV for cross-checks.

    Header is ``path,step,component,value``; floats are written with full
    round-trip precision so dumps are byte-stable.
    """
    vals = np.asarray(values, dtype=float)
    if vals.ndim != 3:
        raise ValueError("expected an array of shape (paths, steps, components)")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "step", "component", "value"])
        for k in range(vals.shape[0]):
            for i in range(vals.shape[1]):
                for j in range(vals.shape[2]):
                    writer.writerow([k, i, j, repr(float(vals[k, i, j]))])


def load_paths_csv(path) -> np.ndarray:
    """Read back a CSV produced by :func:`save_paths_csv`."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["path", "step", "component", "value"]:
            raise ValueError(f"unexpected header {header}")
        for rec in reader:
            rows.append((int(rec[0]), int(rec[1]), int(rec[2]), float(rec[3])))
    if not rows:
        raise ValueError("empty paths CSV")
    npaths = max(r[0] for r in rows) + 1
    nsteps = max(r[1] for r in rows) + 1
    ncomp = max(r[2] for r in rows) + 1
    out = np.full((npaths, nsteps, ncomp), np.nan)
    for k, i, j, v in rows:
        out[k, i, j] = v
    if np.any(np.isnan(out)):
        raise ValueError("paths CSV has missing entries")
    return out
