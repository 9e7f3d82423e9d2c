"""Seeded Wiener streams and explicit integration of the OU-bank systems.

Every path draws from its own Philox stream keyed by ``(seed, stream_id,
purpose)``, so results do not depend on batching or on the number of
worker threads.  All per-path arithmetic is elementwise; reductions over
the bank index are written as sequential sums for the same reason.
"""

from __future__ import annotations

import io
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import fft as sfft
from scipy import linalg

from .errors import DimensionError, DomainError, NonFiniteStateError, StabilityError
from .kernels import FbmKind, FbmSpec

__all__ = [
    "TimeGrid",
    "AugmentedState",
    "DriftDiffusion",
    "PathEnsemble",
    "wiener_increments",
    "refine_increments",
    "coarsen_increments",
    "lattice_spacing",
    "sample_type1_init",
    "initial_bank",
    "draw_noise",
    "simulate_mafbm",
    "simulate_exact_fbm_type2",
    "integrate_prior",
    "integrate_posterior",
    "worker_count",
]

PURPOSE_WIENER = 0
PURPOSE_INIT = 1
PURPOSE_REFINE = 2

CHUNK = 1024
STABILITY_LIMIT = 0.5
JITTER_MAX = 1e-10
BINARY_MAGIC = b"MAFB"
BINARY_VERSION = 1
_HEADER = struct.Struct("<4sHHIIdd")


def worker_count(threads: int | None = None) -> int:
    """Worker threads: explicit value, else ``FRACDYN_THREADS`` (0 = auto), else CPU count."""
    if threads is None:
        env = os.environ.get("FRACDYN_THREADS", "0").strip() or "0"
        try:
            threads = int(env)
        except ValueError as exc:
            raise DomainError(f"FRACDYN_THREADS must be an integer, got {env!r}") from exc
    if threads < 0:
        raise DomainError("thread count must be >= 0")
    if threads == 0:
        threads = os.cpu_count() or 1
    return int(threads)


# ------------------------------------------------------------------ grids


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_n = t0 + n dt`` for ``n = 0..steps``.

    When ``speeds`` is given the explicit-Euler gate ``gamma_max * dt < 1/2``
    is enforced at construction.
    """

    t0: float
    dt: float
    steps: int
    speeds: tuple | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not float(self.dt) > 0.0 or not math.isfinite(float(self.dt)):
            raise DomainError(f"dt must be positive, got {self.dt}")
        if int(self.steps) < 1 or int(self.steps) != self.steps:
            raise DomainError(f"steps must be a positive integer, got {self.steps}")
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "steps", int(self.steps))
        if self.speeds is not None:
            sp = tuple(float(g) for g in np.asarray(getattr(self.speeds, "speeds", self.speeds)).ravel())
            object.__setattr__(self, "speeds", sp)
            check_stability(sp, self.dt)

    @classmethod
    def span(cls, t_end: float, steps: int, t0: float = 0.0, speeds=None) -> "TimeGrid":
        return cls(t0, (float(t_end) - t0) / int(steps), steps, speeds)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * self.steps

    def refine(self, m: int) -> "TimeGrid":
        m = int(m)
        if m < 1:
            raise DomainError("refinement factor must be >= 1")
        return TimeGrid(self.t0, self.dt / m, self.steps * m)

    def node(self, t: float) -> int:
        """Index of the grid node nearest to ``t``."""
        n = int(round((float(t) - self.t0) / self.dt))
        if n < 0 or n > self.steps:
            raise DomainError(f"time {t} lies outside [{self.t0}, {self.t_end}]")
        return n


def check_stability(speeds, dt: float) -> None:
    """Raise :class:`StabilityError` naming the offending speed if ``gamma dt >= 1/2``."""
    sp = np.asarray(getattr(speeds, "speeds", speeds), dtype=float).ravel()
    if sp.size == 0:
        return
    gmax = float(sp.max())
    if gmax * dt >= STABILITY_LIMIT:
        k = int(np.argmax(sp)) + 1
        legal = STABILITY_LIMIT / gmax
        raise StabilityError(
            f"explicit OU step unstable: gamma_{k} = {gmax:.6g} with dt = {dt:.6g} gives "
            f"gamma*dt = {gmax * dt:.4g} >= {STABILITY_LIMIT}; use dt < {legal:.6g}")


# ------------------------------------------------------------------ state


@dataclass(frozen=True)
class AugmentedState:
    """Initial value of ``Z = (X, Y_1..Y_K)``.

    ``y=None`` means "draw per path according to the fBM type": zeros for
    Type II, the stationary law for Type I.
    """

    x: np.ndarray
    y: np.ndarray | None = None

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        if x.ndim != 1:
            raise DimensionError("x must be a D-vector")
        if not np.all(np.isfinite(x)):
            raise DomainError("initial state must be finite")
        object.__setattr__(self, "x", x)
        if self.y is not None:
            y = np.asarray(self.y, dtype=float)
            if y.ndim == 1:
                y = y[:, None] * np.ones((1, x.size))
            if y.ndim != 2 or y.shape[1] != x.size:
                raise DimensionError(f"y must be K x {x.size}, got {y.shape}")
            if not np.all(np.isfinite(y)):
                raise DomainError("initial state must be finite")
            object.__setattr__(self, "y", y)

    @property
    def dim(self) -> int:
        return self.x.size

    @classmethod
    def zeros(cls, dim: int = 1, count: int | None = None) -> "AugmentedState":
        y = None if count is None else np.zeros((count, dim))
        return cls(np.zeros(dim), y)


@dataclass(frozen=True)
class DriftDiffusion:
    """Prior SDE coefficients, vectorised over a batch of paths.

    ``drift(x, t)`` and ``diffusion(x, t)`` receive ``x`` of shape (P, D) and
    return (P, D) arrays (or anything broadcastable to it); ``diffusion``
    returns the diagonal of the D x D diffusion matrix.  For the
    Stratonovich interpretation ``diffusion_dx`` may supply the diagonal
    derivative d sigma_i / d x_i; otherwise a central difference is used.
    Callables must be safe to call from several threads at once.
    """

    drift: Callable
    diffusion: Callable
    interpretation: str = "ito"
    diffusion_dx: Callable | None = None
    state_dependent: bool = True

    def __post_init__(self):
        interp = str(self.interpretation).lower()
        if interp not in ("ito", "stratonovich"):
            raise DomainError(f"interpretation must be 'ito' or 'stratonovich', got {self.interpretation!r}")
        object.__setattr__(self, "interpretation", interp)

    @classmethod
    def constant(cls, drift_coef: float = 0.0, sigma: float = 1.0, interpretation: str = "ito"):
        """Linear drift ``drift_coef * x`` with constant diffusion ``sigma``."""
        a, s = float(drift_coef), float(sigma)
        return cls(lambda x, t: a * x, lambda x, t: np.full_like(x, s), interpretation,
                   lambda x, t: np.zeros_like(x), state_dependent=False)

    @classmethod
    def fou(cls, theta: float, sigma: float = 1.0, interpretation: str = "ito"):
        return cls.constant(-float(theta), sigma, interpretation)

    def sigma(self, x, t):
        s = np.asarray(self.diffusion(x, t), dtype=float)
        if s.ndim == x.ndim + 1:
            off = s - np.einsum("...ii->...i", s)[..., None] * np.eye(x.shape[-1])
            if np.any(off != 0):
                raise DomainError("only diagonal diffusion is supported")
            s = np.einsum("...ii->...i", s)
        s = np.broadcast_to(s, x.shape)
        if np.any(s == 0):
            raise DomainError("diffusion must be nonzero on the diagonal")
        return s

    def sigma_dx(self, x, t):
        if self.diffusion_dx is not None:
            return np.broadcast_to(np.asarray(self.diffusion_dx(x, t), dtype=float), x.shape)
        h = 1e-6 * np.maximum(1.0, np.abs(x))
        return (self.sigma(x + h, t) - self.sigma(x - h, t)) / (2 * h)


# --------------------------------------------------------------- ensemble


@dataclass
class PathEnsemble:
    """Batch of trajectories ``paths[p, n, c]`` saved at ``grid`` nodes ``node_index``."""

    grid: TimeGrid
    paths: np.ndarray
    seed: int
    stream_ids: np.ndarray
    node_index: np.ndarray | None = None
    kind: str = "state"
    components: list | None = None

    def __post_init__(self):
        self.paths = np.asarray(self.paths, dtype=float)
        if self.paths.ndim == 2:
            self.paths = self.paths[:, :, None]
        if self.node_index is None:
            self.node_index = np.arange(self.grid.steps + 1)
        self.node_index = np.asarray(self.node_index, dtype=np.int64)
        self.stream_ids = np.asarray(self.stream_ids, dtype=np.int64)
        if self.paths.shape[1] != self.node_index.size:
            raise DimensionError("paths and node_index disagree")
        if self.paths.shape[0] != self.stream_ids.size:
            raise DimensionError("one stream id per path required")

    @property
    def times(self) -> np.ndarray:
        return self.grid.t0 + self.grid.dt * self.node_index

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def dim(self) -> int:
        return self.paths.shape[2]

    def component(self, c: int = 0) -> np.ndarray:
        return self.paths[:, :, c]

    def at(self, t: float) -> np.ndarray:
        """Values at the saved node nearest to ``t``: shape (P, dim)."""
        n = self.grid.node(t)
        hit = np.nonzero(self.node_index == n)[0]
        if hit.size == 0:
            raise DomainError(f"node for t={t} was not saved")
        return self.paths[:, hit[0], :]

    # -- export

    def csv_text(self) -> str:
        P, _, C = self.paths.shape
        if C == 1:
            header = ["t"] + [f"path_{p}" for p in range(P)]
        else:
            header = ["t"] + [f"c{c}_path_{p}" for c in range(C) for p in range(P)]
        # component blocks: all paths of component 0, then component 1, ...
        body = np.concatenate([self.times[:, None]] + [self.paths[:, :, c].T for c in range(C)], axis=1)
        buf = io.StringIO()
        np.savetxt(buf, body, fmt="%.17g", delimiter=",", header=",".join(header), comments="", newline="\n")
        return buf.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.csv_text())

    def to_binary(self, path) -> None:
        idx = self.node_index
        step = int(idx[1] - idx[0]) if idx.size > 1 else 1
        if idx.size > 1 and np.any(np.diff(idx) != step):
            raise DomainError("binary export needs uniformly spaced nodes")
        P, N, C = self.paths.shape
        head = _HEADER.pack(BINARY_MAGIC, BINARY_VERSION, C, P, N, float(self.times[0]), self.grid.dt * step)
        with open(path, "wb") as fh:
            fh.write(head)
            fh.write(np.ascontiguousarray(self.paths, dtype="<f8").tobytes(order="C"))

    @staticmethod
    def read_binary(path):
        """Return ``(times, paths)`` from a binary dump."""
        with open(path, "rb") as fh:
            raw = fh.read()
        magic, version, C, P, N, t0, dt = _HEADER.unpack_from(raw, 0)
        if magic != BINARY_MAGIC:
            raise DomainError("not a path dump (bad magic)")
        if version != BINARY_VERSION:
            raise DomainError(f"unsupported dump version {version}")
        data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
        if data.size != P * N * C:
            raise DomainError("truncated path dump")
        return t0 + dt * np.arange(N), data.reshape(P, N, C).copy()


# ------------------------------------------------------------------ noise


def _generator(seed: int, stream_id: int, purpose: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream_id), int(purpose)))
    return np.random.Generator(np.random.Philox(ss))


LATTICE_BITS = 44


def lattice_spacing(dt: float) -> float:
    """Power-of-two quantum on which increments of step ``dt`` are drawn.

    Values are stored as integer multiples of ``q = 2**(floor(log2 sqrt dt) - 44)``.
    Any sum of such values below ``2**53 q`` (several hundred standard
    deviations) is computed exactly, in any order, which is what lets refined
    streams coarse-sum to their parents bit for bit.  The relative rounding
    of a typical increment is about 1e-13.
    """
    return 2.0 ** (math.floor(math.log2(math.sqrt(float(dt)))) - LATTICE_BITS)


def _snap(x, q):
    return np.round(x / q) * q


def wiener_increments(seed: int, stream_id: int, grid: TimeGrid, dim: int = 1) -> np.ndarray:
    """``grid.steps x dim`` i.i.d. N(0, dt) increments of path ``stream_id`` (on the dt lattice)."""
    rng = _generator(seed, stream_id, PURPOSE_WIENER)
    z = rng.standard_normal((grid.steps, int(dim))) * math.sqrt(grid.dt)
    return _snap(z, lattice_spacing(grid.dt))


def coarsen_increments(fine: np.ndarray, m: int) -> np.ndarray:
    """Sum consecutive blocks of ``m`` increments, strictly left to right."""
    fine = np.asarray(fine, dtype=float)
    n = fine.shape[0] // m
    blocks = fine[: n * m].reshape((n, m) + fine.shape[1:])
    # cumsum is a sequential accumulation; np.sum would pair terms
    return np.cumsum(blocks, axis=1)[:, -1]


def refine_increments(parent: np.ndarray, dt: float, m: int, seed: int, stream_id: int) -> np.ndarray:
    """Split each parent increment (step ``dt``) into ``m`` Brownian-bridge sub-increments.

    Sub-increments live on the lattice of the parent step, so every block
    sums to its parent exactly.  Parents must themselves be lattice values,
    as produced by :func:`wiener_increments` or an earlier refinement.
    """
    parent = np.asarray(parent, dtype=float)
    if parent.ndim == 1:
        parent = parent[:, None]
    m = int(m)
    if m < 1:
        raise DomainError("refinement factor must be >= 1")
    if m == 1:
        return parent.copy()
    q = lattice_spacing(dt)
    if not np.array_equal(_snap(parent, q), parent):
        raise DomainError("parent increments are not on the lattice of step dt")
    N, D = parent.shape
    rng = _generator(seed, stream_id, PURPOSE_REFINE)
    z = rng.standard_normal((N, m, D)) * math.sqrt(dt / m)
    # conditional law given the block sum: remove the mean, add parent/m
    sub = _snap(z - z.mean(axis=1, keepdims=True) + parent[:, None, :] / m, q)
    sub[:, -1, :] = parent - np.cumsum(sub[:, :-1, :], axis=1)[:, -1, :]
    if not np.array_equal(coarsen_increments(sub.reshape(N * m, D), m), parent):
        raise NonFiniteStateError("refined increments left the exact-summation range")
    return sub.reshape(N * m, D)


def sample_type1_init(grid, seed: int, stream_id: int, dim: int = 1) -> np.ndarray:
    """Stationary OU-bank state: N(0, C) with ``C_ij = 1/(gamma_i + gamma_j)``, shape (K, dim)."""
    g = np.asarray(getattr(grid, "speeds", grid), dtype=float).ravel()
    if np.any(g <= 0):
        raise DomainError("stationary initial state needs strictly positive speeds")
    C = 1.0 / (g[:, None] + g[None, :])
    L = _cholesky_jitter(C)
    z = _generator(seed, stream_id, PURPOSE_INIT).standard_normal((g.size, int(dim)))
    return L @ z


def _cholesky_jitter(C):
    jitter = 0.0
    scale = float(np.mean(np.diag(C)))
    while True:
        try:
            return linalg.cholesky(C + jitter * scale * np.eye(C.shape[0]), lower=True)
        except linalg.LinAlgError:
            jitter = 1e-14 if jitter == 0.0 else jitter * 10
            if jitter > JITTER_MAX:
                raise DomainError("stationary covariance is not numerically positive definite") from None


def initial_bank(spec: FbmSpec, grid, seed: int, stream_id: int, dim: int = 1) -> np.ndarray:
    """Y(0) for one path: stationary draw for Type I, zeros for Type II."""
    return _initial_banks(spec, grid, seed, np.array([stream_id]), dim)[0]


def _initial_banks(spec, grid, seed, ids, dim):
    g = np.asarray(getattr(grid, "speeds", grid), dtype=float).ravel()
    out = np.zeros((ids.size, g.size, int(dim)))
    if spec.kind is FbmKind.TYPE_I and not getattr(grid, "degenerate", False) and np.all(g > 0):
        L = _cholesky_jitter(1.0 / (g[:, None] + g[None, :]))
        for i, s in enumerate(ids):
            out[i] = L @ _generator(seed, s, PURPOSE_INIT).standard_normal((g.size, int(dim)))
    return out


def draw_noise(spec: FbmSpec, grid, tgrid: TimeGrid, seed: int, paths: int, dim: int = 1,
               stream_offset: int = 0):
    """The ``(dW, Y(0))`` pair the integrators consume: shapes (P, N, D) and (P, K, D)."""
    ids = np.arange(int(paths), dtype=np.int64) + int(stream_offset)
    dW = np.stack([wiener_increments(seed, s, tgrid, dim) for s in ids])
    return dW, _initial_banks(spec, grid, seed, ids, dim)


# ---------------------------------------------------------------- stepping


def _bank_step(y, dw, gamma, omega, dt):
    """Euler step of the bank; returns (y_next, dB) with dB = sum_k omega_k dY_k.

    ``y`` is (P, K, D) and ``dw`` (P, D).  The sum over k is sequential so
    every path's result is independent of the batch it is computed in.
    """
    dy = dw[:, None, :] - (gamma[None, :, None] * y) * dt
    db = omega[0] * dy[:, 0, :]
    for k in range(1, gamma.size):
        db = db + omega[k] * dy[:, k, :]
    return y + dy, db


def _speeds_weights(grid, w):
    g = np.asarray(getattr(grid, "speeds", grid), dtype=float).ravel()
    om = np.asarray(getattr(w, "weights", w), dtype=float).ravel()
    if g.shape != om.shape:
        raise DimensionError(f"{om.size} weights for {g.size} speeds")
    return g, om


def _chunks(paths, stream_offset):
    ids = np.arange(paths, dtype=np.int64) + int(stream_offset)
    return [ids[i:i + CHUNK] for i in range(0, paths, CHUNK)]


def _run_chunks(fn, chunks, threads):
    n = worker_count(threads)
    if n <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=min(n, len(chunks))) as pool:
        return list(pool.map(fn, chunks))


def _record_index(tgrid: TimeGrid, record):
    if record is None:
        return np.arange(tgrid.steps + 1)
    idx = np.unique(np.asarray(record, dtype=np.int64))
    if idx.size == 0 or idx[0] < 0 or idx[-1] > tgrid.steps:
        raise DomainError("recorded node indices out of range")
    return idx


def simulate_mafbm(spec: FbmSpec, grid, w, tgrid: TimeGrid, seed: int, paths: int, *,
                   dim: int = 1, stream_offset: int = 0, record=None, threads: int | None = None
                   ) -> PathEnsemble:
    """Paths of the OU-bank approximation ``B^(t_n) = sum_k w_k (Y_k(t_n) - Y_k(0))``."""
    g, om = _speeds_weights(grid, w)
    check_stability(g, tgrid.dt)
    idx = _record_index(tgrid, record)
    want = np.zeros(tgrid.steps + 1, dtype=bool)
    want[idx] = True

    def run(ids):
        P = ids.size
        dW = np.stack([wiener_increments(seed, s, tgrid, dim) for s in ids])
        y = _initial_banks(spec, grid, seed, ids, dim)
        b = np.zeros((P, dim))
        out = np.empty((P, idx.size, dim))
        j = 0
        if want[0]:
            out[:, 0] = b
            j = 1
        for n in range(tgrid.steps):
            y, db = _bank_step(y, dW[:, n], g, om, tgrid.dt)
            b = b + db
            if want[n + 1]:
                out[:, j] = b
                j += 1
        return out

    chunks = _chunks(paths, stream_offset)
    res = _run_chunks(run, chunks, threads)
    return PathEnsemble(tgrid, np.concatenate(res, axis=0), seed, np.concatenate(chunks), idx, kind="mafbm")


def simulate_exact_fbm_type2(hurst: float, tgrid: TimeGrid, seed: int, paths: int, refine: int = 10, *,
                             dim: int = 1, stream_offset: int = 0, method: str = "fft",
                             threads: int | None = None) -> PathEnsemble:
    """Riemann-Liouville fBM at the coarse nodes, sharing the Wiener stream of :func:`simulate_mafbm`.

    Left-point Riemann sum on the ``refine``-fold grid,
    ``B(t_j) = sum_{i<j} (t_j - t_i)^{H-1/2} dW_i / Gamma(H+1/2)``; the
    fine increments are Brownian-bridge refinements of the coarse ones.
    ``method="fft"`` evaluates the sum as a convolution, ``"direct"``
    term by term.
    """
    h = float(hurst)
    if not 0.0 < h < 1.0:
        raise DomainError(f"Hurst index must lie in (0, 1), got {hurst}")
    m = int(refine)
    if m < 1:
        raise DomainError("refine must be >= 1")
    if method not in ("fft", "direct"):
        raise DomainError(f"unknown method {method!r}")
    fine = tgrid.refine(m)
    nf = fine.steps
    lags = np.arange(1, nf + 1) * fine.dt
    kern = lags ** (h - 0.5) / math.gamma(h + 0.5)
    nodes = np.arange(tgrid.steps + 1) * m

    def one(sid):
        dW = wiener_increments(seed, sid, tgrid, dim)
        dWf = refine_increments(dW, tgrid.dt, m, seed, sid)
        out = np.zeros((tgrid.steps + 1, dim))
        if h == 0.5:
            out[1:] = np.cumsum(dWf, axis=0)[nodes[1:] - 1]
            return out
        if method == "direct":
            for n in range(1, tgrid.steps + 1):
                j = nodes[n]
                # increments i = 0..j-1 with lags j - i
                out[n] = kern[j - 1::-1][:j] @ dWf[:j]
            return out
        L = sfft.next_fast_len(2 * nf)
        kf = sfft.rfft(kern, L)
        for d in range(dim):
            conv = sfft.irfft(sfft.rfft(dWf[:, d], L) * kf, L)
            # conv[j-1] = sum_i kern[j-1-i] dW_i  =  B(t_j)
            out[1:, d] = conv[nodes[1:] - 1]
        return out

    def run(ids):
        return np.stack([one(s) for s in ids])

    chunks = _chunks(paths, stream_offset)
    res = _run_chunks(run, chunks, threads)
    return PathEnsemble(tgrid, np.concatenate(res, axis=0), seed, np.concatenate(chunks), kind="fbm2")


# ------------------------------------------------------- augmented system


def _resolve_init(init, spec, grid, seed, ids, dim_hint):
    if init is None:
        init = AugmentedState.zeros(dim_hint)
    if not isinstance(init, AugmentedState):
        init = AugmentedState(init)
    D = init.dim
    K = np.asarray(getattr(grid, "speeds", grid)).size
    if init.y is not None:
        if init.y.shape[0] != K:
            raise DimensionError(f"initial bank has {init.y.shape[0]} rows for K={K}")
        if spec.kind is FbmKind.TYPE_II and np.any(init.y != 0):
            raise DomainError("Type II requires Y_k(0) = 0")
        y0 = np.broadcast_to(init.y, (ids.size, K, D)).copy()
    else:
        y0 = _initial_banks(spec, grid, seed, ids, D)
    x0 = np.broadcast_to(init.x, (ids.size, D)).copy()
    return x0, y0


def _integrate(model: DriftDiffusion, control, spec, grid, w, tgrid, init, seed, paths,
               stream_offset, record, threads, channel="noise"):
    if channel not in ("noise", "state"):
        raise DomainError(f"control channel must be 'noise' or 'state', got {channel!r}")
    g, om = _speeds_weights(grid, w)
    check_stability(g, tgrid.dt)
    idx = _record_index(tgrid, record)
    want = np.zeros(tgrid.steps + 1, dtype=bool)
    want[idx] = True
    wbar = float(np.sum(om))
    strat = model.interpretation == "stratonovich"
    dt = tgrid.dt
    dim_hint = 1 if init is None else np.atleast_1d(getattr(init, "x", init)).size

    def run(ids):
        # overflow surfaces as a NonFiniteStateError with the step index instead
        with np.errstate(over="ignore", invalid="ignore"):
            return _run(ids)

    def _run(ids):
        x, y = _resolve_init(init, spec, grid, seed, ids, dim_hint)
        P, K, D = y.shape
        dW = np.stack([wiener_increments(seed, s, tgrid, D) for s in ids])
        out = np.empty((P, idx.size, D * (K + 1)))
        kl = np.zeros(P)
        j = 0

        def save(x, y, j):
            out[:, j, :D] = x
            out[:, j, D:] = y.reshape(P, K * D)

        if want[0]:
            save(x, y, 0)
            j = 1
        for n in range(tgrid.steps):
            t = tgrid.t0 + n * dt
            dw = dW[:, n]
            if control is not None:
                u = np.broadcast_to(np.asarray(control(x, y, t), dtype=float), (P, D))
                kl = kl + 0.5 * np.sum(u * u, axis=1) * dt
                dw_eff = dw + u * dt if channel == "noise" else dw
            else:
                u = None
                dw_eff = dw
            sig = model.sigma(x, t)
            y, db = _bank_step(y, dw_eff, g, om, dt)
            xn = x + np.asarray(model.drift(x, t), dtype=float) * dt + sig * db
            if u is not None and channel == "state":
                xn = xn + sig * u * dt
            if strat and model.state_dependent:
                xn = xn + 0.5 * wbar * wbar * sig * model.sigma_dx(x, t) * (dw * dw)
            x = xn
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
                raise NonFiniteStateError(f"non-finite state at step {n + 1}", step=n + 1)
            if want[n + 1]:
                save(x, y, j)
                j += 1
        return out, kl

    chunks = _chunks(paths, stream_offset)
    res = _run_chunks(run, chunks, threads)
    ens = PathEnsemble(tgrid, np.concatenate([r[0] for r in res]), seed, np.concatenate(chunks), idx,
                       kind="augmented")
    D = ens.dim // (g.size + 1)
    ens.components = [f"x{d}" for d in range(D)] + [f"y{k + 1}_{d}" for k in range(g.size) for d in range(D)]
    return ens, np.concatenate([r[1] for r in res])


def integrate_prior(model: DriftDiffusion, spec: FbmSpec, grid, w, tgrid: TimeGrid,
                    init: AugmentedState | None, seed: int, paths: int = 1, *, stream_offset: int = 0,
                    record=None, threads: int | None = None) -> PathEnsemble:
    """Integrate the augmented prior system ``Z = (X, Y_1..Y_K)``.

    Per step, with one shared increment dW per dimension::

        dY_k = -gamma_k Y_k dt + dW
        dX   = b(X, t) dt + sigma(X, t) * sum_k w_k dY_k

    which is the augmented drift ``b - sigma sum_k w_k gamma_k Y_k`` with
    noise ``(sum_k w_k) sigma dW``.  Ito models use Euler-Maruyama;
    Stratonovich models add the diagonal Milstein term
    ``0.5 (sum_k w_k)^2 sigma sigma' dW^2``.  Saved states have components
    ``[X (D), Y_1 (D), ..., Y_K (D)]``.
    """
    ens, _ = _integrate(model, None, spec, grid, w, tgrid, init, seed, paths, stream_offset, record, threads)
    return ens


def integrate_posterior(model: DriftDiffusion, control: Callable, spec: FbmSpec, grid, w, tgrid: TimeGrid,
                        init: AugmentedState | None, seed: int, paths: int = 1, *, stream_offset: int = 0,
                        record=None, threads: int | None = None, channel: str = "noise"):
    """Controlled system; returns ``(ensemble, kl_energy)`` with one energy per path.

    ``control(x, y, t)`` gets x (P, D), y (P, K, D) and returns u (P, D).
    With ``channel="noise"`` the control shifts the driving noise,
    ``dW -> dW + u dt``, so it reaches X as ``(sum_k w_k) sigma u`` and
    every Y_k as ``u``.  This is the drift change along the noise direction
    for which ``0.5 * int |u|^2 dt`` is the path-space KL divergence.
    ``channel="state"`` adds ``sigma u dt`` to X alone and leaves the bank
    untouched.  The energy is the left-point Riemann sum of ``0.5 |u|^2``
    in both cases.
    """
    if control is None:
        raise DomainError("control function required")
    return _integrate(model, control, spec, grid, w, tgrid, init, seed, paths, stream_offset, record, threads,
                      channel)
