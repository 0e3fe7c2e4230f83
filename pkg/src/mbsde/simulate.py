"""Time grids, Brownian ensembles, Euler stepping and measure changes.

Randomness is counter based: path ``m`` of an ensemble with master seed ``s``
draws from ``Philox(key=s, counter=m << 128)``, so the path <-> stream map does
not depend on how many paths are generated or in which order.  Nested suffix
draws use a separate key tag per conditioning knot.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

__all__ = [
    "TimeGrid",
    "PathEnsemble",
    "MeasureWeight",
    "sample_brownian",
    "brownian_suffixes",
    "euler_forward",
    "euler_gamma",
    "stochastic_exponential",
    "girsanov_shift",
    "weighted_mean",
    "save_ensemble",
    "load_ensemble",
    "NonFiniteError",
]

_HEADER = struct.Struct("<qqqdq")
_MASK64 = (1 << 64) - 1


class NonFiniteError(FloatingPointError):
    """An evaluator produced a non-finite value at (path, knot)."""

    def __init__(self, what: str, path: int, knot: int):
        super().__init__(f"{what} returned a non-finite value at path {path}, knot {knot}")
        self.path = path
        self.knot = knot


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int
    window: Optional[tuple[int, int]] = None

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.window is not None:
            a, b = self.window
            if not 0 <= a < b <= self.N:
                raise ValueError(f"window {self.window} not inside knots 0..{self.N}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def t(self) -> np.ndarray:
        t = np.arange(self.N + 1, dtype=float) * self.dt
        t[-1] = self.T
        return t

    def knot(self, time: float) -> int:
        """Index of the knot at ``time``; raises if ``time`` is not a knot."""
        k = int(round(time / self.dt))
        if not 0 <= k <= self.N or abs(k * self.dt - time) > 1e-9 * max(1.0, self.T):
            raise ValueError(f"time {time} is not a knot of {self}")
        return k

    def with_window(self, a: int, b: int) -> "TimeGrid":
        return TimeGrid(self.T, self.N, (a, b))


def _path_normals(key: int, path: int, shape) -> np.ndarray:
    bitgen = np.random.Philox(key=key, counter=path << 128)
    return np.random.Generator(bitgen).standard_normal(shape)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """``M`` Brownian paths on ``grid``; ``dW`` is ``(M, N, n)``, ``W`` is ``(M, N+1, n)``."""

    grid: TimeGrid
    dW: np.ndarray
    seed: int
    W: np.ndarray = field(default=None, repr=False)
    shifted: bool = False

    def __post_init__(self):
        if self.W is None:
            M, N, n = self.dW.shape
            W = np.zeros((M, N + 1, n))
            np.cumsum(self.dW, axis=1, out=W[:, 1:, :])
            object.__setattr__(self, "W", W)

    @property
    def M(self) -> int:
        return self.dW.shape[0]

    @property
    def N(self) -> int:
        return self.dW.shape[1]

    @property
    def n(self) -> int:
        return self.dW.shape[2]

    @property
    def path_seeds(self) -> np.ndarray:
        """Philox counter offsets identifying each path's stream."""
        return np.arange(self.M, dtype=np.uint64)

    def coarsen(self, factor: int) -> "PathEnsemble":
        """Same Brownian paths observed on every ``factor``-th knot."""
        if factor < 1 or self.N % factor:
            raise ValueError(f"factor {factor} must divide N={self.N}")
        dW = self.dW.reshape(self.M, self.N // factor, factor, self.n).sum(axis=2)
        return PathEnsemble(TimeGrid(self.grid.T, self.N // factor), dW, self.seed)

    def subset(self, idx) -> "PathEnsemble":
        return PathEnsemble(self.grid, self.dW[idx], self.seed, shifted=self.shifted)


def sample_brownian(grid: TimeGrid, M: int, n: int, seed: int) -> PathEnsemble:
    """i.i.d. Gaussian increments with variance ``dt``, reproducible per path."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if seed < 0:
        raise ValueError("seed must be >= 0")
    key = seed & _MASK64
    scale = np.sqrt(grid.dt)
    dW = np.empty((M, grid.N, n))
    for m in range(M):
        dW[m] = _path_normals(key, m, (grid.N, n))
    dW *= scale
    return PathEnsemble(grid, dW, seed)


def brownian_suffixes(ensemble: PathEnsemble, k: int, paths, B: int, seed: int) -> np.ndarray:
    """Full paths that agree with ``ensemble`` up to knot ``k`` and branch afterwards.

    Returns an array of shape ``(len(paths), B, N+1, n)``.  Branch increments
    for conditioning path ``m`` come from a stream keyed by ``(seed, k)``.
    """
    paths = np.atleast_1d(np.asarray(paths, dtype=int))
    N, n = ensemble.N, ensemble.n
    key = (seed & _MASK64) | ((k + 1) << 64)
    scale = np.sqrt(ensemble.grid.dt)
    out = np.empty((len(paths), B, N + 1, n))
    out[:, :, : k + 1, :] = ensemble.W[paths, None, : k + 1, :]
    for i, m in enumerate(paths):
        inc = _path_normals(key, int(m), (B, N - k, n)) * scale
        out[i, :, k + 1:, :] = ensemble.W[m, k, :] + np.cumsum(inc, axis=1)
    return out


def euler_forward(ensemble: PathEnsemble, drift: Callable, x0) -> np.ndarray:
    """``X_{k+1} = X_k + drift(t_k, X_k, k) dt + dW_k`` with ``X_0 = x0``.

    ``drift(t, x, k)`` receives ``x`` of shape ``(M, n)`` and the knot index.
    """
    M, N, n = ensemble.dW.shape
    dt = ensemble.grid.dt
    t = ensemble.grid.t
    X = np.empty((M, N + 1, n))
    X[:, 0, :] = np.broadcast_to(np.asarray(x0, dtype=float), (n,))
    for k in range(N):
        b = np.asarray(drift(t[k], X[:, k, :], k), dtype=float)
        b = np.broadcast_to(b, (M, n))
        bad = ~np.isfinite(b)
        if bad.any():
            raise NonFiniteError("drift", int(np.argwhere(bad)[0, 0]), k)
        X[:, k + 1, :] = X[:, k, :] + b * dt + ensemble.dW[:, k, :]
    return X


def _check_finite(name, arr):
    bad = ~np.isfinite(arr)
    if bad.any():
        m, k = np.argwhere(bad)[0][:2]
        raise NonFiniteError(name, int(m), int(k))


def euler_gamma(ensemble: PathEnsemble, Qproc: np.ndarray, Rproc: np.ndarray,
                log: bool = False) -> np.ndarray:
    """Log-Euler solution of ``dG = G (Q dt + R' dW)``, ``G_0 = 1``.

    Returns ``G`` of shape ``(M, N+1)``, or ``log G`` when ``log`` is true.
    """
    M, N, n = ensemble.dW.shape
    Qproc = np.broadcast_to(np.asarray(Qproc, dtype=float), (M, N))
    Rproc = np.broadcast_to(np.asarray(Rproc, dtype=float), (M, N, n))
    _check_finite("Q", Qproc)
    _check_finite("R", Rproc)
    dt = ensemble.grid.dt
    inc = (Qproc - 0.5 * np.sum(Rproc ** 2, axis=2)) * dt + np.sum(Rproc * ensemble.dW, axis=2)
    logG = np.zeros((M, N + 1))
    np.cumsum(inc, axis=1, out=logG[:, 1:])
    return logG if log else np.exp(logG)


@dataclass(frozen=True, eq=False)
class MeasureWeight:
    """Discrete stochastic exponential of ``int H' dW`` along each path."""

    H: np.ndarray
    log_weights: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def terminal(self) -> np.ndarray:
        return np.exp(self.log_weights[:, -1])

    def ratio(self, k: int, j: Optional[int] = None) -> np.ndarray:
        """``E_j / E_k`` per path (``j`` defaults to the terminal knot)."""
        j = self.log_weights.shape[1] - 1 if j is None else j
        return np.exp(self.log_weights[:, j] - self.log_weights[:, k])

    def mean_terminal(self) -> tuple[float, float]:
        w = self.terminal
        return float(w.mean()), float(w.std(ddof=1) / np.sqrt(len(w)))

    def knot_means(self) -> tuple[np.ndarray, np.ndarray]:
        w = self.weights
        return w.mean(axis=0), w.std(axis=0, ddof=1) / np.sqrt(w.shape[0])


def stochastic_exponential(ensemble: PathEnsemble, H: np.ndarray) -> MeasureWeight:
    """``log E_{k+1} = log E_k + H_k' dW_k - |H_k|^2 dt / 2``; ``H`` is ``(M, N, n)``."""
    M, N, n = ensemble.dW.shape
    H = np.broadcast_to(np.asarray(H, dtype=float), (M, N, n))
    _check_finite("H", H)
    dt = ensemble.grid.dt
    inc = np.sum(H * ensemble.dW, axis=2) - 0.5 * np.sum(H * H, axis=2) * dt
    logw = np.zeros((M, N + 1))
    np.cumsum(inc, axis=1, out=logw[:, 1:])
    return MeasureWeight(np.array(H), logw)


def girsanov_shift(ensemble: PathEnsemble, weight: MeasureWeight) -> PathEnsemble:
    """Increments ``dW - H dt``, a Brownian motion under ``E_T . P``.

    Expectations under the new measure are weight-reweighted averages over the
    original ensemble; nothing is resimulated.
    """
    if weight.H.shape != ensemble.dW.shape:
        raise ValueError("weight was built on a different ensemble")
    dW = ensemble.dW - weight.H * ensemble.grid.dt
    return replace(ensemble, dW=dW, W=None, shifted=True)


def weighted_mean(values, weights=None) -> tuple[np.ndarray, np.ndarray]:
    """Mean of ``w * values`` over paths and its standard error."""
    values = np.asarray(values, dtype=float)
    if weights is not None:
        w = np.asarray(weights, dtype=float).reshape((-1,) + (1,) * (values.ndim - 1))
        values = values * w
    M = values.shape[0]
    return values.mean(axis=0), values.std(axis=0, ddof=1) / np.sqrt(M)


def save_ensemble(path, ensemble: PathEnsemble) -> None:
    """Flat little-endian layout: header (M, N, n, T, seed) then row-major increments."""
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(ensemble.M, ensemble.N, ensemble.n, ensemble.grid.T, ensemble.seed))
        fh.write(np.ascontiguousarray(ensemble.dW, dtype="<f8").tobytes())


def load_ensemble(path) -> PathEnsemble:
    raw = Path(path).read_bytes()
    M, N, n, T, seed = _HEADER.unpack_from(raw, 0)
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if data.size != M * N * n:
        raise ValueError(f"payload has {data.size} values, header says {M * N * n}")
    return PathEnsemble(TimeGrid(T, N), data.reshape(M, N, n).astype(float), seed)
