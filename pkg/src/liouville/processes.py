"""Samplers for the radial processes and their supremum statistics.

Every sampler has a batched form ``*_batch(grid, rng, n)`` returning an
``(n, len(times))`` array, and a single-path form taking an integer seed and
returning a :class:`PathSample`.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, zeta

from .errors import DomainError
from .special_functions import LiouvilleParams
from .streams import Accumulator, batches, make_rng, parallel_map, stream_id

# Discrete-monitoring barrier shift -zeta(1/2)/sqrt(2 pi) (Broadie-Glasserman-Kou).
BARRIER_SHIFT = float(-zeta(0.5) / math.sqrt(2 * math.pi))


class PathKind(enum.Enum):
    BM = "BM"
    BRIDGE = "Bridge"
    TORUS_RADIAL = "TorusRadial"
    BESSEL3 = "Bessel3"
    WILLIAMS = "Williams"


@dataclass(frozen=True)
class TimeGrid:
    """Symmetric grid on [-t_half, t_half] with ``n_steps`` points per side (0 shared)."""

    t_half: float
    n_steps: int

    def __post_init__(self):
        if not self.t_half > 0:
            raise DomainError(f"t_half must be positive, got {self.t_half}")
        if self.n_steps < 2:
            raise DomainError(f"n_steps must be >= 2, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.t_half / (self.n_steps - 1)

    @property
    def half_times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_half, self.n_steps)

    @property
    def times(self) -> np.ndarray:
        h = self.half_times
        return np.concatenate([-h[:0:-1], h])

    @property
    def zero_index(self) -> int:
        return self.n_steps - 1


@dataclass
class PathSample:
    grid: TimeGrid
    values: np.ndarray
    kind: PathKind
    seed: int
    one_sided: bool = False

    @property
    def times(self) -> np.ndarray:
        return self.grid.half_times if self.one_sided else self.grid.times

    def value_at_zero(self) -> float:
        return float(self.values[0 if self.one_sided else self.grid.zero_index])


@dataclass(frozen=True)
class SupEvent:
    """The event that the radial process stays below ``b`` on [-t_half, t_half]."""

    b: float
    t_half: float

    def __post_init__(self):
        if not self.b > 0:
            raise DomainError(f"barrier must be positive, got {self.b}")

    def contains(self, paths: np.ndarray) -> np.ndarray:
        return paths.max(axis=-1) < self.b


def _two_sided(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Glue one-sided arrays (value at |s|) into a two-sided array over grid.times."""
    return np.concatenate([left[:, :0:-1], right], axis=1)


# ------------------------------------------------------------------ batches

def bm_half_batch(grid: TimeGrid, rng: np.random.Generator, n: int) -> np.ndarray:
    """One-sided Brownian motion on grid.half_times, starting at 0."""
    out = np.zeros((n, grid.n_steps))
    inc = rng.standard_normal((n, grid.n_steps - 1))
    inc *= math.sqrt(grid.dt)
    np.cumsum(inc, axis=1, out=out[:, 1:])
    return out


def bm_batch(grid: TimeGrid, rng: np.random.Generator, n: int) -> np.ndarray:
    right = bm_half_batch(grid, rng, n)
    left = bm_half_batch(grid, rng, n)
    return _two_sided(left, right)


def bridge_batch(grid: TimeGrid, rng: np.random.Generator, n: int) -> np.ndarray:
    """Brownian bridge 0 -> 0 on [0, t_half] by the conditioned-increment recursion.

    X_{k+1} = X_k (t - s_{k+1})/(t - s_k) + sqrt(dt (t - s_{k+1})/(t - s_k)) xi_k.
    Dividing by (t - s) turns the recursion into a cumulative sum, which is
    what is evaluated here.
    """
    s = grid.half_times
    rem = grid.t_half - s
    out = np.zeros((n, grid.n_steps))
    if grid.n_steps == 2:
        return out
    # Y_k = X_k / (t - s_k) has independent increments of variance dt / (rem_{k-1} rem_k).
    sd = np.sqrt(grid.dt / (rem[:-2] * rem[1:-1]))
    y = np.cumsum(rng.standard_normal((n, grid.n_steps - 2)) * sd, axis=1)
    out[:, 1:-1] = y * rem[1:-1]
    return out


def torus_radial_batch(grid: TimeGrid, rng: np.random.Generator, n: int) -> np.ndarray:
    """(B^e(|s|) + sign(s) B^o(|s|)) / sqrt 2 with B^e a BM and B^o an independent bridge."""
    even = bm_half_batch(grid, rng, n)
    odd = bridge_batch(grid, rng, n)
    c = 1.0 / math.sqrt(2.0)
    return _two_sided((even - odd) * c, (even + odd) * c)


def torus_radial_from_bm(paths: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Map two-sided BM paths to torus-radial paths: B(s) - s (B(t) - B(-t)) / (2t).

    Exact in law and used to couple cylinder and torus experiments on common randomness.
    """
    tilt = (paths[:, -1] - paths[:, 0]) / (2.0 * grid.t_half)
    return paths - np.outer(tilt, grid.times)


def _norm3(x0: float, grid: TimeGrid, rng: np.random.Generator, n: int,
           drift: float = 0.0) -> np.ndarray:
    coords = [bm_half_batch(grid, rng, n) for _ in range(3)]
    first = x0 + coords[0] + drift * grid.half_times
    return np.sqrt(first ** 2 + coords[1] ** 2 + coords[2] ** 2)


def bessel3_half_batch(b_start: float, grid: TimeGrid, rng: np.random.Generator, n: int,
                       drift: float = 0.0) -> np.ndarray:
    """One-sided 3d Bessel process from ``b_start`` as the norm of three Brownian coordinates.

    With ``drift`` > 0 and ``b_start`` = 0 this is the radial part of 3d Brownian
    motion with drift of that magnitude, i.e. the process with generator
    1/2 d^2/dx^2 + drift coth(drift x) d/dx.
    """
    if b_start < 0:
        raise DomainError(f"b_start must be >= 0, got {b_start}")
    if drift and b_start:
        raise DomainError("drifted Bessel paths are only exact when started from 0")
    return _norm3(b_start, grid, rng, n, drift)


def bessel3_batch(b_start: float, grid: TimeGrid, rng: np.random.Generator, n: int) -> np.ndarray:
    right = bessel3_half_batch(b_start, grid, rng, n)
    left = bessel3_half_batch(b_start, grid, rng, n)
    return _two_sided(left, right)


# ------------------------------------------------------------------ single paths

def sample_bm(grid: TimeGrid, seed: int) -> PathSample:
    return PathSample(grid, bm_batch(grid, make_rng(seed), 1)[0], PathKind.BM, seed)


def sample_bridge(grid: TimeGrid, seed: int) -> PathSample:
    return PathSample(grid, bridge_batch(grid, make_rng(seed), 1)[0], PathKind.BRIDGE, seed,
                      one_sided=True)


def sample_torus_radial(grid: TimeGrid, seed: int) -> PathSample:
    return PathSample(grid, torus_radial_batch(grid, make_rng(seed), 1)[0],
                      PathKind.TORUS_RADIAL, seed)


def sample_bessel3(b_start: float, grid: TimeGrid, seed: int) -> PathSample:
    return PathSample(grid, bessel3_batch(b_start, grid, make_rng(seed), 1)[0],
                      PathKind.BESSEL3, seed)


def conditioned_descent(m_sup: float, nu: float, grid: TimeGrid,
                        rng: np.random.Generator) -> np.ndarray:
    """Brownian motion with drift -nu from m_sup conditioned to stay below m_sup.

    Realised exactly as m_sup minus the norm of a 3d Brownian motion with drift of
    magnitude nu started at the origin; nu = 0 gives m_sup minus a 3d Bessel process.
    """
    return m_sup - bessel3_half_batch(0.0, grid, rng, 1, drift=nu)[0]


def sample_williams(lam: float, params: LiouvilleParams, grid: TimeGrid,
                    seed: int) -> tuple[PathSample, float, float]:
    """Williams decomposition of Brownian motion with drift lam - Q on [0, t_half].

    Returns the one-sided path, its supremum M and the hitting time T of M
    (``inf`` when the ascent does not reach M before t_half).
    """
    q = params.q_charge
    if not lam < q:
        raise DomainError(f"Williams sampler needs lambda < Q={q}, got {lam}")
    nu = q - lam
    rng = make_rng(seed)
    m_sup = -math.log1p(-rng.random()) / (2.0 * nu)
    ascent = bm_half_batch(grid, rng, 1)[0] + nu * grid.half_times
    crossed = np.flatnonzero(ascent >= m_sup)
    if crossed.size == 0:
        return PathSample(grid, ascent, PathKind.WILLIAMS, seed, one_sided=True), m_sup, math.inf
    k = int(crossed[0])
    values = ascent.copy()
    rest = TimeGrid(max(grid.t_half - grid.half_times[k], grid.dt), max(grid.n_steps - k, 2))
    descent = conditioned_descent(m_sup, nu, rest, rng)
    values[k:] = descent[: grid.n_steps - k]
    return (PathSample(grid, values, PathKind.WILLIAMS, seed, one_sided=True),
            m_sup, float(grid.half_times[k]))


def torus_radial_covariance(s, s2, t_half: float):
    """Cov(B_t(s), B_t(s')): min(|s|,|s'|) - |s s'|/(2t) on one side, |s s'|/(2t) across."""
    s, s2 = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(s2, dtype=float))
    a, b = np.abs(s), np.abs(s2)
    cross = a * b / (2.0 * t_half)
    same = np.sign(s) * np.sign(s2) > 0
    out = np.where(same, np.minimum(a, b) - cross, cross)
    out = np.where((a == 0) | (b == 0), 0.0, out)
    return out if out.ndim else float(out)


# ------------------------------------------------------------------ supremum laws

def f_sup(x):
    """f(x) = 2 int_0^x e^{-u^2/2} du / sqrt(2 pi) = erf(x / sqrt 2)."""
    return erf(np.asarray(x, dtype=float) / math.sqrt(2.0))


def sup_prob_exact(x: float, t_half: float) -> float:
    """P(sup_{-t<=s<=t} B_s < x) = f(x/sqrt t)^2 for two-sided Brownian motion."""
    return float(f_sup(x / math.sqrt(t_half)) ** 2)


def discrete_sup_prob_one_sided(x: float, t_half: float, n_steps: int,
                                cells_per_sd: int = 24, width_sd: float = 9.0) -> float:
    """P(max_{k} S_k < x) for a Gaussian random walk with variance dt per step.

    Computed deterministically by propagating the killed density on a midpoint
    grid whose cell edge sits on the barrier.
    """
    grid = TimeGrid(t_half, n_steps)
    sd = math.sqrt(grid.dt)
    h = sd / cells_per_sd
    lo = -width_sd * math.sqrt(t_half) - 8 * sd
    n_cells = int(math.ceil((x - lo) / h))
    y = x - (np.arange(n_cells)[::-1] + 0.5) * h
    half_k = int(math.ceil(8 * sd / h))
    ku = np.arange(-half_k, half_k + 1) * h
    kernel = np.exp(-0.5 * (ku / sd) ** 2) / (sd * math.sqrt(2 * math.pi)) * h
    dens = np.exp(-0.5 * (y / sd) ** 2) / (sd * math.sqrt(2 * math.pi))
    for _ in range(n_steps - 2):
        dens = np.convolve(dens, kernel, mode="same")
    return float(dens.sum() * h)


@dataclass
class SupProbEstimate:
    x: float
    mc: float
    std_error: float
    n_samples: int
    exact: float | None = None
    bias: float | None = None
    extrapolated: float | None = None


def _coarse_sup(paths: np.ndarray, zero: int, stride: int) -> np.ndarray:
    idx = np.unique(np.concatenate([np.arange(zero, -1, -stride), np.arange(zero, paths.shape[1], stride),
                                    [0, paths.shape[1] - 1]]))
    return paths[:, idx].max(axis=1)


def sup_samples(kind: PathKind, grid: TimeGrid, n_samples: int, seed: int,
                experiment_id: int = 0, batch_size: int = 1000,
                strides=(1,), workers: int = 1) -> np.ndarray:
    """Suprema of ``n_samples`` two-sided paths; one row per stride (grid coarsening)."""
    sampler = {PathKind.BM: bm_batch, PathKind.TORUS_RADIAL: torus_radial_batch}[kind]

    def one(job):
        start, size = job
        paths = sampler(grid, make_rng(seed, stream_id(experiment_id, start)), size)
        return np.stack([paths.max(axis=1) if st == 1
                         else _coarse_sup(paths, grid.zero_index, st) for st in strides])

    return np.concatenate(parallel_map(one, batches(n_samples, batch_size), workers), axis=1)


def _frequency(sups: np.ndarray, level: float) -> Accumulator:
    acc = Accumulator()
    acc.add((sups < level).astype(float))
    return acc


def extrapolate_sqrt_dt(values, dts) -> float:
    """Least-squares fit v = a + c sqrt(dt); returns a."""
    A = np.column_stack([np.ones(len(dts)), np.sqrt(dts)])
    coef, *_ = np.linalg.lstsq(A, np.asarray(values, dtype=float), rcond=None)
    return float(coef[0])


def estimates_from_sups(kind: PathKind, x: float, grid: TimeGrid, sups: np.ndarray,
                        strides=(1,)) -> SupProbEstimate:
    level = x * math.sqrt(grid.t_half)
    acc = _frequency(sups[0], level)
    est = SupProbEstimate(x, acc.mean, acc.std_error, acc.count)
    if len(strides) > 1:
        freqs = [float(np.mean(s < level)) for s in sups]
        est.extrapolated = extrapolate_sqrt_dt(freqs, [grid.dt * st for st in strides])
    if kind is PathKind.BM:
        est.exact = sup_prob_exact(level, grid.t_half)
        one = discrete_sup_prob_one_sided(level, grid.t_half, grid.n_steps)
        est.bias = one * one - est.exact
    return est


def sup_prob_bm(x: float, grid: TimeGrid, n_samples: int, seed: int = 0,
                experiment_id: int = 0, batch_size: int = 1000,
                workers: int = 1) -> SupProbEstimate:
    """MC frequency of {sup B < x sqrt(t_half)} next to the exact f(x)^2.

    ``bias`` is the deterministic discrete-monitoring bias (random-walk value
    minus continuum value) at this grid resolution.
    """
    if not x > 0:
        raise DomainError(f"x must be positive, got {x}")
    sups = sup_samples(PathKind.BM, grid, n_samples, seed, experiment_id, batch_size,
                       workers=workers)
    return estimates_from_sups(PathKind.BM, x, grid, sups)


def sup_prob_torus(x: float, grid: TimeGrid, n_samples: int, seed: int = 0,
                   experiment_id: int = 0, batch_size: int = 1000,
                   strides=(1, 2, 4), workers: int = 1) -> SupProbEstimate:
    """MC frequency of {sup B_t < x sqrt(t_half)} for the torus radial process.

    ``extrapolated`` is a sqrt(dt) extrapolation over coarsened copies of the same
    paths, reported as a diagnostic of the discretisation bias.
    """
    if not x > 0:
        raise DomainError(f"x must be positive, got {x}")
    sups = sup_samples(PathKind.TORUS_RADIAL, grid, n_samples, seed, experiment_id,
                       batch_size, strides, workers)
    return estimates_from_sups(PathKind.TORUS_RADIAL, x, grid, sups, strides)


def bessel_time1_density(x: float, r):
    """Density at r of |(x + X, Y, Z)| for i.i.d. standard normals X, Y, Z."""
    r = np.asarray(r, dtype=float)
    if x < 0 or np.any(r < 0):
        raise DomainError("bessel_time1_density needs x >= 0 and r >= 0")
    c = math.sqrt(2.0 / math.pi)
    if x == 0:
        out = c * r * r * np.exp(-0.5 * r * r)
    else:
        # sinh(xr) e^{-(r^2+x^2)/2} = -expm1(-2xr) e^{-(r-x)^2/2} / 2
        out = c * (r / x) * 0.5 * -np.expm1(-2 * x * r) * np.exp(-0.5 * (r - x) ** 2)
    return out if out.ndim else float(out)
