"""Lateral log-correlated kernels on the cylinder and torus, and field samplers.

Conventions: a point is (s, theta) with s the longitudinal coordinate. The
cylinder lateral kernel is translation invariant,

    H(s, theta, s', theta') = -log|1 - exp(-|s - s'| + i (theta - theta'))|,

and the torus kernel is its 2t-periodisation in s. Regularisation at scale eps
shifts |s - s'| by delta = -log(1 - eps) (multiplies the angular mode m by
e^{-m delta}), which keeps the kernel positive semidefinite and makes the
cylinder diagonal -log(1 - e^{-delta}) equal to log(1/eps) exactly.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cholesky, LinAlgError

from .errors import DiagonalError, DomainError, ModelMismatch, NotPositiveDefinite, SizeCap
from .streams import make_rng

TWO_PI = 2.0 * math.pi
SIZE_CAP = 4096


@dataclass(frozen=True)
class CylinderPoint:
    s: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", float(self.theta) % TWO_PI)


class CovarianceKind(enum.Enum):
    CYLINDER_H = "CylinderH"
    TORUS_HT = "TorusHt"


def default_periodization(t_half: float) -> int:
    return max(2, math.ceil(8.0 / t_half))


@dataclass(frozen=True)
class LateralCovarianceModel:
    kind: CovarianceKind
    t_half: float | None = None
    n_periodization: int | None = None

    def __post_init__(self):
        if self.kind is CovarianceKind.TORUS_HT:
            if self.t_half is None or not self.t_half > 0:
                raise ValueError("TorusHt needs a positive t_half")
            if self.n_periodization is None:
                object.__setattr__(self, "n_periodization", default_periodization(self.t_half))
            if self.n_periodization < 1:
                raise ValueError("n_periodization must be >= 1")

    @classmethod
    def cylinder(cls) -> "LateralCovarianceModel":
        return cls(CovarianceKind.CYLINDER_H)

    @classmethod
    def torus(cls, t_half: float, n_periodization: int | None = None) -> "LateralCovarianceModel":
        return cls(CovarianceKind.TORUS_HT, t_half, n_periodization)

    @property
    def tail_bound(self) -> float:
        """Bound on the omitted images |n| > N for points with |s - s'| <= t."""
        if self.kind is CovarianceKind.CYLINDER_H:
            return 0.0
        t, n = self.t_half, self.n_periodization
        q = math.exp(-(2 * n + 1) * t)
        return 2.0 * q / ((1.0 - q) * (1.0 - math.exp(-2.0 * t)))


# ------------------------------------------------------------------ kernels

def regularisation_shift(eps: float) -> float:
    """Longitudinal shift delta with -log(1 - e^{-delta}) = log(1/eps)."""
    if not 0.0 <= eps < 1.0:
        raise DomainError(f"eps must lie in [0, 1), got {eps}")
    return -math.log1p(-eps)


def lateral_kernel(ds, dtheta, eps: float = 0.0):
    """-log|1 - exp(-(|ds| + delta) + i dtheta)| with delta = regularisation_shift(eps).

    Vectorised and free of cancellation for small and large |ds|.
    """
    d = np.abs(np.asarray(ds, dtype=float)) + regularisation_shift(eps)
    phi = np.asarray(dtheta, dtype=float)
    d, phi = np.broadcast_arrays(d, phi)
    out = np.empty(d.shape)
    near = d < 1.0
    dn = d[near]
    sn = np.sin(0.5 * phi[near])
    with np.errstate(divide="ignore"):
        out[near] = -0.5 * np.log(np.expm1(-dn) ** 2 + 4.0 * np.exp(-dn) * sn * sn)
    q = np.exp(-d[~near])
    out[~near] = -0.5 * np.log1p(q * q - 2.0 * q * np.cos(phi[~near]))
    if np.any(np.isinf(out)):
        raise DiagonalError("lateral kernel evaluated at coincident points")
    return out if out.ndim else float(out)


def _wrap(ds, t_half):
    """Reduce ds into (-t, t]."""
    return t_half - (t_half - np.asarray(ds, dtype=float)) % (2 * t_half)


def periodization_tail(model: LateralCovarianceModel, ds, dtheta, eps: float = 0.0):
    """H_t - H = sum over n != 0 of H(ds + 2 n t) (finite on the diagonal)."""
    t, n_per = model.t_half, model.n_periodization
    ds = _wrap(ds, t)
    total = 0.0
    for n in range(1, n_per + 1):
        total = total + lateral_kernel(ds + 2 * n * t, dtheta, eps) \
            + lateral_kernel(ds - 2 * n * t, dtheta, eps)
    return total


def periodized_kernel(model: LateralCovarianceModel, ds, dtheta, eps: float = 0.0):
    if model.kind is not CovarianceKind.TORUS_HT:
        return lateral_kernel(ds, dtheta, eps)
    ds = _wrap(ds, model.t_half)
    return lateral_kernel(ds, dtheta, eps) + periodization_tail(model, ds, dtheta, eps)


def kernel_H(p: CylinderPoint, p2: CylinderPoint) -> float:
    return lateral_kernel(p.s - p2.s, p.theta - p2.theta)


def kernel_Ht(model: LateralCovarianceModel, p: CylinderPoint, p2: CylinderPoint) -> float:
    if model.kind is not CovarianceKind.TORUS_HT:
        raise ModelMismatch("kernel_Ht needs a TorusHt model")
    return periodized_kernel(model, p.s - p2.s, p.theta - p2.theta)


def torus_kernel_modes(t_half: float, ds, dtheta, m_max: int = 4000):
    """H_t via its angular mode sum: sum_m cos(m dtheta) cosh(m (t - |ds|)) / (m sinh(m t)).

    Independent of the image sum; used as an oracle.
    """
    d = np.abs(_wrap(ds, t_half))
    m = np.arange(1, m_max + 1)[:, None]
    d = np.atleast_1d(d)[None, :]
    phi = np.atleast_1d(np.asarray(dtheta, dtype=float))[None, :]
    ratio = (np.exp(-m * d) + np.exp(-m * (2 * t_half - d))) / (1 - np.exp(-2 * m * t_half))
    return (np.cos(m * phi) * ratio / m).sum(axis=0)


def green_insertion(s, theta):
    """G(0, s + i theta) on the cylinder with zero circle average at s = 0."""
    return lateral_kernel(s, theta)


def green_insertion_torus(model: LateralCovarianceModel, s, theta):
    return periodized_kernel(model, s, theta)


# ------------------------------------------------------------------ lattices

@dataclass(frozen=True)
class Lattice:
    """Product lattice of longitudinal sites (uniform spacing) and n_theta angles.

    Sites are ordered s-major: flat index = i_s * n_theta + i_theta.
    ``weights`` are longitudinal cell widths.
    """

    s: tuple
    n_theta: int
    weights: tuple
    periodic_half: float | None = None

    @property
    def s_array(self) -> np.ndarray:
        return np.asarray(self.s)

    @property
    def theta_array(self) -> np.ndarray:
        return np.arange(self.n_theta) * (TWO_PI / self.n_theta)

    @property
    def ds(self) -> float:
        return float(self.s[1] - self.s[0]) if len(self.s) > 1 else 1.0

    @property
    def dtheta(self) -> float:
        return TWO_PI / self.n_theta

    @property
    def spacing(self) -> float:
        return max(self.ds, self.dtheta)

    @property
    def size(self) -> int:
        return len(self.s) * self.n_theta

    @property
    def shape(self) -> tuple:
        return (len(self.s), self.n_theta)

    def cell_areas(self) -> np.ndarray:
        return np.outer(self.weights, np.full(self.n_theta, self.dtheta))

    def default_eps(self) -> float:
        return 2.0 * self.spacing

    @classmethod
    def cylinder(cls, t_half: float, n_per_side: int, n_theta: int) -> "Lattice":
        """Sites k t/K for k = -K..K (K = n_per_side - 1); end cells are half cells."""
        k = n_per_side - 1
        s = np.linspace(-t_half, t_half, 2 * k + 1)
        w = np.full(s.size, t_half / k)
        w[0] = w[-1] = 0.5 * t_half / k
        return cls(tuple(s), n_theta, tuple(w))

    @classmethod
    def torus(cls, t_half: float, n_per_side: int, n_theta: int) -> "Lattice":
        """Sites k t/K for k = -K+1..K on the torus (-t, t]; all cells full."""
        k = n_per_side - 1
        s = np.linspace(-t_half, t_half, 2 * k + 1)[1:]
        return cls(tuple(s), n_theta, tuple(np.full(s.size, t_half / k)), periodic_half=t_half)

    @classmethod
    def box(cls, s_values, n_theta: int) -> "Lattice":
        s = np.asarray(s_values, dtype=float)
        ds = s[1] - s[0] if s.size > 1 else 1.0
        return cls(tuple(s), n_theta, tuple(np.full(s.size, ds)))

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        ss, tt = np.meshgrid(self.s_array, self.theta_array, indexing="ij")
        return ss.ravel(), tt.ravel()


@dataclass
class FieldSample:
    lattice: Lattice
    values: np.ndarray
    model: LateralCovarianceModel
    eps: float
    seed: int
    diag_var: float

    def save(self, path) -> None:
        """JSON header line followed by column-major little-endian float64 values."""
        header = {
            "shape": list(self.values.shape),
            "s": list(self.lattice.s),
            "weights": list(self.lattice.weights),
            "n_theta": self.lattice.n_theta,
            "periodic_half": self.lattice.periodic_half,
            "t_half": self.model.t_half,
            "n_periodization": self.model.n_periodization,
            "model": self.model.kind.value,
            "eps": self.eps,
            "seed": self.seed,
            "diag_var": self.diag_var,
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode("utf-8") + b"\n")
            fh.write(np.asfortranarray(self.values).astype("<f8").tobytes(order="F"))

    @classmethod
    def load(cls, path) -> "FieldSample":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            raw = fh.read()
        values = np.frombuffer(raw, dtype="<f8").reshape(header["shape"], order="F").copy()
        lattice = Lattice(tuple(header["s"]), header["n_theta"], tuple(header["weights"]),
                          header["periodic_half"])
        model = LateralCovarianceModel(CovarianceKind(header["model"]), header["t_half"],
                                       header["n_periodization"])
        return cls(lattice, values, model, header["eps"], header["seed"], header["diag_var"])


# ------------------------------------------------------------------ Cholesky sampler

def covariance_matrix(model: LateralCovarianceModel, lattice: Lattice, eps: float) -> np.ndarray:
    """Regularised lateral covariance on the lattice, via a (delta s, delta theta) table."""
    ns, nt = lattice.shape
    lags = np.arange(-(ns - 1), ns) * lattice.ds
    dth = np.arange(nt) * lattice.dtheta
    table = periodized_kernel(model, lags[:, None], dth[None, :], eps)
    i_s = np.repeat(np.arange(ns), nt)
    i_t = np.tile(np.arange(nt), ns)
    return table[(i_s[:, None] - i_s[None, :]) + ns - 1, (i_t[:, None] - i_t[None, :]) % nt]


def diagonal_variance(model: LateralCovarianceModel, eps: float) -> float:
    return float(periodized_kernel(model, 0.0, 0.0, eps))


def jittered_cholesky(cov: np.ndarray, start: float = 1e-12, stop: float = 1e-8) -> np.ndarray:
    try:
        return cholesky(cov, lower=True, check_finite=False)
    except LinAlgError:
        pass
    jitter = start
    eye = np.eye(cov.shape[0])
    while jitter <= stop * (1 + 1e-9):
        try:
            return cholesky(cov + jitter * eye, lower=True, check_finite=False)
        except LinAlgError:
            jitter *= 10.0
    raise NotPositiveDefinite(f"Cholesky failed with jitter up to {stop}")


_FACTOR_CACHE: dict = {}


def cholesky_factor(model: LateralCovarianceModel, lattice: Lattice, eps: float,
                    cap: int = SIZE_CAP) -> np.ndarray:
    if lattice.size > cap:
        raise SizeCap(f"lattice has {lattice.size} sites, cap is {cap}")
    key = (model, lattice, eps)
    factor = _FACTOR_CACHE.get(key)
    if factor is None:
        factor = jittered_cholesky(covariance_matrix(model, lattice, eps))
        if len(_FACTOR_CACHE) > 8:
            _FACTOR_CACHE.clear()
        _FACTOR_CACHE[key] = factor
    return factor


def lateral_batch(factor: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Rows of ``normals`` (n, sites) mapped to correlated fields (n, sites)."""
    return normals @ factor.T


def sample_lateral_cholesky(model: LateralCovarianceModel, lattice: Lattice,
                            eps: float | None = None, seed: int = 0,
                            cap: int = SIZE_CAP) -> FieldSample:
    eps = lattice.default_eps() if eps is None else eps
    if eps < lattice.spacing:
        raise ValueError(f"eps={eps} is below the lattice spacing {lattice.spacing}")
    factor = cholesky_factor(model, lattice, eps, cap)
    xi = make_rng(seed).standard_normal(lattice.size)
    values = (factor @ xi).reshape(lattice.shape)
    return FieldSample(lattice, values, model, eps, seed, diagonal_variance(model, eps))


# ------------------------------------------------------------------ spectral sampler

FAMILIES = ("ee", "eo", "oe", "oo")


def eigenfunction(family: str, n: int, m: int, t_half: float):
    """Orthonormal Laplace eigenfunction on (-t, t] x S^1 for the given parity family."""
    cs = np.cos if family[0] == "e" else np.sin
    ct = np.cos if family[1] == "e" else np.sin
    norm = math.pi * t_half
    if family[0] == "e" and n == 0:
        norm *= 2
    if family[1] == "e" and m == 0:
        norm *= 2
    c = 1.0 / math.sqrt(norm)
    return lambda s, th: c * cs(n * math.pi * np.asarray(s) / t_half) * ct(m * np.asarray(th))


@dataclass(frozen=True)
class SpectralBasis:
    t_half: float
    n_max: int
    m_max: int

    def __post_init__(self):
        if self.n_max < 8 or self.m_max < 8:
            raise ValueError("spectral cutoffs must be >= 8")

    def eigenvalue(self, n, m):
        return (np.asarray(n) * math.pi / self.t_half) ** 2 + np.asarray(m) ** 2

    def modes(self, part: str = "full"):
        """List of (family, n, m) with nonzero eigenfunctions, (0, 0) excluded.

        ``part`` selects all modes, the lateral ones (m >= 1) or the radial ones (m = 0).
        """
        out = []
        for fam in FAMILIES:
            n_lo = 1 if fam[0] == "o" else 0
            m_lo = 1 if fam[1] == "o" else 0
            if part == "lateral":
                m_hi, m_lo = self.m_max, max(m_lo, 1)
            elif part == "radial":
                m_hi = 0
            else:
                m_hi = self.m_max
            for n in range(n_lo, self.n_max + 1):
                for m in range(m_lo, m_hi + 1):
                    if (n, m) != (0, 0):
                        out.append((fam, n, m))
        return out

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([math.sqrt(TWO_PI / self.eigenvalue(n, m)) for _, n, m in self.modes()])

    def design(self, s, theta, part: str = "full", pin_zero: bool = True) -> np.ndarray:
        """Matrix (points x modes) of sqrt(2 pi / lambda) f(s, theta).

        With ``pin_zero`` the radial (m = 0) columns are shifted to vanish at s = 0,
        i.e. the field is normalised to zero circle average at s = 0.
        """
        s = np.asarray(s, dtype=float).ravel()
        theta = np.asarray(theta, dtype=float).ravel()
        cols = []
        for fam, n, m in self.modes(part):
            f = eigenfunction(fam, n, m, self.t_half)
            col = f(s, theta)
            if pin_zero and m == 0:
                col = col - f(np.zeros(1), np.zeros(1))
            cols.append(math.sqrt(TWO_PI / self.eigenvalue(n, m)) * col)
        return np.column_stack(cols)


def sample_torus_gff_spectral(basis: SpectralBasis, lattice: Lattice, seed: int = 0,
                              part: str = "full") -> FieldSample:
    s, th = lattice.points()
    design = basis.design(s, th, part)
    xi = make_rng(seed).standard_normal(design.shape[1])
    values = (design @ xi).reshape(lattice.shape)
    model = LateralCovarianceModel.torus(basis.t_half)
    return FieldSample(lattice, values, model, 0.0, seed, float(np.nan))
