"""Upsilon, DOZZ and Dedekind eta at real arguments.

log Upsilon is computed from its integral representation on (0, Q):

    log Y(z) = int_0^inf [a^2 e^{-t} - sinh^2(a t/2) / (sinh(g t/4) sinh(t/g))] dt/t,
    a = Q/2 - z.

The integral is split into three pieces: a Taylor series on (0, DELTA), adaptive
Gauss-Legendre panels on (DELTA, T_SPLIT), and an exact exponential-integral
expansion of the tail on (T_SPLIT, inf).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import exp1

from .errors import ConvergenceError, DomainError, QuadratureError

DELTA = 1e-3
T_SPLIT = 40.0
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


@dataclass(frozen=True)
class LiouvilleParams:
    gamma: float
    mu: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 2.0:
            raise DomainError(f"gamma must lie in (0, 2), got {self.gamma}")
        if not self.mu > 0.0:
            raise DomainError(f"mu must be positive, got {self.mu}")

    @property
    def q_charge(self) -> float:
        return 2.0 / self.gamma + self.gamma / 2.0

    def conformal_dimension(self, alpha: float) -> float:
        return 0.5 * alpha * (self.q_charge - 0.5 * alpha)


@dataclass(frozen=True)
class MomentOrder:
    """Negative-moment exponent r together with the insertion weight alpha."""

    r: float
    alpha: float
    params: LiouvilleParams
    drift: float | None = None

    def __post_init__(self):
        if not self.r > 0:
            raise DomainError(f"r must be positive, got {self.r}")
        if not 0 < self.alpha < self.params.q_charge:
            raise DomainError(f"alpha must lie in (0, Q), got {self.alpha}")

    @classmethod
    def physical(cls, alpha: float, params: LiouvilleParams) -> "MomentOrder":
        return cls(alpha / params.gamma, alpha, params)

    @property
    def sigma(self) -> float | None:
        if self.drift is None:
            return None
        return 2.0 * (self.drift - self.params.q_charge) + self.alpha


# ---------------------------------------------------------------- log-gamma

_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)


def log_gamma(x: float) -> float:
    """log|Gamma(x)| by the Lanczos approximation (g=7, 9 terms)."""
    if x < 0.5:
        if x <= 0 and x == math.floor(x):
            raise DomainError(f"Gamma has a pole at {x}")
        s = math.sin(math.pi * x)
        if s == 0.0:
            raise DomainError(f"Gamma has a pole at {x}")
        return math.log(math.pi / abs(s)) - log_gamma(1.0 - x)
    x -= 1.0
    acc = _LANCZOS_COEF[0]
    for k in range(1, len(_LANCZOS_COEF)):
        acc += _LANCZOS_COEF[k] / (x + k)
    tt = x + _LANCZOS_G + 0.5
    return 0.5 * math.log(2 * math.pi) + (x + 0.5) * math.log(tt) - tt + math.log(acc)


# ---------------------------------------------------------------- Upsilon

def _integrand(t: np.ndarray, a: float, g: float) -> np.ndarray:
    num = np.sinh(0.5 * a * t) ** 2
    den = np.sinh(0.25 * g * t) * np.sinh(t / g)
    return (a * a * np.exp(-t) - num / den) / t


def _head(a: float, g: float) -> float:
    """Exact integral of the degree-4 Taylor polynomial of the integrand on (0, DELTA)."""
    a2, g2 = a * a, g * g
    c = (
        -a2,
        -a2 * (8 * a2 * g2 - g2 * g2 - 48 * g2 - 16) / (96 * g2),
        -a2 / 6,
        -a2 * (256 * a2 * a2 * g2 * g2 - 80 * a2 * g2 ** 3 - 1280 * a2 * g2
               + 7 * g2 ** 4 - 3680 * g2 * g2 + 1792) / (92160 * g2 * g2),
        -a2 / 120,
    )
    return sum(ck * DELTA ** (k + 1) / (k + 1) for k, ck in enumerate(c))


def _gl(f, lo: float, hi: float) -> float:
    half = 0.5 * (hi - lo)
    return half * float(np.dot(_GL_WEIGHTS, f(0.5 * (hi + lo) + half * _GL_NODES)))


def adaptive_gauss_legendre(f, lo: float, hi: float, tol: float = 1e-14,
                            max_panels: int = 4000) -> float:
    """Panel-bisection Gauss-Legendre quadrature with a global panel budget."""
    stack = [(lo, hi, _gl(f, lo, hi))]
    total = 0.0
    panels = 0
    while stack:
        a, b, whole = stack.pop()
        m = 0.5 * (a + b)
        left, right = _gl(f, a, m), _gl(f, m, b)
        panels += 1
        if panels > max_panels:
            raise QuadratureError(f"no convergence on ({lo}, {hi}) within {max_panels} panels")
        if abs(left + right - whole) <= tol * max(1.0, abs(left + right)) or b - a < 1e-12:
            total += left + right
        else:
            stack.append((a, m, left))
            stack.append((m, b, right))
    return total


def _tail(a: float, g: float, q: float) -> float:
    """Exact tail on (T_SPLIT, inf) from the geometric expansion of 1/((1-e^{-g t/2})(1-e^{-2t/g}))."""
    T = T_SPLIT
    aa = abs(a)
    out = a * a * exp1(T)
    j = 0
    while 0.5 * g * j * T < 60.0:
        k = 0
        while (0.5 * g * j + 2.0 * k / g) * T < 60.0:
            beta = 0.5 * g * j + 2.0 * k / g
            out -= (exp1((0.5 * q - aa + beta) * T)
                    - 2.0 * exp1((0.5 * q + beta) * T)
                    + exp1((0.5 * q + aa + beta) * T))
            k += 1
        j += 1
    return float(out)


@lru_cache(maxsize=4096)
def _log_upsilon(z: float, gamma: float) -> float:
    q = 2.0 / gamma + gamma / 2.0
    a = 0.5 * q - z
    if a == 0.0:
        return 0.0
    f = lambda t: _integrand(t, a, gamma)
    body = adaptive_gauss_legendre(f, DELTA, 1.0) + adaptive_gauss_legendre(f, 1.0, T_SPLIT)
    return _head(a, gamma) + body + _tail(a, gamma, q)


def log_upsilon(z: float, params: LiouvilleParams) -> float:
    q = params.q_charge
    if not 0.0 < z < q:
        raise DomainError(f"log_upsilon needs z in (0, Q={q}), got {z}")
    return _log_upsilon(float(z), params.gamma)


def upsilon(z: float, params: LiouvilleParams) -> float:
    q = params.q_charge
    if z == 0.0 or z == q:
        return 0.0
    if not 0.0 < z < q:
        raise DomainError(f"upsilon is only implemented on [0, Q={q}], got {z}")
    return math.exp(log_upsilon(z, params))


@lru_cache(maxsize=64)
def _upsilon_prime_zero(gamma: float, h: float) -> tuple[float, float]:
    params = LiouvilleParams(gamma)
    d = [upsilon(h / 2 ** k, params) / (h / 2 ** k) for k in range(3)]
    r1 = [2 * d[1] - d[0], 2 * d[2] - d[1]]
    r2 = (4 * r1[1] - r1[0]) / 3
    return r2, abs(r2 - r1[1])


def upsilon_prime_zero(params: LiouvilleParams, h: float = 2e-4, tol: float = 1e-7) -> float:
    """Upsilon'(0) by two-level Richardson extrapolation of Upsilon(h)/h."""
    value, err = _upsilon_prime_zero(params.gamma, h)
    if err > tol or not value > 0:
        raise ConvergenceError(f"Upsilon'(0) extrapolation error {err:.3g} exceeds {tol}")
    return value


# ---------------------------------------------------------------- DOZZ

def log_mu_prefactor(params: LiouvilleParams) -> float:
    """log of pi mu (g/2)^{2 - g^2/2} Gamma(g^2/4) / Gamma(1 - g^2/4)."""
    g = params.gamma
    return (math.log(math.pi * params.mu) + (2 - g * g / 2) * math.log(g / 2)
            + log_gamma(g * g / 4) - log_gamma(1 - g * g / 4))


def _check_window(args, params: LiouvilleParams):
    q = params.q_charge
    for z in args:
        if not 0.0 < z < q:
            raise DomainError(
                f"Upsilon argument {z:.6g} outside (0, Q={q:.6g}): Seiberg window violated")


def log_dozz(a1: float, a2: float, a3: float, params: LiouvilleParams) -> float:
    abar = a1 + a2 + a3
    q = params.q_charge
    num = (a1, a2, a3)
    den = ((abar - 2 * q) / 2, abar / 2 - a1, abar / 2 - a2, abar / 2 - a3)
    _check_window(num + den, params)
    out = -(abar - 2 * q) / params.gamma * log_mu_prefactor(params)
    out += math.log(upsilon_prime_zero(params))
    out += sum(log_upsilon(z, params) for z in num)
    out -= sum(log_upsilon(z, params) for z in den)
    return out


def dozz(a1: float, a2: float, a3: float, params: LiouvilleParams) -> float:
    return math.exp(log_dozz(a1, a2, a3, params))


def dozz_deriv_crit(alpha: float, params: LiouvilleParams) -> float:
    """Mixed second derivative in the first and third weights of DOZZ at (Q, alpha, Q)."""
    _check_window((alpha, alpha / 2), params)
    log_val = (-alpha / params.gamma * log_mu_prefactor(params)
               + 3 * math.log(upsilon_prime_zero(params))
               + log_upsilon(alpha, params) - 4 * log_upsilon(alpha / 2, params))
    return math.exp(log_val)


# ---------------------------------------------------------------- eta

def _eta_factors(t: float):
    q = math.exp(-2.0 * t)
    qn = q
    while qn >= 1e-16:
        yield qn
        qn *= q


def log_dedekind_eta_rect(t: float) -> float:
    if not t > 0:
        raise DomainError(f"t must be positive, got {t}")
    return -t / 12.0 + math.fsum(math.log1p(-qn) for qn in _eta_factors(t))


def dedekind_eta_rect(t: float) -> float:
    """eta(i t / pi) = e^{-t/12} prod_{n>=1} (1 - e^{-2 n t})."""
    return math.exp(log_dedekind_eta_rect(t))


def log_z_gff(t: float) -> float:
    """log of the torus GFF partition function (t/pi) |eta(it/pi)|^2."""
    return math.log(t / math.pi) + 2.0 * log_dedekind_eta_rect(t)
