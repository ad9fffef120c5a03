"""Correlation functions built from chaos moments and special functions."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .gmc import (CoupledChaos, config_digest, estimate_from_accumulator, neg_moment_from_masses,
                  run_batches)
from .fields import SIZE_CAP
from .special_functions import (LiouvilleParams, adaptive_gauss_legendre, dozz_deriv_crit, log_dedekind_eta_rect,
                                log_gamma)
from .streams import Accumulator

LEMMA_CONSTANT = 3.0 / (4.0 * math.sqrt(math.pi))


class CorrelatorKind(enum.Enum):
    TRUNCATED_THREE_POINT = "TruncatedThreePoint"
    ONE_POINT_TORUS = "OnePointTorus"
    THEOREM_PREDICTION = "TheoremPrediction"
    BOOTSTRAP_PREDICTION = "BootstrapPrediction"
    RENORMALIZED_THREE_POINT = "RenormalizedThreePoint"


@dataclass
class CorrelatorValue:
    kind: CorrelatorKind
    value: float
    std_error: float
    inputs: dict
    extra: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return config_digest({"kind": self.kind.value, **self.inputs})

    def ledger_row(self, seed_base: int | None = None) -> dict:
        i = self.inputs
        return {"kind": self.kind.value, "gamma": i.get("gamma"), "mu": i.get("mu"),
                "alpha": i.get("alpha"), "t": i.get("t"), "r": i.get("r"), "N": i.get("N"),
                "mean": self.value, "std_error": self.std_error, "seed_base": seed_base}


@dataclass
class MCConfig:
    """Monte Carlo and lattice settings shared by the chaos-based correlators."""

    n_samples: int = 20000
    seed: int = 0
    experiment_id: int = 0
    batch_size: int = 500
    n_theta: int = 32
    steps_per_unit: int = 6
    eps: float | None = None
    site_cap: int = SIZE_CAP
    workers: int = 1

    def n_per_side(self, t_half: float) -> int:
        """Longitudinal sites per side, reduced if the lattice would exceed the dense cap."""
        want = int(round(t_half * self.steps_per_unit)) + 1
        return max(2, min(want, self.site_cap // (2 * self.n_theta)))


def _check_alpha(alpha: float, params: LiouvilleParams):
    if not 0 < alpha < params.q_charge:
        raise DomainError(f"alpha must lie in (0, Q={params.q_charge}), got {alpha}")


def log_prefactor(alpha: float, params: LiouvilleParams) -> float:
    """log of 2 gamma^{-1} mu^{-alpha/gamma} Gamma(alpha/gamma)."""
    r = alpha / params.gamma
    return math.log(2.0 / params.gamma) - r * math.log(params.mu) + log_gamma(r)


def torus_log_prefactor(alpha: float, t: float, params: LiouvilleParams) -> float:
    """log_prefactor plus log of (t/pi)^{-1/2} |eta(it/pi)|^{-2}."""
    return (log_prefactor(alpha, params) - 0.5 * math.log(t / math.pi)
            - 2.0 * log_dedekind_eta_rect(t))


def _inputs(alpha, t, params, r, n=None) -> dict:
    return {"alpha": alpha, "t": t, "gamma": params.gamma, "mu": params.mu, "r": r, "N": n}


def _chaos(alpha, t, params, mc: MCConfig, with_torus: bool,
           with_cylinder: bool = True) -> CoupledChaos:
    return CoupledChaos(params, alpha, float(t), mc.n_per_side(t), mc.n_theta, mc.eps,
                        with_torus=with_torus, with_cylinder=with_cylinder)


def _moment(gen, r, mc: MCConfig, which: str):
    acc = Accumulator()
    for batch in run_batches(gen, mc.n_samples, mc.seed, mc.experiment_id, mc.batch_size,
                             mc.workers):
        neg_moment_from_masses(getattr(batch, which)[:, 0], r, acc=acc)
    return estimate_from_accumulator(acc, r, mc.n_samples)


def truncated_three_point(alpha: float, t: float, params: LiouvilleParams,
                          mc: MCConfig | None = None) -> CorrelatorValue:
    """Prefactor times E[Z_t(Q)^{-alpha/gamma}] over the window (-t, t)."""
    _check_alpha(alpha, params)
    mc = mc or MCConfig()
    r = alpha / params.gamma
    est = _moment(_chaos(alpha, t, params, mc, False), r, mc, "cylinder")
    pre = math.exp(log_prefactor(alpha, params))
    return CorrelatorValue(CorrelatorKind.TRUNCATED_THREE_POINT, pre * est.mean,
                           pre * est.std_error, _inputs(alpha, t, params, r, mc.n_samples),
                           {"moment": est.mean, "moment_se": est.std_error})


def one_point_torus(alpha: float, t: float, params: LiouvilleParams,
                    mc: MCConfig | None = None) -> CorrelatorValue:
    """Torus one-point function from the torus chaos moment and the eta prefactor."""
    _check_alpha(alpha, params)
    mc = mc or MCConfig()
    r = alpha / params.gamma
    est = _moment(_chaos(alpha, t, params, mc, True, False), r, mc, "torus")
    pre = math.exp(torus_log_prefactor(alpha, t, params))
    return CorrelatorValue(CorrelatorKind.ONE_POINT_TORUS, pre * est.mean, pre * est.std_error,
                           _inputs(alpha, t, params, r, mc.n_samples),
                           {"moment": est.mean, "moment_se": est.std_error})


def theorem_prediction(alpha: float, t: float, params: LiouvilleParams) -> CorrelatorValue:
    """3/(4 sqrt pi) |eta(it/pi)|^{-2} t^{-3/2} d^2 C(Q, alpha, Q)."""
    _check_alpha(alpha, params)
    val = LEMMA_CONSTANT * math.exp(-2.0 * log_dedekind_eta_rect(t)) * t ** -1.5 \
        * dozz_deriv_crit(alpha, params)
    return CorrelatorValue(CorrelatorKind.THEOREM_PREDICTION, val, 0.0,
                           _inputs(alpha, t, params, alpha / params.gamma))


def bootstrap_gaussian_integral() -> float:
    """int_R P^2 exp(-P^2/2) dP by adaptive Gauss-Legendre (closed form sqrt(2 pi)).

    The integrand is below 1e-340 past |P| = 40, so the truncation is exact in double precision.
    """
    f = lambda p: p * p * np.exp(-0.5 * p * p)
    return 2.0 * adaptive_gauss_legendre(f, 0.0, 40.0, tol=1e-15)


def bootstrap_prediction(alpha: float, tau_im: float, params: LiouvilleParams) -> CorrelatorValue:
    """Leading term of the modular bootstrap as Im tau grows.

    ``value`` is sqrt(2)/pi |eta(tau)|^{-2} (Im tau)^{-3/2} d^2 C(Q, alpha, Q).
    ``extra["t_form"]`` is the same limit written in t = pi Im tau before the change
    of variable, (1/2) |eta|^{-2} t^{-3/2} d^2 C int P^2 e^{-P^2/2} dP, evaluated with
    the quadrature above; it differs from ``value`` by exactly a factor 2.
    """
    _check_alpha(alpha, params)
    if not tau_im > 0:
        raise DomainError(f"tau_im must be positive, got {tau_im}")
    t = math.pi * tau_im
    eta2 = math.exp(-2.0 * log_dedekind_eta_rect(t))
    d2c = dozz_deriv_crit(alpha, params)
    val = math.sqrt(2.0) / math.pi * eta2 * tau_im ** -1.5 * d2c
    gauss = bootstrap_gaussian_integral()
    t_form = 0.5 * eta2 * t ** -1.5 * d2c * gauss
    closed = math.sqrt(math.pi / 2.0) * eta2 * t ** -1.5 * d2c
    return CorrelatorValue(CorrelatorKind.BOOTSTRAP_PREDICTION, val, 0.0,
                           {"alpha": alpha, "tau_im": tau_im, "gamma": params.gamma,
                            "mu": params.mu},
                           {"t_form": t_form, "t_form_closed": closed, "gauss_integral": gauss})


def renormalized_three_point(alpha: float, t: float, params: LiouvilleParams,
                             mc: MCConfig | None = None) -> CorrelatorValue:
    """Prefactor times E[B_t B_{-t} Z_t^{-r}], with (pi/2) t E[Z_t^{-r}] alongside."""
    _check_alpha(alpha, params)
    mc = mc or MCConfig()
    r = alpha / params.gamma
    gen = _chaos(alpha, t, params, mc, False)
    signed, plain = Accumulator(), Accumulator()
    for batch in run_batches(gen, mc.n_samples, mc.seed, mc.experiment_id, mc.batch_size,
                             mc.workers):
        z = batch.cylinder[:, 0] ** (-r)
        signed.add(batch.b_plus * batch.b_minus * z)
        plain.add(z)
    pre = math.exp(log_prefactor(alpha, params))
    return CorrelatorValue(CorrelatorKind.RENORMALIZED_THREE_POINT, pre * signed.mean,
                           pre * signed.std_error, _inputs(alpha, t, params, r, mc.n_samples),
                           {"signed_moment": signed.mean, "signed_moment_se": signed.std_error,
                            "moment": plain.mean, "moment_se": plain.std_error,
                            "half_pi_t_moment": 0.5 * math.pi * t * plain.mean})


# ------------------------------------------------------------------ lambda sweep

def sweep_window(lam: float, params: LiouvilleParams, scale: float = 1.0, cap: float = 12.0) -> float:
    """Truncation length growing like (Q - lam)^{-2}, capped."""
    return min(cap, scale * (params.q_charge - lam) ** -2)


def richardson_halving(values) -> float:
    """Two-level Richardson extrapolation to h -> 0 of values at h, h/2, h/4 (error O(h))."""
    v0, v1, v2 = values
    r1 = (2 * v1 - v0, 2 * v2 - v1)
    return (4 * r1[1] - r1[0]) / 3


def lambda_sweep(alpha: float, params: LiouvilleParams, mc: MCConfig | None = None,
                 gaps=(0.4, 0.2, 0.1)) -> dict:
    """E[Z_{0,t}(lam)^{-r}] / (2 (Q - lam)) for lam = Q - gap, with Richardson in the gap.

    Two exponent conventions are reported: r = alpha/gamma and r = Q sigma / gamma
    with sigma = 2 (lam - Q) + alpha. Each lam uses the same seeds (coupled).
    """
    _check_alpha(alpha, params)
    mc = mc or MCConfig(n_samples=4000)
    q, g = params.q_charge, params.gamma
    rows = []
    for gap in gaps:
        lam = q - gap
        sigma = 2.0 * (lam - q) + alpha
        t = sweep_window(lam, params)
        gen = CoupledChaos(params, alpha, t, mc.n_per_side(t), mc.n_theta, mc.eps,
                           with_torus=False, lam=lam, windows=[(0.0, t)])
        rs = {"alpha_over_gamma": alpha / g, "q_sigma_over_gamma": q * sigma / g}
        accs = {k: Accumulator() for k in rs}
        for batch in run_batches(gen, mc.n_samples, mc.seed, mc.experiment_id, mc.batch_size,
                             mc.workers):
            for k, r in rs.items():
                if r > 0:
                    accs[k].add(batch.cylinder[:, 0] ** (-r))
        row = {"lam": lam, "gap": gap, "sigma": sigma, "t": t}
        for k, acc in accs.items():
            row[f"r_{k}"] = rs[k]
            row[f"ratio_{k}"] = acc.mean / (2.0 * gap) if acc.count else float("nan")
            row[f"se_{k}"] = acc.std_error / (2.0 * gap) if acc.count else float("nan")
        rows.append(row)
    out = {"rows": rows}
    if len(gaps) == 3 and all(abs(gaps[i + 1] - gaps[i] / 2) < 1e-12 for i in range(2)):
        for k in ("alpha_over_gamma", "q_sigma_over_gamma"):
            out[f"extrapolated_{k}"] = richardson_halving([row[f"ratio_{k}"] for row in rows])
    return out
