"""Named experiments: each returns a table, JSON records and PASS/FAIL verdicts."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import stats

from .correlators import MCConfig, log_prefactor, theorem_prediction
from .errors import ConfigError, TooFewAccepted
from .fields import (LateralCovarianceModel, SpectralBasis, periodization_tail,
                     periodized_kernel)
from .gmc import CoupledChaos, config_digest, run_batches
from .processes import (PathKind, TimeGrid, bessel3_half_batch, bessel_time1_density,
                        conditioned_descent, estimates_from_sups, sample_williams,
                        sup_prob_exact, sup_samples,
                        torus_radial_covariance)
from .special_functions import (LiouvilleParams, adaptive_gauss_legendre, dozz,
                                dozz_deriv_crit, log_dedekind_eta_rect, log_upsilon,
                                upsilon, upsilon_prime_zero)
from .streams import Accumulator, batches, make_rng, parallel_map, stream_id

THREE_OVER_PI = 3.0 / math.pi
TWO_OVER_PI = 2.0 / math.pi
LEMMA_CONSTANT = 3.0 / (4.0 * math.sqrt(math.pi))

EXPERIMENTS = ("upsilon-check", "dozz-table", "lemma33", "sup-ratio", "green-decay",
               "spectral-cov", "ratio-32", "slope-theorem", "bessel-density",
               "williams-check", "plateau")


@dataclass
class ExperimentConfig:
    experiment: str = "upsilon-check"
    gamma: tuple = (1.0,)
    mu: float = 1.0
    alpha: float = 1.2
    t: tuple = (1.0,)
    x: tuple = ()
    b: tuple = ()
    r: float | None = None
    lam: float | None = None
    weights: tuple = (0.70, 0.75, 0.72)
    n: int = 10000
    seed: int = 0
    steps: int = 4096
    n_theta: int = 32
    steps_per_unit: int = 6
    cutoff: int = 64
    batch: int = 1000
    workers: int = 1
    out: str = "results"
    thresholds: dict = field(default_factory=dict)

    @property
    def params(self) -> LiouvilleParams:
        return LiouvilleParams(self.gamma[0], self.mu)

    @property
    def experiment_id(self) -> int:
        return EXPERIMENTS.index(self.experiment) + 1

    def mc(self, n: int | None = None) -> MCConfig:
        return MCConfig(n_samples=n or self.n, seed=self.seed, experiment_id=self.experiment_id,
                        batch_size=min(self.batch, 500), n_theta=self.n_theta,
                        steps_per_unit=self.steps_per_unit, workers=self.workers)

    def resolved(self) -> dict:
        d = asdict(self)
        d["thresholds"] = {**DEFAULT_THRESHOLDS.get(self.experiment, {}), **self.thresholds}
        return d

    def digest(self) -> str:
        d = self.resolved()
        d.pop("out")
        d.pop("workers")
        return config_digest(d)

    def threshold(self, name: str) -> float:
        return float(self.thresholds.get(name, DEFAULT_THRESHOLDS[self.experiment][name]))

    def non_standard(self, *names) -> bool:
        base = DEFAULT_THRESHOLDS.get(self.experiment, {})
        return any(n in self.thresholds and float(self.thresholds[n]) != base[n] for n in names)


CONFIG_FIELDS = {f.name for f in fields(ExperimentConfig)}

EXPERIMENT_DEFAULTS = {
    "upsilon-check": {"gamma": (0.5, 1.0, 1.5)},
    "dozz-table": {"gamma": (0.8, 1.2)},
    "lemma33": {"x": (0.05, 0.1, 0.2), "n": 1_000_000, "steps": 4096},
    "sup-ratio": {"x": (0.1, 0.5), "n": 1_000_000, "steps": 4096},
    "green-decay": {"t": (2.0, 3.0, 4.0, 5.0)},
    "spectral-cov": {"t": (2.0,), "n": 100_000, "cutoff": 64},
    "ratio-32": {"t": (4.0, 6.0, 8.0), "r": 0.5, "n": 20000},
    "slope-theorem": {"t": (4.0, 6.0, 8.0, 10.0), "n": 20000},
    "bessel-density": {"x": (0.0, 0.5, 1.0, 2.0), "n": 20000, "steps": 64},
    "williams-check": {"t": (4.0,), "n": 100_000, "steps": 256},
    "plateau": {"t": (8.0,), "b": (1.0, 2.0, 3.0, 4.0), "n": 20000},
}

DEFAULT_THRESHOLDS = {
    "upsilon-check": {"relation_tol": 1e-8, "center_tol": 1e-15, "prime_tol": 1e-6},
    "dozz-table": {"perm_tol": 1e-12, "mu_tol": 1e-12},
    "lemma33": {"probe_x": 0.1, "band_lo": 0.90, "band_hi": 1.05},
    "sup-ratio": {"probe_x": 0.1, "band_lo": 0.90, "band_hi": 1.05, "se_mult": 3.0},
    "green-decay": {"slope": -2.0, "slope_tol": 0.1},
    "spectral-cov": {"se_mult": 3.0},
    "ratio-32": {"lo": 1.2, "hi": 1.8, "target": 1.5},
    "slope-theorem": {"slope": -1.5, "slope_tol": 0.25},
    "bessel-density": {"f0sq_tol": 1e-8, "norm_tol": 1e-10, "ks_p": 1e-3},
    "williams-check": {"ks_p": 1e-3, "se_mult": 3.0},
    "plateau": {"plateau_tol": 0.30, "slope_factor": 0.5},
}


def default_config(experiment: str, **overrides) -> ExperimentConfig:
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}")
    cfg = ExperimentConfig(experiment=experiment, **EXPERIMENT_DEFAULTS[experiment])
    return replace(cfg, **overrides)


@dataclass
class Verdict:
    name: str
    passed: bool
    measured: str
    target: str
    tolerance: str
    non_standard: bool = False

    def line(self) -> str:
        tag = " [NON-STANDARD]" if self.non_standard else ""
        return (f"{'PASS' if self.passed else 'FAIL'} {self.name}: measured={self.measured} "
                f"target={self.target} tolerance={self.tolerance}{tag}")


@dataclass
class ExperimentResult:
    columns: list
    rows: list
    verdicts: list = field(default_factory=list)
    records: list = field(default_factory=list)
    ledger: list = field(default_factory=list)
    info: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)


def _g(v) -> str:
    return format(float(v), ".6g")


def _ledger(cfg: ExperimentConfig, kind: str, mean, se, t=None, abscissa=None, r=None, n=None):
    return {"kind": kind, "gamma": cfg.gamma[0], "mu": cfg.mu, "alpha": cfg.alpha, "t": t,
            "abscissa": abscissa, "r": r, "N": n, "mean": float(mean), "std_error": float(se)}


def wlsq(x, y, se=None) -> dict:
    """Weighted least-squares line y = a + b x with weights 1/se^2 (uniform if se is absent or 0)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    se = None if se is None else np.asarray(se, dtype=float)
    w = np.ones_like(x) if se is None or np.any(se <= 0) else 1.0 / se ** 2
    sw, sx, sy = w.sum(), (w * x).sum(), (w * y).sum()
    sxx, sxy = (w * x * x).sum(), (w * x * y).sum()
    det = sw * sxx - sx * sx
    slope = (sw * sxy - sx * sy) / det
    intercept = (sxx * sy - sx * sxy) / det
    if se is None or np.any(se <= 0):
        resid = y - intercept - slope * x
        dof = max(len(x) - 2, 1)
        slope_se = math.sqrt((resid ** 2).sum() / dof * sw / det) if len(x) > 2 else float("nan")
    else:
        slope_se = math.sqrt(sw / det)
    return {"slope": float(slope), "intercept": float(intercept), "slope_se": float(slope_se)}


# ------------------------------------------------------------------ deterministic checks

def run_upsilon_check(cfg: ExperimentConfig) -> ExperimentResult:
    rows, worst, center, prime = [], 0.0, 0.0, 0.0
    for g in cfg.gamma:
        p = LiouvilleParams(g, cfg.mu)
        q = p.q_charge
        for z in np.linspace(0.1, q - 0.1, 50):
            u, v = upsilon(z, p), upsilon(q - z, p)
            rel = abs(u - v) / u
            worst = max(worst, rel)
            rows.append([g, z, u, v, rel])
        center = max(center, abs(upsilon(q / 2, p) - 1.0))
        up0 = upsilon_prime_zero(p)
        h = 2e-4
        d = [-math.exp(log_upsilon(q - h / 2 ** k, p)) / (h / 2 ** k) for k in range(3)]
        r1 = [2 * d[1] - d[0], 2 * d[2] - d[1]]
        up_q = (4 * r1[1] - r1[0]) / 3
        prime = max(prime, abs(up_q + up0))
    v = [Verdict("upsilon functional relation", worst <= cfg.threshold("relation_tol"), _g(worst),
                 "0", f"<= {cfg.threshold('relation_tol'):g}", cfg.non_standard("relation_tol")),
         Verdict("upsilon(Q/2) = 1", center <= cfg.threshold("center_tol"), _g(center), "0",
                 f"<= {cfg.threshold('center_tol'):g}", cfg.non_standard("center_tol")),
         Verdict("upsilon'(Q) = -upsilon'(0)", prime <= cfg.threshold("prime_tol"), _g(prime), "0",
                 f"<= {cfg.threshold('prime_tol'):g}", cfg.non_standard("prime_tol"))]
    return ExperimentResult(["gamma", "z", "upsilon_z", "upsilon_q_minus_z", "rel_diff"], rows, v,
                            [{"max_rel_diff": worst, "center_dev": center, "prime_dev": prime}])


def admissible_weights(params: LiouvilleParams, fractions) -> tuple:
    return tuple(f * params.q_charge for f in fractions)


def run_dozz_table(cfg: ExperimentConfig) -> ExperimentResult:
    import itertools
    rows, verdicts, records = [], [], []
    for g in cfg.gamma:
        p = LiouvilleParams(g, cfg.mu)
        p2 = LiouvilleParams(g, 2.0 * cfg.mu)
        a = admissible_weights(p, cfg.weights)
        base = dozz(*a, p)
        perm = max(abs(dozz(*pa, p) - base) / base for pa in itertools.permutations(a))
        abar = sum(a)
        expected = base * 2.0 ** (-(abar - 2 * p.q_charge) / g)
        mu_rel = abs(dozz(*a, p2) - expected) / expected
        d2 = dozz_deriv_crit(cfg.alpha, p)
        d2_mu = abs(dozz_deriv_crit(cfg.alpha, p2) - d2 * 2.0 ** (-cfg.alpha / g)) / d2
        rows.append([g, a[0], a[1], a[2], base, perm, mu_rel, cfg.alpha, d2, d2_mu])
        records.append({"gamma": g, "weights": a, "dozz": base, "dozz_deriv_crit": d2})
        verdicts.append(Verdict(f"dozz permutation symmetry gamma={g}",
                                perm <= cfg.threshold("perm_tol"), _g(perm), "0",
                                f"<= {cfg.threshold('perm_tol'):g}", cfg.non_standard("perm_tol")))
        verdicts.append(Verdict(f"dozz mu-scaling gamma={g}", mu_rel <= cfg.threshold("mu_tol"),
                                _g(mu_rel), "0", f"<= {cfg.threshold('mu_tol'):g}",
                                cfg.non_standard("mu_tol")))
    return ExperimentResult(["gamma", "a1", "a2", "a3", "dozz", "perm_max_rel", "mu_scaling_rel",
                             "alpha", "dozz_deriv_crit", "deriv_mu_scaling_rel"],
                            rows, verdicts, records)


def f0_squared_integral() -> float:
    f = lambda r: bessel_time1_density(0.0, r) ** 2
    return adaptive_gauss_legendre(f, 0.0, 1.0) + adaptive_gauss_legendre(f, 1.0, 40.0)


def density_integral(x: float) -> float:
    f = lambda r: bessel_time1_density(x, r)
    return adaptive_gauss_legendre(f, 0.0, x + 1.0) + adaptive_gauss_legendre(f, x + 1.0, x + 40.0)


def bessel_cdf(x: float, r: np.ndarray) -> np.ndarray:
    """CDF of the time-1 Bessel law by cumulative Gauss-Legendre on a fine grid."""
    edges = np.linspace(0.0, x + 12.0, 4001)
    pieces = [adaptive_gauss_legendre(lambda u: bessel_time1_density(x, u), a, b, tol=1e-13)
              for a, b in zip(edges[:-1], edges[1:])]
    cum = np.concatenate([[0.0], np.cumsum(pieces)])
    return np.interp(r, edges, cum, right=1.0)


def run_bessel_density(cfg: ExperimentConfig) -> ExperimentResult:
    rows = []
    f0sq = f0_squared_integral()
    err0 = abs(f0sq - LEMMA_CONSTANT)
    worst = 0.0
    grid = TimeGrid(1.0, cfg.steps + 1)
    ks = []
    for i, x in enumerate(cfg.x):
        total = density_integral(x)
        worst = max(worst, abs(total - 1.0))
        r = np.linspace(0.0, x + 8.0, 400)
        f = bessel_time1_density(x, r)
        c = math.sqrt(2.0 / math.pi)
        lower = c * r * r * np.exp(-0.5 * (r + x) ** 2)
        upper = c * r * r * np.exp(-0.5 * (r - x) ** 2)
        sandwich = bool(np.all(lower <= f * (1 + 1e-12)) and np.all(f <= upper * (1 + 1e-12)))
        ends = bessel3_half_batch(x, grid, make_rng(cfg.seed, stream_id(cfg.experiment_id, i)),
                                  cfg.n)[:, -1]
        p_ks = float(stats.kstest(ends, lambda v: bessel_cdf(x, v)).pvalue)
        ks.append(p_ks)
        rows.append([x, total, total - 1.0, int(sandwich), p_ks])
    v = [Verdict("int f_0^2 = 3/(4 sqrt pi)", err0 <= cfg.threshold("f0sq_tol"), repr(f0sq),
                 repr(LEMMA_CONSTANT), f"<= {cfg.threshold('f0sq_tol'):g}",
                 cfg.non_standard("f0sq_tol")),
         Verdict("int f_x = 1", worst <= cfg.threshold("norm_tol"), _g(worst), "0",
                 f"<= {cfg.threshold('norm_tol'):g}", cfg.non_standard("norm_tol")),
         Verdict("f_x sandwich bounds", all(rw[3] == 1 for rw in rows), "all grids", "hold",
                 "pointwise"),
         Verdict("Bessel sampler time-1 law (KS)", min(ks) > cfg.threshold("ks_p"), _g(min(ks)),
                 "p-value", f"> {cfg.threshold('ks_p'):g}", cfg.non_standard("ks_p"))]
    return ExperimentResult(["x", "integral", "integral_minus_1", "sandwich_ok", "ks_pvalue"],
                            rows, v, [{"f0_squared": f0sq, "target": LEMMA_CONSTANT}])


def green_sup_difference(t: float, n_s: int = 20, n_theta: int = 20) -> float:
    """sup over a fixed core grid of |H_t - H| between (0, 0) and (s, theta), s in [-1, 1]."""
    model = LateralCovarianceModel.torus(t)
    s = np.linspace(-1.0, 1.0, n_s)
    th = np.arange(n_theta) * (2 * math.pi / n_theta)
    return float(np.abs(periodization_tail(model, s[:, None], th[None, :])).max())


def run_green_decay(cfg: ExperimentConfig) -> ExperimentResult:
    rows, ledger = [], []
    for t in cfg.t:
        d = green_sup_difference(t)
        rows.append([t, d, math.log(d)])
        ledger.append(_ledger(cfg, "green_sup_diff", d, 0.0, t=t))
    fit = wlsq([r[0] for r in rows], [r[2] for r in rows])
    target, tol = cfg.threshold("slope"), cfg.threshold("slope_tol")
    v = [Verdict("green kernel decay slope", abs(fit["slope"] - target) <= tol, _g(fit["slope"]),
                 _g(target), f"+/- {tol:g}", cfg.non_standard("slope", "slope_tol"))]
    return ExperimentResult(["t", "sup_diff", "log_sup_diff"], rows, v, [fit], ledger)


# ------------------------------------------------------------------ suprema

def _probe_row(rows, x, col):
    for r in rows:
        if abs(r[0] - x) < 1e-12:
            return r
    raise ConfigError(f"probe x={x} is not in the x list")


def run_lemma33(cfg: ExperimentConfig) -> ExperimentResult:
    grid = TimeGrid(1.0, cfg.steps + 1)
    strides = (1, 2, 4)
    sups = sup_samples(PathKind.TORUS_RADIAL, grid, cfg.n, cfg.seed, cfg.experiment_id,
                       cfg.batch, strides, cfg.workers)
    rows, ledger = [], []
    for x in cfg.x:
        est = estimates_from_sups(PathKind.TORUS_RADIAL, x, grid, sups, strides)
        x2 = x * x
        rows.append([x, est.mc, est.std_error, est.mc / x2, est.std_error / x2,
                     est.extrapolated / x2, THREE_OVER_PI])
        ledger.append(_ledger(cfg, "g_over_x2", est.mc / x2, est.std_error / x2, t=1.0,
                              abscissa=x, n=cfg.n))
    probe = cfg.threshold("probe_x")
    lo, hi = cfg.threshold("band_lo") * THREE_OVER_PI, cfg.threshold("band_hi") * THREE_OVER_PI
    val = _probe_row(rows, probe, 3)[3]
    xs = sorted(cfg.x)
    dev_small = abs(_probe_row(rows, xs[0], 3)[3] - THREE_OVER_PI)
    dev_large = abs(_probe_row(rows, xs[-1], 3)[3] - THREE_OVER_PI)
    v = [Verdict(f"g(x)/x^2 band at x={probe:g}", lo <= val <= hi, _g(val), _g(THREE_OVER_PI),
                 f"[{_g(lo)}, {_g(hi)}]", cfg.non_standard("band_lo", "band_hi", "probe_x")),
         Verdict(f"deviation at x={xs[0]:g} <= deviation at x={xs[-1]:g}", dev_small <= dev_large,
                 f"{_g(dev_small)} vs {_g(dev_large)}", "non-increasing as x shrinks", "none")]
    return ExperimentResult(["x", "g_hat", "std_error", "g_over_x2", "se_over_x2",
                             "sqrt_dt_extrapolated_over_x2", "target"], rows, v,
                            [{"x": r[0], "g_over_x2": r[3], "se": r[4]} for r in rows], ledger)


def run_sup_ratio(cfg: ExperimentConfig) -> ExperimentResult:
    grid = TimeGrid(1.0, cfg.steps + 1)
    bm = sup_samples(PathKind.BM, grid, cfg.n, cfg.seed, cfg.experiment_id, cfg.batch,
                     (1,), cfg.workers)
    tor = sup_samples(PathKind.TORUS_RADIAL, grid, cfg.n, cfg.seed, cfg.experiment_id + 100,
                      cfg.batch, (1,), cfg.workers)
    rows, ledger = [], []
    for x in cfg.x:
        est = estimates_from_sups(PathKind.BM, x, grid, bm)
        g_hat = float(np.mean(tor[0] < x))
        x2 = x * x
        rows.append([x, est.mc, est.std_error, est.exact, est.bias, est.mc / x2,
                     est.std_error / x2, g_hat, g_hat / est.mc if est.mc > 0 else float("nan")])
        ledger.append(_ledger(cfg, "f2_over_x2", est.mc / x2, est.std_error / x2, t=1.0,
                              abscissa=x, n=cfg.n))
    probe = cfg.threshold("probe_x")
    row = _probe_row(rows, probe, 5)
    lo, hi = cfg.threshold("band_lo") * TWO_OVER_PI, cfg.threshold("band_hi") * TWO_OVER_PI
    k = cfg.threshold("se_mult")
    gap = abs(row[1] - row[3])
    allow = k * row[2] + abs(row[4])
    v = [Verdict(f"f(x)^2/x^2 band at x={probe:g}", lo <= row[5] <= hi, _g(row[5]),
                 _g(TWO_OVER_PI), f"[{_g(lo)}, {_g(hi)}]",
                 cfg.non_standard("band_lo", "band_hi", "probe_x")),
         Verdict(f"MC vs exact erf at x={probe:g}", gap <= allow, _g(gap), "0",
                 f"<= {k:g} SE + |bias| = {_g(allow)}", cfg.non_standard("se_mult"))]
    return ExperimentResult(["x", "f2_hat", "std_error", "f2_exact", "discrete_bias",
                             "f2_over_x2", "se_over_x2", "g_hat", "g_over_f2"], rows, v,
                            [{"x": r[0], "f2_hat": r[1], "exact": r[3], "bias": r[4]}
                             for r in rows], ledger)


# ------------------------------------------------------------------ fields

SPECTRAL_PAIRS = (
    ((0.3, 0.0), (0.5, 0.4)),
    ((0.3, 0.0), (-0.4, 0.2)),
    ((0.8, 1.0), (1.2, 1.3)),
    ((-1.0, 2.0), (-0.6, 2.5)),
    ((0.5, 0.0), (0.5, 0.6)),
    ((1.5, 3.0), (-1.5, 3.0)),
    ((0.2, 5.0), (0.9, 0.3)),
    ((-0.7, 4.0), (0.7, 4.4)),
    ((1.9, 0.5), (-1.9, 0.9)),
    ((1.0, 1.0), (1.0, 1.5)),
)


def spectral_analytic_covariance(t: float, p, p2) -> float:
    model = LateralCovarianceModel.torus(t)
    return float(periodized_kernel(model, p[0] - p2[0], p[1] - p2[1])
                 + torus_radial_covariance(p[0], p2[0], t))


def run_spectral_cov(cfg: ExperimentConfig) -> ExperimentResult:
    t = cfg.t[0]
    basis = SpectralBasis(t, cfg.cutoff, cfg.cutoff)
    pts = [p for pair in SPECTRAL_PAIRS for p in pair]
    s = np.array([p[0] for p in pts])
    th = np.array([p[1] for p in pts])
    design = basis.design(s, th)
    model_cov = design @ design.T
    batch = min(cfg.batch, 2000)

    def one(job):
        start, size = job
        xi = make_rng(cfg.seed, stream_id(cfg.experiment_id, start)).standard_normal(
            (size, design.shape[1]))
        vals = xi @ design.T
        return vals[:, 0::2] * vals[:, 1::2]

    prods = np.concatenate(parallel_map(one, batches(cfg.n, batch), cfg.workers))
    k = cfg.threshold("se_mult")
    rows, ok = [], True
    for j, (p, p2) in enumerate(SPECTRAL_PAIRS):
        acc = Accumulator()
        acc.add(prods[:, j])
        analytic = spectral_analytic_covariance(t, p, p2)
        trunc = model_cov[2 * j, 2 * j + 1]
        tail = abs(analytic - trunc)
        allow = k * acc.std_error + tail
        good = abs(acc.mean - analytic) <= allow
        ok &= good
        rows.append([j, p[0], p[1], p2[0], p2[1], acc.mean, acc.std_error, analytic, trunc,
                     tail, int(good)])
    v = [Verdict("spectral covariance at 10 pairs", ok,
                 f"{sum(r[-1] for r in rows)}/10 within", "analytic kernel",
                 f"{k:g} SE + truncation tail", cfg.non_standard("se_mult"))]
    return ExperimentResult(["pair", "s1", "theta1", "s2", "theta2", "empirical", "std_error",
                             "analytic", "truncated_model", "truncation_tail", "ok"], rows, v,
                            [{"pair": r[0], "empirical": r[5], "analytic": r[7]} for r in rows])


# ------------------------------------------------------------------ chaos experiments

def _chaos_batches(cfg, gen, n=None):
    mc = cfg.mc(n)
    return run_batches(gen, mc.n_samples, mc.seed, mc.experiment_id, mc.batch_size, mc.workers)


def _fsum_mean(v) -> float:
    return math.fsum(np.asarray(v, dtype=float)) / len(v)


def ratio_statistics(cyl: np.ndarray, tor: np.ndarray) -> dict:
    """Means, standard errors and the delta-method error of mean(tor)/mean(cyl) on paired samples."""
    n = cyl.size
    mc, mt = _fsum_mean(cyl), _fsum_mean(tor)
    ratio = mt / mc
    resid = (tor - ratio * cyl) / mc
    return {"cyl": mc, "cyl_se": float(np.std(cyl, ddof=1) / math.sqrt(n)),
            "tor": mt, "tor_se": float(np.std(tor, ddof=1) / math.sqrt(n)),
            "ratio": ratio, "ratio_se": float(np.std(resid, ddof=1) / math.sqrt(n))}


def run_ratio_32(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    r = cfg.r if cfg.r is not None else cfg.alpha / p.gamma
    mc = cfg.mc()
    rows, ledger = [], []
    for t in cfg.t:
        gen = CoupledChaos(p, cfg.alpha, t, mc.n_per_side(t), cfg.n_theta)
        out = _chaos_batches(cfg, gen)
        cyl = np.concatenate([b.cylinder[:, 0] for b in out]) ** (-r)
        tor = np.concatenate([b.torus[:, 0] for b in out]) ** (-r)
        st = ratio_statistics(cyl, tor)
        rows.append([t, t * st["cyl"], t * st["cyl_se"], t * st["tor"], t * st["tor_se"],
                     st["ratio"], st["ratio_se"]])
        ledger.append(_ledger(cfg, "torus_cylinder_ratio", st["ratio"], st["ratio_se"], t=t, r=r,
                              n=cfg.n))
    lo, hi, target = cfg.threshold("lo"), cfg.threshold("hi"), cfg.threshold("target")
    ratios = [row[5] for row in rows]
    ses = [row[6] for row in rows]
    in_band = all(lo <= q <= hi for q in ratios)
    toward = all(abs(ratios[k + 1] - target) <= abs(ratios[k] - target)
                 + math.hypot(ses[k], ses[k + 1]) for k in range(len(ratios) - 1))
    v = [Verdict("torus/cylinder ratio in band at every t", in_band,
                 ", ".join(_g(q) for q in ratios), _g(target), f"[{lo:g}, {hi:g}]",
                 cfg.non_standard("lo", "hi")),
         Verdict("ratio moves toward target monotonically in t", toward,
                 ", ".join(f"{_g(abs(q - target))}" for q in ratios), "non-increasing |ratio - target|",
                 "within combined SE", cfg.non_standard("target"))]
    return ExperimentResult(["t", "t_cyl_moment", "t_cyl_se", "t_torus_moment", "t_torus_se",
                             "ratio", "ratio_se"], rows, v,
                            [dict(zip(("t", "ratio", "ratio_se"), (row[0], row[5], row[6])))
                             for row in rows], ledger)


def run_slope_theorem(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    r = cfg.alpha / p.gamma
    mc = cfg.mc()
    pre = math.exp(log_prefactor(cfg.alpha, p))
    rows, ledger = [], []
    for t in cfg.t:
        gen = CoupledChaos(p, cfg.alpha, t, mc.n_per_side(t), cfg.n_theta, with_cylinder=False)
        tor = np.concatenate([b.torus[:, 0] for b in _chaos_batches(cfg, gen)]) ** (-r)
        m = _fsum_mean(tor)
        se = float(np.std(tor, ddof=1) / math.sqrt(tor.size))
        corr = pre * (t / math.pi) ** -0.5 * m          # <V_alpha(0)> |eta|^2
        value = corr * math.exp(-2.0 * log_dedekind_eta_rect(t))
        pred = theorem_prediction(cfg.alpha, t, p).value * math.exp(2.0 * log_dedekind_eta_rect(t))
        rows.append([t, math.log(t), value, value * se / m, corr, math.log(corr), se / m, pred])
        ledger.append(_ledger(cfg, "one_point_eta2", corr, corr * se / m, t=t, r=r, n=cfg.n))
    fit = wlsq([row[1] for row in rows], [row[5] for row in rows], [row[6] for row in rows])
    target, tol = cfg.threshold("slope"), cfg.threshold("slope_tol")
    const = LEMMA_CONSTANT * dozz_deriv_crit(cfg.alpha, p)
    w = np.array([1.0 / row[6] ** 2 for row in rows])
    fixed = float(np.sum(w * np.array([row[5] + 1.5 * row[1] for row in rows])) / w.sum())
    fit.update({"theorem_constant": const, "fitted_prefactor": math.exp(fit["intercept"]),
                "prefactor_at_slope_minus_1.5": math.exp(fixed)})
    v = [Verdict("log(<V>|eta|^2) vs log t slope", abs(fit["slope"] - target) <= tol,
                 f"{_g(fit['slope'])} (se {_g(fit['slope_se'])})", _g(target), f"+/- {tol:g}",
                 cfg.non_standard("slope", "slope_tol"))]
    info = [f"INFO theorem constant 3/(4 sqrt pi) d2C = {_g(const)}; fitted exp(intercept) = "
            f"{_g(math.exp(fit['intercept']))}; exp(intercept) at slope -1.5 = {_g(math.exp(fixed))}"
            " (reported, not gated)"]
    return ExperimentResult(["t", "log_t", "one_point", "one_point_se", "corr_eta2", "log_corr",
                             "stderr_log", "theorem_eta2"], rows, v, [fit], ledger, info)


def run_plateau(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    r = cfg.r if cfg.r is not None else cfg.alpha / p.gamma
    t = cfg.t[0]
    mc = cfg.mc()
    gen = CoupledChaos(p, cfg.alpha, t, mc.n_per_side(t), cfg.n_theta, with_torus=False)
    out = _chaos_batches(cfg, gen)
    z = np.concatenate([b.cylinder[:, 0] for b in out]) ** (-r)
    sup = np.concatenate([b.sup_cylinder for b in out])
    rows, ledger = [], []
    for b in cfg.b:
        keep = z[sup < b]
        acc = Accumulator()
        acc.add(keep)
        if acc.count < 100:
            raise TooFewAccepted(f"only {acc.count} paths with sup < {b}")
        rows.append([b, acc.count, acc.count / z.size, sup_prob_exact(b, t), acc.mean,
                     acc.std_error, b * b * acc.mean, b * b * acc.std_error])
        ledger.append(_ledger(cfg, "b2_conditioned_moment", b * b * acc.mean,
                              b * b * acc.std_error, t=t, abscissa=b, r=r, n=cfg.n))
    tol = cfg.threshold("plateau_tol")
    last, prev = rows[-1][6], rows[-2][6]
    var = abs(last - prev) / prev
    fit = wlsq([row[0] for row in rows], [math.log(row[4]) for row in rows])
    bound = -cfg.threshold("slope_factor") * r * p.gamma
    v = [Verdict(f"b^2 E[Z^-r|A] plateau between b={rows[-2][0]:g} and b={rows[-1][0]:g}",
                 var <= tol, _g(var), "0", f"<= {tol:g}", cfg.non_standard("plateau_tol")),
         Verdict("log conditioned moment slope in b", fit["slope"] <= bound, _g(fit["slope"]),
                 f"<= {_g(bound)}", "one-sided", cfg.non_standard("slope_factor"))]
    info = [f"INFO unconditioned t E[Z^-r] = {_g(t * _fsum_mean(z))}; (pi/2) t E[Z^-r] = "
            f"{_g(0.5 * math.pi * t * _fsum_mean(z))}"]
    return ExperimentResult(["b", "n_accepted", "p_hat", "p_exact", "cond_moment", "cond_se",
                             "b2_cond_moment", "b2_cond_se"], rows, v, [fit], ledger, info)


# ------------------------------------------------------------------ Williams

def run_williams_check(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    lam = cfg.lam if cfg.lam is not None else p.q_charge - 0.5
    nu = p.q_charge - lam
    grid = TimeGrid(cfg.t[0], cfg.steps + 1)
    base = cfg.seed * 2 ** 40 + cfg.experiment_id * 2 ** 32

    def one(job):
        start, size = job
        out = np.empty((size, 3))
        for i in range(size):
            path, m, th = sample_williams(lam, p, grid, base + start + i)
            out[i] = (m, path.values.max(), th)
        return out

    res = np.concatenate(parallel_map(one, batches(cfg.n, cfg.batch), cfg.workers))
    m, top, hit = res[:, 0], res[:, 1], res[:, 2]
    ks_p = float(stats.kstest(m, "expon", args=(0, 1.0 / (2 * nu))).pvalue)
    acc = Accumulator()
    acc.add(m)
    k = cfg.threshold("se_mult")
    mean_gap = abs(acc.mean - 1.0 / (2 * nu))
    reached = np.isfinite(hit)
    sup_ok = bool(np.all(top[reached] == m[reached]) and np.all(top[~reached] < m[~reached]))
    # nu -> 0 branch: M - descent is a 3d Bessel process from 0
    rng = make_rng(cfg.seed, stream_id(cfg.experiment_id, 1 << 31))
    n_b = min(cfg.n, 10000)
    short = TimeGrid(1.0, 65)
    desc = np.array([1.0 - conditioned_descent(1.0, 0.0, short, rng)[-1] for _ in range(n_b)])
    bes = bessel3_half_batch(0.0, short, rng, n_b)[:, -1]
    ks2 = float(stats.ks_2samp(desc, bes).pvalue)
    rows = [[lam, nu, cfg.n, acc.mean, acc.std_error, 1.0 / (2 * nu), ks_p,
             float(reached.mean()), ks2]]
    v = [Verdict("M ~ Exp(2(Q-lam)) (KS)", ks_p > cfg.threshold("ks_p"), _g(ks_p), "p-value",
                 f"> {cfg.threshold('ks_p'):g}", cfg.non_standard("ks_p")),
         Verdict("E[M] = 1/(2(Q-lam))", mean_gap <= k * acc.std_error, _g(acc.mean),
                 _g(1.0 / (2 * nu)), f"{k:g} SE = {_g(k * acc.std_error)}",
                 cfg.non_standard("se_mult")),
         Verdict("path supremum equals M when reached", sup_ok, str(sup_ok), "True", "exact"),
         Verdict("nu -> 0 descent vs Bessel3 (KS)", ks2 > cfg.threshold("ks_p"), _g(ks2),
                 "p-value", f"> {cfg.threshold('ks_p'):g}", cfg.non_standard("ks_p"))]
    return ExperimentResult(["lam", "nu", "n", "mean_m", "se_m", "target_mean", "ks_pvalue",
                             "frac_reached", "ks_bessel_pvalue"], rows, v,
                            [dict(zip(("mean_m", "se_m", "ks_p"), (acc.mean, acc.std_error, ks_p)))])


RUNNERS = {
    "upsilon-check": run_upsilon_check,
    "dozz-table": run_dozz_table,
    "lemma33": run_lemma33,
    "sup-ratio": run_sup_ratio,
    "green-decay": run_green_decay,
    "spectral-cov": run_spectral_cov,
    "ratio-32": run_ratio_32,
    "slope-theorem": run_slope_theorem,
    "bessel-density": run_bessel_density,
    "williams-check": run_williams_check,
    "plateau": run_plateau,
}


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    if cfg.experiment not in RUNNERS:
        raise ConfigError(f"unknown experiment {cfg.experiment!r}")
    return RUNNERS[cfg.experiment](cfg)
