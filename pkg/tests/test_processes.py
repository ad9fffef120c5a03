import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import erf, erfc

from liouville.errors import DomainError
from liouville.processes import (BARRIER_SHIFT, PathKind, SupEvent, TimeGrid, bessel3_half_batch,
                                 bessel_time1_density, bm_batch, bm_half_batch, bridge_batch,
                                 conditioned_descent, f_sup, sample_bessel3, sample_bm,
                                 sample_bridge, sample_torus_radial, sample_williams,
                                 sup_prob_bm, sup_prob_torus, sup_samples, torus_radial_batch,
                                 torus_radial_covariance, torus_radial_from_bm)
from liouville.special_functions import LiouvilleParams
from liouville.streams import make_rng

N = 100_000


def within(est, se, target, k=3.0, extra=0.0):
    return abs(est - target) <= k * se + extra


def test_grid_validation_and_layout():
    g = TimeGrid(2.0, 5)
    assert g.dt == 0.5
    assert np.allclose(g.times, [-2, -1.5, -1, -0.5, 0, 0.5, 1, 1.5, 2])
    assert g.times[g.zero_index] == 0.0
    with pytest.raises(DomainError):
        TimeGrid(0.0, 5)
    with pytest.raises(DomainError):
        TimeGrid(1.0, 1)
    with pytest.raises(DomainError):
        SupEvent(0.0, 1.0)


def test_samplers_vanish_at_zero():
    g = TimeGrid(1.0, 33)
    for seed in range(5):
        assert sample_bm(g, seed).value_at_zero() == 0.0
        assert sample_torus_radial(g, seed).value_at_zero() == 0.0
        br = sample_bridge(g, seed)
        assert br.values[0] == 0.0 and br.values[-1] == 0.0
        assert sample_bessel3(1.5, g, seed).value_at_zero() == 1.5


def test_samplers_deterministic():
    g = TimeGrid(1.0, 33)
    assert np.array_equal(sample_bm(g, 7).values, sample_bm(g, 7).values)
    assert not np.array_equal(sample_bm(g, 7).values, sample_bm(g, 8).values)
    a = sup_samples(PathKind.BM, g, 3000, 5, batch_size=700, workers=1)
    b = sup_samples(PathKind.BM, g, 3000, 5, batch_size=700, workers=2)
    assert np.array_equal(a, b)


def test_bm_variance_and_independent_sides():
    g = TimeGrid(2.0, 21)
    p = bm_batch(g, make_rng(1), N)
    end = p[:, -1]
    var_se = math.sqrt(2.0 / N) * g.t_half
    assert within(end.var(), var_se, g.t_half)
    prod = p[:, g.zero_index + 5] * p[:, g.zero_index - 8]
    assert within(prod.mean(), prod.std() / math.sqrt(N), 0.0)


def test_bridge_variance_and_law():
    g = TimeGrid(3.0, 31)
    br = bridge_batch(g, make_rng(2), N)
    mid = br[:, 15]
    assert within(mid.var(), math.sqrt(2.0 / N) * 0.75, 0.75)
    # construction oracle: BM minus (s/t) times its endpoint
    bm = bm_half_batch(g, make_rng(3), 10_000)
    alt = bm[:, 10] - (1.0 / 3.0) * bm[:, -1]
    assert stats.ks_2samp(br[:10_000, 10], alt).pvalue > 1e-3


def test_torus_radial_properties():
    g = TimeGrid(2.0, 41)
    p = torus_radial_batch(g, make_rng(4), N)
    assert np.all(p[:, g.zero_index] == 0.0)
    assert np.allclose(p[:, -1], p[:, 0], atol=1e-12)
    times = g.times
    pairs = [(0.5, 0.5), (1.0, 1.5), (2.0, 2.0), (-1.0, 0.5), (-1.5, -0.25)]
    for s, s2 in pairs:
        i, j = np.argmin(abs(times - s)), np.argmin(abs(times - s2))
        prod = p[:, i] * p[:, j]
        target = torus_radial_covariance(s, s2, g.t_half)
        assert within(prod.mean(), prod.std() / math.sqrt(N), target), (s, s2)
    s = 1.0
    assert torus_radial_covariance(s, s, 2.0) == pytest.approx(s - s * s / 4.0)


def test_torus_radial_from_bm_matches_covariance():
    g = TimeGrid(2.0, 41)
    p = torus_radial_from_bm(bm_batch(g, make_rng(5), N), g)
    assert np.allclose(p[:, -1], p[:, 0])
    i, j = g.zero_index + 10, g.zero_index - 30
    prod = p[:, i] * p[:, j]
    assert within(prod.mean(), prod.std() / math.sqrt(N),
                  torus_radial_covariance(g.times[i], g.times[j], 2.0))


def test_bessel_hitting_probability():
    # finite horizon T: conditioned on hitting x, the h-transform by x/r turns the
    # Bessel process into Brownian motion, so P(hit x by T) = (x/b) erfc((b-x)/sqrt(2T));
    # T -> inf recovers x/b = 1/2. The discrete infimum misses excursions, biasing
    # the frequency down by at most the continuity-corrected barrier shift.
    b, x, T, n_steps = 2.0, 1.0, 4.0, 801
    g = TimeGrid(T, n_steps)
    hits = np.concatenate([bessel3_half_batch(b, g, make_rng(6, k), 5000).min(axis=1) < x
                           for k in range(20)])
    freq, se = hits.mean(), hits.std() / math.sqrt(hits.size)
    exact = lambda xx: (xx / b) * erfc((b - xx) / math.sqrt(2 * T))
    lo = exact(x - BARRIER_SHIFT * math.sqrt(g.dt))
    assert lo - 3 * se <= freq <= exact(x) + 3 * se


def test_bessel_inverse_mean():
    # E[1/|b + W_s|] for 3d Brownian W equals erf(b/sqrt(2s))/b, which is 1/b up to
    # the mass lost to the strict local martingale; at b=2, s=1 the gap is 2.3%
    b, g = 2.0, TimeGrid(1.0, 5)
    r = bessel3_half_batch(b, g, make_rng(7), N)[:, -1]
    inv = 1.0 / r
    assert within(inv.mean(), inv.std() / math.sqrt(N), erf(b / math.sqrt(2.0)) / b)


def test_bessel_validation():
    g = TimeGrid(1.0, 5)
    with pytest.raises(DomainError):
        bessel3_half_batch(-1.0, g, make_rng(0), 1)
    with pytest.raises(DomainError):
        bessel3_half_batch(1.0, g, make_rng(0), 1, drift=0.5)


def test_williams_sup_and_domain():
    p = LiouvilleParams(1.0)
    g = TimeGrid(4.0, 257)
    for seed in range(30):
        path, m, t_hit = sample_williams(2.0, p, g, seed)
        if math.isfinite(t_hit):
            assert abs(path.values.max() - m) <= 1e-12
        else:
            assert path.values.max() < m
    with pytest.raises(DomainError):
        sample_williams(2.5, p, g, 0)


def test_williams_sup_law():
    p = LiouvilleParams(1.0)
    lam = 1.5
    g = TimeGrid(4.0, 65)
    ms = np.array([sample_williams(lam, p, g, seed)[1] for seed in range(3000)])
    rate = 2 * (p.q_charge - lam)
    assert stats.kstest(ms, "expon", args=(0, 1 / rate)).pvalue > 1e-3
    assert within(ms.mean(), ms.std() / math.sqrt(ms.size), 1 / rate)


def test_williams_limit_branch_is_bessel():
    g = TimeGrid(1.0, 11)
    m = 0.7
    rng = make_rng(8)
    desc = np.array([conditioned_descent(m, 0.0, g, rng)[-1] for _ in range(3000)])
    bes = bessel3_half_batch(0.0, g, make_rng(9), 3000)[:, -1]
    assert stats.ks_2samp(m - desc, bes).pvalue > 1e-3


def test_f_sup_limits():
    assert 1.0 - f_sup(10.0) ** 2 < 1e-20
    x = 0.01
    assert abs(f_sup(x) ** 2 / x ** 2 / (2 / math.pi) - 1) <= 1e-4


def test_sup_prob_bm_against_erf():
    # reduced scale (1e5 paths); the 1e6-path run is part of the sup-ratio experiment
    g = TimeGrid(1.0, 4097)
    est = sup_prob_bm(0.5, g, 100_000, seed=11)
    assert est.exact == pytest.approx(float(erf(0.5 / math.sqrt(2))) ** 2, rel=1e-14)
    assert est.bias > 0
    assert abs(est.mc - est.exact) <= 3 * est.std_error + est.bias


def test_sup_prob_torus_saturates():
    est = sup_prob_torus(10.0, TimeGrid(1.0, 257), 5000, seed=3)
    assert est.mc == 1.0
    with pytest.raises(DomainError):
        sup_prob_torus(0.0, TimeGrid(1.0, 257), 10)


def test_bessel_density_closed_form_and_bounds():
    r = np.linspace(0, 8, 401)
    assert np.allclose(bessel_time1_density(0.0, r),
                       math.sqrt(2 / math.pi) * r ** 2 * np.exp(-r ** 2 / 2), rtol=1e-15)
    c = math.sqrt(2 / math.pi)
    for x in (0.3, 1.0, 2.0):
        f = bessel_time1_density(x, r)
        assert np.all(f >= c * r ** 2 * np.exp(-(r + x) ** 2 / 2) * (1 - 1e-12))
        assert np.all(f <= c * r ** 2 * np.exp(-(r - x) ** 2 / 2) * (1 + 1e-12))
    with pytest.raises(DomainError):
        bessel_time1_density(-1.0, 1.0)
