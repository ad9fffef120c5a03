import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from liouville.errors import InsertionOverlap, ModelMismatch, TooFewAccepted, WindowError
from liouville.fields import (Lattice, LateralCovarianceModel, cholesky_factor,
                              diagonal_variance, green_insertion_torus, lateral_batch,
                              periodization_tail, sample_lateral_cholesky)
from liouville.gmc import (ChaosGeometry, ChaosMass, CoupledChaos, MomentEstimate, chaos_cells,
                           estimate_neg_moment, neg_moment_from_masses, run_batches, z_mass,
                           z_mass_torus)
from liouville.processes import (PathKind, PathSample, SupEvent, TimeGrid, bm_batch,
                                 sample_bm, sample_torus_radial, torus_radial_from_bm)
from liouville.special_functions import LiouvilleParams
from liouville.streams import Accumulator, make_rng

P1 = LiouvilleParams(1.0)


def _small_geometry(**kw):
    return ChaosGeometry(P1, 1.2, 2.0, 9, 16, **kw)


# ------------------------------------------------------------- cell masses

def test_chaos_degenerates_to_lebesgue():
    lat = Lattice.cylinder(1.0, 5, 16)
    fld = sample_lateral_cholesky(LateralCovarianceModel.cylinder(), lat, seed=1)
    total = chaos_cells(fld, 1e-8).sum()
    assert abs(total - 4 * math.pi) <= 1e-6


def test_chaos_mean_is_area():
    model = LateralCovarianceModel.cylinder()
    lat = Lattice.cylinder(1.0, 5, 16)
    eps = lat.default_eps()
    factor = cholesky_factor(model, lat, eps)
    y = lateral_batch(factor, make_rng(2).standard_normal((10_000, lat.size)))
    w = np.exp(y - 0.5 * diagonal_variance(model, eps)) * lat.cell_areas().ravel()
    tot = w.sum(axis=1)
    assert abs(tot.mean() - 4 * math.pi) <= 3 * tot.std() / math.sqrt(tot.size)


def _unit_cell_moment(n_s, n_theta, seed, eps=0.8, r=0.5, n=10_000):
    lat = Lattice.box((np.arange(n_s) + 0.5) / n_s, n_theta)
    model = LateralCovarianceModel.cylinder()
    factor = cholesky_factor(model, lat, eps)
    y = lateral_batch(factor, make_rng(seed).standard_normal((n, lat.size)))
    tot = (np.exp(y - 0.5 * diagonal_variance(model, eps)) * lat.cell_areas().ravel()).sum(axis=1)
    v = tot ** -r
    return v.mean(), v.std() / math.sqrt(n)


def test_refinement_stability_unit_cell():
    m1, s1 = _unit_cell_moment(4, 16, 3)
    m2, s2 = _unit_cell_moment(8, 32, 4)
    assert abs(m1 - m2) <= 3 * math.hypot(s1, s2)


# ------------------------------------------------------------- z masses

def _pair(t=2.0, n_per_side=9, n_theta=16, seed=0, torus=False):
    grid = TimeGrid(t, n_per_side)
    if torus:
        lat = Lattice.torus(t, n_per_side, n_theta)
        model = LateralCovarianceModel.torus(t)
        radial = sample_torus_radial(grid, seed)
    else:
        lat = Lattice.cylinder(t, n_per_side, n_theta)
        model = LateralCovarianceModel.cylinder()
        radial = sample_bm(grid, seed)
    return radial, sample_lateral_cholesky(model, lat, seed=seed + 1000)


def test_z_mass_window_and_drift_monotone():
    for seed in range(10):
        radial, lateral = _pair(seed=seed)
        small = z_mass(P1.q_charge, 1.2, (-1.0, 1.0), radial, lateral, P1).value
        big = z_mass(P1.q_charge, 1.2, (-2.0, 2.0), radial, lateral, P1).value
        assert 0 < small <= big
        low = z_mass(2.0, 1.2, (-2.0, 2.0), radial, lateral, P1).value
        assert low <= big


def test_z_mass_errors():
    radial, lateral = _pair()
    with pytest.raises(WindowError):
        z_mass(2.5, 1.2, (-3.0, 1.0), radial, lateral, P1)
    with pytest.raises(InsertionOverlap):
        z_mass(2.5, 1.2, (-0.01, 0.01), radial, lateral, P1)
    with pytest.raises(ModelMismatch):
        z_mass_torus(1.2, radial, lateral, P1)
    t_radial, t_lateral = _pair(torus=True)
    with pytest.raises(ModelMismatch):
        z_mass_torus(1.2, radial, t_lateral, P1)
    assert z_mass_torus(1.2, t_radial, t_lateral, P1).value > 0
    with pytest.raises(ValueError):
        ChaosMass(0.0, (-1, 1), 2.5, 1.2, 1.0)


def test_geometry_matches_single_sample_mass():
    geo = _small_geometry()
    rng = make_rng(5)
    bm = bm_batch(geo.grid, rng, 1)
    normals = rng.standard_normal((1, geo.size))
    batched = geo.masses(bm, normals)[0, 0]
    y = geo.lateral(normals)[0].reshape(geo.lattice.shape)
    from liouville.fields import FieldSample
    fld = FieldSample(geo.lattice, y, geo.model, geo.eps, 0, geo.diag_var)
    single = z_mass(P1.q_charge, 1.2, (-2.0, 2.0),
                    PathSample(geo.grid, bm[0], PathKind.BM, 0), fld, P1).value
    assert batched == pytest.approx(single, rel=1e-12)


def test_torus_weight_is_periodic():
    t = 3.0
    model = LateralCovarianceModel.torus(t)
    s = np.linspace(-2.9, 2.9, 13)
    th = np.linspace(0.1, 6.0, 13)
    a = green_insertion_torus(model, s, th)
    b = green_insertion_torus(model, s + 2 * t, th)
    assert np.allclose(a, b, rtol=0, atol=1e-13)


def test_windows_nested_pathwise():
    gen = CoupledChaos(P1, 1.2, 2.0, 9, 16, with_torus=False,
                       windows=[(-1.0, 1.0), (-1.5, 1.5), (-2.0, 2.0)])
    batch = gen(make_rng(6), 400)
    m = batch.cylinder
    assert np.all(m[:, 0] <= m[:, 1]) and np.all(m[:, 1] <= m[:, 2])
    r = 1.2
    means = (m ** -r).mean(axis=0)
    assert means[0] >= means[1] >= means[2]


def test_drift_domination_on_coupled_seeds():
    lo = CoupledChaos(P1, 1.2, 3.0, 13, 16, with_torus=False, lam=2.1, windows=[(0.0, 3.0)])
    hi = CoupledChaos(P1, 1.2, 3.0, 13, 16, with_torus=False, lam=2.3, windows=[(0.0, 3.0)])
    a = np.concatenate([b.cylinder[:, 0] for b in run_batches(lo, 1000, 7, batch_size=250)])
    b = np.concatenate([b.cylinder[:, 0] for b in run_batches(hi, 1000, 7, batch_size=250)])
    assert np.all(a <= b)
    assert (a ** -0.5).mean() >= (b ** -0.5).mean()


# ------------------------------------------------------------- estimators

def test_estimator_basics_and_jensen():
    gen = CoupledChaos(P1, 1.2, 2.0, 9, 16, with_torus=False)
    est = estimate_neg_moment(0.5, gen, 2000, seed=1, batch_size=500)
    assert est.mean > 0 and est.std_error >= 0 and est.n_samples == 2000
    masses = np.concatenate([b.cylinder[:, 0] for b in run_batches(gen, 2000, 1)])
    assert est.mean >= masses.mean() ** -0.5 - 3 * est.std_error
    rec = est.to_record("unit", {"alpha": 1.2}, 1)
    assert json.loads(json.dumps(rec))["mean"] == est.mean
    with pytest.raises(ValueError):
        estimate_neg_moment(0.0, gen, 10)


def test_too_few_accepted():
    gen = CoupledChaos(P1, 1.2, 2.0, 9, 16, with_torus=False)
    with pytest.raises(TooFewAccepted):
        estimate_neg_moment(0.5, gen, 200, conditioning=SupEvent(0.01, 2.0), seed=2)


def test_conditioned_consistency():
    # unconditioned estimate from one seed family against the event split of another
    gen = CoupledChaos(P1, 1.2, 2.0, 9, 16, with_torus=False)
    r, n, b = 0.5, 4000, 1.0
    full = estimate_neg_moment(r, gen, n, seed=3)
    inside = estimate_neg_moment(r, gen, n, conditioning=SupEvent(b, 2.0), seed=4)
    outside = Accumulator()
    for batch in run_batches(gen, n, 4):
        keep = batch.sup_cylinder >= b
        outside.add(batch.cylinder[keep, 0] ** -r)
    p_in = inside.n_accepted / n
    split = p_in * inside.mean + (1 - p_in) * outside.mean
    se = math.sqrt(full.std_error ** 2 + (p_in * inside.std_error) ** 2
                   + ((1 - p_in) * outside.std_error) ** 2)
    assert abs(full.mean - split) <= 3 * se


def test_kahane_constant_shift():
    # adding an independent N(0, c) scalar to the field multiplies the mass by
    # exp(gamma sqrt(c) N - gamma^2 c / 2)
    gamma, r, c = 1.0, 0.5, 0.3
    nodes, weights = np.polynomial.hermite_e.hermegauss(60)
    lhs = float(np.dot(weights, np.exp(-r * gamma * math.sqrt(c) * nodes)) / math.sqrt(2 * math.pi))
    assert abs(lhs - math.exp(0.5 * gamma ** 2 * r ** 2 * c)) <= 1e-12
    gen = CoupledChaos(P1, 1.2, 2.0, 9, 16, with_torus=False)
    m = np.concatenate([b.cylinder[:, 0] for b in run_batches(gen, 4000, 8)])
    shift = np.exp(gamma * math.sqrt(c) * make_rng(9).standard_normal(m.size) - 0.5 * gamma ** 2 * c)
    base, shifted = m ** -r, (m * shift) ** -r
    diff = shifted - base
    assert diff.mean() >= -3 * diff.std() / math.sqrt(m.size)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), min_size=2, max_size=5))
def test_accumulator_merge_order_independent(chunks):
    accs = []
    for c in chunks:
        a = Accumulator()
        a.add(np.array(c))
        accs.append(a)
    fwd, rev = Accumulator(), Accumulator()
    for a in accs:
        fwd = fwd.merge(a)
    for a in reversed(accs):
        rev = rev.merge(a)
    whole = Accumulator()
    whole.add(np.concatenate([np.array(c) for c in chunks]))
    assert fwd.count == rev.count == whole.count
    assert fwd.mean == rev.mean
    assert fwd.mean == pytest.approx(whole.mean, rel=1e-12, abs=1e-9)


def test_neg_moment_rejects_nonpositive_mass():
    with pytest.raises(ValueError):
        neg_moment_from_masses(np.array([1.0, 0.0]), 0.5)


# ------------------------------------------------------------- torus core / Green comparison

def _core_tail_fraction(t, n=2000, delta=0.3):
    core = t ** (1 - delta)
    geo = ChaosGeometry(P1, 1.2, t, int(round(6 * t)) + 1, 32, torus=True,
                        windows=[(-t, t), (-core, core)])
    rng = make_rng(10)
    bm = bm_batch(geo.grid, rng, n)
    m = geo.masses(torus_radial_from_bm(bm, geo.grid), rng.standard_normal((n, geo.size)))
    return np.median(1 - m[:, 1] / m[:, 0])


@pytest.mark.xfail(strict=False, reason="at t=6 the unconditioned median tail fraction is "
                   "about 0.38; the core dominance is an asymptotic statement")
def test_torus_core_dominates_tail():
    assert _core_tail_fraction(6.0) < 0.05


def _kernel_swap(t, r=1.2, n=2000, delta=0.3):
    core = t ** (1 - delta)
    nps = int(round(6 * t)) + 1
    a = ChaosGeometry(P1, 1.2, t, nps, 32, torus=True, windows=[(-core, core)])
    b = ChaosGeometry(P1, 1.2, t, nps, 32, torus=True, windows=[(-core, core)], eps=a.eps,
                      lateral_model=LateralCovarianceModel.cylinder())
    rng = make_rng(11)
    bm = bm_batch(a.grid, rng, n)
    tr = torus_radial_from_bm(bm, a.grid)
    normals = rng.standard_normal((n, a.size))
    za, zb = a.masses(tr, normals)[:, 0] ** -r, b.masses(tr, normals)[:, 0] ** -r
    dev = zb.mean() / za.mean() - 1
    se = (zb - za).std() / math.sqrt(n) / za.mean()
    # covariance change on the core (lags up to 2 core) and at the insertion
    model = LateralCovarianceModel.torus(t)
    lag = np.linspace(0, 2 * core, 60)
    th = np.linspace(0, 2 * math.pi, 40)
    d = float(np.abs(periodization_tail(model, lag[:, None], th[None, :])).max())
    g = P1.gamma
    bound = math.exp(0.5 * g * g * r * r * d + r * g * 1.2 * d) - 1
    return dev, se, bound


def test_green_comparison_transfer():
    dev3, se3, bound3 = _kernel_swap(3.0)
    dev5, se5, bound5 = _kernel_swap(5.0)
    assert abs(dev3) <= 3 * se3 + bound3
    assert abs(dev5) <= 3 * se5 + bound5
    assert abs(dev5) < abs(dev3)
    assert abs(dev3) <= 3 * se3 + 4 * math.exp(-6.0)


# ------------------------------------------------------------- lambda = Q trend

def _moment_at(t, n=2000, r=0.5):
    gen = CoupledChaos(P1, 1.2, t, int(round(6 * t)) + 1, 32, with_torus=False)
    return estimate_neg_moment(r, gen, n, seed=12, experiment_id=1)


@pytest.fixture(scope="module")
def trend():
    return {t: _moment_at(t) for t in (2.0, 4.0, 8.0)}


def test_critical_moment_decreases_in_t(trend):
    m = [trend[t] for t in (2.0, 4.0, 8.0)]
    for a, b in zip(m, m[1:]):
        assert a.mean - b.mean > 3 * math.hypot(a.std_error, b.std_error)


@pytest.mark.xfail(strict=False, reason="t E[Z_t^-r] still grows between t=4 and t=8 at this "
                   "lattice; convergence in t is slow")
def test_critical_moment_times_t_stabilizes(trend):
    a, b = trend[4.0], trend[8.0]
    assert abs(8 * b.mean - 4 * a.mean) <= 3 * math.hypot(8 * b.std_error, 4 * a.std_error)
