"""Regularised chaos masses on lattices and their negative moments."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InsertionOverlap, ModelMismatch, TooFewAccepted, WindowError
from .fields import (CovarianceKind, FieldSample, Lattice, LateralCovarianceModel,
                     covariance_matrix, diagonal_variance, green_insertion,
                     green_insertion_torus, jittered_cholesky, SIZE_CAP)
from .processes import PathKind, PathSample, SupEvent, TimeGrid, bm_batch, torus_radial_from_bm
from .special_functions import LiouvilleParams
from .streams import Accumulator, batches, make_rng, parallel_map, stream_id

MIN_ACCEPTED = 100


def config_digest(obj) -> str:
    """Short stable digest of a JSON-serialisable configuration."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha1(blob).hexdigest()[:12]


@dataclass
class ChaosMass:
    value: float
    window: tuple
    lambda_drift: float
    alpha: float
    t_half: float
    sample_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError(f"chaos mass must be positive, got {self.value}")


@dataclass
class MomentEstimate:
    mean: float
    std_error: float
    n_samples: int
    r: float
    conditioning: SupEvent | None = None
    n_accepted: int | None = None
    digest: str = ""

    def to_record(self, experiment: str, params: dict, seed_base: int) -> dict:
        return {"experiment": experiment, "params": params, "mean": self.mean,
                "std_error": self.std_error, "n": self.n_samples,
                "n_accepted": self.n_accepted, "r": self.r,
                "conditioning": None if self.conditioning is None else asdict(self.conditioning),
                "seed_base": seed_base, "digest": self.digest}


# ------------------------------------------------------------------ cell masses

def chaos_cells(fld: FieldSample, gamma: float) -> np.ndarray:
    """exp(gamma Y - gamma^2 E[Y^2] / 2) times cell area, per lattice cell."""
    return np.exp(gamma * fld.values - 0.5 * gamma * gamma * fld.diag_var) * fld.lattice.cell_areas()


def _window_mask(s: np.ndarray, window) -> np.ndarray:
    lo, hi = window
    return (s >= lo - 1e-12) & (s <= hi + 1e-12)


def _check_window(window, t_half):
    lo, hi = window
    if not (-t_half - 1e-12 <= lo < hi <= t_half + 1e-12):
        raise WindowError(f"window {window} not inside [-{t_half}, {t_half}]")


def _insertion_log_weight(lattice: Lattice, model: LateralCovarianceModel, gamma: float,
                          alpha: float) -> np.ndarray:
    """gamma alpha G(0, x) per site, -inf on the insertion site (0, 0)."""
    s, th = lattice.points()
    out = np.full(s.size, -np.inf)
    keep = ~((np.abs(s) < 1e-12) & (th == 0.0))
    if model.kind is CovarianceKind.TORUS_HT:
        out[keep] = gamma * alpha * green_insertion_torus(model, s[keep], th[keep])
    else:
        out[keep] = gamma * alpha * green_insertion(s[keep], th[keep])
    return out


def _radial_columns(lattice: Lattice, grid: TimeGrid) -> np.ndarray:
    """Column of grid.times matching each lattice s row."""
    idx = np.rint((lattice.s_array + grid.t_half) / grid.dt).astype(int)
    if not np.allclose(grid.times[idx], lattice.s_array, atol=1e-9):
        raise ValueError("radial grid and lattice do not share longitudinal sites")
    return idx


def _mass_from_field(lam, alpha, window, radial: PathSample, lateral: FieldSample,
                     params: LiouvilleParams) -> ChaosMass:
    lattice = lateral.lattice
    _check_window(window, radial.grid.t_half)
    g = params.gamma
    cols = _radial_columns(lattice, radial.grid)
    b = np.repeat(radial.values[cols], lattice.n_theta)
    s, _ = lattice.points()
    logw = _insertion_log_weight(lattice, lateral.model, g, alpha)
    mask = _window_mask(s, window)
    if not np.any(mask & (np.abs(s) > 1e-12)):
        raise InsertionOverlap(f"window {window} covers only the insertion cell row s = 0")
    cells = chaos_cells(lateral, g).ravel()
    dens = cells * np.exp(logw + g * (b + (lam - params.q_charge) * np.abs(s)))
    return ChaosMass(float(dens[mask].sum()), tuple(window), lam, alpha, radial.grid.t_half,
                     {"radial_seed": radial.seed, "lateral_seed": lateral.seed,
                      "lattice": lattice.shape, "eps": lateral.eps})


def z_mass(lam: float, alpha: float, window, radial: PathSample, lateral: FieldSample,
           params: LiouvilleParams) -> ChaosMass:
    """Drifted cylinder mass int e^{gamma (B_s + (lam - Q)|s| + alpha G(0, .))} dN over window."""
    return _mass_from_field(lam, alpha, window, radial, lateral, params)


def z_mass_torus(alpha: float, radial: PathSample, lateral: FieldSample,
                 params: LiouvilleParams, window=None) -> ChaosMass:
    """Torus mass int e^{gamma (B_t(s) + alpha G_t(0, .))} dN_t, zero drift."""
    if lateral.model.kind is not CovarianceKind.TORUS_HT:
        raise ModelMismatch("z_mass_torus needs a lateral field sampled under TorusHt")
    if radial.kind is not PathKind.TORUS_RADIAL:
        raise ModelMismatch("z_mass_torus needs a TorusRadial path")
    t = radial.grid.t_half
    return _mass_from_field(params.q_charge, alpha, window or (-t, t), radial, lateral, params)


# ------------------------------------------------------------------ batched geometry

class ChaosGeometry:
    """Precomputed lattice, Cholesky factor and log-weights for batched masses.

    Lattice sites are factorised in order of increasing |s| so that two
    geometries fed the same normals are coupled most strongly near the insertion.
    """

    def __init__(self, params: LiouvilleParams, alpha: float, t_half: float, n_per_side: int,
                 n_theta: int, eps: float | None = None, torus: bool = False,
                 lam: float | None = None, windows=None, n_periodization: int | None = None,
                 lateral_model: LateralCovarianceModel | None = None):
        self.params = params
        self.alpha = alpha
        self.grid = TimeGrid(t_half, n_per_side)
        if torus:
            self.lattice = Lattice.torus(t_half, n_per_side, n_theta)
            self.model = LateralCovarianceModel.torus(t_half, n_periodization)
        else:
            self.lattice = Lattice.cylinder(t_half, n_per_side, n_theta)
            self.model = LateralCovarianceModel.cylinder()
        if lateral_model is not None:
            # e.g. the cylinder kernel on a torus lattice, for kernel-comparison runs
            self.model = lateral_model
        if self.lattice.size > SIZE_CAP:
            raise ValueError(f"lattice of {self.lattice.size} sites exceeds the dense cap")
        self.eps = self.lattice.default_eps() if eps is None else eps
        self.torus = torus
        self.lam = params.q_charge if lam is None else lam
        g = params.gamma
        s, _ = self.lattice.points()
        self.diag_var = diagonal_variance(self.model, self.eps)
        areas = self.lattice.cell_areas().ravel()
        self.log_weight = (np.log(areas) + _insertion_log_weight(self.lattice, self.model, g, alpha)
                           + g * (self.lam - params.q_charge) * np.abs(s)
                           - 0.5 * g * g * self.diag_var)
        self.site_rows = np.repeat(_radial_columns(self.lattice, self.grid), n_theta)
        self.order = np.argsort(np.abs(s), kind="stable")
        cov = covariance_matrix(self.model, self.lattice, self.eps)
        self.factor = jittered_cholesky(cov[np.ix_(self.order, self.order)])
        windows = windows or [(-t_half, t_half)]
        for w in windows:
            _check_window(w, t_half)
            if not np.any(_window_mask(s, w) & (np.abs(s) > 1e-12)):
                raise InsertionOverlap(f"window {w} covers only the insertion cell row s = 0")
        self.windows = list(windows)
        self.window_matrix = np.column_stack([_window_mask(s, w) for w in windows]).astype(float)

    @property
    def size(self) -> int:
        return self.lattice.size

    def lateral(self, normals: np.ndarray) -> np.ndarray:
        y = np.empty_like(normals)
        y[:, self.order] = normals @ self.factor.T
        return y

    def masses(self, radial: np.ndarray, normals: np.ndarray) -> np.ndarray:
        """Masses per window, shape (n, n_windows); ``radial`` has columns grid.times."""
        expo = self.log_weight[None, :] + self.params.gamma * (radial[:, self.site_rows]
                                                              + self.lateral(normals))
        return np.exp(expo) @ self.window_matrix


@dataclass
class CoupledBatch:
    cylinder: np.ndarray | None     # (n, n_windows)
    torus: np.ndarray | None        # (n, n_windows)
    sup_cylinder: np.ndarray
    sup_torus: np.ndarray | None
    b_plus: np.ndarray
    b_minus: np.ndarray


class CoupledChaos:
    """Cylinder and torus masses on common randomness.

    The radial torus path is the cylinder Brownian path tilted to close up
    (exact in law), and both lateral fields are driven by the same normals.
    """

    def __init__(self, params: LiouvilleParams, alpha: float, t_half: float, n_per_side: int,
                 n_theta: int, eps: float | None = None, with_torus: bool = True,
                 lam: float | None = None, windows=None, with_cylinder: bool = True):
        self.cyl = ChaosGeometry(params, alpha, t_half, n_per_side, n_theta, eps,
                                 torus=False, lam=lam, windows=windows)
        self.with_cylinder = with_cylinder
        self.tor = (ChaosGeometry(params, alpha, t_half, n_per_side, n_theta, self.cyl.eps,
                                  torus=True, windows=windows) if with_torus else None)
        self.grid = self.cyl.grid

    def config(self) -> dict:
        c = self.cyl
        return {"gamma": c.params.gamma, "mu": c.params.mu, "alpha": c.alpha,
                "t_half": c.grid.t_half, "n_per_side": c.grid.n_steps,
                "n_theta": c.lattice.n_theta, "eps": c.eps, "lam": c.lam,
                "torus": self.tor is not None, "cylinder": self.with_cylinder,
                "windows": c.windows}

    def __call__(self, rng: np.random.Generator, n: int) -> CoupledBatch:
        bm = bm_batch(self.grid, rng, n)
        normals = rng.standard_normal((n, self.cyl.size))
        cyl = self.cyl.masses(bm, normals) if self.with_cylinder else None
        tor = sup_t = None
        if self.tor is not None:
            tr = torus_radial_from_bm(bm, self.grid)
            tor = self.tor.masses(tr, normals[:, : self.tor.size])
            sup_t = tr.max(axis=1)
        return CoupledBatch(cyl, tor, bm.max(axis=1), sup_t, bm[:, -1], bm[:, 0])


def run_batches(generator, n_samples: int, seed: int, experiment_id: int = 0,
                batch_size: int = 500, workers: int = 1) -> list:
    """Generator outputs over fixed-size batches with counter-based streams, in batch order."""
    def one(job):
        start, size = job
        return generator(make_rng(seed, stream_id(experiment_id, start)), size)
    return parallel_map(one, batches(n_samples, batch_size), workers)


# ------------------------------------------------------------------ estimators

def neg_moment_from_masses(masses: np.ndarray, r: float, sups: np.ndarray | None = None,
                           conditioning: SupEvent | None = None,
                           acc: Accumulator | None = None) -> Accumulator:
    """Accumulate mass^{-r}, optionally restricted to the event sup < b."""
    acc = Accumulator() if acc is None else acc
    m = np.asarray(masses, dtype=float)
    if np.any(m <= 0):
        raise ValueError("non-positive chaos mass")
    if conditioning is not None:
        m = m[np.asarray(sups) < conditioning.b]
    acc.add(m ** (-r))
    return acc


def estimate_from_accumulator(acc: Accumulator, r: float, n_total: int,
                              conditioning: SupEvent | None = None,
                              digest: str = "") -> MomentEstimate:
    if conditioning is not None and acc.count < MIN_ACCEPTED:
        raise TooFewAccepted(f"only {acc.count} paths satisfied sup < {conditioning.b}")
    return MomentEstimate(acc.mean, acc.std_error, n_total, r, conditioning,
                          acc.count if conditioning is not None else None, digest)


def estimate_neg_moment(r: float, mass_generator, n_samples: int,
                        conditioning: SupEvent | None = None, seed: int = 0,
                        experiment_id: int = 0, batch_size: int = 500,
                        which: str = "cylinder", window: int = 0,
                        workers: int = 1) -> MomentEstimate:
    """Monte Carlo E[Z^{-r}] (or E[Z^{-r} | sup < b] by rejection).

    ``mass_generator(rng, n)`` returns a :class:`CoupledBatch`; ``which`` picks
    the cylinder or torus mass and ``window`` the window column.
    """
    if not r > 0:
        raise ValueError(f"r must be positive, got {r}")
    acc = Accumulator()
    for batch in run_batches(mass_generator, n_samples, seed, experiment_id, batch_size,
                             workers):
        masses = getattr(batch, which)[:, window]
        sups = batch.sup_cylinder if which == "cylinder" else batch.sup_torus
        neg_moment_from_masses(masses, r, sups, conditioning, acc)
    digest = config_digest({"r": r, "n": n_samples, "seed": seed, "exp": experiment_id,
                            "cond": None if conditioning is None else asdict(conditioning),
                            "gen": getattr(mass_generator, "config", lambda: repr(mass_generator))()})
    return estimate_from_accumulator(acc, r, n_samples, conditioning, digest)
