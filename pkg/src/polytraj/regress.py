"""Closed-form Bayesian regression of trajectories onto a polynomial basis.

With a zero-mean Gaussian prior ``N(0, Sigma_w)`` on the stacked coefficients
and block-diagonal observation noise ``Sigma_o``, the posterior is

    Sigma_post = (Sigma_w^-1 + Phi Sigma_o^-1 Phi^T)^-1
    w_post     = Sigma_post Phi Sigma_o^-1 c_obs

This module evaluates it in information form with Cholesky solves, measures
representation error (average distance error with longitudinal/lateral
projections) and solves for coefficients from kinematic constraints.
"""

import csv
from dataclasses import dataclass, field
from math import ceil

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import NumericalError, ParameterError, check_points, check_spd, check_taus
from .basis import BasisSpec, basis_matrix, constant_coefficients, eval_basis
from .noisemodel import rotation

COND_LIMIT = 1e12
PERCENTILE = 0.999


class RankError(NumericalError):
    """Raised when kinematic constraints do not determine the coefficients."""


@dataclass(frozen=True)
class PriorParams:
    """Zero-mean Gaussian prior over the stacked ``(n+1)d`` coefficients."""

    cov: np.ndarray

    def __post_init__(self):
        cov, _ = check_spd(self.cov, "prior covariance")
        object.__setattr__(self, "cov", cov)

    @property
    def size(self):
        return self.cov.shape[0]

    def transformed(self, M):
        """Prior for coefficients ``M w`` (congruent transform ``M Sigma M^T``)."""
        cov = M @ self.cov @ M.T
        return PriorParams(0.5 * (cov + cov.T))


@dataclass
class PosteriorFit:
    """Posterior over one trajectory's coefficients and its fitted positions."""

    spec: BasisSpec
    mean: np.ndarray
    cov: np.ndarray
    taus: np.ndarray
    fitted: np.ndarray
    fitted_cov: np.ndarray

    @property
    def coef(self):
        """Posterior mean as an ``(n+1, d)`` array of coefficient points."""
        return self.mean.reshape(self.spec.n_basis, self.spec.spatial_dim)

    def predict(self, taus, order=0, return_cov=False):
        values = basis_matrix(self.spec, taus, order)
        mean = values @ self.coef
        if not return_cov:
            return mean
        d = self.spec.spatial_dim
        cov4 = self.cov.reshape(self.spec.n_basis, d, self.spec.n_basis, d)
        cov = np.einsum("jk,jl,kalb->jab", values, values, cov4)
        return mean, cov


def _as_blocks(noise, m, d):
    noise = np.asarray(noise, dtype=float)
    if noise.shape == (m * d, m * d):
        return np.stack([noise[j * d:(j + 1) * d, j * d:(j + 1) * d] for j in range(m)])
    if noise.shape == (d, d):
        return np.broadcast_to(noise, (m, d, d))
    if noise.shape == (m, d, d):
        return noise
    raise ValueError(f"noise covariance has shape {noise.shape}; expected ({m}, {d}, {d}) or ({m * d}, {m * d})")


def _block_precisions(blocks, name=None):
    try:
        chol = np.linalg.cholesky(blocks)
    except np.linalg.LinAlgError:
        where = f" of {name}" if name else ""
        raise ParameterError(f"observation covariance{where} is not positive definite") from None
    eye = np.broadcast_to(np.eye(blocks.shape[-1]), blocks.shape)
    linv = np.linalg.solve(chol, eye)
    return np.swapaxes(linv, -1, -2) @ linv


def posterior(observations, taus, noise_cov, prior, spec, name=None):
    """Posterior mean and covariance of the coefficients of one trajectory.

    Parameters
    ----------
    observations : array-like of shape (m, d)
        Measured positions, in the frame the prior refers to.
    taus : array-like of shape (m,)
        Rescaled sample times in [0, 1].
    noise_cov : array-like
        Per-sample blocks ``(m, d, d)``, one shared ``(d, d)`` block, or the
        full block-diagonal ``(md, md)`` matrix.
    prior : PriorParams or array-like
        Prior covariance over the stacked coefficients.
    spec : BasisSpec
    name : str, optional
        Trajectory label used in error messages.

    Returns
    -------
    PosteriorFit

    Raises
    ------
    NumericalError
        If the posterior precision has a condition number above 1e12.
    """
    taus = check_taus(taus)
    d = spec.spatial_dim
    y = check_points(observations, m=taus.size, d=d)
    if not isinstance(prior, PriorParams):
        prior = PriorParams(np.asarray(prior, dtype=float))
    if prior.size != spec.n_coef:
        raise ValueError(f"prior has size {prior.size}, basis needs {spec.n_coef}")
    blocks = _as_blocks(noise_cov, taus.size, d)
    W = _block_precisions(blocks, name)
    V = basis_matrix(spec, taus)
    D = spec.n_coef

    info = np.einsum("jk,jl,jab->kalb", V, V, W).reshape(D, D)
    rhs = np.einsum("jk,jab,jb->ka", V, W, y).reshape(D)
    prior_chol = linalg.cho_factor(prior.cov, lower=True)
    precision = linalg.cho_solve(prior_chol, np.eye(D)) + info
    precision = 0.5 * (precision + precision.T)

    cond = np.linalg.cond(precision)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        label = name or "trajectory"
        raise NumericalError(f"posterior precision of {label} is ill-conditioned (cond {cond:.3g})")
    chol = linalg.cho_factor(precision, lower=True)
    cov = linalg.cho_solve(chol, np.eye(D))
    cov = 0.5 * (cov + cov.T)
    mean = linalg.cho_solve(chol, rhs)

    coef = mean.reshape(spec.n_basis, d)
    cov4 = cov.reshape(spec.n_basis, d, spec.n_basis, d)
    fitted = V @ coef
    fitted_cov = np.einsum("jk,jl,kalb->jab", V, V, cov4)
    return PosteriorFit(spec, mean, cov, taus, fitted, fitted_cov)


def transform_coefficients(coef, spec, angle=0.0, translation=(0.0, 0.0)):
    """Apply a rigid motion to coefficient points.

    Rotation acts on every point; translation enters through the basis
    coefficients of the constant curve, so the represented curve moves by
    exactly ``translation``.
    """
    coef = np.asarray(coef, dtype=float).reshape(spec.n_basis, 2)
    ones = constant_coefficients(spec)
    return coef @ rotation(angle).T + np.outer(ones, np.asarray(translation, dtype=float))


def nearest_rank(values, q):
    """Nearest-rank percentile: the smallest value with at least ``q`` of the data at or below it."""
    values = np.sort(np.asarray(values, dtype=float).ravel())
    if values.size == 0:
        raise ValueError("cannot take a percentile of an empty sample")
    idx = max(int(ceil(q * values.size)) - 1, 0)
    return float(values[idx])


@dataclass
class ErrorReport:
    """Representation-error summary pooled over all samples of a corpus."""

    ade: float
    ade_lon: float
    ade_lat: float
    p999: float
    p999_lon: float
    p999_lat: float
    per_trajectory: np.ndarray
    distances: np.ndarray = field(repr=False)
    lon: np.ndarray = field(repr=False)
    lat: np.ndarray = field(repr=False)

    @property
    def n_samples(self):
        return self.distances.size

    def quantiles(self, qs=(0.25, 0.5, 0.75, 0.999)):
        """Nearest-rank quantiles of the absolute lon/lat errors and distances."""
        return [
            {
                "quantile": q,
                "lon": nearest_rank(np.abs(self.lon), q),
                "lat": nearest_rank(np.abs(self.lat), q),
                "distance": nearest_rank(self.distances, q),
            }
            for q in qs
        ]


def ade(fits, observations, headings):
    """Average distance error of posterior fits against their observations.

    Residuals are projected onto the per-sample heading direction
    (longitudinal) and its left normal (lateral). All inputs must share one
    coordinate frame.
    """
    if len(fits) != len(observations) or len(fits) != len(headings):
        raise ValueError("fits, observations and headings must be aligned")
    if len(fits) == 0:
        raise ValueError("no trajectories to evaluate")
    dists, lons, lats, per_traj = [], [], [], []
    for i, (fit, obs, head) in enumerate(zip(fits, observations, headings)):
        obs = np.asarray(obs, dtype=float)
        if head is None:
            raise ValueError(f"trajectory {i} has no heading source")
        head = np.broadcast_to(np.asarray(head, dtype=float), (obs.shape[0],))
        if not np.all(np.isfinite(head)):
            raise ValueError(f"trajectory {i} has missing headings")
        res = fit.fitted - obs
        lon = res[:, 0] * np.cos(head) + res[:, 1] * np.sin(head)
        lat = -res[:, 0] * np.sin(head) + res[:, 1] * np.cos(head)
        dist = np.hypot(res[:, 0], res[:, 1])
        dists.append(dist)
        lons.append(lon)
        lats.append(lat)
        per_traj.append(dist.mean())
    dist = np.concatenate(dists)
    lon = np.concatenate(lons)
    lat = np.concatenate(lats)
    return ErrorReport(
        ade=float(np.mean(dist)),
        ade_lon=float(np.mean(np.abs(lon))),
        ade_lat=float(np.mean(np.abs(lat))),
        p999=nearest_rank(dist, PERCENTILE),
        p999_lon=nearest_rank(np.abs(lon), PERCENTILE),
        p999_lat=nearest_rank(np.abs(lat), PERCENTILE),
        per_trajectory=np.asarray(per_traj),
        distances=dist,
        lon=lon,
        lat=lat,
    )


ERROR_COLUMNS = ("class", "T", "n", "ade_lon", "ade_lat", "p999_lon", "p999_lat")


def write_error_table(rows, path):
    """Write ``(object_class, horizon, degree, ErrorReport)`` rows as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ERROR_COLUMNS)
        for object_class, horizon, degree, report in rows:
            writer.writerow([
                object_class, repr(float(horizon)), int(degree),
                repr(report.ade_lon), repr(report.ade_lat),
                repr(report.p999_lon), repr(report.p999_lat),
            ])


def solve_from_kinematics(constraints, spec):
    """Coefficients that satisfy ``n + 1`` kinematic constraints exactly.

    Each constraint is ``(tau, order, value)``: the ``order``-th derivative
    with respect to rescaled time at ``tau`` must equal ``value``.

    Returns
    -------
    ndarray of shape (n + 1, d)
    """
    constraints = list(constraints)
    if len(constraints) != spec.n_basis:
        raise ValueError(f"need exactly {spec.n_basis} constraints, got {len(constraints)}")
    rows = np.array([eval_basis(spec, tau, order) for tau, order, _ in constraints])
    values = np.array([np.asarray(v, dtype=float).reshape(spec.spatial_dim) for _, _, v in constraints])
    if np.linalg.matrix_rank(rows) < spec.n_basis:
        raise RankError("kinematic constraints are linearly dependent")
    return np.linalg.solve(rows, values)


class BayesianTrajectoryRegressor(RegressorMixin, BaseEstimator):
    """Posterior polynomial fit of one trajectory.

    ``X`` holds rescaled sample times (shape ``(m,)`` or ``(m, 1)``) and ``y``
    the observed positions ``(m, 2)``. The noise covariance can be given per
    sample at fit time.

    Parameters
    ----------
    degree : int, default=5
    family : {"monomial", "bernstein"}, default="monomial"
    horizon : float, default=1.0
        Window length in seconds; only used to convert derivatives.
    prior_cov : array-like of shape ((degree+1)*2, (degree+1)*2), optional
        Coefficient prior covariance. Defaults to ``1e4 * I`` (a weak prior).
    noise_cov : array-like of shape (2, 2), optional
        Shared observation covariance used when ``fit`` receives no
        ``sample_cov``. Defaults to ``0.01 * I``.
    """

    def __init__(self, degree=5, family="monomial", horizon=1.0, prior_cov=None, noise_cov=None):
        self.degree = degree
        self.family = family
        self.horizon = horizon
        self.prior_cov = prior_cov
        self.noise_cov = noise_cov

    def _spec(self):
        return BasisSpec(self.family, self.degree, self.horizon)

    def fit(self, X, y, sample_cov=None):
        spec = self._spec()
        taus = check_taus(X)
        y = check_points(y, m=taus.size)
        prior = self.prior_cov if self.prior_cov is not None else 1e4 * np.eye(spec.n_coef)
        if sample_cov is None:
            sample_cov = self.noise_cov if self.noise_cov is not None else 0.01 * np.eye(2)
        self.fit_ = posterior(y, taus, sample_cov, prior, spec)
        self.coef_ = self.fit_.coef
        self.coef_cov_ = self.fit_.cov
        self.n_features_in_ = 1
        return self

    def predict(self, X, return_cov=False, order=0):
        """Posterior mean positions (or derivatives in physical time) at ``X``."""
        check_is_fitted(self, "fit_")
        out = self.fit_.predict(check_taus(X), order=order, return_cov=return_cov)
        scale = self.horizon ** -order
        if return_cov:
            return out[0] * scale, out[1] * scale**2
        return out * scale
