"""Polynomial basis functions of rescaled time and design-matrix assembly.

A trajectory over a horizon ``T`` is written as ``c(tau) = sum_k phi_k(tau) w_k``
with ``tau = (t - t0) / T`` in [0, 1] and spatial coefficient points ``w_k``.
Coefficient vectors are stacked point-major, i.e. ``w = [w_0, ..., w_n]`` with
each ``w_k`` of length ``d``, so index ``k * d + a`` holds axis ``a`` of point
``k``.
"""

from dataclasses import dataclass
from math import comb, factorial

import numpy as np

from ._validation import check_taus

MAX_DEGREE = 12
FAMILIES = ("monomial", "bernstein")


@dataclass(frozen=True)
class BasisSpec:
    """Polynomial family, degree and horizon of a trajectory representation.

    Parameters
    ----------
    family : {"monomial", "bernstein"}
        Basis family. Both span the same space of polynomials.
    degree : int
        Polynomial degree ``n``; the basis has ``n + 1`` functions.
    horizon : float
        Length ``T`` of the time window in seconds.
    spatial_dim : int
        Dimension ``d`` of the coefficient points.
    """

    family: str = "monomial"
    degree: int = 5
    horizon: float = 1.0
    spatial_dim: int = 2

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown basis family {self.family!r}; expected one of {FAMILIES}")
        if int(self.degree) != self.degree or not 0 <= self.degree <= MAX_DEGREE:
            raise ValueError(f"degree must be an integer in [0, {MAX_DEGREE}], got {self.degree}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if int(self.spatial_dim) != self.spatial_dim or self.spatial_dim < 1:
            raise ValueError(f"spatial_dim must be a positive integer, got {self.spatial_dim}")

    @property
    def n_basis(self):
        return self.degree + 1

    @property
    def n_coef(self):
        """Length of the stacked coefficient vector, ``(n + 1) d``."""
        return (self.degree + 1) * self.spatial_dim

    def with_family(self, family):
        return BasisSpec(family, self.degree, self.horizon, self.spatial_dim)


def _monomial_matrix(degree, taus, order):
    out = np.zeros((taus.size, degree + 1))
    for k in range(order, degree + 1):
        out[:, k] = factorial(k) // factorial(k - order) * taus ** (k - order)
    return out


def _bernstein_matrix(degree, taus, order):
    if order > degree:
        return np.zeros((taus.size, degree + 1))
    if order == 0:
        k = np.arange(degree + 1)
        coef = np.array([comb(degree, i) for i in k], dtype=float)
        return coef * taus[:, None] ** k * (1.0 - taus[:, None]) ** (degree - k)
    # d/dtau B_{k,n} = n (B_{k-1,n-1} - B_{k,n-1})
    lower = _bernstein_matrix(degree - 1, taus, order - 1)
    padded = np.zeros((taus.size, degree + 2))
    padded[:, 1:-1] = lower
    return degree * (padded[:, :-1] - padded[:, 1:])


def basis_matrix(spec, taus, order=0):
    """Evaluate all basis functions (or a derivative) at several rescaled times.

    Returns an array of shape ``(m, n + 1)`` whose row ``j`` is
    ``phi^(order)(tau_j)``. Derivatives are taken with respect to ``tau``;
    divide by ``spec.horizon ** order`` for physical time.
    """
    taus = check_taus(taus)
    if order < 0 or int(order) != order:
        raise ValueError(f"derivative order must be a non-negative integer, got {order}")
    if spec.family == "monomial":
        return _monomial_matrix(spec.degree, taus, int(order))
    return _bernstein_matrix(spec.degree, taus, int(order))


def eval_basis(spec, tau, order=0):
    """Return the vector ``phi^(order)(tau)`` of length ``n + 1``.

    Derivative orders above the degree give an all-zero vector.

    >>> eval_basis(BasisSpec("monomial", 3), 0.5)
    array([1.   , 0.5  , 0.25 , 0.125])
    """
    if np.ndim(tau) != 0:
        raise ValueError("eval_basis takes a scalar tau; use basis_matrix for arrays")
    return basis_matrix(spec, [tau], order)[0]


def design_matrix(spec, taus):
    """Assemble the ``(n+1)d x md`` matrix whose column block ``j`` is ``phi(tau_j) kron I_d``.

    Its transpose maps a stacked coefficient vector to the stacked positions
    ``[c(tau_1), ..., c(tau_m)]``.
    """
    values = basis_matrix(spec, taus)
    return np.kron(values.T, np.eye(spec.spatial_dim))


def evaluate(spec, coef, taus, order=0):
    """Evaluate the curve (or a tau-derivative) for coefficients of shape ``(n+1, d)``."""
    coef = np.asarray(coef, dtype=float).reshape(spec.n_basis, -1)
    return basis_matrix(spec, taus, order) @ coef


def _bernstein_to_monomial(degree):
    # B_k(tau) = sum_{j>=k} (-1)^(j-k) C(n, j) C(j, k) tau^j
    out = np.zeros((degree + 1, degree + 1))
    for k in range(degree + 1):
        for j in range(k, degree + 1):
            out[j, k] = (-1) ** (j - k) * comb(degree, j) * comb(j, k)
    return out


def _monomial_to_bernstein(degree):
    # tau^j = sum_{k>=j} C(k, j) / C(n, j) B_k(tau)
    out = np.zeros((degree + 1, degree + 1))
    for j in range(degree + 1):
        for k in range(j, degree + 1):
            out[k, j] = comb(k, j) / comb(degree, j)
    return out


def basis_change(source, target):
    """Matrix ``M`` mapping coefficients in ``source`` to coefficients in ``target``.

    For any coefficients ``w``, the curve ``phi_source(tau)^T w`` equals
    ``phi_target(tau)^T (M w)``; equivalently ``phi_target(tau)^T M =
    phi_source(tau)^T``. Apply ``M`` to each spatial axis, or use
    ``np.kron(M, np.eye(d))`` on stacked coefficient vectors.
    """
    if source.degree != target.degree:
        raise ValueError(f"basis change needs equal degrees, got {source.degree} and {target.degree}")
    if source.spatial_dim != target.spatial_dim:
        raise ValueError("basis change needs equal spatial dimensions")
    n = source.degree
    if source.family == target.family:
        return np.eye(n + 1)
    if source.family == "bernstein":
        return _bernstein_to_monomial(n)
    return _monomial_to_bernstein(n)


def stacked_basis_change(source, target):
    """Basis change acting on stacked ``(n+1)d`` coefficient vectors."""
    return np.kron(basis_change(source, target), np.eye(source.spatial_dim))


def constant_coefficients(spec):
    """Coefficients (per basis function) representing the constant curve 1."""
    if spec.family == "bernstein":
        return np.ones(spec.n_basis)
    out = np.zeros(spec.n_basis)
    out[0] = 1.0
    return out
