"""Input validation helpers shared by the estimators and the functional API."""

import numpy as np


class NumericalError(ArithmeticError):
    """Raised when a factorization fails or a system is too ill-conditioned."""


class ParameterError(ValueError):
    """Raised when noise or prior parameters violate their invariants."""


def check_taus(taus, *, allow_empty=False):
    """Return rescaled times as a 1-D float array, checking they lie in [0, 1]."""
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    if taus.ndim == 2 and taus.shape[1] == 1:
        taus = taus[:, 0]
    if taus.ndim != 1:
        raise ValueError(f"rescaled times must be 1-D, got shape {taus.shape}")
    if taus.size == 0 and not allow_empty:
        raise ValueError("at least one sample time is required")
    if not np.all(np.isfinite(taus)):
        raise ValueError("rescaled times must be finite")
    if np.any(taus < 0.0) or np.any(taus > 1.0):
        raise ValueError(
            f"rescaled times must lie in [0, 1], got range "
            f"[{taus.min():.6g}, {taus.max():.6g}]"
        )
    return taus


def check_points(points, m=None, d=2, name="observations"):
    points = np.asarray(points, dtype=float)
    if points.ndim == 1 and d == 1:
        points = points[:, None]
    if points.ndim != 2 or points.shape[1] != d:
        raise ValueError(f"{name} must have shape (m, {d}), got {points.shape}")
    if m is not None and points.shape[0] != m:
        raise ValueError(f"{name} has {points.shape[0]} rows, expected {m}")
    if not np.all(np.isfinite(points)):
        raise ValueError(f"{name} contain non-finite values")
    return points


def check_spd(matrix, name="matrix", size=None):
    """Validate a symmetric positive-definite matrix; return it and its Cholesky factor."""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ParameterError(f"{name} must be square, got shape {matrix.shape}")
    if size is not None and matrix.shape[0] != size:
        raise ParameterError(f"{name} must be {size}x{size}, got {matrix.shape}")
    scale = max(np.abs(matrix).max(), np.finfo(float).tiny)
    if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-12 * scale):
        raise ParameterError(f"{name} is not symmetric")
    try:
        chol = np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise ParameterError(f"{name} is not positive definite") from exc
    return matrix, chol


def check_block_covs(blocks, m=None, d=2):
    """Validate a stack of per-sample d x d covariance blocks."""
    blocks = np.asarray(blocks, dtype=float)
    if blocks.ndim == 2:
        blocks = blocks[None]
    if blocks.ndim != 3 or blocks.shape[1:] != (d, d):
        raise ParameterError(f"covariance blocks must have shape (m, {d}, {d}), got {blocks.shape}")
    if m is not None and blocks.shape[0] != m:
        raise ParameterError(f"expected {m} covariance blocks, got {blocks.shape[0]}")
    for j, block in enumerate(blocks):
        try:
            np.linalg.cholesky(block)
        except np.linalg.LinAlgError as exc:
            raise ParameterError(f"covariance block of sample {j} is not positive definite") from exc
        if not np.allclose(block, block.T, rtol=1e-12, atol=1e-300):
            raise ParameterError(f"covariance block of sample {j} is not symmetric")
    return blocks
