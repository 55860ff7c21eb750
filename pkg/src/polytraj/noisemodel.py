"""Structured observation-noise covariances for ego and agent trajectories.

Ego positions carry a constant 2x2 covariance in world coordinates. Agent
positions are measured by range/bearing sensors on the ego vehicle, so their
covariance is built in polar coordinates around the line of sight, linearized
to Cartesian coordinates and rotated into the world frame:

    Sigma = R (diag(sigma_r^2(r), r^2 sigma_alpha^2) + sigma_c^2 I) R^T,
    sigma_r^2(r) = beta0 + beta1 r + beta2 r^2,

where ``R`` rotates the line-of-sight frame into the world frame.

Both models are linear in a small vector of variance components, which the
empirical Bayes fit uses to differentiate the likelihood:

    Sigma_j = sum_k lambda_k(theta) B_jk
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from ._validation import ParameterError


def rotation(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class EgoNoiseParams:
    """Constant ego noise: equal variance on both axes plus a covariance term."""

    sigma_diag: float
    sigma_cov: float = 0.0

    kind = "ego"
    names = ("sigma_diag", "sigma_cov")

    def __post_init__(self):
        if not self.sigma_diag > 0:
            raise ParameterError(f"sigma_diag must be positive, got {self.sigma_diag}")
        # relative margin so that sigma_cov equal to sigma_diag^2 up to rounding counts as singular
        if not abs(self.sigma_cov) < self.sigma_diag**2 * (1.0 - 1e-12):
            raise ParameterError(
                f"|sigma_cov| must be below sigma_diag^2 = {self.sigma_diag**2:.3g}, got {self.sigma_cov}"
            )

    def variance_components(self):
        return np.array([self.sigma_diag**2, self.sigma_cov])

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class AgentNoiseParams:
    """Range/bearing agent noise with a range-dependent range variance."""

    sigma_alpha: float
    beta0: float
    beta1: float
    beta2: float
    sigma_c: float

    kind = "agent"
    names = ("sigma_alpha", "beta0", "beta1", "beta2", "sigma_c")

    def __post_init__(self):
        for name in self.names:
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be strictly positive, got {getattr(self, name)}")

    def variance_components(self):
        return np.array([self.beta0, self.beta1, self.beta2, self.sigma_alpha**2, self.sigma_c**2])

    def sigma_r(self, r):
        """Range standard deviation at distance ``r`` (what the summary tables report)."""
        return np.sqrt(range_variance(self, r))

    def to_dict(self):
        return asdict(self)


def noise_params_from_dict(data):
    """Build ego or agent parameters from their JSON key set."""
    keys = set(data)
    if keys == set(EgoNoiseParams.names):
        return EgoNoiseParams(**{k: float(data[k]) for k in EgoNoiseParams.names})
    if keys == set(AgentNoiseParams.names):
        return AgentNoiseParams(**{k: float(data[k]) for k in AgentNoiseParams.names})
    raise ParameterError(f"unrecognized noise parameter keys: {sorted(keys)}")


def dump_noise_params(params, path):
    with open(path, "w") as fh:
        json.dump(params.to_dict(), fh, indent=2)


def load_noise_params(path):
    with open(path) as fh:
        return noise_params_from_dict(json.load(fh))


@dataclass(frozen=True)
class SampleGeometry:
    """Ego-to-agent geometry at one timestamp.

    ``bearing`` is the world-frame direction of the agent as seen from the
    ego. The rotation from the line-of-sight frame (range axis first) to the
    world frame is ``rotation(bearing)``; composing the bearing relative to
    the ego heading with the ego heading itself gives the same matrix.
    """

    r: float
    bearing: float

    def __post_init__(self):
        if not self.r >= 0:
            raise ValueError(f"range must be non-negative, got {self.r}")

    @classmethod
    def from_positions(cls, ego_xy, agent_xy):
        delta = np.asarray(agent_xy, float) - np.asarray(ego_xy, float)
        return cls(float(np.hypot(*delta)), float(np.arctan2(delta[1], delta[0])))

    @property
    def R(self):
        return rotation(self.bearing)


def ego_cov(params):
    s2 = params.sigma_diag**2
    return np.array([[s2, params.sigma_cov], [params.sigma_cov, s2]])


def range_variance(params, r):
    """Range variance ``beta0 + beta1 r + beta2 r^2``."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("range must be non-negative")
    return params.beta0 + params.beta1 * r + params.beta2 * r**2


def agent_cov_world(params, geom):
    """World-frame covariance of one agent position measurement.

    At ``r = 0`` the cross-range term vanishes and only ``sigma_c^2`` remains
    across the line of sight.
    """
    polar = np.diag([range_variance(params, geom.r), geom.r**2 * params.sigma_alpha**2])
    R = geom.R
    cov = R @ (polar + params.sigma_c**2 * np.eye(2)) @ R.T
    return 0.5 * (cov + cov.T)


def assemble_block_cov(per_sample):
    """Block-diagonal ``md x md`` covariance from per-sample ``d x d`` blocks."""
    blocks = np.asarray(per_sample, dtype=float)
    if blocks.ndim != 3 or blocks.shape[1] != blocks.shape[2] or blocks.shape[0] < 1:
        raise ValueError(f"expected a non-empty stack of square blocks, got shape {blocks.shape}")
    m, d, _ = blocks.shape
    for j, block in enumerate(blocks):
        try:
            np.linalg.cholesky(block)
        except np.linalg.LinAlgError:
            raise ParameterError(f"covariance block of sample {j} is not positive definite") from None
    out = np.zeros((m * d, m * d))
    for j, block in enumerate(blocks):
        out[j * d:(j + 1) * d, j * d:(j + 1) * d] = block
    return out


# Linear decomposition used by the likelihood gradient.

def ego_components(m, frame_angle=0.0):
    """Component matrices ``B`` of shape (m, 2, 2, 2) for the ego model.

    ``frame_angle`` is the rotation from world to the fitting frame, so the
    world covariance is conjugated by ``rotation(-frame_angle)``.
    """
    Rl = rotation(-frame_angle)
    swap = Rl @ np.array([[0.0, 1.0], [1.0, 0.0]]) @ Rl.T
    comp = np.stack([np.eye(2), swap])
    return np.broadcast_to(comp, (m, 2, 2, 2)).copy()


def agent_components(ranges, los):
    """Component matrices of shape (m, 5, 2, 2) for the agent model.

    ``los`` holds unit line-of-sight vectors (ego to agent) expressed in the
    fitting frame; ``ranges`` the matching distances.
    """
    r = np.asarray(ranges, dtype=float)
    u = np.asarray(los, dtype=float)
    v = np.stack([-u[:, 1], u[:, 0]], axis=1)
    uu = u[:, :, None] * u[:, None, :]
    vv = v[:, :, None] * v[:, None, :]
    eye = np.broadcast_to(np.eye(2), uu.shape)
    return np.stack(
        [uu, r[:, None, None] * uu, (r**2)[:, None, None] * uu, (r**2)[:, None, None] * vv, eye],
        axis=1,
    )


def covs_from_components(components, lambdas):
    """Per-sample covariances ``sum_k lambda_k B_k``; works on any leading shape."""
    return np.einsum("...kab,k->...ab", components, lambdas)
