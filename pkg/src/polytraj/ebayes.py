"""Empirical Bayes estimation of noise and prior parameters, and degree selection.

Marginalizing the coefficients of each trajectory gives the type-II
likelihood of a corpus,

    log p(C) = sum_i log N(c_i | 0, Sigma_o,i(theta) + Phi_i^T Sigma_w Phi_i),

which is maximized over the noise parameters ``theta`` and the prior
covariance ``Sigma_w``. Degrees are compared with the information criteria

    AIC = log p(C) / N - dof,     BIC = log p(C) / N - dof / 2 * log(m),
    dof = dof(theta) + (dn + d)(dn + d + 1) / 2.

Likelihood evaluation uses the low-rank route: with ``Sigma_w = L L^T`` and
``B = I + L^T Phi Sigma_o^-1 Phi^T L``,

    log|K| = log|Sigma_o| + log|B|,
    c^T K^-1 c = r^T Sigma_o^-1 r + |B^-1 L^T Phi Sigma_o^-1 c|^2,

where ``r`` is the residual of the posterior mean. All per-trajectory work is
batched over trajectories that share a sample count.
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import NumericalError, ParameterError, check_points, check_spd, check_taus
from .basis import BasisSpec, basis_matrix, design_matrix
from .noisemodel import (
    AgentNoiseParams,
    EgoNoiseParams,
    agent_components,
    covs_from_components,
    ego_components,
    noise_params_from_dict,
    rotation,
)
from .regress import PriorParams, posterior

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
D_SPACE = 2
# lower bound on the diagonal of the whitened prior factor; keeps unused
# coefficient directions from collapsing to a singular prior
DIAG_FLOOR = 1e-3
# smallest eigenvalue of a fitted prior relative to its largest
EIG_FLOOR = 1e-10


class OptimizationError(RuntimeError):
    """Raised when hyperparameter optimization cannot make progress.

    ``iterates`` holds the most recent parameter states for diagnosis.
    """

    def __init__(self, message, iterates=()):
        super().__init__(message)
        self.iterates = list(iterates)


# Corpus representation

@dataclass
class Observed:
    """One trajectory prepared for fitting: times, positions and noise geometry.

    ``components`` has shape ``(m, K, 2, 2)``; the noise covariance of sample
    ``j`` is ``sum_k lambda_k components[j, k]`` (see ``noisemodel``).
    """

    taus: np.ndarray
    y: np.ndarray
    components: np.ndarray
    name: str = ""

    @property
    def m(self):
        return self.taus.size


def observed_from_trajectory(traj, kind=None):
    """Prepare a ``TrackedTrajectory`` for fitting in its local frame."""
    kind = kind or traj.object_class
    if traj.object_class != kind:
        raise ValueError(f"trajectory {traj.key} is {traj.object_class!r}, cannot fit it with the {kind} model")
    taus = traj.taus()
    y = traj.local_positions()
    angle = traj.local_transform[1] if traj.local_transform is not None else 0.0
    if kind == "ego":
        comps = ego_components(taus.size, angle)
    elif kind == "agent":
        delta = traj.xy - traj.ego_xy
        r = np.hypot(delta[:, 0], delta[:, 1])
        u = delta / np.where(r > 0, r, 1.0)[:, None]
        u[r == 0] = (1.0, 0.0)
        u = u @ rotation(-angle).T
        comps = agent_components(r, u)
    else:
        raise ValueError(f"unknown object class {kind!r}")
    return Observed(taus, y, comps, f"{traj.scenario_id}/{traj.object_id}/{float(traj.t[0])!r}")


def _prepare(corpus, kind):
    items = []
    for item in corpus:
        if not isinstance(item, Observed):
            item = observed_from_trajectory(item, kind)
        items.append(item)
    if not items:
        raise ValueError("corpus is empty")
    k = items[0].components.shape[1]
    if any(it.components.shape[1] != k for it in items):
        raise ValueError("corpus mixes noise models")
    # canonical order makes every reduction independent of input order
    items.sort(key=lambda it: (it.name, it.m, it.y.tobytes(), it.taus.tobytes()))
    groups = {}
    for it in items:
        groups.setdefault(it.m, []).append(it)
    return [
        (
            np.stack([it.taus for it in grp]),
            np.stack([it.y for it in grp]),
            np.stack([it.components for it in grp]),
        )
        for _, grp in sorted(groups.items())
    ]


# Noise parameter codecs: unconstrained vector <-> variance components

class _EgoCodec:
    kind = "ego"
    n_theta = 2
    theta_floor = np.array([-30.0, -np.inf])

    @staticmethod
    def lambdas(z):
        s2 = np.exp(2.0 * z[0])
        t = np.tanh(z[1])
        lam = np.array([s2, s2 * t])
        jac = np.array([[2.0 * s2, 0.0], [2.0 * s2 * t, s2 * (1.0 - t * t)]])
        return lam, jac

    @staticmethod
    def params(z):
        s = np.exp(z[0])
        return EgoNoiseParams(float(s), float(s * s * np.tanh(z[1])))

    @staticmethod
    def encode(p):
        return np.array([np.log(p.sigma_diag), np.arctanh(p.sigma_cov / p.sigma_diag**2)])

    @staticmethod
    def initial(resid_var):
        return np.array([0.5 * np.log(resid_var), 0.0])


class _AgentCodec:
    kind = "agent"
    n_theta = 5
    theta_floor = np.full(5, -40.0)

    @staticmethod
    def lambdas(z):
        # z = log [sigma_alpha, beta0, beta1, beta2, sigma_c]
        e = np.exp(z)
        lam = np.array([e[1], e[2], e[3], e[0] ** 2, e[4] ** 2])
        jac = np.zeros((5, 5))
        jac[0, 1], jac[1, 2], jac[2, 3] = e[1], e[2], e[3]
        jac[3, 0] = 2.0 * e[0] ** 2
        jac[4, 4] = 2.0 * e[4] ** 2
        return lam, jac

    @staticmethod
    def params(z):
        e = np.exp(z)
        return AgentNoiseParams(*(float(v) for v in e))

    @staticmethod
    def encode(p):
        return np.log([p.sigma_alpha, p.beta0, p.beta1, p.beta2, p.sigma_c])

    @staticmethod
    def initial(resid_var):
        v = resid_var
        return np.log([np.sqrt(v) / 40.0, v / 6.0, v / 120.0, v / 2400.0, np.sqrt(v / 2.0)])


CODECS = {"ego": _EgoCodec, "agent": _AgentCodec}
THETA_DOF = {"ego": 2, "agent": 5}


# Likelihood kernels

def _block_inverse(S):
    a, b, c = S[..., 0, 0], S[..., 0, 1], S[..., 1, 1]
    det = a * c - b * b
    W = np.empty_like(S)
    W[..., 0, 0] = c / det
    W[..., 1, 1] = a / det
    W[..., 0, 1] = W[..., 1, 0] = -b / det
    return W, det


def _group_terms(V, y, S, Lt, need_grad, VV=None):
    """Per-trajectory log marginal likelihoods for one group of equal-length trajectories.

    Returns ``(logp, grad_S, grad_Lt)`` where ``grad_S`` has the shape of ``S``
    and ``grad_Lt`` is the summed gradient with respect to the full prior
    factor ``Lt``; gradients are ``None`` unless requested. ``VV`` optionally
    supplies the cached outer products of the basis rows.
    """
    N, m, p = V.shape
    D = p * D_SPACE
    W, det = _block_inverse(S)
    if not (np.all(det > 0) and np.all(S[..., 0, 0] > 0)):
        raise np.linalg.LinAlgError("observation covariance block not positive definite")

    if VV is None:
        VV = _outer_rows(V)
    P = np.matmul(VV.transpose(0, 2, 1), W.reshape(N, m, 4))
    P = P.reshape(N, p, p, 2, 2).transpose(0, 1, 3, 2, 4).reshape(N, D, D)
    Wy = np.einsum("njab,njb->nja", W, y)
    b = np.matmul(V.transpose(0, 2, 1), Wy).reshape(N, D)

    PL = P @ Lt
    B = np.eye(D) + Lt.T @ PL
    chol = np.linalg.cholesky(B)
    chol_inv = np.linalg.inv(chol)
    B_inv = np.matmul(chol_inv.transpose(0, 2, 1), chol_inv)
    x = np.einsum("nij,nj->ni", B_inv, b @ Lt)

    def residuals(x):
        fitted = np.matmul(V, (x @ Lt.T).reshape(N, p, D_SPACE))
        res = y - fitted
        Wr = np.einsum("njab,njb->nja", W, res)
        return res, Wr, np.matmul(V.transpose(0, 2, 1), Wr).reshape(N, D)

    # B is badly conditioned for precise sensors, which leaves an error in x that
    # the gradient (first order in the residual) would inherit; one refinement
    # step against the residual taken directly from y removes it
    res, Wr, e = residuals(x)
    x = x + np.einsum("nij,nj->ni", B_inv, e @ Lt - x)
    res, Wr, e = residuals(x)
    quad = np.einsum("nja,nja->n", res, Wr) + np.einsum("nd,nd->n", x, x)
    logdet = np.log(det).sum(axis=1) + 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    logp = -0.5 * (logdet + quad + m * D_SPACE * LOG_2PI)
    if not need_grad:
        return logp, None, None

    post = Lt @ B_inv @ Lt.T
    post4 = post.reshape(N, p, 2, p, 2).transpose(0, 1, 3, 2, 4).reshape(N, p * p, 4)
    C = np.matmul(VV, post4).reshape(N, m, 2, 2)
    # Wr is K^-1 c restricted to sample j
    grad_S = 0.5 * (Wr[..., :, None] * Wr[..., None, :] - W + W @ C @ W)

    # e = Phi K^-1 y; d logp / d Lt = e e^T Lt - P Lt B^-1
    grad_Lt = e.T @ (e @ Lt) - np.einsum("nij,njk->ik", PL, B_inv)
    return logp, grad_S, grad_Lt


def _outer_rows(V):
    N, m, p = V.shape
    return (V[:, :, :, None] * V[:, :, None, :]).reshape(N, m, p * p)


def _prior_factor(prior_cov):
    _, chol = check_spd(prior_cov, "prior covariance")
    return chol


def log_marginal(observations, taus, noise_cov, prior_cov, spec, method="lowrank"):
    """Log type-II likelihood (nats) of one trajectory.

    Parameters
    ----------
    observations : array-like of shape (m, 2)
    taus : array-like of shape (m,)
    noise_cov : array-like of shape (m, 2, 2) or (2, 2)
        Per-sample observation covariances.
    prior_cov : array-like of shape ((n+1)2, (n+1)2)
    spec : BasisSpec
    method : {"lowrank", "dense"}
        ``dense`` factorizes the full ``2m x 2m`` marginal covariance;
        ``lowrank`` works with the ``(n+1)2`` square system only.
    """
    taus = check_taus(taus)
    y = check_points(observations, m=taus.size)
    S = np.broadcast_to(np.asarray(noise_cov, dtype=float), (taus.size, 2, 2)).copy()
    if isinstance(prior_cov, PriorParams):
        prior_cov = prior_cov.cov
    if method == "dense":
        Phi = design_matrix(spec, taus)
        K = Phi.T @ np.asarray(prior_cov) @ Phi
        for j in range(taus.size):
            K[2 * j:2 * j + 2, 2 * j:2 * j + 2] += S[j]
        try:
            chol = np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            raise ParameterError("marginal covariance is not positive definite") from None
        z = np.linalg.solve(chol, y.ravel())
        return float(-0.5 * (2.0 * np.log(np.diag(chol)).sum() + z @ z + y.size * LOG_2PI))
    if method != "lowrank":
        raise ValueError(f"unknown method {method!r}")
    Lt = _prior_factor(prior_cov)
    V = basis_matrix(spec, taus)[None]
    try:
        logp, _, _ = _group_terms(V, y[None], S[None], Lt, False)
    except np.linalg.LinAlgError:
        raise ParameterError("marginal covariance is not positive definite") from None
    return float(logp[0])


class _Objective:
    """Corpus log type-II likelihood as a function of unconstrained parameters.

    Parameter vector: noise coordinates followed by the lower triangle (row
    major) of ``L``, whose diagonal is stored as logs. The prior covariance
    is ``L0 L L^T L0^T`` with a fixed scaling factor ``L0``.
    """

    def __init__(self, groups, spec, codec, L0):
        self.groups = [(basis_matrix(spec, taus.ravel()).reshape(taus.shape + (spec.n_basis,)), y, comps)
                       for taus, y, comps in groups]
        self.outer = [_outer_rows(V) for V, _, _ in self.groups]
        self.spec = spec
        self.codec = codec
        self.L0 = L0
        self.D = spec.n_coef
        self.tril = np.tril_indices(self.D)
        self.diag_pos = np.flatnonzero(self.tril[0] == self.tril[1])
        self.n_traj = sum(y.shape[0] for _, y, _ in self.groups)

    @property
    def size(self):
        return self.codec.n_theta + self.tril[0].size

    def bounds(self):
        """Box constraints: the factor diagonal stays above a fixed fraction of its initial scale."""
        lo = np.full(self.size, -np.inf)
        lo[:self.codec.n_theta] = self.codec.theta_floor
        lo[self.codec.n_theta + self.diag_pos] = np.log(DIAG_FLOOR)
        return lo

    def unpack(self, z):
        theta = z[:self.codec.n_theta]
        L = np.zeros((self.D, self.D))
        L[self.tril] = z[self.codec.n_theta:]
        L[np.diag_indices(self.D)] = np.exp(np.diag(L))
        return theta, L

    def pack(self, theta, L):
        raw = L.copy()
        raw[np.diag_indices(self.D)] = np.log(np.diag(L))
        return np.concatenate([theta, raw[self.tril]])

    def prior_cov(self, z):
        _, L = self.unpack(z)
        Lt = self.L0 @ L
        return Lt @ Lt.T

    def __call__(self, z, need_grad=True, subset=None):
        """Total log type-II likelihood and its gradient in unconstrained coordinates."""
        theta, L = self.unpack(z)
        lam, jac = self.codec.lambdas(theta)
        Lt = self.L0 @ L
        total = 0.0
        g_lam = np.zeros(lam.size)
        g_Lt = np.zeros((self.D, self.D))
        for gi, (V, y, comps) in enumerate(self.groups):
            if subset is not None:
                idx = subset[gi]
                if idx.size == 0:
                    continue
                V, y, comps, VV = V[idx], y[idx], comps[idx], self.outer[gi][idx]
            else:
                VV = self.outer[gi]
            S = covs_from_components(comps, lam)
            logp, g_S, g_L = _group_terms(V, y, S, Lt, need_grad, VV)
            total += logp.sum()
            if need_grad:
                g_lam += np.tensordot(comps, g_S, axes=([0, 1, 3, 4], [0, 1, 2, 3]))
                g_Lt += g_L
        if not need_grad:
            return total, None
        g_L = self.L0.T @ g_Lt
        g_raw = g_L[self.tril]
        g_raw[self.diag_pos] *= np.diag(L)
        return total, np.concatenate([jac.T @ g_lam, g_raw])


# Hyperparameters and scores

@dataclass
class HyperParams:
    """Noise parameters, coefficient prior and degree fitted to one corpus."""

    noise: object
    prior: PriorParams
    degree: int
    family: str = "monomial"
    horizon: float = float("nan")
    log_type2: float = float("nan")
    n_trajectories: int = 0

    @property
    def kind(self):
        return self.noise.kind

    @property
    def spec(self):
        h = self.horizon if np.isfinite(self.horizon) else 1.0
        return BasisSpec(self.family, self.degree, h)

    def to_dict(self):
        return {
            "class": self.kind,
            "degree": int(self.degree),
            "family": self.family,
            "horizon": float(self.horizon),
            "noise": self.noise.to_dict(),
            "prior_cov": self.prior.cov.tolist(),
            "log_type2": float(self.log_type2),
            "n_trajectories": int(self.n_trajectories),
        }

    @classmethod
    def from_dict(cls, data):
        noise = noise_params_from_dict(data["noise"])
        if "class" in data and data["class"] != noise.kind:
            raise ParameterError(f"class {data['class']!r} does not match noise keys ({noise.kind})")
        return cls(
            noise=noise,
            prior=PriorParams(np.array(data["prior_cov"], dtype=float)),
            degree=int(data["degree"]),
            family=data.get("family", "monomial"),
            horizon=float(data.get("horizon", float("nan"))),
            log_type2=float(data.get("log_type2", float("nan"))),
            n_trajectories=int(data.get("n_trajectories", 0)),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def dof(kind, degree, d=D_SPACE):
    """Degrees of freedom of the noise model plus a full prior covariance."""
    k = d * degree + d
    return THETA_DOF[kind] + k * (k + 1) // 2


@dataclass(frozen=True)
class ModelScore:
    """Information criteria of one fitted degree (higher is better)."""

    degree: int
    log_type2: float
    aic: float
    bic: float
    dof: int
    n_trajectories: int
    m: int
    aic_conventional: float
    bic_conventional: float

    def to_dict(self):
        return asdict(self)


def model_score(log_type2, kind, degree, n_trajectories, m):
    k = dof(kind, degree)
    per_traj = log_type2 / n_trajectories
    return ModelScore(
        degree=int(degree),
        log_type2=float(log_type2),
        aic=float(per_traj - k),
        bic=float(per_traj - 0.5 * k * np.log(m)),
        dof=k,
        n_trajectories=int(n_trajectories),
        m=int(m),
        aic_conventional=float(log_type2 - k),
        bic_conventional=float(log_type2 - 0.5 * k * np.log(n_trajectories)),
    )


@dataclass
class OptimizerConfig:
    """Settings for maximizing the type-II likelihood.

    ``method`` is ``"lbfgs"`` (quasi-Newton on the analytic gradient) or
    ``"gradient"`` (plain ascent with step growth on success and halving on
    rejection). ``tol`` bounds the max-norm of the per-trajectory gradient in
    unconstrained coordinates; ``ftol`` is the relative objective change at
    which L-BFGS also stops. ``batch_size > 0`` subsamples trajectories per step and is
    only supported by ``"gradient"``.
    """

    max_iter: int = 2000
    tol: float = 1e-6
    ftol: float = 1e-10
    method: str = "lbfgs"
    step_size: float = 0.05
    step_growth: float = 1.25
    max_halvings: int = 40
    batch_size: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        if self.method not in ("lbfgs", "gradient"):
            raise ValueError(f"unknown optimizer method {self.method!r}")
        if not (self.tol > 0 and self.step_size > 0 and self.max_iter > 0):
            raise ValueError("optimizer tolerances, step size and iteration count must be positive")
        if self.batch_size and self.method != "gradient":
            raise ValueError("minibatching requires method='gradient'")


@dataclass
class FitResult:
    hyper: HyperParams
    n_iter: int
    converged: bool
    grad_norm: float
    history: list = field(default_factory=list, repr=False)


def _initial_point(groups, spec, codec):
    """Least-squares coefficients give the prior scale; their residuals the noise scale."""
    p = spec.n_basis
    second = np.zeros((spec.n_coef, spec.n_coef))
    rss, resid_dof, count = 0.0, 0, 0
    for taus, y, _ in groups:
        N, m = taus.shape
        V = basis_matrix(spec, taus.ravel()).reshape(N, m, p)
        G = np.matmul(V.transpose(0, 2, 1), V)
        ridge = 1e-10 * np.trace(G, axis1=1, axis2=2)[:, None, None] * np.eye(p)
        coef = np.linalg.solve(G + ridge, np.matmul(V.transpose(0, 2, 1), y))
        rss += np.sum((y - V @ coef) ** 2)
        resid_dof += N * max(m - p, 0) * D_SPACE
        flat = coef.reshape(N, -1)
        second += flat.T @ flat
        count += N
    second /= count
    if resid_dof > 0 and rss > 0:
        resid_var = rss / resid_dof
    else:
        resid_var = 1e-4
    scale = np.diag(second).copy()
    scale[scale <= 0] = max(scale.max(), 1.0)
    sigma0 = second + 1e-3 * np.diag(scale)
    L0 = np.linalg.cholesky(0.5 * (sigma0 + sigma0.T))
    return codec.initial(resid_var), L0


def _run_lbfgs(obj, z0, cfg):
    n = obj.n_traj
    history = []

    def fun(z):
        try:
            val, grad = obj(z)
        except np.linalg.LinAlgError:
            return np.inf, np.zeros_like(z)
        if not (np.isfinite(val) and np.all(np.isfinite(grad))):
            return np.inf, np.zeros_like(z)
        history.append(float(val))
        return -val / n, -grad / n

    lo = obj.bounds()
    bounds = [(None if not np.isfinite(b) else b, None) for b in lo]
    res = optimize.minimize(
        fun, z0, jac=True, method="L-BFGS-B", bounds=bounds,
        options={"maxiter": cfg.max_iter, "gtol": cfg.tol, "ftol": cfg.ftol, "maxcor": 30},
    )
    if not np.isfinite(res.fun):
        raise OptimizationError("type-II likelihood became non-finite", [res.x.tolist()])
    grad_norm = _projected_norm(res.x, res.jac, lo)
    converged = grad_norm <= cfg.tol or (res.success and res.nit < cfg.max_iter)
    return res.x, int(res.nit), converged, grad_norm, history


def _projected_norm(z, grad_min, lo):
    """Max-norm of the gradient of a minimization, ignoring components pushing into active bounds."""
    g = np.array(grad_min, dtype=float)
    g[(z <= lo + 1e-12) & (g > 0)] = 0.0
    return float(np.max(np.abs(g)))


def _run_gradient(obj, z0, cfg):
    rng = np.random.default_rng(cfg.rng_seed)
    lo = obj.bounds()
    sizes = [y.shape[0] for _, y, _ in obj.groups]
    z, step = z0.copy(), cfg.step_size
    history, recent = [], [z0.tolist()]
    grad_norm = np.inf
    for it in range(1, cfg.max_iter + 1):
        subset = None
        if cfg.batch_size:
            pick = np.sort(rng.choice(sum(sizes), size=min(cfg.batch_size, sum(sizes)), replace=False))
            bounds = np.cumsum([0] + sizes)
            subset = [pick[(pick >= a) & (pick < b)] - a for a, b in zip(bounds[:-1], bounds[1:])]
        n_used = sum(sizes) if subset is None else sum(s.size for s in subset)
        val, grad = obj(z, subset=subset)
        if not np.isfinite(val):
            raise OptimizationError("type-II likelihood is non-finite at the current iterate", recent)
        grad = grad / n_used
        val = val / n_used
        history.append(float(val))
        grad_norm = _projected_norm(z, -grad, lo)
        if grad_norm <= cfg.tol:
            return z, it, True, grad_norm, history
        for _ in range(cfg.max_halvings):
            trial = np.maximum(z + step * grad, lo)
            try:
                new, _ = obj(trial, need_grad=False, subset=subset)
                new /= n_used
            except np.linalg.LinAlgError:
                new = -np.inf
            if np.isfinite(new) and new >= val:
                z = trial
                step *= cfg.step_growth
                break
            step *= 0.5
        else:
            raise OptimizationError("no ascent step found after repeated halving", recent)
        recent = (recent + [z.tolist()])[-5:]
    return z, cfg.max_iter, False, grad_norm, history


def fit_hyperparams(corpus, spec, kind=None, cfg=None, init=None):
    """Maximize the corpus type-II likelihood over noise and prior parameters.

    Parameters
    ----------
    corpus : sequence of TrackedTrajectory or Observed
        Trajectories of a single class, each in its local frame.
    spec : BasisSpec
    kind : {"ego", "agent"}, optional
        Noise model; inferred from the trajectories' class when omitted.
    cfg : OptimizerConfig, optional
    init : HyperParams, optional
        Starting point; defaults to a least-squares based guess.

    Returns
    -------
    FitResult
    """
    cfg = cfg or OptimizerConfig()
    corpus = list(corpus)
    if kind is None:
        kinds = {getattr(t, "object_class", None) for t in corpus}
        if len(kinds) != 1 or None in kinds:
            raise ValueError("cannot infer a single noise model for this corpus; pass kind")
        kind = kinds.pop()
    codec = CODECS[kind]
    groups = _prepare(corpus, kind)
    expected_k = 2 if kind == "ego" else 5
    if groups[0][2].shape[2] != expected_k:
        raise ValueError(f"corpus geometry does not match the {kind} noise model")

    if init is None:
        theta0, L0 = _initial_point(groups, spec, codec)
    else:
        theta0 = codec.encode(init.noise)
        L0 = np.linalg.cholesky(init.prior.cov)
    obj = _Objective(groups, spec, codec, L0)
    z0 = obj.pack(theta0, np.eye(spec.n_coef))

    runner = _run_lbfgs if cfg.method == "lbfgs" else _run_gradient
    z, n_iter, converged, grad_norm, history = runner(obj, z0, cfg)
    if not converged:
        logger.warning("type-II optimization stopped after %d iterations (grad %.3g)", n_iter, grad_norm)

    theta, _ = obj.unpack(z)
    total, _ = obj(z, need_grad=False)
    cov = _stabilized(obj.prior_cov(z))
    hyper = HyperParams(
        noise=codec.params(theta),
        prior=PriorParams(cov),
        degree=spec.degree,
        family=spec.family,
        horizon=spec.horizon,
        log_type2=float(total),
        n_trajectories=obj.n_traj,
    )
    return FitResult(hyper, n_iter, converged, grad_norm, history)


def _stabilized(cov):
    """Symmetrize and clip eigenvalues to ``EIG_FLOOR`` times the largest one.

    Directions the data pin down exactly (the local frame fixes the start
    point and initial heading) drive their prior variance to zero at the
    optimum; the floor keeps every later posterior solve well conditioned.
    """
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    top = vals[-1]
    if not top > 0:
        raise NumericalError("fitted prior covariance has no positive eigenvalue")
    floor = EIG_FLOOR * top
    if vals[0] >= floor:
        return cov
    logger.info("prior covariance: %d eigenvalue(s) raised to %.3g", int(np.sum(vals < floor)), floor)
    out = (vecs * np.maximum(vals, floor)) @ vecs.T
    return 0.5 * (out + out.T)


def corpus_log_marginal(corpus, hyper, kind=None):
    """Total log type-II likelihood of a corpus under fixed hyperparameters."""
    kind = kind or hyper.kind
    groups = _prepare(list(corpus), kind)
    spec = hyper.spec
    lam = hyper.noise.variance_components()
    Lt = np.linalg.cholesky(hyper.prior.cov)
    total = 0.0
    for taus, y, comps in groups:
        N, m = taus.shape
        V = basis_matrix(spec, taus.ravel()).reshape(N, m, spec.n_basis)
        try:
            logp, _, _ = _group_terms(V, y, covs_from_components(comps, lam), Lt, False)
        except np.linalg.LinAlgError:
            raise NumericalError("marginal covariance factorization failed") from None
        total += logp.sum()
    return float(total), sum(g[0].shape[0] for g in groups)


def nominal_m(corpus):
    counts = [len(t.taus) if isinstance(t, Observed) else len(t.t) for t in corpus]
    return int(np.median(counts))


def score(corpus, hyper, m=None):
    """Information criteria of ``hyper`` on ``corpus``.

    ``m`` is the nominal number of samples per trajectory; by default the
    median sample count of the corpus.
    """
    corpus = list(corpus)
    total, n = corpus_log_marginal(corpus, hyper)
    return model_score(total, hyper.kind, hyper.degree, n, m or nominal_m(corpus))


CRITERIA = ("paper-aic", "aic", "bic")


@dataclass
class ScanResult:
    scores: list
    fits: list
    degree_aic: int
    degree_bic: int
    degree_aic_conventional: int

    def selected(self, criterion="paper-aic"):
        return {"paper-aic": self.degree_aic, "bic": self.degree_bic,
                "aic": self.degree_aic_conventional}[criterion]

    def fit_for(self, degree):
        for f in self.fits:
            if f.hyper.degree == degree:
                return f
        raise KeyError(degree)


def scan_degrees(corpus, degrees, kind=None, cfg=None, family="monomial", horizon=1.0, m=None):
    """Fit every degree independently and pick the best one per criterion."""
    corpus = list(corpus)
    degrees = list(degrees)
    if not degrees:
        raise ValueError("degree range is empty")
    m = m or nominal_m(corpus)
    fits, scores = [], []
    for n in degrees:
        spec = BasisSpec(family, n, horizon)
        result = fit_hyperparams(corpus, spec, kind, cfg)
        fits.append(result)
        s = model_score(result.hyper.log_type2, result.hyper.kind, n, result.hyper.n_trajectories, m)
        scores.append(s)
        logger.info("degree %d: log type-II %.6g, AIC %.6g, BIC %.6g", n, s.log_type2, s.aic, s.bic)
    best = lambda key: scores[int(np.argmax([getattr(s, key) for s in scores]))].degree
    return ScanResult(scores, fits, best("aic"), best("bic"), best("aic_conventional"))


SCORE_COLUMNS = ("n", "log_type2", "aic", "bic", "dof")


def write_scores(scores, csv_path=None, json_path=None):
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SCORE_COLUMNS)
            for s in scores:
                writer.writerow([s.degree, repr(s.log_type2), repr(s.aic), repr(s.bic), s.dof])
    if json_path:
        with open(json_path, "w") as fh:
            json.dump([s.to_dict() for s in scores], fh, indent=2)


# Estimator front-ends

def _as_observed(X, kind):
    X = list(X)
    if not X:
        raise ValueError("empty corpus")
    return [x if isinstance(x, Observed) else observed_from_trajectory(x, kind) for x in X]


class EmpiricalBayesTrajectoryModel(BaseEstimator):
    """Type-II maximum likelihood fit of noise and prior for one degree.

    ``fit`` takes a sequence of trajectories (``TrackedTrajectory`` in local
    frame, or prepared ``Observed`` records). ``transform`` maps trajectories
    to posterior coefficient vectors.

    Attributes
    ----------
    hyper_ : HyperParams
    noise_params_ : EgoNoiseParams or AgentNoiseParams
    prior_cov_ : ndarray of shape ((degree+1)*2, (degree+1)*2)
    log_type2_ : float
    n_iter_ : int
    converged_ : bool
    """

    def __init__(self, degree=5, noise_model="agent", family="monomial", horizon=1.0,
                 method="lbfgs", max_iter=2000, tol=1e-6, batch_size=0, random_state=0):
        self.degree = degree
        self.noise_model = noise_model
        self.family = family
        self.horizon = horizon
        self.method = method
        self.max_iter = max_iter
        self.tol = tol
        self.batch_size = batch_size
        self.random_state = random_state

    def _cfg(self):
        return OptimizerConfig(max_iter=self.max_iter, tol=self.tol, method=self.method,
                               batch_size=self.batch_size, rng_seed=self.random_state)

    def fit(self, X, y=None):
        obs = _as_observed(X, self.noise_model)
        spec = BasisSpec(self.family, self.degree, self.horizon)
        result = fit_hyperparams(obs, spec, self.noise_model, self._cfg())
        self.hyper_ = result.hyper
        self.noise_params_ = result.hyper.noise
        self.prior_cov_ = result.hyper.prior.cov
        self.log_type2_ = result.hyper.log_type2
        self.n_iter_ = result.n_iter
        self.converged_ = result.converged
        self.n_trajectories_ = result.hyper.n_trajectories
        self.m_ = nominal_m(obs)
        return self

    def score(self, X, y=None):
        """Mean log type-II likelihood per trajectory."""
        check_is_fitted(self, "hyper_")
        obs = _as_observed(X, self.noise_model)
        total, n = corpus_log_marginal(obs, self.hyper_)
        return total / n

    def information_criteria(self, X=None):
        check_is_fitted(self, "hyper_")
        if X is None:
            return model_score(self.log_type2_, self.noise_model, self.degree, self.n_trajectories_, self.m_)
        return score(_as_observed(X, self.noise_model), self.hyper_)

    def posterior(self, X):
        """Posterior fits (one per trajectory, in input order)."""
        check_is_fitted(self, "hyper_")
        spec = BasisSpec(self.family, self.degree, self.horizon)
        lam = self.noise_params_.variance_components()
        fits = []
        for ob in _as_observed(X, self.noise_model):
            fits.append(posterior(ob.y, ob.taus, covs_from_components(ob.components, lam),
                                  self.hyper_.prior, spec, name=ob.name))
        return fits

    def transform(self, X):
        return np.stack([f.mean for f in self.posterior(X)])


class DegreeSelector(BaseEstimator):
    """Scan polynomial degrees and keep the one maximizing an information criterion.

    Attributes
    ----------
    scores_ : list of ModelScore
    degree_ : int
        Degree selected by ``criterion``.
    degree_aic_, degree_bic_ : int
    best_estimator_ : EmpiricalBayesTrajectoryModel
    """

    def __init__(self, degrees=range(1, 9), criterion="paper-aic", noise_model="agent",
                 family="monomial", horizon=1.0, method="lbfgs", max_iter=2000, tol=1e-6):
        self.degrees = degrees
        self.criterion = criterion
        self.noise_model = noise_model
        self.family = family
        self.horizon = horizon
        self.method = method
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        if self.criterion not in CRITERIA:
            raise ValueError(f"criterion must be one of {CRITERIA}")
        obs = _as_observed(X, self.noise_model)
        cfg = OptimizerConfig(max_iter=self.max_iter, tol=self.tol, method=self.method)
        scan = scan_degrees(obs, self.degrees, self.noise_model, cfg, self.family, self.horizon)
        self.scan_ = scan
        self.scores_ = scan.scores
        self.degree_aic_ = scan.degree_aic
        self.degree_bic_ = scan.degree_bic
        self.degree_ = scan.selected(self.criterion)
        chosen = scan.fit_for(self.degree_)
        est = EmpiricalBayesTrajectoryModel(self.degree_, self.noise_model, self.family, self.horizon,
                                            self.method, self.max_iter, self.tol)
        est.hyper_ = chosen.hyper
        est.noise_params_ = chosen.hyper.noise
        est.prior_cov_ = chosen.hyper.prior.cov
        est.log_type2_ = chosen.hyper.log_type2
        est.n_iter_ = chosen.n_iter
        est.converged_ = chosen.converged
        est.n_trajectories_ = chosen.hyper.n_trajectories
        est.m_ = nominal_m(obs)
        self.best_estimator_ = est
        return self

    def transform(self, X):
        check_is_fitted(self, "best_estimator_")
        return self.best_estimator_.transform(X)
