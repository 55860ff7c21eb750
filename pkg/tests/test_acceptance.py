"""End-to-end acceptance checks.

Each test prints a single ``PASS``/``FAIL`` line with the measured quantity so
``pytest -v`` output doubles as an acceptance report.
"""

import time

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from polytraj import ebayes as eb
from polytraj.basis import BasisSpec, design_matrix, evaluate
from polytraj.ebayes import OptimizerConfig, fit_hyperparams, log_marginal, scan_degrees
from polytraj.noisemodel import rotation
from polytraj.regress import ade, posterior, solve_from_kinematics, transform_coefficients
from polytraj.synth import SynthConfig, generate
from polytraj.trajdata import TrackedTrajectory, outlier_flags, to_local_frame


@pytest.fixture
def verdict(capsys):
    def report(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
        assert ok, detail
    return report


def random_spd(rng, k):
    A = rng.normal(size=(k, k))
    return A @ A.T + 0.5 * np.eye(k)


def random_blocks(rng, m):
    A = rng.normal(scale=0.2, size=(m, 2, 2))
    return A @ np.swapaxes(A, 1, 2) + 0.01 * np.eye(2)


def random_instance(rng, n_max=6, m_min=2, m_max=60):
    n = int(rng.integers(0, n_max + 1))
    m = int(rng.integers(max(m_min, n + 1), m_max + 1))
    spec = BasisSpec("monomial", n)
    taus = np.sort(rng.uniform(0, 1, m))
    coef = rng.normal(scale=2.0, size=(spec.n_basis, 2))
    y = evaluate(spec, coef, taus) + rng.normal(scale=0.1, size=(m, 2))
    return spec, taus, y, random_blocks(rng, m), random_spd(rng, spec.n_coef)


def dense_noise(blocks):
    m = len(blocks)
    out = np.zeros((2 * m, 2 * m))
    for j, b in enumerate(blocks):
        out[2 * j:2 * j + 2, 2 * j:2 * j + 2] = b
    return out


def rel_err(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300)


def test_criterion_1_posterior_oracle(verdict):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        spec, taus, y, blocks, prior = random_instance(rng)
        fit = posterior(y, taus, blocks, prior, spec)
        # plain-inverse information form
        Phi = design_matrix(spec, taus)
        Wo = np.linalg.inv(dense_noise(blocks))
        cov = np.linalg.inv(np.linalg.inv(prior) + Phi @ Wo @ Phi.T)
        mean = cov @ Phi @ Wo @ y.ravel()
        worst = max(worst, rel_err(fit.coef.ravel(), mean), rel_err(fit.cov, cov))
    elapsed = time.perf_counter() - start
    verdict(1, worst <= 1e-10 and elapsed < 10.0, f"max rel err {worst:.2e}, {elapsed:.2f} s")


def test_criterion_2_marginal_likelihood_identity(verdict):
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        spec, taus, y, blocks, prior = random_instance(rng)
        low = log_marginal(y, taus, blocks, prior, spec, method="lowrank")
        dense = log_marginal(y, taus, blocks, prior, spec, method="dense")
        Phi = design_matrix(spec, taus)
        oracle = multivariate_normal(np.zeros(y.size), Phi.T @ prior @ Phi + dense_noise(blocks)).logpdf(y.ravel())
        worst = max(worst, abs(low - dense) / abs(dense), abs(low - oracle) / abs(oracle))
    elapsed = time.perf_counter() - start
    verdict(2, worst <= 1e-9 and elapsed < 10.0, f"max rel err {worst:.2e}, {elapsed:.2f} s")


def _objective(kind, seed):
    corpus, _ = generate(SynthConfig(n_trajectories=20, m=15, degree=3, object_class=kind, rng_seed=seed))
    spec = BasisSpec("monomial", 3, 5.0)
    groups = eb._prepare(corpus, kind)
    codec = eb.CODECS[kind]
    theta0, L0 = eb._initial_point(groups, spec, codec)
    obj = eb._Objective(groups, spec, codec, L0)
    return obj, obj.pack(theta0, np.eye(spec.n_coef))


def test_criterion_3_gradient_finite_differences(verdict):
    rng = np.random.default_rng(303)
    h = 1e-5
    worst = 0.0
    for k in range(10):
        kind = ("ego", "agent")[k % 2]
        obj, z0 = _objective(kind, seed=k)
        z = z0 + 0.1 * rng.standard_normal(obj.size)
        _, grad = obj(z)
        fd = np.array([(obj(z + h * e, False)[0] - obj(z - h * e, False)[0]) / (2 * h) for e in np.eye(obj.size)])
        # componentwise; the floor only matters for components that vanish identically
        scale = np.maximum(np.abs(fd), 1e-12 * np.max(np.abs(fd)))
        worst = max(worst, np.max(np.abs(fd - grad) / scale))
    verdict(3, worst <= 1e-4, f"max componentwise rel err {worst:.2e} over 10 points")


@pytest.mark.slow
def test_criterion_4_hyperparameter_recovery(verdict):
    cfg = SynthConfig(n_trajectories=5000, m=50, horizon=5.0, degree=5, object_class="agent", noise="A2",
                      rng_seed=1)
    corpus, truth = generate(cfg)
    start = time.perf_counter()
    result = fit_hyperparams(corpus, cfg.spec, "agent", OptimizerConfig(max_iter=3000))
    elapsed = time.perf_counter() - start
    true, est = cfg.noise_params(), result.hyper.noise
    errors = {
        "sigma_alpha": abs(est.sigma_alpha / true.sigma_alpha - 1),
        "sigma_c": abs(est.sigma_c / true.sigma_c - 1),
    }
    for r in (10.0, 20.0, 40.0):
        errors[f"sigma_r({r:g})"] = abs(est.sigma_r(r) / true.sigma_r(r) - 1)
    prior_err = rel_err(result.hyper.prior.cov, truth.prior_cov)
    ok = max(errors.values()) <= 0.10 and prior_err <= 0.15 and elapsed < 600
    detail = ", ".join(f"{k} {v:.1%}" for k, v in errors.items())
    verdict(4, ok, f"{detail}, Sigma_w {prior_err:.1%} Frobenius, {elapsed:.0f} s")


@pytest.mark.slow
def test_criterion_5_model_selection(verdict):
    hits, runs = {}, 20
    for n_star in (2, 3, 5):
        hits[n_star] = 0
        for seed in range(runs):
            cfg = SynthConfig(n_trajectories=60, m=50, horizon=5.0, degree=n_star, object_class="ego",
                              noise="A2", prior="bezier", rng_seed=1000 * n_star + seed)
            corpus, _ = generate(cfg)
            # over-parameterized degrees crawl towards a singular prior long after the
            # likelihood has settled, so the scan caps iterations
            scan = scan_degrees(corpus, range(1, 9), "ego", OptimizerConfig(max_iter=300), horizon=5.0)
            hits[n_star] += scan.degree_aic == n_star
    ok = all(h >= 0.95 * runs for h in hits.values())
    verdict(5, ok, ", ".join(f"n*={n}: {h}/{runs}" for n, h in hits.items()))


def test_criterion_6_kinematic_determination(verdict):
    cfg = SynthConfig(n_trajectories=100, degree=5, object_class="agent", noise="zero", rng_seed=6)
    _, truth = generate(cfg)
    spec = cfg.spec
    worst = 0.0
    for flat in truth.coefficients:
        coef = flat.reshape(spec.n_basis, 2)
        cons = [(tau, k, evaluate(spec, coef, [tau], k)[0]) for tau in (0.0, 1.0) for k in range(3)]
        worst = max(worst, np.max(np.abs(solve_from_kinematics(cons, spec) - coef)))
    verdict(6, worst < 1e-9, f"max coefficient error {worst:.2e} on 100 trajectories")


def _track(t, xy, horizon=5.0, heading=np.nan):
    t = np.asarray(t, float)
    m = t.size
    return TrackedTrajectory("s", "o", "agent", t, np.asarray(xy, float), np.zeros((m, 2)), np.zeros(m),
                             np.full(m, heading), horizon=horizon)


def _constructed_cases(rng):
    t = np.linspace(0.0, 5.0, 50)
    cases = []
    for _ in range(10):
        start = rng.uniform(10, 100, size=2)
        angle = rng.uniform(-np.pi, np.pi)
        u = np.array([np.cos(angle), np.sin(angle)])
        speed = rng.uniform(5, 15)
        line = start + np.outer(speed * t, u)

        jumped = line.copy()
        jumped[rng.integers(5, 45)] += rng.uniform(3.0, 8.0) * rotation(rng.uniform(0, 2 * np.pi))[:, 0]
        cases.append(("rts", _track(t, jumped)))

        # sustained accelerations: hard braking lasts 2.5 s before standstill
        braking = rng.uniform(-14.0, -11.0)
        for accel, v0 in ((rng.uniform(7.0, 9.0), speed), (braking, -2.5 * braking)):
            v = np.maximum(v0 + accel * t, 0.0)
            s = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * np.diff(t))])
            cases.append(("rts", _track(t, start + np.outer(s, u))))

        jitter = start + rng.uniform(-0.15, 0.15, size=(50, 2))
        cases.append(("static", _track(t, jitter)))

        reset = line.copy()
        reset[rng.integers(25, 50):] = 0.0
        cases.append(("out_of_view", _track(t, reset)))

        stretch = rng.uniform(1.5, 3.0)
        cases.append(("time", _track(t * stretch, start + np.outer(speed * t, u))))

        cases.append((None, _track(t, line)))
    return cases


def test_criterion_7_outlier_gates(verdict):
    cases = _constructed_cases(np.random.default_rng(707))
    wrong = []
    for intended, traj in cases:
        expected = set() if intended is None else {intended}
        flags = outlier_flags(traj)
        if flags != expected:
            wrong.append((intended, sorted(flags)))
    verdict(7, not wrong, f"{len(cases) - len(wrong)}/{len(cases)} constructed cases flagged as intended"
                          + (f", mismatches {wrong[:5]}" if wrong else ""))


def test_criterion_8_invariance(verdict):
    rng = np.random.default_rng(808)
    worst = {"posterior": 0.0, "ade": 0.0, "log_marginal": 0.0, "local_frame": 0.0}
    for _ in range(50):
        spec, taus, y, blocks, prior = random_instance(rng, n_max=6, m_min=10)
        y = y + rng.uniform(-50, 50, size=2)
        angle = rng.uniform(-np.pi, np.pi)
        shift = rng.uniform(-100, 100, size=2)
        R = rotation(angle)
        K = np.kron(np.eye(spec.n_basis), R)
        moved_blocks = R @ blocks @ R.T
        moved_prior = K @ prior @ K.T

        base = posterior(y, taus, blocks, prior, spec)
        moved = posterior(y @ R.T, taus, moved_blocks, moved_prior, spec)
        worst["posterior"] = max(worst["posterior"],
                                 np.max(np.abs(moved.coef - transform_coefficients(base.coef, spec, angle))),
                                 np.max(np.abs(moved.cov - K @ base.cov @ K.T)))
        heads = rng.uniform(-np.pi, np.pi, taus.size)
        e1, e2 = ade([base], [y], [heads]), ade([moved], [y @ R.T], [heads + angle])
        worst["ade"] = max(worst["ade"], abs(e1.ade_lon - e2.ade_lon), abs(e1.ade_lat - e2.ade_lat))

        a = log_marginal(y, taus, blocks, prior, spec)
        b = log_marginal(y @ R.T, taus, moved_blocks, moved_prior, spec)
        worst["log_marginal"] = max(worst["log_marginal"], abs(a - b) / abs(a))

        # a full rigid motion (rotation and translation) of a track leaves its
        # local-frame data, and hence every downstream fit, unchanged
        t = taus * 5.0
        heading = rng.uniform(-np.pi, np.pi)
        world = _track(t, y, heading=heading)
        rigid = _track(t, y @ R.T + shift, heading=heading + angle)
        la, lb = to_local_frame(world).local_positions(), to_local_frame(rigid).local_positions()
        worst["local_frame"] = max(worst["local_frame"], np.max(np.abs(la - lb)))

    ok = (worst["posterior"] < 1e-9 and worst["ade"] < 1e-9 and worst["log_marginal"] < 1e-8
          and worst["local_frame"] < 1e-9)
    verdict(8, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
