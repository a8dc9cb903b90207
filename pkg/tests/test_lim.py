import numpy as np
import pytest
import scipy.linalg

from limkit.eof import PcSeries
from limkit.errors import DataError, InstabilityError, NumericsError
from limkit.lim import (
    LimOperator,
    deterministic_forecast,
    estimate_cyclostationary_lim,
    estimate_stationary_lim,
    forecast_covariance,
    integrate_ensemble,
    load_operator,
    operator_from_bytes,
    operator_to_bytes,
    optimal_growth_projection,
    optimal_initial_condition,
    propagator,
    repair_psd,
    save_operator,
)


def _pcs(z, start_month=1):
    months = (start_month - 1 + np.arange(z.shape[0])) % 12 + 1
    return PcSeries(z, months, "test")


def _stationary_op(L, Q, strict=True):
    return LimOperator(kind="stationary", L=np.asarray(L, float)[None],
                       Q=np.asarray(Q, float)[None], strict=strict)


def _exact_discrete(L, Q, n, rng):
    """Oracle sampler: exact OU discretization via the Lyapunov solution."""
    C0 = scipy.linalg.solve_continuous_lyapunov(L, -Q)
    A = scipy.linalg.expm(L)
    V = C0 - A @ C0 @ A.T
    chol = np.linalg.cholesky(V + 1e-12 * np.eye(L.shape[0]))
    z = np.empty((n, L.shape[0]))
    z[0] = np.linalg.cholesky(C0 + 1e-12 * np.eye(L.shape[0])) @ rng.standard_normal(L.shape[0])
    eta = rng.standard_normal((n, L.shape[0]))
    for t in range(1, n):
        z[t] = A @ z[t - 1] + chol @ eta[t]
    return z


# ------------------------------------------------------------ estimation

def test_ar1_closed_form():
    rng = np.random.default_rng(0)
    n, phi = 100_000, 0.8
    x = np.zeros(n)
    eps = rng.standard_normal(n)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + eps[t]
    op = estimate_stationary_lim(_pcs(x[:, None]))
    assert abs(op.L[0, 0, 0] - np.log(phi)) < 0.01
    C0 = x @ x / n
    assert abs(op.Q[0, 0, 0] - (-2.0 * op.L[0, 0, 0] * C0)) < 1e-10
    # continuous-time noise level implied by the AR(1) relations
    assert abs(op.Q[0, 0, 0] - (-2.0 * np.log(phi) / (1 - phi**2))) < 0.05


def test_white_noise_input_hits_error_path():
    rng = np.random.default_rng(5)
    z = _pcs(rng.standard_normal((2000, 6)))
    with pytest.raises(NumericsError):
        estimate_stationary_lim(z)


def test_non_decaying_data_raises_instability():
    # perfect month-to-month persistence: the lag-1 propagator has eigenvalue 1
    x = np.ones((500, 1))
    with pytest.raises(InstabilityError):
        estimate_stationary_lim(_pcs(x))


def test_stationary_recovery_from_known_system():
    rng = np.random.default_rng(2)
    from limkit.synth import make_synth_system
    system = make_synth_system(d=6, seasonal=False, seed=4)
    L_true, Q_true = system.L_true[0], system.Q_true[0]
    z = _exact_discrete(L_true, Q_true, 100_000, rng)
    op = estimate_stationary_lim(_pcs(z))
    err = np.linalg.norm(op.L[0] - L_true) / np.linalg.norm(L_true)
    assert err < 0.05
    q_err = np.linalg.norm(op.Q[0] - Q_true) / np.linalg.norm(Q_true)
    assert q_err < 0.15


def test_sample_count_precondition():
    rng = np.random.default_rng(0)
    with pytest.raises(DataError):
        estimate_stationary_lim(_pcs(rng.standard_normal((40, 6))))


def _rotation_pair(damping, period):
    om = 2 * np.pi / period
    return np.array([[-damping, -om], [om, -damping]])


def test_cyclostationary_recovery_against_logm_oracle():
    # A seasonally modulated truth with two rotation pairs; the monthly
    # operators are recovered against an independent matrix-log (scipy logm,
    # Schur-based) of the generator's exact one-month map.
    from limkit.synth import SynthSystem, generate
    A = np.zeros((4, 4))
    A[:2, :2] = _rotation_pair(0.15, 8.0)
    A[2:, 2:] = _rotation_pair(0.25, 10.0)
    A[0, 2] = 0.15
    months = np.arange(12)
    sL = 1.0 + 0.3 * np.cos(2 * np.pi * (months - 1) / 12)
    system = SynthSystem(
        d=4,
        L_true=np.stack([A * s for s in sL]),
        Q_true=np.stack([np.diag([0.3, 0.3, 0.4, 0.4]) * (1 + 0.4 * np.cos(2 * np.pi * (m - 10) / 12))
                         for m in months]),
        nonlin_coeff=0.0, nonlin_terms=[], nonlin_center=np.zeros(4),
        seed=0, stability_bound=0.1,
    )
    pcs = generate(system, years=2000, seed=21)
    op = estimate_cyclostationary_lim(pcs)
    for m in range(1, 13):
        L_ref = scipy.linalg.logm(system.one_month_map(m)).real  # oracle path
        err = np.linalg.norm(op.L[m - 1] - L_ref) / np.linalg.norm(L_ref)
        assert err < 0.10, (m, err)


def test_cyclostationary_month_convention():
    # Exact discrete cyclostationary sampler built in-test: z_{t+1} = A_m z_t + noise,
    # with distinct per-month maps. The estimator must assign A_m to month m.
    rng = np.random.default_rng(3)
    d, years = 3, 3000
    A = [scipy.linalg.expm(-np.eye(d) * (0.1 + 0.02 * m) + 0.03 * m * np.triu(np.ones((d, d)), 1))
         for m in range(12)]
    z = np.zeros((years * 12, d))
    for t in range(1, years * 12):
        z[t] = A[(t - 1) % 12] @ z[t - 1] + rng.standard_normal(d)
    op = estimate_cyclostationary_lim(_pcs(z))
    for m in range(12):
        err = np.linalg.norm(op.one_step[m] - A[m]) / np.linalg.norm(A[m])
        assert err < 0.10, (m, err)


def test_cyclostationary_on_stationary_truth_agrees_across_months():
    from limkit.synth import generate, make_synth_system
    system = make_synth_system(d=4, seasonal=False, seed=9)
    pcs = generate(system, years=1500, seed=2)
    op = estimate_cyclostationary_lim(pcs)
    # oracle for the sampling spread: stationary fits on same-size records
    spreads = []
    for k in range(6):
        sub = generate(system, years=125, seed=100 + k)
        op_s = estimate_stationary_lim(sub)
        spreads.append(np.linalg.norm(op_s.L[0] - system.L_true[0]))
    spread = np.mean(spreads)
    pair_max = max(np.linalg.norm(op.L[i] - op.L[j]) for i in range(12) for j in range(i))
    assert pair_max < 3.0 * 2.0 * spread  # difference of two estimates: 2x single error


def test_cyclostationary_insufficient_data():
    rng = np.random.default_rng(0)
    z = _pcs(rng.standard_normal((120, 30)))  # 10 samples per month
    with pytest.raises(DataError):
        estimate_cyclostationary_lim(z)


# ------------------------------------------------------------ propagator

def test_propagator_identity_for_zero_dynamics():
    op = _stationary_op(np.zeros((2, 2)), np.zeros((2, 2)), strict=False)
    for tau in (0, 1, 7, 24):
        assert np.allclose(propagator(op, 1, tau), np.eye(2), atol=1e-12)


def test_propagator_scalar_exponential():
    op = _stationary_op([[-0.1]], [[0.0]])
    G = propagator(op, 1, 12)
    assert abs(G[0, 0] - np.exp(-1.2)) < 1e-12
    assert abs(G[0, 0] - 0.30119) < 1e-5


def test_propagator_matches_taylor_series_oracle():
    L = np.array([[-0.1, -0.5], [0.5, -0.1]])
    op = _stationary_op(L, np.zeros((2, 2)))
    G = propagator(op, 1, 6)
    # oracle: truncated Taylor series of exp(L*6) to 30 terms
    ref = np.eye(2)
    term = np.eye(2)
    for k in range(1, 31):
        term = term @ (L * 6) / k
        ref = ref + term
    assert np.abs(G - ref).max() < 1e-10


def test_stationary_semigroup():
    rng = np.random.default_rng(4)
    L = -0.3 * np.eye(3) + 0.1 * rng.standard_normal((3, 3))
    L = L - max(0.0, np.linalg.eigvals(L).real.max() + 0.05) * np.eye(3)
    op = _stationary_op(L, np.eye(3))
    G12 = propagator(op, 1, 12)
    G5, G7 = propagator(op, 1, 5), propagator(op, 1, 7)
    assert np.abs(G12 - G7 @ G5).max() < 1e-8


def test_cyclostationary_period_composition():
    from limkit.synth import make_synth_system
    system = make_synth_system(d=4, seasonal=True, seed=1)
    op = LimOperator(kind="cyclostationary", L=system.L_true, Q=system.Q_true)
    for start in (1, 4, 11):
        ref = np.eye(4)
        for k in range(12):
            ref = op.one_step[(start - 1 + k) % 12] @ ref
        assert np.abs(propagator(op, start, 12) - ref).max() < 1e-12


# ------------------------------------------------------------- forecasts

def test_deterministic_forecast_trivials():
    op = _stationary_op([[-0.2]], [[0.1]])
    traj = deterministic_forecast(op, np.zeros(1), 1, 10)
    assert np.allclose(traj, 0.0)
    traj2 = deterministic_forecast(op, np.array([2.0]), 3, 8)
    ref = 2.0 * np.exp(-0.2 * np.arange(1, 9))
    assert np.allclose(traj2[:, 0], ref, atol=1e-12)


def test_ensemble_mean_converges_to_deterministic():
    from limkit.synth import make_synth_system
    system = make_synth_system(d=5, seasonal=False, seed=6)
    op = LimOperator(kind="stationary", L=system.L_true, Q=system.Q_true)
    z0 = np.array([1.0, -0.5, 0.3, 0.0, 0.8])
    det = deterministic_forecast(op, z0, 1, 6)
    ens = integrate_ensemble(op, z0, 1, 6, M=4096, seed=11)
    dev = np.abs(ens.members.mean(axis=0) - det)
    bound = 3.0 * ens.members.std(axis=0) / np.sqrt(4096)
    # Euler bias at delta=1/16 is small but nonzero; allow it on top of MC noise
    assert np.all(dev < bound + 0.01 * np.abs(det).max())


def test_noise_free_ensemble_matches_deterministic():
    L = np.array([[-0.15, 0.1], [0.0, -0.25]])
    op = _stationary_op(L, np.zeros((2, 2)))
    z0 = np.array([1.0, -1.0])
    ens = integrate_ensemble(op, z0, 1, 12, M=3, delta=1.0 / 64.0, seed=0)
    det = deterministic_forecast(op, z0, 1, 12)
    assert np.array_equal(ens.members[0], ens.members[1])
    rel = np.abs(ens.members[0] - det).max() / np.abs(det).max()
    assert rel < 0.005


def test_ensemble_seed_determinism_and_substreams():
    from limkit.synth import make_synth_system
    system = make_synth_system(d=4, seasonal=True, seed=2)
    op = LimOperator(kind="cyclostationary", L=system.L_true, Q=system.Q_true)
    z0 = np.ones(4)
    a = integrate_ensemble(op, z0, 5, 8, M=6, seed=42)
    b = integrate_ensemble(op, z0, 5, 8, M=6, seed=42)
    assert np.array_equal(a.members, b.members)
    c = integrate_ensemble(op, z0, 5, 8, M=6, seed=43)
    assert not np.array_equal(a.members, c.members)
    # member i depends only on seed^i: a smaller ensemble shares members
    small = integrate_ensemble(op, z0, 5, 8, M=3, seed=42)
    assert np.array_equal(small.members, a.members[:3])


def test_ensemble_month_attribution():
    from limkit.synth import make_synth_system
    system = make_synth_system(d=3, seasonal=True, seed=7)
    op = LimOperator(kind="cyclostationary", L=system.L_true,
                     Q=np.zeros_like(system.Q_true), strict=False)
    z0 = np.array([1.0, 0.5, -0.2])
    ens = integrate_ensemble(op, z0, init_month=4, T=1, M=1, delta=1.0, seed=0)
    ref = z0 + system.L_true[3] @ z0  # April operator governs April->May
    assert np.allclose(ens.members[0, 0], ref, atol=1e-12)


def test_bad_delta_rejected():
    op = _stationary_op([[-0.2]], [[0.1]])
    with pytest.raises(DataError):
        integrate_ensemble(op, np.zeros(1), 1, 2, M=1, delta=0.3)


# ------------------------------------------------------------ covariance

def test_forecast_covariance_zero_noise():
    op = _stationary_op([[-0.2, 0.0], [0.0, -0.4]], np.zeros((2, 2)))
    assert np.allclose(forecast_covariance(op, 1, 9), 0.0)


def test_forecast_covariance_scalar_closed_form():
    a, q = 0.3, 0.5
    op = _stationary_op([[-a]], [[q]])
    for tau in (1, 6, 24):
        ref = q * (1 - np.exp(-2 * a * tau)) / (2 * a)
        got = forecast_covariance(op, 1, tau, delta=1.0 / 64.0)[0, 0]
        assert abs(got - ref) / ref < 0.01


def test_forecast_covariance_reaches_lyapunov_limit():
    rng = np.random.default_rng(9)
    from limkit.synth import make_synth_system
    system = make_synth_system(d=4, seasonal=False, seed=3)
    op = LimOperator(kind="stationary", L=system.L_true, Q=system.Q_true)
    S = forecast_covariance(op, 1, 240, delta=1.0 / 64.0)
    resid = op.L[0] @ S + S @ op.L[0].T + op.Q[0]
    assert np.linalg.norm(resid) / np.linalg.norm(op.Q[0]) < 0.01


def test_forecast_covariance_matches_ensemble():
    from limkit.synth import make_synth_system
    system = make_synth_system(d=5, seasonal=False, seed=6)
    op = LimOperator(kind="stationary", L=system.L_true, Q=system.Q_true)
    ens = integrate_ensemble(op, np.zeros(5), 1, 6, M=4096, seed=17)
    emp = np.cov(ens.members[:, 5].T)
    S = forecast_covariance(op, 1, 6)
    assert np.linalg.norm(emp - S) / np.linalg.norm(S) < 0.10


def test_ensemble_marginals_gaussian():
    from limkit.synth import make_synth_system
    from scipy.stats import skew
    system = make_synth_system(d=6, seasonal=True, seed=5)
    op = LimOperator(kind="cyclostationary", L=system.L_true, Q=system.Q_true)
    z0 = np.array([1.2, -0.7, 0.4, 0.1, -0.3, 0.6])
    ens = integrate_ensemble(op, z0, 2, 9, M=4096, seed=23)
    sk = skew(ens.members[:, -1], axis=0)
    assert np.abs(sk).max() < 0.1


def test_estimation_consistency_error_shrinks():
    from limkit.synth import generate, make_synth_system
    system = make_synth_system(d=6, seasonal=True, seed=8)
    errs = {}
    for years in (300, 2400):
        pcs = generate(system, years=years, seed=31)
        op = estimate_cyclostationary_lim(pcs)
        errs[years] = max(
            np.linalg.norm(op.one_step[m - 1] - system.one_month_map(m))
            / np.linalg.norm(system.one_month_map(m))
            for m in range(1, 13)
        )
    assert errs[2400] < errs[300]


# -------------------------------------------------------------- optimals

def test_oic_identity_degenerate():
    op = _stationary_op(np.zeros((3, 3)), np.zeros((3, 3)), strict=False)
    with pytest.warns(UserWarning):
        s = optimal_initial_condition(op, 1, 6)
    assert abs(s.sigma1 - 1.0) < 1e-12
    assert np.allclose(s.oic, [1.0, 0.0, 0.0])


def test_oic_normal_matrix():
    op = _stationary_op(np.diag([-0.1, -0.3]), np.zeros((2, 2)))
    s = optimal_initial_condition(op, 1, 12)
    assert abs(s.sigma1 - np.exp(-1.2)) < 1e-12
    assert np.allclose(np.abs(s.oic), [1.0, 0.0], atol=1e-12)
    assert np.allclose(s.evolved, propagator(op, 1, 12) @ s.oic, atol=1e-12)


def test_oic_non_normal_transient_growth():
    L = np.array([[-0.2, 0.8], [0.0, -0.2]])
    op = _stationary_op(L, np.zeros((2, 2)))
    s = optimal_initial_condition(op, 1, 6)
    assert s.sigma1 > np.exp(-1.2)
    # oracle: Taylor-series propagator + SVD
    ref = np.eye(2)
    term = np.eye(2)
    for k in range(1, 40):
        term = term @ (L * 6) / k
        ref = ref + term
    sigma_ref = np.linalg.svd(ref, compute_uv=False)[0]
    assert abs(s.sigma1 - sigma_ref) < 1e-8
    assert np.linalg.norm(s.oic) == pytest.approx(1.0, abs=1e-12)


def test_sigma1_decays_for_stable_system():
    from limkit.synth import make_synth_system
    system = make_synth_system(d=6, seasonal=False, seed=4)
    op = LimOperator(kind="stationary", L=system.L_true, Q=system.Q_true)
    s12 = optimal_initial_condition(op, 1, 12).sigma1
    s60 = optimal_initial_condition(op, 1, 60).sigma1
    assert s60 < s12


def test_optimal_growth_projection_values():
    s = optimal_initial_condition(_stationary_op(np.diag([-0.1, -0.3]), np.zeros((2, 2))), 1, 12)
    oic = s.oic
    assert optimal_growth_projection(oic, s) == pytest.approx(1.0)
    perp = np.array([-oic[1], oic[0]])
    assert optimal_growth_projection(perp, s) == pytest.approx(0.0, abs=1e-12)
    assert optimal_growth_projection(-2.0 * oic, s) == pytest.approx(-2.0)


# ---------------------------------------------------------------- repair

def test_psd_repair_identity_on_psd():
    rng = np.random.default_rng(0)
    B = rng.standard_normal((4, 4))
    Q = B @ B.T
    out, log = repair_psd(Q)
    assert log["n_clipped"] == 0
    assert np.abs(out - Q).max() < 1e-12


def test_psd_repair_clips_and_preserves_trace():
    Q = np.diag([2.0, 1.0, -0.5])
    out, log = repair_psd(Q)
    assert log["n_clipped"] == 1
    w = np.linalg.eigvalsh(out)
    assert w.min() >= -1e-12
    assert abs(np.trace(out) - np.trace(Q)) < 1e-10


# --------------------------------------------------------- serialization

def test_operator_serialization_roundtrip(tmp_path):
    from limkit.synth import generate, make_synth_system
    system = make_synth_system(d=4, seasonal=True, seed=1)
    pcs = generate(system, years=200, seed=5)
    op = estimate_cyclostationary_lim(pcs)
    path = tmp_path / "op.limo"
    save_operator(path, op)
    back = load_operator(path)
    assert back.kind == op.kind and back.tau0 == op.tau0
    assert np.array_equal(back.L, op.L)
    assert np.array_equal(back.Q, op.Q)
    assert back.repair_log == op.repair_log
    assert operator_to_bytes(back) == operator_to_bytes(op)
    z0 = np.ones(4)
    a = integrate_ensemble(op, z0, 1, 6, M=4, seed=3)
    b = integrate_ensemble(back, z0, 1, 6, M=4, seed=3)
    assert np.array_equal(a.members, b.members)
