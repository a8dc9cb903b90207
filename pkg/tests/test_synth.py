import numpy as np
import pytest
from scipy.stats import skew

from limkit.eof import project
from limkit.errors import DataError, NumericsError
from limkit.lim import estimate_cyclostationary_lim
from limkit.synth import generate, make_synth_system, system_from_json, system_to_json


def test_construction_reproducible_and_seasonal():
    a = make_synth_system(d=8, seasonal=True, seed=11)
    b = make_synth_system(d=8, seasonal=True, seed=11)
    assert np.array_equal(a.L_true, b.L_true)
    assert np.array_equal(a.Q_true, b.Q_true)
    assert np.linalg.norm(a.L_true[0] - a.L_true[6]) > 0.1
    st = make_synth_system(d=8, seasonal=False, nonlin_coeff=0.0, seed=11)
    assert st.L_true.shape == (1, 8, 8)


def test_eigenvalue_bounds():
    for seed in (0, 5, 9):
        system = make_synth_system(d=10, seasonal=True, seed=seed)
        for Lj in system.L_true:
            re = np.linalg.eigvals(Lj).real
            assert re.max() <= -0.05 + 1e-9
            assert re.min() >= -0.5 - 1e-9


def test_monthly_covariance_matches_closed_form_recursion():
    system = make_synth_system(d=6, seasonal=True, seed=4)
    pcs = generate(system, years=5000, seed=13)
    C_ref = system.seasonal_covariance()
    for m in (1, 5, 10):
        sel = pcs.month == m
        zm = pcs.z[sel]
        C = zm.T @ zm / sel.sum()
        assert np.linalg.norm(C - C_ref[m - 1]) / np.linalg.norm(C_ref[m - 1]) < 0.10
    # lag-1 stratified covariance against the exact one-month map
    for m in (3, 12):
        sel = np.flatnonzero(pcs.month == m)
        sel = sel[sel + 1 < pcs.n_time]
        C1 = pcs.z[sel + 1].T @ pcs.z[sel] / sel.size
        ref = system.one_month_map(m) @ C_ref[m - 1]
        assert np.linalg.norm(C1 - ref) / np.linalg.norm(ref) < 0.10


def test_linear_truth_is_symmetric():
    system = make_synth_system(d=8, seasonal=True, nonlin_coeff=0.0, seed=3)
    pcs = generate(system, years=5000, seed=17)
    assert np.abs(skew(pcs.z, axis=0)).max() < 0.1


def test_quadratic_truth_is_skewed():
    base = make_synth_system(d=8, seasonal=True, seed=3)
    system = make_synth_system(d=8, seasonal=True,
                               nonlin_coeff=0.3 * base.stability_bound, seed=3)
    pcs = generate(system, years=5000, seed=17)
    assert np.abs(skew(pcs.z, axis=0)).max() > 0.2


def test_lim_roundtrip_error_shrinks():
    system = make_synth_system(d=6, seasonal=True, seed=4)

    def max_err(years, seed):
        pcs = generate(system, years=years, seed=seed)
        op = estimate_cyclostationary_lim(pcs)
        return max(
            np.linalg.norm(op.one_step[m - 1] - system.one_month_map(m))
            / np.linalg.norm(system.one_month_map(m))
            for m in range(1, 13)
        )

    e500 = max_err(500, 29)
    e5000 = max_err(5000, 29)
    assert e5000 < 0.5 * e500


def test_embedding_roundtrip():
    system = make_synth_system(d=9, seasonal=True, seed=6)
    pcs = generate(system, years=30, seed=1)
    grid = system.embed(pcs.z)
    basis = system.embedding_basis(train_pc_std=pcs.z.std(axis=0))
    back = project(grid, basis)
    assert np.abs(back.z - pcs.z).max() < 1e-8


def test_generate_with_grid_and_centering():
    system = make_synth_system(d=6, seasonal=True, seed=2)
    pcs, grid = generate(system, years=40, seed=8, with_grid=True)
    assert grid.shape == (480, 2, system.block_rows, system.n_cols)
    assert grid.var_names == ["ssta", "ssha"]
    for m in range(1, 13):
        assert np.abs(pcs.z[pcs.month == m].mean(axis=0)).max() < 1e-10


def test_generation_divergence_error():
    system = make_synth_system(d=6, seasonal=True, nonlin_coeff=3.0, seed=2)
    with pytest.raises(NumericsError):
        generate(system, years=300, seed=0)


def test_generate_preconditions():
    system = make_synth_system(d=4, seasonal=False, seed=0)
    with pytest.raises(DataError):
        generate(system, years=1)


def test_json_roundtrip():
    system = make_synth_system(d=7, seasonal=True, nonlin_coeff=0.02, seed=5)
    back = system_from_json(system_to_json(system))
    assert np.array_equal(back.L_true, system.L_true)
    assert np.array_equal(back.Q_true, system.Q_true)
    assert back.nonlin_terms == system.nonlin_terms
    assert np.array_equal(back.nonlin_center, system.nonlin_center)
    a = generate(system, years=5, seed=3)
    b = generate(back, years=5, seed=3)
    assert np.array_equal(a.z, b.z)
