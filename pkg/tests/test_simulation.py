"""Data-generation and study-harness tests.

The generator is validated against closed-form properties (noise-free
regression recovery, membership frequencies vs an independent quadrature of
the selection model) and the two oracles are cross-checked against each other.
"""
import numpy as np
import pytest

from centereffects import (
    DesignSpec,
    KnownProbabilities,
    ParameterError,
    Scenario,
    StudyError,
    build_design,
    default_nuisance_configs,
    fit_ols,
    generate_dataset,
    run_study,
    true_center_ate,
    true_center_ates,
    true_center_ates_quadrature,
)

TWO_CENTER_COEFFS = ((0.5, -0.3, 0.1, 0.2),)


def two_center_scenario(**kw):
    kw.setdefault("m", 2)
    kw.setdefault("membership_coeffs", TWO_CENTER_COEFFS)
    return Scenario(**kw)


# ---------------------------------------------------------------------------
# scenario plumbing
# ---------------------------------------------------------------------------


def test_scenario_defaults():
    sc = Scenario()
    assert sc.n == 1000 and sc.m == 10
    assert sc.noise_sd == 36.0 and sc.arm_prob == 0.5
    assert sc.strength == "baseline"
    assert len(sc.membership_coeffs) == 9


def test_scenario_roundtrip_and_hash():
    sc = Scenario.strong(n=500)
    back = Scenario.from_dict(sc.to_dict())
    assert back == sc
    assert hash(back) == hash(sc)


def test_scenario_validation():
    with pytest.raises(ParameterError):
        Scenario(n=0)
    with pytest.raises(ParameterError):
        Scenario(m=3)  # membership rows no longer match
    with pytest.raises(ParameterError):
        Scenario(arm_prob=1.0)
    with pytest.raises(ParameterError):
        Scenario(noise_sd=-1.0)
    with pytest.raises(ParameterError):
        Scenario(strength="extreme")
    with pytest.raises(ParameterError):
        Scenario(strong_doubles="x2")
    with pytest.raises(ParameterError):
        Scenario.from_dict({"n": 100, "bogus": 1})
    with pytest.raises(ParameterError):
        Scenario(outcome_coeffs=(1.0, 2.0))


def test_strong_doubles_selection_column_and_interaction():
    base = Scenario.baseline()
    strong = Scenario.strong()
    eb = base.effective_membership_coeffs()
    es = strong.effective_membership_coeffs()
    np.testing.assert_array_equal(es[:, 1], 2.0 * eb[:, 1])  # x1 column doubled
    np.testing.assert_array_equal(es[:, [0, 2, 3]], eb[:, [0, 2, 3]])
    assert strong.effective_outcome_coeffs()[5] == 2.0 * base.effective_outcome_coeffs()[5]
    assert strong.effective_outcome_coeffs()[:5] == base.effective_outcome_coeffs()[:5]
    alt = Scenario.strong(strong_doubles="x3")
    ea = alt.effective_membership_coeffs()
    np.testing.assert_array_equal(ea[:, 3], 2.0 * eb[:, 3])
    np.testing.assert_array_equal(ea[:, 1], eb[:, 1])


# ---------------------------------------------------------------------------
# data generation
# ---------------------------------------------------------------------------


def test_generate_dataset_shapes_and_labels():
    d = generate_dataset(Scenario(), seed=(0, 0))
    assert d.n == 1000
    assert d.m == 10
    assert d.covariate_names == ("x1", "x2", "x3")
    assert d.center_labels == tuple(range(1, 11))
    assert set(np.unique(d.arm)) <= {0, 1}


def test_generate_dataset_deterministic():
    sc = Scenario.strong()
    a = generate_dataset(sc, seed=(7, 3))
    b = generate_dataset(sc, seed=(7, 3))
    np.testing.assert_array_equal(a.covariates, b.covariates)
    np.testing.assert_array_equal(a.center, b.center)
    np.testing.assert_array_equal(a.arm, b.arm)
    np.testing.assert_array_equal(a.outcome, b.outcome)
    c = generate_dataset(sc, seed=(7, 4))
    assert not np.array_equal(a.outcome, c.outcome)


def test_noise_free_outcome_recovers_coefficients():
    # with noise_sd = 0 the outcome is an exact linear function, so a single
    # regression recovers every generative coefficient to solver precision
    sc = Scenario(n=3000, noise_sd=0.0)
    d = generate_dataset(sc, seed=5)
    X, _ = build_design(DesignSpec(("1", "x1", "x2", "x3", "A", "x1:A")), d)
    fit = fit_ols(X, d.outcome)
    np.testing.assert_allclose(
        fit.coefficients, [161.0, 62.0, -1.0, -1.0, -43.0, -21.0], atol=1e-8
    )


def test_strong_scenario_doubles_interaction_in_data():
    sc = Scenario.strong(n=3000, noise_sd=0.0)
    d = generate_dataset(sc, seed=5)
    X, _ = build_design(DesignSpec(("1", "x1", "x2", "x3", "A", "x1:A")), d)
    fit = fit_ols(X, d.outcome)
    np.testing.assert_allclose(fit.coefficients[5], -42.0, atol=1e-8)


def test_membership_frequencies_match_quadrature():
    # independent route: P(C = c) = E[p_c(X)] over the standard normal law,
    # computed with tensor Gauss-Hermite quadrature built directly here
    sc = Scenario()
    nodes, w = np.polynomial.hermite_e.hermegauss(25)
    w = w / w.sum()
    g1, g2, g3 = np.meshgrid(nodes, nodes, nodes, indexing="ij")
    weights = (np.meshgrid(w, w, w, indexing="ij")[0]
               * np.meshgrid(w, w, w, indexing="ij")[1]
               * np.meshgrid(w, w, w, indexing="ij")[2]).ravel()
    coeffs = sc.effective_membership_coeffs()
    eta = coeffs[:, 0] + np.column_stack([g1.ravel(), g2.ravel(), g3.ravel()]) @ coeffs[:, 1:].T
    full = np.concatenate([np.zeros((eta.shape[0], 1)), eta], axis=1)
    full -= full.max(axis=1, keepdims=True)
    probs = np.exp(full)
    probs /= probs.sum(axis=1, keepdims=True)
    marginal = weights @ probs

    counts = np.zeros(10)
    draws = 0
    for rep in range(30):
        d = generate_dataset(sc, seed=(123, rep))
        counts += np.bincount(d.center, minlength=11)[1:]
        draws += d.n
    freq = counts / draws
    sds = np.sqrt(marginal * (1 - marginal) / draws)
    assert np.all(np.abs(freq - marginal) < 4.5 * sds)


def test_arm_frequency_tracks_arm_prob():
    sc = two_center_scenario(n=5000, arm_prob=0.3)
    d = generate_dataset(sc, seed=9)
    assert abs(d.arm.mean() - 0.3) < 4.5 * np.sqrt(0.3 * 0.7 / 5000)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def test_zero_interaction_oracle_is_exact():
    sc = Scenario(outcome_coeffs=(161.0, 62.0, -1.0, -1.0, -43.0, 0.0))
    mc = true_center_ates(sc, oracle_n=20_000, seed=0)
    assert mc.values == tuple([-43.0] * 10)
    assert mc.mc_se == tuple([0.0] * 10)
    quad = true_center_ates_quadrature(sc)
    assert quad.values == tuple([-43.0] * 10)


def test_true_center_ate_scalar_and_range():
    sc = two_center_scenario()
    v = true_center_ate(sc, 1, oracle_n=50_000, seed=0)
    assert isinstance(v, float)
    with pytest.raises(ParameterError):
        true_center_ate(sc, 3, oracle_n=50_000, seed=0)


def test_quadrature_node_count_converged():
    sc = Scenario.strong()
    a = np.array(true_center_ates_quadrature(sc, nodes=40).values)
    b = np.array(true_center_ates_quadrature(sc, nodes=60).values)
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_monte_carlo_oracle_agrees_with_quadrature_baseline():
    sc = Scenario.baseline()
    mc = true_center_ates(sc, oracle_n=10_000_000, seed=2)
    quad = true_center_ates_quadrature(sc)
    diff = np.abs(np.array(mc.values) - np.array(quad.values))
    assert diff.max() < 0.05


def test_monte_carlo_oracle_agrees_with_quadrature_strong():
    sc = Scenario.strong()
    mc = true_center_ates(sc, oracle_n=10_000_000, seed=2)
    quad = true_center_ates_quadrature(sc)
    diff = np.abs(np.array(mc.values) - np.array(quad.values))
    assert np.all(diff < 3.5 * np.array(mc.mc_se))


# ---------------------------------------------------------------------------
# nuisance defaults
# ---------------------------------------------------------------------------


def test_default_nuisance_configs_shape():
    cfgs = default_nuisance_configs(("x1", "x2", "x3"))
    assert set(cfgs) == {"phi", "psi", "chi"}
    assert "C" in cfgs["phi"].outcome_spec.to_strings()
    assert "C" not in cfgs["psi"].outcome_spec.to_strings()
    assert cfgs["psi"].membership_spec is not None
    known = default_nuisance_configs(("x1",), known_arm_prob=0.5)
    assert isinstance(known["chi"].treatment_spec, KnownProbabilities)


# ---------------------------------------------------------------------------
# study harness
# ---------------------------------------------------------------------------


def small_study(**kw):
    kw.setdefault("replicates", 6)
    kw.setdefault("estimators", ("tau", "phi"))
    kw.setdefault("master_seed", 3)
    return run_study(two_center_scenario(n=400), **kw)


def test_run_study_report_structure():
    rep = small_study()
    assert rep.replicates == 6
    assert rep.arms == (1, 0)
    assert rep.failures == 0
    cell = rep.cell(1, "tau")
    assert cell.center == 1 and cell.estimator == "tau"
    assert np.isfinite(cell.bias) and np.isfinite(cell.mse)
    assert 0.0 <= cell.coverage <= 1.0
    header, rows = rep.metric_table("bias")
    assert header == ["center", "tau", "phi"]
    assert len(rows) == 2 and len(rows[0]) == 3
    assert rep.cell(2, "phi").avg_n_c > 0
    with pytest.raises(KeyError):
        rep.cell(1, "psi")  # not requested
    d = rep.to_dict()
    assert d["replicates"] == 6 and len(d["cells"]) == 4


def test_run_study_mse_identity():
    # mse = bias^2 + (R-1)/R * sd^2 holds exactly for sample moments
    rep = small_study(replicates=8)
    for c in (1, 2):
        for est in ("tau", "phi"):
            cell = rep.cell(c, est)
            recon = cell.bias**2 + (7 / 8) * cell.empirical_sd**2
            np.testing.assert_allclose(cell.mse, recon, rtol=1e-10)


def test_run_study_deterministic_and_parallel_identical():
    a = small_study()
    b = small_study()
    c = small_study(workers=2)
    for cc in (1, 2):
        for est in ("tau", "phi"):
            assert a.cell(cc, est).bias == b.cell(cc, est).bias
            assert a.cell(cc, est).bias == c.cell(cc, est).bias
            assert a.cell(cc, est).mse == c.cell(cc, est).mse


def test_run_study_single_replicate_has_no_sd():
    rep = small_study(replicates=1, estimators=("tau",))
    cell = rep.cell(1, "tau")
    assert cell.empirical_sd is None
    assert cell.coverage in (0.0, 1.0)


def test_run_study_reversed_arms_negates():
    a = small_study(estimators=("tau",))
    b = small_study(estimators=("tau",), arms=(0, 1))
    for c in (1, 2):
        assert b.cell(c, "tau").bias == pytest.approx(-a.cell(c, "tau").bias, abs=1e-12)
        assert b.cell(c, "tau").mse == pytest.approx(a.cell(c, "tau").mse, abs=1e-12)


def test_run_study_rejects_bad_arms_for_comparators():
    with pytest.raises(ParameterError):
        small_study(estimators=("tau", "pooled"), arms=(1, 1))


def test_run_study_surfaces_failures():
    # n = 12 with two centers: empty (center, arm) cells are frequent, so the
    # failure share blows through the tolerance
    sc = two_center_scenario(n=12)
    with pytest.raises(StudyError):
        run_study(sc, replicates=25, estimators=("tau",), master_seed=1)


def test_run_study_oracle_override():
    fixed = true_center_ates_quadrature(two_center_scenario(n=400))
    rep = small_study(oracle=fixed)
    assert rep.oracle.method == "quadrature"
    assert rep.cell(1, "tau").true_value == fixed.values[0]
