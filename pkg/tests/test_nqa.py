import numpy as np
import pytest

from dpgmerge.nqa import (QuadraticSpec, closed_form, mean_recursion,
                          rule_to_csv, simulate, summary_lines, verify, RULES)


def scalar_spec():
    return QuadraticSpec(a_diag=1.0, epsilon=1.0, sigma1=1.0, sigma2=0.25,
                         alpha=0.1, upsilon=0.5)


# ---------------------------------------------------------------------------
# spec construction


def test_scalar_fields_broadcast_to_dim():
    s = QuadraticSpec(a_diag=[1.0, 2.0, 0.5], epsilon=0.3, sigma1=1.0,
                      sigma2=0.1, alpha=0.1, upsilon=0.25)
    assert s.dim == 3
    assert s.epsilon.shape == (3,) and np.all(s.epsilon == 0.3)


@pytest.mark.parametrize("kw", [
    dict(a_diag=-1.0), dict(sigma1=-0.1), dict(sigma2=-0.1),
    dict(upsilon=1.5), dict(upsilon=-0.1), dict(alpha=0.0),
    dict(alpha=2.0),  # alpha * A >= 1 is unstable
])
def test_invalid_specs_rejected(kw):
    base = dict(a_diag=1.0, epsilon=1.0, sigma1=1.0, sigma2=0.25,
                alpha=0.1, upsilon=0.5)
    base.update(kw)
    with pytest.raises(ValueError):
        QuadraticSpec(**base)


def test_wrong_length_vector_rejected():
    with pytest.raises(ValueError):
        QuadraticSpec(a_diag=[1.0, 2.0], epsilon=[0.1, 0.2, 0.3],
                      sigma1=1.0, sigma2=0.1, alpha=0.1, upsilon=0.5)


# ---------------------------------------------------------------------------
# closed forms (frozen reference values for the canonical scalar spec)


def test_closed_form_conventional_scalar():
    mean, var = closed_form(scalar_spec(), "conventional")
    assert mean[0] == 0.0
    # alpha^2 A^2 s1 / (1 - (1-alpha A)^2) = 0.01 / 0.19
    assert var[0] == pytest.approx(0.05263157894736842, rel=1e-14)


def test_closed_form_interpolation_scalar():
    mean, var = closed_form(scalar_spec(), "interpolation")
    assert mean[0] == pytest.approx(0.5, rel=1e-14)
    # 0.01 * (0.25 * 1 + 0.25 * 0.25) / 0.19
    assert var[0] == pytest.approx(0.016447368421052634, rel=1e-13)


def test_closed_form_two_step_scalar():
    s = scalar_spec()
    mean, var = closed_form(s, "two_step")
    r1 = 1.0 - s.alpha * s.upsilon
    r2 = 1.0 - s.alpha * (1.0 - s.upsilon)
    assert mean[0] == pytest.approx(s.alpha * s.upsilon / (1.0 - r1 * r2), rel=1e-14)
    expected = (s.alpha ** 2 * (0.25 * r1 ** 2 * 1.0 + 0.25 * 0.25)
                / (1.0 - r1 ** 2 * r2 ** 2))
    assert var[0] == pytest.approx(expected, rel=1e-13)


def test_frozen_reference_values_upsilon_quarter():
    # canonical comparison point: A=1, eps=1, s1=1, s2=0.01, alpha=0.1, up=0.25
    s = QuadraticSpec(a_diag=1.0, epsilon=1.0, sigma1=1.0, sigma2=0.01,
                      alpha=0.1, upsilon=0.25)
    _, var_c = closed_form(s, "conventional")
    mean_im, var_im = closed_form(s, "interpolation")
    mean_2m, var_2m = closed_form(s, "two_step")
    assert var_c[0] == pytest.approx(0.052631578947368446, rel=1e-13)
    assert mean_im[0] == pytest.approx(0.25, rel=1e-14)
    assert var_im[0] == pytest.approx(0.029638157894736856, rel=1e-13)
    # two-step mean limit 0.025/0.098125
    assert mean_2m[0] == pytest.approx(0.025 / 0.098125, rel=1e-13)
    assert var_2m[0] == pytest.approx(0.028686491498709592, rel=1e-13)
    # orderings at a glance: merging shrinks variance, two-step shrinks further
    assert var_2m[0] < var_im[0] < var_c[0]
    assert abs(mean_im[0]) <= abs(mean_2m[0])


def test_closed_form_rejects_unknown_rule():
    with pytest.raises(ValueError):
        closed_form(scalar_spec(), "momentum")


# ---------------------------------------------------------------------------
# mean recursion vs zero-noise simulation


@pytest.mark.parametrize("rule", RULES)
def test_mean_recursion_matches_zero_noise_simulation(rule):
    s = QuadraticSpec(a_diag=[0.5, 1.0], epsilon=[1.0, -2.0],
                      sigma1=0.0, sigma2=0.0, alpha=0.1, upsilon=0.3)
    sim = simulate(s, rule, n_seeds=2, n_iters=50, rng=np.random.default_rng(0))
    m = np.zeros(2)
    for i in range(50):
        m = mean_recursion(s, rule, m)
        assert np.allclose(sim.means[i], m, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("rule", RULES)
def test_mean_recursion_fixed_point_is_closed_form_mean(rule):
    s = QuadraticSpec(a_diag=[0.5, 2.0], epsilon=[1.0, -0.5],
                      sigma1=1.0, sigma2=0.3, alpha=0.2, upsilon=0.4)
    mean, _ = closed_form(s, rule)
    assert np.allclose(mean_recursion(s, rule, mean), mean, rtol=1e-13, atol=1e-15)


# ---------------------------------------------------------------------------
# simulation semantics


def test_rules_coincide_at_upsilon_zero_under_shared_rng():
    # both noise draws happen every iteration, so identical seeds give
    # bitwise-identical trajectories when the elite weight vanishes
    s = QuadraticSpec(a_diag=1.0, epsilon=1.0, sigma1=1.0, sigma2=0.25,
                      alpha=0.1, upsilon=0.0)
    sims = {rule: simulate(s, rule, 16, 40, np.random.default_rng(7))
            for rule in RULES}
    for rule in ("interpolation", "two_step"):
        assert np.array_equal(sims[rule].means, sims["conventional"].means)
        assert np.array_equal(sims[rule].variances, sims["conventional"].variances)


def test_simulate_validates_arguments():
    s = scalar_spec()
    r = np.random.default_rng(0)
    with pytest.raises(ValueError):
        simulate(s, "bogus", 10, 10, r)
    with pytest.raises(ValueError):
        simulate(s, "conventional", 1, 10, r)
    with pytest.raises(ValueError):
        simulate(s, "conventional", 10, 0, r)


def test_tail_window_sizes():
    s = scalar_spec()
    sim = simulate(s, "conventional", 4, 20, np.random.default_rng(1))
    m_all, _ = sim.tail(1.0)
    assert np.allclose(m_all, sim.means.mean(axis=0))
    m_last, _ = sim.tail(0.0)  # clamps to at least one iteration
    assert np.array_equal(m_last, sim.means[-1])


# ---------------------------------------------------------------------------
# Monte-Carlo verification on a small ensemble


def test_verify_small_ensemble_within_standard_errors():
    s = scalar_spec()
    report = verify(s, n_seeds=4000, n_iters=400, rng=np.random.default_rng(11))
    assert report["variance_reduction_holds"]
    for rule in RULES:
        r = report[rule]
        assert np.all(r["mean_abs_error"] <= 5.0 * r["mean_se"])
        assert np.all(r["variance_abs_error"]
                      <= np.maximum(0.05 * r["closed_form_variance"],
                                    5.0 * r["variance_se"]))


# ---------------------------------------------------------------------------
# output formats


def test_rule_csv_schema_and_thinning(tmp_path):
    s = scalar_spec()
    report = verify(s, n_seeds=50, n_iters=10, rng=np.random.default_rng(3))
    path = tmp_path / "conv.csv"
    rule_to_csv(report, "conventional", path, thin=4)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,coord,emp_mean,emp_var,cf_mean,cf_var"
    iters = [int(l.split(",")[0]) for l in lines[1:]]
    assert iters == [1, 5, 9, 10]  # every 4th plus the final iteration
    row = lines[1].split(",")
    assert len(row) == 6
    float(row[2]), float(row[3]), float(row[4]), float(row[5])


def test_summary_lines_cover_every_rule():
    s = scalar_spec()
    report = verify(s, n_seeds=50, n_iters=10, rng=np.random.default_rng(4))
    text = "\n".join(summary_lines(report))
    for rule in RULES:
        assert rule in text
    assert "variance_reduction_holds" in text
