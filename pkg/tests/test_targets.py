"""Target zoo: gradient/oracle contracts, transforms, analytic evidence."""

import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from bbvi import targets
from bbvi.targets import (
    IntervalTransform,
    PositiveTransform,
    SimplexTransform,
    TargetError,
    conjugate_gaussian_1d,
    funnel,
    make_zoo,
    standard_normal,
    transform_apply,
)

LOG_2PI = np.log(2 * np.pi)


def fd_grad(model, z, h=1e-6):
    g = np.empty_like(z)
    for j in range(z.size):
        e = np.zeros_like(z)
        e[j] = h
        g[j] = (model.log_joint(z + e) - model.log_joint(z - e)) / (2 * h)
    return g


@pytest.mark.parametrize("model", make_zoo(), ids=lambda m: m.name)
def test_zoo_gradients_match_finite_differences(model):
    rng = np.random.default_rng(11)
    for _ in range(100):
        z = rng.normal(scale=1.5, size=model.dim)
        g = model.grad_log_joint(z)
        fd = fd_grad(model, z)
        np.testing.assert_allclose(np.abs(fd - g) / (1 + np.abs(g)), 0.0, atol=1e-5)


def test_log_joint_examples():
    m = standard_normal(2)
    lj, g = m.log_joint_and_grad(np.zeros(2))
    assert lj == pytest.approx(-LOG_2PI, abs=1e-12)  # -2 * (1/2) log 2pi
    np.testing.assert_array_equal(g, np.zeros(2))

    c = conjugate_gaussian_1d()
    # two standard-normal densities at zero
    assert c.log_joint(np.zeros(1)) == pytest.approx(-LOG_2PI, abs=1e-12)

    f = funnel()
    expected = -0.5 * (LOG_2PI + np.log(9.0)) - 0.5 * LOG_2PI  # N(0|0,9) and N(0|0,1)
    assert f.log_joint(np.zeros(2)) == pytest.approx(expected, abs=1e-12)


def test_oracle_counter_exactness():
    m = standard_normal(3)
    assert m.oracle_count == 0
    m.log_joint(np.zeros(3))
    assert m.oracle_count == 1
    m.grad_log_joint(np.zeros(3))
    assert m.oracle_count == 2
    m.log_joint_and_grad(np.zeros(3))  # joint call counts once
    assert m.oracle_count == 3
    m.log_joint(np.zeros((40, 3)))  # batched: one per point
    assert m.oracle_count == 43


def test_oracle_counter_thread_safety():
    m = standard_normal(2)

    def worker():
        for _ in range(200):
            m.log_joint(np.zeros(2))

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert m.oracle_count == 8 * 200


def test_input_and_output_errors():
    m = standard_normal(2)
    with pytest.raises(ValueError):
        m.log_joint(np.array([np.nan, 0.0]))
    with pytest.raises(ValueError):
        m.log_joint(np.zeros(3))
    f = funnel()
    bad = np.array([-800.0, 1.0])  # exp(-v) overflows; the error carries z
    with pytest.raises(TargetError) as exc:
        f.log_joint(bad)
    np.testing.assert_array_equal(exc.value.z, bad)


def test_zoo_contract():
    zoo = make_zoo()
    assert len(zoo) >= 6
    names = {m.name for m in zoo}
    assert {"conj_regression", "corr_gaussian", "logistic_regression", "funnel", "eight_schools", "simplex_toy"} <= names
    schools = targets.get_model("eight_schools")
    assert schools.dim == 10  # 8 effects + mu + log tau
    with pytest.raises(KeyError, match="conj_regression"):
        targets.get_model("nosuch")


# ---------------------------------------------------------------------------
# Analytic evidence against independent numerical oracles
# ---------------------------------------------------------------------------


def test_conjugate_1d_evidence_by_quadrature():
    m = conjugate_gaussian_1d()
    val, err = integrate.quad(lambda z: np.exp(m.log_joint_fn(np.array([[z]]))[0]), -12, 12)
    assert err < 1e-10
    assert np.log(val) == pytest.approx(m.analytic_evidence, abs=1e-8)
    # marginal variance = prior + noise = 2
    assert m.analytic_evidence == pytest.approx(-0.5 * (LOG_2PI + np.log(2.0)), abs=1e-12)


def test_conjugate_regression_evidence_by_quadrature():
    m = targets.conjugate_regression()
    val, err = integrate.dblquad(
        lambda a, b: np.exp(m.log_joint_fn(np.array([[b, a]]))[0] - m.analytic_evidence),
        -6, 6, -6, 6,
    )
    assert val == pytest.approx(1.0, abs=5e-6)


def test_funnel_evidence_by_quadrature():
    m = funnel()
    width = lambda v: 12.0 * np.exp(v / 2.0)  # w | v has sd e^{v/2}
    val, err = integrate.dblquad(
        lambda w, v: np.exp(m.log_joint_fn(np.array([[v, w]]))[0]),
        -13.5, 13.5, lambda v: -width(v), width,
    )
    assert val == pytest.approx(1.0, abs=1e-4)
    assert m.analytic_evidence == 0.0


def test_corr_gaussian_evidence_is_normalizer_offset():
    m = targets.correlated_gaussian()
    # log p(z, x) - log N(z; mean, cov) must equal the declared evidence
    rng = np.random.default_rng(3)
    z = rng.normal(size=(5, m.dim))
    d = z - m.posterior_mean
    prec = np.linalg.inv(m.posterior_cov)
    _, logdet = np.linalg.slogdet(m.posterior_cov)
    log_post = -0.5 * np.einsum("ni,ij,nj->n", d, prec, d) - 0.5 * (m.dim * LOG_2PI + logdet)
    np.testing.assert_allclose(m.log_joint(z) - log_post, m.analytic_evidence, atol=1e-10)


def test_simplex_evidence_by_importance_sampling():
    # long-run IW-ELBO from a Laplace-initialized Gaussian; 3-SE agreement
    from bbvi.estimators import iwelbo_estimate
    from bbvi.optimize import laplace_init

    m = targets.simplex_toy()
    fp = laplace_init(m)
    rng = np.random.default_rng(0)
    vals = [iwelbo_estimate(m, fp, rng, M=2000, copies=1) for _ in range(64)]
    est, se = np.mean(vals), np.std(vals, ddof=1) / 8.0
    assert abs(est - m.analytic_evidence) < max(3 * se, 2e-3)


# ---------------------------------------------------------------------------
# Constraint transforms
# ---------------------------------------------------------------------------


def test_transform_examples():
    pos = PositiveTransform(1)
    x, ld = transform_apply(pos, np.zeros(1))
    assert x[0] == 1.0 and ld == 0.0

    iv = IntervalTransform(0.0, 1.0)
    x, ld = transform_apply(iv, np.zeros(1))
    assert x[0] == pytest.approx(0.5)
    assert ld == pytest.approx(np.log(0.25), abs=1e-12)

    sb = SimplexTransform(3)
    p, ld = transform_apply(sb, np.zeros(2))
    np.testing.assert_allclose(p, np.ones(3) / 3, atol=1e-12)
    assert p.sum() == pytest.approx(1.0)


def _fd_jacobian_logdet(t, u, h=1e-6):
    """log |det J| of the map onto the first k output coordinates."""
    k = t.unconstrained_dim
    J = np.empty((k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = h
        J[:, j] = (t.apply(u + e)[0][:k] - t.apply(u - e)[0][:k]) / (2 * h)
    return np.linalg.slogdet(J)[1]


@pytest.mark.parametrize(
    "transform",
    [PositiveTransform(3), IntervalTransform(-2.0, 5.0, 3), SimplexTransform(3), SimplexTransform(5)],
    ids=lambda t: f"{t.kind}{t.unconstrained_dim}",
)
def test_transform_logdet_matches_fd_jacobian(transform):
    rng = np.random.default_rng(5)
    for _ in range(20):
        u = rng.normal(size=transform.unconstrained_dim)
        _, ld = transform.apply(u)
        fd = _fd_jacobian_logdet(transform, u)
        assert abs(ld - fd) / (1 + abs(fd)) < 1e-5


@pytest.mark.parametrize(
    "transform",
    [PositiveTransform(2), IntervalTransform(0.5, 2.0, 2), SimplexTransform(4)],
    ids=lambda t: t.kind,
)
def test_transform_gradients_match_fd(transform):
    rng = np.random.default_rng(6)
    k = transform.unconstrained_dim
    for _ in range(10):
        u = rng.normal(size=k)
        cot = rng.normal(size=transform.constrained_dim)
        g = transform.vjp(u, cot)
        gl = transform.grad_logdet(u)
        for j in range(k):
            e = np.zeros(k)
            e[j] = 1e-6
            xp, lp = transform.apply(u + e)
            xm, lm = transform.apply(u - e)
            assert g[j] == pytest.approx((cot @ xp - cot @ xm) / 2e-6, rel=1e-5, abs=1e-7)
            assert gl[j] == pytest.approx((lp - lm) / 2e-6, rel=1e-5, abs=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-6, 6), min_size=2, max_size=6))
def test_transform_round_trips(vals):
    u = np.array(vals)
    for t in (PositiveTransform(u.size), IntervalTransform(-1.0, 3.0, u.size), SimplexTransform(u.size + 1)):
        x, _ = t.apply(u)
        np.testing.assert_allclose(t.inverse(x), u, atol=1e-10)


def test_transform_dimension_mismatch():
    with pytest.raises(ValueError):
        PositiveTransform(2).apply(np.zeros(3))
