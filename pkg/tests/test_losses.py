"""Loss anchors, the variance floor, optimal-variance oracle, Gibbs bound."""

import mpmath
import numpy as np
import pytest

from medtex import arch
from medtex import engine as E
from medtex import losses as L
from medtex.errors import ValidationError

RNG = np.random.default_rng(23)


def _alpha_for_variance(v, eps=1e-4):
    # invert softplus(a) + eps = v
    return float(np.log(np.expm1(v - eps)))


def test_cross_entropy_uniform_anchor():
    val = L.output_distill_loss(np.array([[0.5, 0.5]]), np.array([[0.5, 0.5]])).item()
    assert val == pytest.approx(np.log(2), abs=1e-9)


def test_cross_entropy_matched_onehot_is_zero():
    val = L.output_distill_loss(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]])).item()
    assert val == pytest.approx(0.0, abs=1e-9)


def test_cross_entropy_arithmetic_oracle():
    p = np.array([[0.9, 0.1]])
    q = np.array([[0.5, 0.5]])
    expect = -0.9 * np.log(0.5) - 0.1 * np.log(0.5)
    assert L.output_distill_loss(p, q).item() == pytest.approx(expect, abs=1e-12)
    assert expect == pytest.approx(np.log(2), abs=1e-12)


def test_cross_entropy_batch_mean():
    p = np.array([[1.0, 0.0], [0.0, 1.0]])
    q = np.array([[0.8, 0.2], [0.5, 0.5]])
    expect = (-np.log(0.8) - np.log(0.5)) / 2
    assert L.output_distill_loss(p, q).item() == pytest.approx(expect, abs=1e-12)


def test_cross_entropy_rejects_unnormalized():
    with pytest.raises(ValidationError):
        L.output_distill_loss(np.array([[0.7, 0.7]]), np.array([[0.5, 0.5]]))
    with pytest.raises(ValidationError):
        L.output_distill_loss(np.array([[0.5, 0.5]]), np.array([[0.9, 0.2]]))
    with pytest.raises(ValidationError):
        L.output_distill_loss(np.array([[0.5, 0.5]]), np.array([[1.5, -0.5]]))


def test_gibbs_inequality_property():
    # CE(p, q) >= H(p), equality iff q == p
    for trial in range(200):
        rng = np.random.default_rng(trial)
        p = rng.dirichlet(np.full(4, 0.7), size=2)
        q = rng.dirichlet(np.full(4, 0.7), size=2)
        ce = L.output_distill_loss(p, q).item()
        ent = float(-(p * np.log(p)).sum(axis=1).mean())
        assert ce >= ent - 1e-9
    p = np.random.default_rng(0).dirichlet((1, 1, 1), size=3)
    assert L.output_distill_loss(p, p).item() == pytest.approx(
        float(-(p * np.log(p)).sum(axis=1).mean()), abs=1e-9)


@pytest.mark.parametrize("alpha,expect_desc", [
    (0.0, "ln2"), (-40.0, "floor"), (40.0, "linear")])
def test_softplus_variance_against_high_precision(alpha, expect_desc):
    eps = 1e-4
    got = float(L.softplus_variance(alpha, eps))
    oracle = float(mpmath.log(1 + mpmath.e ** alpha) + eps)
    assert got == pytest.approx(oracle, rel=1e-12, abs=1e-18)
    if expect_desc == "ln2":
        assert got == pytest.approx(np.log(2) + eps, abs=1e-12)
    elif expect_desc == "floor":
        assert got == pytest.approx(eps, rel=1e-6)
    else:
        assert got == pytest.approx(40.0 + eps, rel=1e-12)


def test_softplus_variance_tensor_and_validation():
    a = E.parameter(np.array([0.0, -40.0, 40.0]))
    v = L.softplus_variance(a, 1e-4)
    assert isinstance(v, E.Tensor)
    assert (v.data > 0).all()
    with pytest.raises(ValidationError):
        L.softplus_variance(0.0, 0.0)


def _identity_mu(channels):
    mu = arch.build_mu_subnetwork(1, in_channels=channels, mid_channels=channels,
                                  out_channels=channels, dtype=np.float64)
    eye = np.eye(channels)[:, :, None, None]
    for name, p in mu.params.items():
        p.data = eye.copy() if name.endswith(".w") else np.zeros_like(p.data)
    return mu


def test_intermediate_zero_when_prediction_exact():
    mu = _identity_mu(2)
    var = L.LayerVariance(E.parameter(np.full(2, _alpha_for_variance(1.0))), 1e-4)
    t = np.abs(RNG.random((3, 2, 4, 4)))
    val = L.intermediate_loss(t, t, mu, var).item()
    assert val == pytest.approx(0.0, abs=1e-9)


def test_intermediate_single_element_anchor():
    mu = _identity_mu(1)
    var = L.LayerVariance(E.parameter(np.array([_alpha_for_variance(1.0)])), 1e-4)
    val = L.intermediate_loss(np.ones((1, 1, 1, 1)), np.zeros((1, 1, 1, 1)), mu, var).item()
    assert val == pytest.approx(0.5, abs=1e-9)


def test_intermediate_optimal_variance_matches_grid_oracle():
    # with residuals fixed, the per-channel minimizer of the loss over
    # sigma^2 is the mean squared residual; verify by 1-D grid search
    mu = _identity_mu(2)
    rng = np.random.default_rng(4)
    t = rng.random((3, 2, 4, 4))
    s = rng.random((3, 2, 4, 4))
    resid2 = (t - s) ** 2
    mean_sq = resid2.mean(axis=(0, 2, 3))

    def loss_at(sigma2):
        var = L.LayerVariance(
            E.parameter(np.array([_alpha_for_variance(v) for v in sigma2])), 1e-4)
        return L.intermediate_loss(t, s, mu, var).item()

    for c in range(2):
        grid = np.linspace(0.2 * mean_sq[c], 5.0 * mean_sq[c], 4001)
        vals = []
        for g in grid:
            sigma2 = mean_sq.copy()
            sigma2[c] = g
            vals.append(loss_at(sigma2))
        best = grid[int(np.argmin(vals))]
        assert best == pytest.approx(mean_sq[c], rel=2e-3)
    # analytic check at machine precision: gradient of alpha vanishes at
    # sigma^2* = mean squared residual (within the epsilon floor's bias)
    eps = 1e-4
    var = L.LayerVariance(
        E.parameter(np.array([_alpha_for_variance(v, eps) for v in mean_sq + 0])), eps)
    out = L.intermediate_loss(t, s, mu, var)
    out.backward()
    # d loss / d sigma2 = (N*H*W/2) * (1/s2 - msr/s2^2); at s2 = msr it is 0
    assert np.abs(var.alpha.grad).max() < 1e-6 * 3 * 16


def test_intermediate_minimized_at_matching_prediction():
    # perturbing the student tap away from T never decreases the loss
    mu = _identity_mu(2)
    var = L.LayerVariance(E.parameter(np.zeros(2)), 1e-4)
    t = RNG.random((2, 2, 3, 3))
    base = L.intermediate_loss(t, t, mu, var).item()
    for trial in range(10):
        rng = np.random.default_rng(trial)
        pert = t + 0.1 * rng.standard_normal(t.shape)
        assert L.intermediate_loss(t, pert, mu, var).item() >= base - 1e-12


def test_intermediate_shape_mismatch():
    mu = _identity_mu(2)
    var = L.LayerVariance(E.parameter(np.zeros(2)), 1e-4)
    with pytest.raises(ValidationError):
        L.intermediate_loss(np.ones((1, 2, 4, 4)), np.ones((1, 2, 3, 3)), mu, var)


def test_total_loss_modes_and_linearity():
    assert L.total_loss(0.7, [1.0, 2.0, 3.0, 4.0], 0.001) == pytest.approx(0.71, abs=1e-12)
    assert L.total_loss(0.42, [], 0.001) == 0.42
    assert L.total_loss(0.42, [5.0, 5.0], 0.0) == 0.42
    # slope in each intermediate term equals lambda
    lam = 0.25
    base = L.total_loss(1.0, [1.0, 1.0, 1.0, 1.0], lam)
    for i in range(4):
        terms = [1.0] * 4
        terms[i] = 2.0
        assert L.total_loss(1.0, terms, lam) - base == pytest.approx(lam, abs=1e-12)
    with pytest.raises(ValidationError):
        L.total_loss(1.0, [1.0], -0.1)


def test_default_constants():
    assert L.DEFAULT_LAMBDA == 0.001
    assert L.DEFAULT_EPSILON == 1e-4
    assert L.PROB_FLOOR == 1e-12


def test_metrics_line_format():
    terms = L.DistillLossTerms(0.5, [1.0, 2.0, 3.0, 4.0], 0.001, 0.51)
    cols = terms.metrics_line(7).split("\t")
    assert len(cols) == 7 and cols[0] == "7"
    empty = L.DistillLossTerms(0.5, [], 0.001, 0.5)
    cols = empty.metrics_line(1).split("\t")
    assert cols[2:6] == ["n/a"] * 4
