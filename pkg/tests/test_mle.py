import numpy as np
import pytest

from dense import dense_logdet, dense_precision
from gmrfattack.errors import NotPositiveDefiniteError
from gmrfattack.gmrf import (
    GmrfModel,
    cross_channel_stencil,
    grid4_stencil,
    grid8_stencil,
    identity_stencil,
    sample_prior,
)
from gmrfattack.mle import (
    GradientSampleSet,
    collect_samples,
    fit,
    nll_gradient,
    nll_hessian,
    nll_objective,
)
from gmrfattack.oracle import SyntheticOracle


@pytest.fixture(scope="module")
def grid4_samples():
    model = GmrfModel(grid4_stencil(), [5.0, -1.0], (1, 16, 16))
    return GradientSampleSet(sample_prior(model, 7, n=10_000))


def test_linear_oracle_samples_are_exact():
    rng = np.random.default_rng(0)
    x0 = rng.uniform(size=(1, 4, 4))
    g = rng.normal(size=(1, 4, 4))
    oracle = SyntheticOracle(x0, g)
    for delta in (1e-3, 0.7, 5.0):
        s = collect_samples(oracle, [x0], [0], n=4, delta=delta, rng_seed=3)
        u = np.random.default_rng(3).standard_normal((4, 1, 4, 4))
        expected = u * np.einsum("kchw,chw->k", u, g)[:, None, None, None]
        np.testing.assert_allclose(s.samples, expected, rtol=1e-9, atol=1e-12)


def test_query_accounting():
    x0 = np.zeros((1, 3, 3))
    oracle = SyntheticOracle(x0, np.ones_like(x0))
    s = collect_samples(oracle, [x0], [0], n=1, delta=0.1, rng_seed=0)
    assert oracle.queries_used == 2 and s.queries_used == 2
    imgs = [x0 + k for k in range(3)]
    s = collect_samples(oracle, imgs, [0, 0, 0], n=5, delta=0.1, rng_seed=0)
    assert s.queries_used == 3 * 6
    assert len(s) == 15 and s.source_count == 3 and s.directions_per_source == 5


def test_quadratic_bias_halves_with_delta():
    rng = np.random.default_rng(1)
    x0 = rng.uniform(size=(1, 4, 4))
    g = rng.normal(size=(1, 4, 4))
    oracle = SyntheticOracle(x0, g, curvature=2.0)
    u = np.random.default_rng(5).standard_normal((1, 1, 4, 4))[0]
    biases = []
    for delta in (0.2, 0.1):
        s = collect_samples(oracle, [x0], [0], n=1, delta=delta, rng_seed=5)
        directional = np.vdot(s.samples[0], u) / np.vdot(u, u)
        biases.append(directional - np.vdot(g, u))
    assert biases[1] == pytest.approx(biases[0] / 2, rel=1e-6)


def test_nonfinite_losses_are_rejected():
    class Flaky(SyntheticOracle):
        def _loss(self, x, y):
            return np.nan if self.queries_used == 2 else super()._loss(x, y)

    x0 = np.zeros((1, 3, 3))
    s = collect_samples(Flaky(x0, np.ones_like(x0)), [x0], [0], n=3, delta=0.1, rng_seed=0)
    assert len(s) == 2 and s.rejected == [(0, 1)]


def test_zero_sample_objective():
    spec = grid4_stencil()
    theta = [5.0, -1.0]
    s = GradientSampleSet(np.zeros((1, 1, 4, 4)))
    assert nll_objective(s, spec, theta) == pytest.approx(-dense_logdet(dense_precision(spec, theta, (1, 4, 4))))


def test_scalar_closed_form():
    rng = np.random.default_rng(2)
    G = rng.normal(scale=0.3, size=(50, 1, 4, 4))
    v = np.mean(G**2)
    s = GradientSampleSet(G)
    for alpha in (0.5, 3.0):
        assert nll_objective(s, identity_stencil(), [alpha]) == pytest.approx(alpha * v * 16 - 16 * np.log(alpha))
    assert fit(s, identity_stencil()).theta[0] == pytest.approx(1 / v, rel=1e-10)


def test_objective_matches_dense():
    rng = np.random.default_rng(3)
    spec = grid4_stencil()
    theta = np.array([4.5, -0.8])
    G = rng.normal(size=(30, 1, 4, 4))
    lam = dense_precision(spec, theta, (1, 4, 4))
    flat = G.reshape(30, -1)
    S = flat.T @ flat / 30
    ref = np.trace(S @ lam) - dense_logdet(lam)
    assert nll_objective(GradientSampleSet(G), spec, theta) == pytest.approx(ref, abs=1e-9)


def test_infeasible_objective_raises():
    with pytest.raises(NotPositiveDefiniteError):
        nll_objective(GradientSampleSet(np.ones((1, 1, 4, 4))), grid4_stencil(), [3.0, -1.0])


@pytest.mark.parametrize(
    "spec,theta,shape",
    [
        (grid4_stencil(), [5.0, -1.0], (1, 8, 8)),
        (grid8_stencil(), [6.0, -1.0, 0.2], (1, 8, 8)),
        (cross_channel_stencil(ring2=True), [10.0, -1.0, -2.0, 0.3, 0.2], (3, 6, 6)),
    ],
)
def test_derivatives_match_finite_differences(spec, theta, shape):
    rng = np.random.default_rng(4)
    s = GradientSampleSet(rng.normal(scale=0.4, size=(40,) + shape))
    theta = np.array(theta)
    grad = nll_gradient(s, spec, theta)
    hess = nll_hessian(s, spec, theta)
    for p in range(len(theta)):
        h = 1e-5 * (1 + abs(theta[p]))
        e = np.zeros_like(theta)
        e[p] = h
        fd = (nll_objective(s, spec, theta + e) - nll_objective(s, spec, theta - e)) / (2 * h)
        assert fd == pytest.approx(grad[p], rel=1e-5, abs=1e-7)
        fd_h = (nll_gradient(s, spec, theta + e) - nll_gradient(s, spec, theta - e)) / (2 * h)
        np.testing.assert_allclose(fd_h, hess[:, p], rtol=1e-4, atol=1e-8)


def test_identity_fit_from_white_noise():
    G = np.random.default_rng(5).standard_normal((10_000, 1, 8, 8))
    rep = fit(GradientSampleSet(G), identity_stencil())
    assert rep.converged
    assert abs(rep.theta[0] - 1.0) < 0.05


def test_grid4_recovery(grid4_samples):
    rep = fit(grid4_samples, grid4_stencil())
    assert rep.converged
    np.testing.assert_allclose(rep.theta, [5.0, -1.0], rtol=0.05)
    assert np.all(np.diff(rep.objective_trace) <= 0)


def test_fit_independent_of_start(grid4_samples):
    a = fit(grid4_samples, grid4_stencil())
    b = fit(grid4_samples, grid4_stencil(), theta0=[20.0, 0.0])
    c = fit(grid4_samples, grid4_stencil(), theta0=[4.5, -1.1])
    assert b.objective_trace[-1] == pytest.approx(a.objective_trace[-1], abs=1e-8)
    assert c.objective_trace[-1] == pytest.approx(a.objective_trace[-1], abs=1e-8)


def test_fit_traces_non_increasing_and_feasible():
    rng = np.random.default_rng(6)
    for spec, shape in [(grid8_stencil(), (1, 12, 12)), (cross_channel_stencil(), (3, 8, 8))]:
        rep = fit(GradientSampleSet(rng.normal(size=(200,) + shape) * 0.01), spec)
        assert np.all(np.diff(rep.objective_trace) <= 0)
        model = GmrfModel(spec, rep.theta, shape)
        assert model.eigs.min() > 0


def test_infeasible_start_rejected(grid4_samples):
    with pytest.raises(NotPositiveDefiniteError):
        fit(grid4_samples, grid4_stencil(), theta0=[1.0, -1.0])


def test_report_serialisable(grid4_samples):
    import json

    rep = fit(grid4_samples, grid4_stencil())
    data = json.loads(json.dumps(rep.to_dict()))
    assert data["iterations"] == rep.iterations == len(rep.objective_trace) - 1
