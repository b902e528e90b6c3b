"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or directly as a script
(``python tests/test_acceptance.py``) for just the summary lines.
"""

import itertools
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dense import dense_precision, random_feasible_theta  # noqa: E402
from gmrfattack import experiments as ex  # noqa: E402
from gmrfattack.attack import AttackConfig, estimate_gradient  # noqa: E402
from gmrfattack.basis import capacity, enumerate_frequencies, low_frequency_sequence  # noqa: E402
from gmrfattack.diagnostics import autocorrelation, autocorrelation_stderr  # noqa: E402
from gmrfattack.gmrf import (  # noqa: E402
    GmrfModel,
    cross_channel_stencil,
    eigenvalues,
    grid4_stencil,
    grid8_stencil,
    identity_stencil,
)
from gmrfattack.mle import GradientSampleSet, fit, nll_gradient, nll_hessian, nll_objective  # noqa: E402
from gmrfattack.oracle import SyntheticOracle  # noqa: E402
from gmrfattack.posterior import ObservationSet  # noqa: E402


def _rel(a, b):
    return float(np.linalg.norm(np.ravel(a) - np.ravel(b)) / np.linalg.norm(np.ravel(b)))


# -- 1 -------------------------------------------------------------------------------


def criterion_1():
    """FFT logdet, apply and solve against explicit dense matrices."""
    start = time.perf_counter()
    cases = [
        (grid4_stencil(), [(1, 6, 6), (2, 5, 6)]),
        (grid8_stencil(), [(1, 6, 6), (1, 5, 4)]),
        (cross_channel_stencil(), [(3, 6, 6), (3, 4, 5)]),
    ]
    worst = 0.0
    rng = np.random.default_rng(20)
    for spec, shapes in cases:
        for shape in shapes:
            for _ in range(20):
                theta = random_feasible_theta(spec, shape, rng)
                lam = dense_precision(spec, theta, shape)
                model = GmrfModel(spec, theta, shape)
                v = rng.normal(size=shape)
                sign, ld = np.linalg.slogdet(lam)
                worst = max(
                    worst,
                    abs(model.logdet() - ld) / abs(ld) if sign > 0 else np.inf,
                    _rel(model.apply(v), lam @ v.ravel()),
                    _rel(model.solve(v), np.linalg.solve(lam, v.ravel())),
                )
    elapsed = time.perf_counter() - start
    passed = worst < 1e-8 and elapsed < 10
    return passed, f"worst relative error {worst:.2e} over 120 models, {elapsed:.1f} s"


# -- 2 -------------------------------------------------------------------------------


def criterion_2():
    """Closed-form spectrum of the 4-neighbour stencil on 1x4x4."""
    spec, theta, shape = grid4_stencil(), [5.0, -1.0], (1, 4, 4)
    fft_eigs = np.sort(eigenvalues(spec, theta, shape).ravel())
    dense_eigs = np.sort(np.linalg.eigvalsh(dense_precision(spec, theta, shape)))
    values, counts = np.unique(np.round(dense_eigs, 9), return_counts=True)
    exact = 4 * np.log(3) + 6 * np.log(5) + 4 * np.log(7) + np.log(9)
    ld = GmrfModel(spec, theta, shape).logdet()
    ok = (
        values.tolist() == [1, 3, 5, 7, 9]
        and counts.tolist() == [1, 4, 6, 4, 1]
        and np.max(np.abs(fft_eigs - dense_eigs)) < 1e-9
        and abs(ld - exact) < 1e-9
        and abs(ld - np.linalg.slogdet(dense_precision(spec, theta, shape))[1]) < 1e-9
        and abs(ld - 24.0319) < 5e-5
    )
    return ok, f"eigenvalues {values.tolist()} x {counts.tolist()}, logdet {ld:.10f}"


# -- 3 -------------------------------------------------------------------------------


def criterion_3():
    """Maximum-likelihood recovery of (5, -1) from 1e4 prior samples on 1x16x16."""
    start = time.perf_counter()
    spec, truth, shape = grid4_stencil(), np.array([5.0, -1.0]), (1, 16, 16)
    samples = GradientSampleSet(GmrfModel(spec, truth, shape).sample(rng_seed=3, n=10_000))
    report = fit(samples, spec)
    rel_err = np.abs(report.theta - truth) / np.abs(truth)
    monotone = bool(np.all(np.diff(report.objective_trace) <= 0))

    theta = report.theta * np.array([1.1, 0.9])
    grad, hess = nll_gradient(samples, spec, theta), nll_hessian(samples, spec, theta)
    g_err = h_err = 0.0
    for p in range(2):
        h = 1e-5 * abs(theta[p])
        e = np.zeros(2)
        e[p] = h
        fd = (nll_objective(samples, spec, theta + e) - nll_objective(samples, spec, theta - e)) / (2 * h)
        fd_h = (nll_gradient(samples, spec, theta + e) - nll_gradient(samples, spec, theta - e)) / (2 * h)
        g_err = max(g_err, abs(fd - grad[p]) / abs(grad[p]))
        h_err = max(h_err, _rel(fd_h, hess[:, p]))
    elapsed = time.perf_counter() - start
    ok = bool(np.all(rel_err < 0.05)) and monotone and g_err < 1e-5 and h_err < 1e-4 and elapsed < 60
    return ok, (f"theta {np.round(report.theta, 4).tolist()}, max rel err {rel_err.max():.2e}, "
                f"monotone={monotone}, fd grad {g_err:.1e} hess {h_err:.1e}, {elapsed:.1f} s")


# -- 4 -------------------------------------------------------------------------------


def criterion_4():
    """Woodbury posterior against dense solves; sequential vs batch; order invariance."""
    rng = np.random.default_rng(4)
    err_dense = err_batch = err_order = 0.0
    for spec, shape in [(grid4_stencil(), (1, 6, 6)), (cross_channel_stencil(), (3, 6, 6))]:
        for m in (1, 5, 16):
            theta = random_feasible_theta(spec, shape, rng)
            model = GmrfModel(spec, theta, shape)
            lam = dense_precision(spec, theta, shape)
            X = rng.normal(size=(m,) + shape)
            L = rng.normal(size=m)
            sigma2 = 0.2
            obs = ObservationSet(model, sigma2)
            for x, l in zip(X, L):
                obs.add(x, l)
            Xf = X.reshape(m, -1)
            A = lam + Xf.T @ Xf / sigma2
            mean_ref = np.linalg.solve(A, Xf.T @ L / sigma2)
            v = rng.normal(size=shape)
            err_dense = max(err_dense, _rel(obs.mean(), mean_ref),
                            _rel(obs.covariance_apply(v), np.linalg.solve(A, v.ravel())))
            batch = sigma2 * np.eye(m) + Xf @ np.linalg.solve(lam, Xf.T)
            err_batch = max(err_batch, np.abs(obs.inner - batch).max() / np.abs(batch).max())
            other = ObservationSet(model, sigma2)
            for k in rng.permutation(m):
                other.add(X[k], L[k])
            err_order = max(err_order, np.abs(other.mean() - obs.mean()).max() / max(1.0, np.abs(obs.mean()).max()))
    ok = err_dense < 1e-8 and err_batch < 1e-12 and err_order < 1e-9
    return ok, f"dense {err_dense:.1e}, batch {err_batch:.1e}, order {err_order:.1e}"


# -- 5 -------------------------------------------------------------------------------


def criterion_5():
    """Noiseless recovery with a full basis on a linear oracle."""
    worst, signs_ok = 0.0, True
    rng = np.random.default_rng(5)
    for shape, model_spec in [((1, 8, 8), None), ((3, 4, 4), None), ((1, 8, 8), (grid8_stencil(), [6.0, -1.0, 0.3]))]:
        x0 = rng.uniform(0.3, 0.7, size=shape)
        g = rng.normal(size=shape)
        oracle = SyntheticOracle(x0, g)
        model = GmrfModel(*model_spec, shape) if model_spec else None
        n = int(np.prod(shape))
        g_hat, _ = estimate_gradient(oracle, x0, 0, AttackConfig(0.1, n, 0.5, sigma2=1e-8, basis_kinds="cos+sin", model=model))
        worst = max(worst, _rel(g_hat, g))
        big = np.abs(g) > 1e-9
        signs_ok &= bool(np.all(np.sign(g_hat[big]) == np.sign(g[big])))
    return worst < 1e-4 and signs_ok, f"worst relative error {worst:.1e}, signs agree={signs_ok}"


# -- 6 -------------------------------------------------------------------------------


def criterion_6():
    """Gram matrix, DC vector, unit norms and deterministic enumeration."""
    shape = (1, 4, 4)
    vecs = low_frequency_sequence(shape, 16, "cos+sin")
    flat = vecs.reshape(16, -1)
    gram_err = np.abs(flat @ flat.T - np.eye(16)).max()
    dc_const = bool(np.ptp(vecs[0]) == 0)
    norms = np.abs(np.linalg.norm(flat, axis=1) - 1).max()
    deterministic = all(
        list(enumerate_frequencies(s, k)) == list(enumerate_frequencies(s, k))
        and np.array_equal(low_frequency_sequence(s, capacity(s, k), k), low_frequency_sequence(s, capacity(s, k), k))
        for s, k in itertools.product([(1, 4, 4), (3, 5, 6)], ["cos", "cos+sin"])
    )
    ok = gram_err < 1e-10 and dc_const and norms < 1e-12 and deterministic
    return ok, f"gram err {gram_err:.1e}, DC constant={dc_const}, norm err {norms:.1e}, deterministic={deterministic}"


# -- 7, 8, 9: harness experiment ----------------------------------------------------

_HARNESS = {}


def harness_run():
    """Default toy experiment with GMRF and identity variants, computed once."""
    if not _HARNESS:
        start = time.perf_counter()
        cfg = ex.load_config(overrides={"attack": {"variants": ["gmrf", "identity"]}})
        ctx = ex.build_context(cfg)
        model, report, info = ex.run_fit(cfg, ctx)
        records = ex.run_attacks(cfg, ctx, model)
        attack_time = time.perf_counter() - start
        _HARNESS.update(cfg=cfg, ctx=ctx, model=model, info=info, records=records,
                        rows=ex.metrics_table(records), attack_time=attack_time)
    return _HARNESS


def criterion_7():
    """Fitted GMRF vs identity covariance on the toy classifier at eps = 0.1."""
    h = harness_run()
    rate = {(r["attack"], r["budget"]): r["success_rate"] for r in h["rows"] if r["epsilon"] == 0.1}
    images = {r["images"] for r in h["rows"]}
    curve = [rate[("gmrf", m)] for m in (20, 50, 100)]
    beats_identity = rate[("gmrf", 20)] >= rate[("identity", 20)]
    monotone = all(b >= a - 0.02 for a, b in zip(curve, curve[1:]))
    won = {"gmrf": 0, "identity": 0}
    by_image = {}
    for r in h["records"]:
        if r["budget"] == 20:
            by_image.setdefault(r["image"], {})[r["variant"]] = r["success"]
    for pair in by_image.values():
        if pair["gmrf"] != pair["identity"]:
            won["gmrf" if pair["gmrf"] else "identity"] += 1
    ok = beats_identity and monotone and min(images) >= 200 and h["attack_time"] < 300
    detail = (f"{min(images)} images; success@20 gmrf {rate[('gmrf', 20)]:.4f} vs identity {rate[('identity', 20)]:.4f} "
              f"(discordant images: gmrf-only {won['gmrf']}, identity-only {won['identity']}); "
              f"gmrf curve {[round(c, 4) for c in curve]}; theta {np.round(h['model'].theta, 2).tolist()}; "
              f"{h['attack_time']:.0f} s")
    return ok, detail


def criterion_8():
    """Mean cosine of the 50-query estimate against the exact toy gradient."""
    h = harness_run()
    cfg = ex.load_config(overrides={"gradcheck": {"budget": 50, "variant": "gmrf"}})
    rows, est, true, summary = ex.run_gradcheck(cfg, h["ctx"], h["model"])
    null_q = summary["null_abs_cosine_q99"]
    ok = summary["mean_cosine"] > 0 and summary["mean_cosine"] > max(null_q, 0.2)
    return ok, (f"mean cosine {summary['mean_cosine']:.3f} over {summary['images']} images; "
                f"random null 99% |cos| {null_q:.3f}")


def criterion_9():
    """Every estimation attack spends m + 1 queries; fitting cost amortizes as stated."""
    h = harness_run()
    budget_ok = all(r["queries_used"] == r["budget"] + 1 for r in h["records"])
    example = ex.amortized_queries(10, 10, 500)
    info = h["info"]
    pool = len(h["ctx"].pool_index)
    harness_ok = info["fit_queries"] == 10 * 11 and np.isclose(info["amortized_queries_per_image"], 110 / pool)
    ok = budget_ok and np.isclose(example, 0.22) and harness_ok
    return ok, (f"{len(h['records'])} attacks all m+1={budget_ok}; 10x(10+1)/500 = {example:.2f}; "
                f"harness {info['fit_queries']}/{pool} = {info['amortized_queries_per_image']:.4f} per image")


# -- 10 ------------------------------------------------------------------------------


def criterion_10():
    """Sampled autocorrelation against the dense covariance, W = 9."""
    worst, shape, window = 0.0, (1, 16, 16), 9
    ok = True
    for spec, theta in [(grid4_stencil(), [4.4, -1.0]), (grid8_stencil(), [6.0, -1.0, -0.4])]:
        model = GmrfModel(spec, theta, shape)
        g = model.sample(rng_seed=2024, n=400)
        r = autocorrelation(g, window, mode="circular")[0]
        se = autocorrelation_stderr(g, window, mode="circular")[0]
        cov = np.linalg.inv(dense_precision(spec, theta, shape))
        half = window // 2
        exact = np.array([[cov[0, (dy % 16) * 16 + dx % 16] / cov[0, 0] for dx in range(-half, half + 1)]
                          for dy in range(-half, half + 1)])
        z = np.abs(r - exact) / np.where(se > 0, se, np.inf)
        ok &= bool(np.all(np.abs(r - exact) <= 3 * se))
        worst = max(worst, float(z.max()))
    return ok, f"largest deviation {worst:.2f} standard errors over 2 x 81 offsets"


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
            criterion_6, criterion_7, criterion_8, criterion_9, criterion_10]


def _line(k, ok, detail):
    return f"ACCEPTANCE {k:>2}: {'PASS' if ok else 'FAIL'} - {detail}"


@pytest.mark.parametrize("k", range(1, 11))
def test_acceptance(k, capsys):
    ok, detail = CRITERIA[k - 1]()
    with capsys.disabled():
        print("\n" + _line(k, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    results = [(k, *crit()) for k, crit in enumerate(CRITERIA, start=1)]
    for k, ok, detail in results:
        print(_line(k, ok, detail))
    sys.exit(0 if all(ok for _, ok, _ in results) else 1)
