"""Experiment harness: configuration, held-out fitting, batch attacks and metrics.

Everything here is deterministic given the configuration: sub-seeds are
derived from the top-level seed with ``numpy.random.SeedSequence``, images
are processed in dataset order and every table is sorted before writing, so
reruns reproduce the output files byte for byte.
"""

import copy
import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, estimate_gradient, finish_attack, rdsa_gradient, white_box_fgsm
from .diagnostics import autocorrelation, autocorrelation_stderr, cosine_similarity, normalized_mse
from .errors import OracleError
from .gmrf import GmrfModel, grid4_stencil, grid8_stencil, load_model, save_model
from .mle import collect_samples, fit
from .oracle import ClassifierOracle, Dataset, ToyClassifier, make_synthetic_dataset, train_toy
from .tensor import write_gtz

log = logging.getLogger(__name__)

VARIANTS = ("gmrf", "identity", "rdsa", "white-box")
STENCILS = {"grid4": grid4_stencil, "grid8": grid8_stencil}

DEFAULT_CONFIG = {
    "seed": 0,
    "dataset": {"path": None, "kind": "blobs", "size": 1000, "shape": [1, 16, 16], "test_fraction": 0.5},
    "classifier": {"path": None, "arch": "mlp", "hidden": 32, "epochs": 300, "lr": 0.5},
    "fit": {"model": None, "stencil": "grid8", "images": 10, "directions": 10, "delta": 0.01},
    "attack": {
        "epsilons": [0.1],
        "budgets": [20, 50, 100],
        "variants": ["gmrf", "identity", "rdsa"],
        "direction_source": "fft-basis",
        "basis_kinds": "cos+sin",
        "delta1": 0.01,
        "sigma2": 1e-3,
        "rdsa_delta": 0.01,
        "max_images": None,
        "workers": 1,
        "save_tensors": False,
    },
    "gradcheck": {"budget": 50, "variant": "gmrf", "bins": 20, "null_draws": 1000},
    "autocorr": {"window": 9, "mode": "valid"},
}

# Stream identifiers for derived seeds.
_DATASET, _TRAIN, _FIT, _ATTACK, _NULL = range(5)


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


def derive_seed(seed, *keys):
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1)[0])


def _merge(base, update, path=""):
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a table")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path=None, overrides=None):
    """Defaults, then the JSON file at ``path``, then ``overrides``; validated."""
    cfg = DEFAULT_CONFIG
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, data)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed must be a non-negative integer")
    ds, clf, ft, at = cfg["dataset"], cfg["classifier"], cfg["fit"], cfg["attack"]
    for section, key in ((ds, "path"), (clf, "path"), (ft, "model")):
        if section[key] is not None:
            need(Path(section[key]).exists(), f"referenced path {section[key]} does not exist")
    need(ds["kind"] in ("blobs", "bars"), "dataset.kind must be 'blobs' or 'bars'")
    need(len(ds["shape"]) == 3 and all(int(s) > 0 for s in ds["shape"]), "dataset.shape must be [c, h, w]")
    need(0 < ds["test_fraction"] < 1, "dataset.test_fraction must lie in (0, 1)")
    need(clf["arch"] in ("mlp", "softmax"), "classifier.arch must be 'mlp' or 'softmax'")
    need(ft["stencil"] in STENCILS, f"fit.stencil must be one of {sorted(STENCILS)}")
    need(ft["images"] >= 1 and ft["directions"] >= 1, "fit needs at least one image and one direction")
    need(ft["delta"] > 0, "fit.delta must be positive")
    need(len(at["epsilons"]) > 0 and all(e >= 0 for e in at["epsilons"]), "attack.epsilons must be non-negative")
    budgets = at["budgets"]
    need(len(budgets) > 0 and all(isinstance(m, int) and m >= 1 for m in budgets), "attack.budgets must be positive integers")
    need(list(budgets) == sorted(set(budgets)), "attack.budgets must be sorted ascending without repeats")
    need(all(v in VARIANTS for v in at["variants"]), f"attack.variants must be drawn from {VARIANTS}")
    need(at["direction_source"] in ("fft-basis", "gaussian"), "attack.direction_source must be 'fft-basis' or 'gaussian'")
    need(at["basis_kinds"] in ("cos", "cos+sin"), "attack.basis_kinds must be 'cos' or 'cos+sin'")
    need(at["delta1"] > 0 and at["sigma2"] > 0 and at["rdsa_delta"] > 0, "delta1, sigma2 and rdsa_delta must be positive")
    need(at["max_images"] is None or at["max_images"] >= 1, "attack.max_images must be positive or null")
    need(at["workers"] >= 1, "attack.workers must be at least 1")
    need(cfg["gradcheck"]["variant"] in ("gmrf", "identity", "rdsa"), "gradcheck.variant must be gmrf, identity or rdsa")
    need(cfg["gradcheck"]["budget"] >= 1, "gradcheck.budget must be positive")
    w = cfg["autocorr"]["window"]
    need(w % 2 == 1 and w >= 1, "autocorr.window must be odd")
    need(cfg["autocorr"]["mode"] in ("valid", "circular"), "autocorr.mode must be 'valid' or 'circular'")


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(out_dir, command, cfg, **extra):
    """Record what produced the outputs; contains no timestamps so reruns match."""
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "version": __version__,
        "numpy": np.__version__,
        **extra,
    }
    _write_json(Path(out_dir) / "manifest.json", manifest)
    return manifest


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def amortized_queries(fit_images, fit_directions, pool_size):
    """Fitting queries ``m_fit (n_fit + 1)`` spread over the attacked pool."""
    if pool_size < 1:
        raise ValueError("attack pool is empty")
    return fit_images * (fit_directions + 1) / pool_size


# -- dataset, classifier and image pools ---------------------------------------------


@dataclass
class Context:
    dataset: Dataset
    classifier: ToyClassifier
    fit_index: np.ndarray
    pool_index: np.ndarray

    def images(self, index):
        return self.dataset.images[index], self.dataset.labels[index]


def build_dataset(cfg):
    ds_cfg = cfg["dataset"]
    if ds_cfg["path"] is not None:
        return Dataset.load(ds_cfg["path"])
    return make_synthetic_dataset(
        ds_cfg["kind"], ds_cfg["size"], tuple(ds_cfg["shape"]),
        derive_seed(cfg["seed"], _DATASET), ds_cfg["test_fraction"],
    )


def build_classifier(cfg, dataset):
    c = cfg["classifier"]
    if c["path"] is not None:
        clf = ToyClassifier.load(c["path"])
        if tuple(clf.shape) != dataset.shape:
            raise ConfigError(f"classifier expects {tuple(clf.shape)} inputs, dataset has {dataset.shape}")
        return clf
    return train_toy(dataset, arch=c["arch"], hidden=c["hidden"], epochs=c["epochs"], lr=c["lr"],
                     rng_seed=derive_seed(cfg["seed"], _TRAIN))


def build_context(cfg):
    """Load or create data and classifier, then split the test images.

    The last ``fit.images`` test images are held out for fitting.  The attack
    pool is the remaining test images the classifier gets right, in dataset
    order, optionally truncated to ``attack.max_images``.
    """
    dataset = build_dataset(cfg)
    clf = build_classifier(cfg, dataset)
    test = np.flatnonzero(dataset.split == "test")
    n_fit = cfg["fit"]["images"]
    if len(test) <= n_fit:
        raise ConfigError(f"only {len(test)} test images; cannot hold out {n_fit} for fitting")
    fit_index, rest = test[-n_fit:], test[:-n_fit]
    correct = clf.predict(dataset.images[rest]) == dataset.labels[rest]
    pool = rest[correct]
    log.info("excluded %d initially misclassified images", int((~correct).sum()))
    if cfg["attack"]["max_images"] is not None:
        pool = pool[: cfg["attack"]["max_images"]]
    if len(pool) == 0:
        raise ConfigError("attack pool is empty")
    return Context(dataset, clf, fit_index, pool)


# -- fitting -------------------------------------------------------------------------


def run_fit(cfg, ctx):
    """Fit the stencil to RDSA samples from the held-out images; returns (model, report, info)."""
    ft = cfg["fit"]
    oracle = ClassifierOracle(ctx.classifier)
    X, Y = ctx.images(ctx.fit_index)
    samples = collect_samples(oracle, X, Y, ft["directions"], ft["delta"], derive_seed(cfg["seed"], _FIT))
    spec = STENCILS[ft["stencil"]]()
    report = fit(samples, spec)
    info = {
        "stencil": ft["stencil"],
        "fit_images": [int(i) for i in ctx.fit_index],
        "fit_queries": samples.queries_used,
        "pool_size": len(ctx.pool_index),
        "amortized_queries_per_image": amortized_queries(len(X), ft["directions"], len(ctx.pool_index)),
        "rejected_samples": len(samples.rejected),
    }
    if not report.converged:
        log.warning("Newton iterations stopped before convergence")
    model = GmrfModel(spec, report.theta, ctx.dataset.shape)
    return model, report, info


def fit_from_samples(samples, stencil):
    return fit(samples, STENCILS[stencil]())


def resolve_model(cfg, ctx, out_dir=None):
    """Load ``fit.model`` if given, else fit on the held-out images (writing model.json)."""
    path = cfg["fit"]["model"]
    if path is not None:
        spec, theta, data = load_model(path)
        return GmrfModel(spec, theta, ctx.dataset.shape), data
    model, report, info = run_fit(cfg, ctx)
    if out_dir is not None:
        save_model(Path(out_dir) / "model.json", model.spec, model.theta, fit=report.to_dict(), **info)
    return model, info


# -- attacks -------------------------------------------------------------------------


def _estimate(variant, oracle, x, y, m, at, model, seed):
    if variant == "rdsa":
        return rdsa_gradient(oracle, x, y, m, at["rdsa_delta"], seed)
    cfg = AttackConfig(
        epsilon=0.0, m=m, delta1=at["delta1"], sigma2=at["sigma2"],
        direction_source=at["direction_source"], basis_kinds=at["basis_kinds"],
        model=model if variant == "gmrf" else None, rng_seed=seed,
    )
    return estimate_gradient(oracle, x, y, cfg)[0]


def attack_image(job):
    """All variants, budgets and epsilons for one image; returns a list of records.

    The gradient estimate does not depend on epsilon, so one estimate per
    (variant, budget) is shared by every epsilon.  Gaussian directions are
    seeded per (image, budget) so the GMRF and identity variants see the
    same queries.
    """
    index, x, y, clf, model, at, seed = job
    true_grad = clf.input_gradient(x, y)
    records = []

    def base(variant, m):
        return {"image": int(index), "label": int(y), "variant": variant, "budget": m}

    for variant in sorted(at["variants"]):
        if variant == "white-box":
            for eps in at["epsilons"]:
                out = white_box_fgsm(clf, x, y, eps)
                records.append({**base(variant, 0), "epsilon": eps, "status": "ok", **out.record()})
            continue
        for m in at["budgets"]:
            oracle = ClassifierOracle(clf)
            try:
                g_hat = _estimate(variant, oracle, x, y, m, at, model, derive_seed(seed, int(index), m))
                if not np.all(np.isfinite(g_hat)):
                    raise OracleError("non-finite gradient estimate")
            except (OracleError, np.linalg.LinAlgError, FloatingPointError) as exc:
                for eps in at["epsilons"]:
                    records.append({**base(variant, m), "epsilon": eps, "status": "error", "error": str(exc),
                                    "success": None, "queries_used": oracle.queries_used})
                continue
            spent = oracle.queries_used
            for eps in at["epsilons"]:
                out = finish_attack(oracle, x, y, g_hat, eps, (0.0, 1.0), spent, true_grad)
                rec = {**base(variant, m), "epsilon": eps, "status": "ok", **out.record()}
                if at["save_tensors"]:
                    rec["_adversarial"] = out.adversarial
                records.append(rec)
    return records


def run_attacks(cfg, ctx, model):
    """Attack every pool image; returns the record list sorted deterministically."""
    at = cfg["attack"]
    seed = derive_seed(cfg["seed"], _ATTACK)
    X, Y = ctx.images(ctx.pool_index)
    jobs = [(i, x, int(y), ctx.classifier, model, at, seed) for i, x, y in zip(ctx.pool_index, X, Y)]
    if at["workers"] > 1:
        with ProcessPoolExecutor(max_workers=at["workers"]) as pool:
            chunks = list(pool.map(attack_image, jobs, chunksize=max(1, len(jobs) // (4 * at["workers"]))))
    else:
        chunks = [attack_image(job) for job in jobs]
    records = [r for chunk in chunks for r in chunk]
    records.sort(key=lambda r: (r["variant"], r["epsilon"], r["budget"], r["image"]))
    return records


METRIC_COLUMNS = ["attack", "epsilon", "budget", "success_rate", "avg_queries_successful",
                  "mean_cosine", "mean_mse", "images", "failures"]


def metrics_table(records):
    """One row per (attack, epsilon, budget).

    Success rate is over all pool images (failed attacks count as
    unsuccessful); average queries are over successful attacks only.
    """
    groups = {}
    for r in records:
        groups.setdefault((r["variant"], r["epsilon"], r["budget"]), []).append(r)
    rows = []
    for (variant, eps, m), rs in sorted(groups.items()):
        ok = [r for r in rs if r["status"] == "ok"]
        wins = [r for r in ok if r["success"]]
        cos = [r["cosine"] for r in ok if r.get("cosine") is not None and not math.isnan(r["cosine"])]
        mse = [r["mse"] for r in ok if r.get("mse") is not None and not math.isnan(r["mse"])]
        rows.append({
            "attack": variant,
            "epsilon": float(eps),
            "budget": int(m),
            "success_rate": len(wins) / len(rs),
            "avg_queries_successful": float(np.mean([r["queries_used"] for r in wins])) if wins else None,
            "mean_cosine": float(np.mean(cos)) if cos else None,
            "mean_mse": float(np.mean(mse)) if mse else None,
            "images": len(rs),
            "failures": len(rs) - len(ok),
        })
    return rows


def write_attack_outputs(out_dir, records, rows):
    out_dir = Path(out_dir)
    write_csv(out_dir / "metrics.csv", METRIC_COLUMNS, [[row[c] for c in METRIC_COLUMNS] for row in rows])
    tensors = {}
    with open(out_dir / "outcomes.jsonl", "w") as fh:
        for r in records:
            adv = r.pop("_adversarial", None)
            if adv is not None:
                tensors.setdefault((r["variant"], r["epsilon"], r["budget"]), []).append(adv)
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    if tensors:
        tdir = out_dir / "adversarial"
        tdir.mkdir(exist_ok=True)
        for (variant, eps, m), stack in sorted(tensors.items()):
            stack = np.stack(stack)
            write_gtz(tdir / f"{variant}_eps{eps:g}_m{m}.gtz", stack.reshape(-1, *stack.shape[2:]))


# -- gradient diagnostics --------------------------------------------------------------


def random_cosine_null(n_dim, draws, seed):
    """Cosines between independent Gaussian vectors in ``n_dim`` dimensions."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((draws, n_dim))
    b = rng.standard_normal((draws, n_dim))
    return np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))


def run_gradcheck(cfg, ctx, model):
    """Per-image cosine and normalized MSE of the estimate against the exact gradient."""
    gc, at = cfg["gradcheck"], cfg["attack"]
    seed = derive_seed(cfg["seed"], _ATTACK)
    X, Y = ctx.images(ctx.pool_index)
    rows, est, true = [], [], []
    for i, x, y in zip(ctx.pool_index, X, Y):
        g = ctx.classifier.input_gradient(x, y)
        oracle = ClassifierOracle(ctx.classifier)
        g_hat = _estimate(gc["variant"], oracle, x, int(y), gc["budget"], at, model, derive_seed(seed, int(i), gc["budget"]))
        rows.append({"image": int(i), "cosine": cosine_similarity(g_hat, g), "mse": normalized_mse(g_hat, g),
                     "queries_used": oracle.queries_used})
        est.append(g_hat)
        true.append(g)
    null = random_cosine_null(int(np.prod(ctx.dataset.shape)), gc["null_draws"], derive_seed(cfg["seed"], _NULL))
    cos = np.array([r["cosine"] for r in rows])
    summary = {
        "variant": gc["variant"],
        "budget": gc["budget"],
        "images": len(rows),
        "mean_cosine": float(np.nanmean(cos)),
        "mean_mse": float(np.nanmean([r["mse"] for r in rows])),
        "null_abs_cosine_q99": float(np.quantile(np.abs(null), 0.99)),
        "null_mean_cosine": float(null.mean()),
    }
    return rows, np.stack(est), np.stack(true), summary


def histogram_rows(values, bins, lo, hi):
    counts, edges = np.histogram(np.asarray(values)[np.isfinite(values)], bins=bins, range=(lo, hi))
    return [[float(a), float(b), int(c)] for a, b, c in zip(edges[:-1], edges[1:], counts)]


def write_gradcheck_outputs(out_dir, rows, est, true, summary, bins, n_dim):
    out_dir = Path(out_dir)
    write_csv(out_dir / "gradcheck.csv", ["image", "cosine", "mse", "queries_used"],
              [[r["image"], r["cosine"], r["mse"], r["queries_used"]] for r in rows])
    hist_header = ["bin_low", "bin_high", "count"]
    write_csv(out_dir / "cosine_hist.csv", hist_header, histogram_rows([r["cosine"] for r in rows], bins, -1.0, 1.0))
    write_csv(out_dir / "mse_hist.csv", hist_header, histogram_rows([r["mse"] for r in rows], bins, 0.0, 4.0 / n_dim))
    write_gtz(out_dir / "estimated.gtz", est.reshape(-1, *est.shape[2:]))
    write_gtz(out_dir / "true.gtz", true.reshape(-1, *true.shape[2:]))
    _write_json(out_dir / "gradcheck_summary.json", summary)


# -- autocorrelation -------------------------------------------------------------------


def true_gradients(ctx):
    X, Y = ctx.images(ctx.pool_index)
    return ctx.classifier.input_gradient(X, Y)


def run_autocorr(gradients, window, mode):
    r = autocorrelation(gradients, window, mode)
    se = autocorrelation_stderr(gradients, window, mode) if len(gradients) > 1 else np.full_like(r, np.nan)
    return r, se


def write_autocorr_outputs(out_dir, r, se):
    c, W, _ = r.shape
    half = W // 2
    rows = []
    for ch in range(c):
        for i in range(W):
            for j in range(W):
                rows.append([ch, i - half, j - half, r[ch, i, j], se[ch, i, j]])
    write_csv(Path(out_dir) / "autocorr.csv", ["channel", "dy", "dx", "r", "stderr"], rows)
    write_gtz(Path(out_dir) / "autocorr.gtz", r)
