"""Command-line front end.

Exit status is 0 on success, 2 when some per-image attacks failed and 1 on
configuration errors.
"""

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import experiments as ex
from .basis import plan_basis
from .errors import CapacityError, NotPositiveDefiniteError, ShapeMismatchError
from .gmrf import GmrfModel, load_model, preset, preset_names, save_model
from .mle import GradientSampleSet
from .oracle import train_toy
from .tensor import read_gtz, write_gtz

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def _shape(text):
    try:
        shape = tuple(int(s) for s in text.replace("x", ",").split(","))
    except ValueError:
        raise click.BadParameter(f"expected c,h,w but got {text!r}") from None
    if len(shape) != 3 or min(shape) < 1:
        raise click.BadParameter(f"expected three positive sizes, got {text!r}")
    return shape


def _fail(msg):
    click.echo(f"error: {msg}", err=True)
    sys.exit(EXIT_CONFIG)


def _load_stack(path, channels):
    stack = read_gtz(path)
    if stack.shape[0] % channels:
        _fail(f"{path} holds {stack.shape[0]} planes, not a multiple of {channels} channels")
    return stack.reshape(-1, channels, *stack.shape[1:])


class Session:
    def __init__(self, seed, out_dir, config_path):
        self.seed = seed
        self.out_dir = Path(out_dir)
        self.config_path = config_path

    def config(self, overrides=None):
        overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
        if self.seed is not None:
            overrides["seed"] = self.seed
        try:
            return ex.load_config(self.config_path, overrides)
        except ex.ConfigError as exc:
            _fail(str(exc))

    def prepare(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self.out_dir


@click.group()
@click.option("--seed", type=int, default=None, help="Top-level seed (overrides the config file).")
@click.option("--out-dir", type=click.Path(file_okay=False), default="runs", show_default=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON experiment configuration.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, seed, out_dir, config_path, verbose):
    """Black-box gradient estimation with GMRF priors."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = Session(seed, out_dir, config_path)


@main.command("make-dataset")
@click.option("--kind", type=click.Choice(["blobs", "bars"]), default=None)
@click.option("--size", type=int, default=None)
@click.option("--shape", default=None, help="c,h,w")
@click.pass_obj
def make_dataset_cmd(s, kind, size, shape):
    """Generate the synthetic two-class image set."""
    ds_over = {"kind": kind, "size": size, "shape": list(_shape(shape)) if shape else None}
    cfg = s.config({"dataset": {k: v for k, v in ds_over.items() if v is not None}})
    out = s.prepare()
    ds = ex.build_dataset(cfg)
    ds.save(out / "dataset")
    ex.write_manifest(out, "make-dataset", cfg)
    click.echo(f"wrote {len(ds)} images to {out / 'dataset'}")


@main.command("train-toy")
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--arch", type=click.Choice(["mlp", "softmax"]), default=None)
@click.option("--epochs", type=int, default=None)
@click.pass_obj
def train_toy_cmd(s, dataset_dir, arch, epochs):
    """Train the toy classifier and save its weights."""
    clf_over = {k: v for k, v in {"arch": arch, "epochs": epochs}.items() if v is not None}
    cfg = s.config({"dataset": {"path": dataset_dir} if dataset_dir else {}, "classifier": clf_over})
    out = s.prepare()
    ds = ex.build_dataset(cfg)
    c = cfg["classifier"]
    clf = train_toy(ds, arch=c["arch"], hidden=c["hidden"], epochs=c["epochs"], lr=c["lr"],
                    rng_seed=ex.derive_seed(cfg["seed"], 1))
    clf.save(out / "classifier")
    ex.write_manifest(out, "train-toy", cfg, history=clf.history)
    click.echo(json.dumps(clf.history, sort_keys=True))


@main.command("fit-gmrf")
@click.option("--samples", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Fit directly to a GTZ1 stack of gradient samples instead of querying the classifier.")
@click.option("--channels", type=int, default=1, show_default=True, help="Channels per sample in --samples.")
@click.option("--stencil", type=click.Choice(sorted(ex.STENCILS)), default=None)
@click.pass_obj
def fit_gmrf_cmd(s, samples, channels, stencil):
    """Fit stencil parameters by maximum likelihood and write model.json."""
    cfg = s.config({"fit": {"stencil": stencil} if stencil else {}})
    out = s.prepare()
    try:
        if samples is not None:
            stack = GradientSampleSet(_load_stack(samples, channels))
            report = ex.fit_from_samples(stack, cfg["fit"]["stencil"])
            model = GmrfModel(ex.STENCILS[cfg["fit"]["stencil"]](), report.theta, stack.shape)
            info = {"stencil": cfg["fit"]["stencil"], "sample_count": len(stack)}
        else:
            ctx = ex.build_context(cfg)
            model, report, info = ex.run_fit(cfg, ctx)
    except ex.ConfigError as exc:
        _fail(str(exc))
    except NotPositiveDefiniteError as exc:
        _fail(f"fit left the positive-definite region: {exc}")
    save_model(out / "model.json", model.spec, model.theta, fit=report.to_dict(), **info)
    (out / "fit_report.json").write_text(json.dumps({**report.to_dict(), **info}, indent=2, sort_keys=True) + "\n")
    ex.write_manifest(out, "fit-gmrf", cfg)
    click.echo(f"theta = {np.array2string(model.theta, precision=6)}  converged={report.converged} "
               f"iterations={report.iterations}")
    if "amortized_queries_per_image" in info:
        click.echo(f"fitting queries = {info['fit_queries']}  "
                   f"amortized over {info['pool_size']} images = {info['amortized_queries_per_image']:.4g}/image")


@main.command()
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Fitted model file; fitted on held-out images when omitted.")
@click.option("--workers", type=int, default=None)
@click.option("--max-images", type=int, default=None)
@click.pass_obj
def attack(s, model_path, workers, max_images):
    """Run every attack variant over the image pool and write metrics."""
    at = {k: v for k, v in {"workers": workers, "max_images": max_images}.items() if v is not None}
    cfg = s.config({"fit": {"model": model_path} if model_path else {}, "attack": at})
    out = s.prepare()
    try:
        ctx = ex.build_context(cfg)
        model, fit_info = ex.resolve_model(cfg, ctx, out)
    except ex.ConfigError as exc:
        _fail(str(exc))
    records = ex.run_attacks(cfg, ctx, model)
    rows = ex.metrics_table(records)
    ex.write_attack_outputs(out, records, rows)
    ex.write_manifest(out, "attack", cfg, pool_size=len(ctx.pool_index),
                      amortized_queries_per_image=fit_info.get("amortized_queries_per_image"))
    for row in rows:
        click.echo(f"{row['attack']:>9} eps={row['epsilon']:g} m={row['budget']:>3} "
                   f"success={row['success_rate']:.3f} cos={ex._fmt(row['mean_cosine'])[:6]}")
    failures = sum(row["failures"] for row in rows)
    if failures:
        click.echo(f"{failures} attack(s) failed; see outcomes.jsonl", err=True)
        sys.exit(EXIT_PARTIAL)


@main.command()
@click.option("--gradients", type=click.Path(exists=True, dir_okay=False), default=None,
              help="GTZ1 stack of gradients; defaults to exact toy-classifier gradients of the pool.")
@click.option("--channels", type=int, default=1, show_default=True)
@click.option("--window", type=int, default=None)
@click.option("--mode", type=click.Choice(["valid", "circular"]), default=None)
@click.pass_obj
def autocorr(s, gradients, channels, window, mode):
    """Spatial autocorrelation of gradients over a W x W window."""
    cfg = s.config({"autocorr": {k: v for k, v in {"window": window, "mode": mode}.items() if v is not None}})
    out = s.prepare()
    if gradients is not None:
        g = _load_stack(gradients, channels)
    else:
        try:
            g = ex.true_gradients(ex.build_context(cfg))
        except ex.ConfigError as exc:
            _fail(str(exc))
    try:
        r, se = ex.run_autocorr(g, cfg["autocorr"]["window"], cfg["autocorr"]["mode"])
    except ValueError as exc:
        _fail(str(exc))
    ex.write_autocorr_outputs(out, r, se)
    ex.write_manifest(out, "autocorr", cfg, gradient_count=len(g))
    half = r.shape[1] // 2
    for ch in range(r.shape[0]):
        click.echo(f"channel {ch}: r(0,1) = {r[ch, half, half + 1]:.4f}  r(1,0) = {r[ch, half + 1, half]:.4f}")


@main.command("grad-check")
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--budget", type=int, default=None)
@click.option("--variant", type=click.Choice(["gmrf", "identity", "rdsa"]), default=None)
@click.option("--max-images", type=int, default=None)
@click.pass_obj
def grad_check(s, model_path, budget, variant, max_images):
    """Cosine similarity and normalized MSE of estimated gradients."""
    gc = {k: v for k, v in {"budget": budget, "variant": variant}.items() if v is not None}
    cfg = s.config({"fit": {"model": model_path} if model_path else {}, "gradcheck": gc,
                    "attack": {"max_images": max_images} if max_images else {}})
    out = s.prepare()
    try:
        ctx = ex.build_context(cfg)
        model, _ = ex.resolve_model(cfg, ctx, out)
    except ex.ConfigError as exc:
        _fail(str(exc))
    rows, est, true, summary = ex.run_gradcheck(cfg, ctx, model)
    ex.write_gradcheck_outputs(out, rows, est, true, summary, cfg["gradcheck"]["bins"], int(np.prod(ctx.dataset.shape)))
    ex.write_manifest(out, "grad-check", cfg)
    click.echo(json.dumps(summary, sort_keys=True))


@main.command("gen-basis")
@click.option("--shape", required=True, help="c,h,w")
@click.option("--count", type=int, required=True)
@click.option("--kinds", type=click.Choice(["cos", "cos+sin"]), default="cos", show_default=True)
@click.pass_obj
def gen_basis(s, shape, count, kinds):
    """Write the first COUNT low-frequency basis vectors."""
    shape = _shape(shape)
    try:
        plan = plan_basis(shape, count, kinds)
    except CapacityError as exc:
        _fail(str(exc))
    out = s.prepare()
    vecs = plan.vectors()
    write_gtz(out / "basis.gtz", vecs.reshape(-1, *shape[1:]))
    ex.write_csv(out / "basis_order.csv", ["index", "channel", "row", "col", "phase"],
                 [[i, *item] for i, item in enumerate(plan.order)])
    click.echo(f"wrote {count} vectors of shape {shape} to {out / 'basis.gtz'}")


@main.command("sample-prior")
@click.option("--preset", "preset_name", type=click.Choice(preset_names()), default=None)
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--shape", required=True, help="c,h,w")
@click.option("-n", "count", type=int, default=1, show_default=True)
@click.pass_obj
def sample_prior_cmd(s, preset_name, model_path, shape, count):
    """Draw samples from a GMRF prior."""
    if (preset_name is None) == (model_path is None):
        _fail("give exactly one of --preset or --model")
    shape = _shape(shape)
    spec, theta = preset(preset_name) if preset_name else load_model(model_path)[:2]
    try:
        model = GmrfModel(spec, theta, shape)
    except (ShapeMismatchError, NotPositiveDefiniteError, ValueError) as exc:
        _fail(str(exc))
    seed = 0 if s.seed is None else s.seed
    out = s.prepare()
    samples = model.sample(rng_seed=seed, n=count)
    write_gtz(out / "samples.gtz", samples.reshape(-1, *shape[1:]))
    save_model(out / "model.json", spec, theta, shape=list(shape), sample_count=count, seed=seed)
    click.echo(f"wrote {count} samples to {out / 'samples.gtz'}")


if __name__ == "__main__":
    main()
