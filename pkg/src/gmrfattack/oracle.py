"""Black-box loss oracles, a small trainable classifier and synthetic image data.

Every oracle exposes ``query(x, y) -> float`` and counts its calls in
``queries_used``.  Classifier-backed oracles also expose ``predict`` which is
*not* counted: it is the post-attack success check, kept out of the
estimation budget.
"""

import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import OracleError
from .gmrf import sample_prior
from .tensor import read_gtz, write_gtz

log = logging.getLogger(__name__)


class LossOracle:
    """Base class: subclasses implement ``_loss``."""

    concurrent_safe = True

    def __init__(self):
        self._lock = threading.Lock()
        self.queries_used = 0

    def query(self, x, y=None):
        value = float(self._loss(np.asarray(x, dtype=np.float64), y))
        with self._lock:
            self.queries_used += 1
        return value

    def _loss(self, x, y):
        raise NotImplementedError

    def predict(self, x):
        """Class decision at ``x``, or None when the oracle has no classifier."""
        return None

    def reset(self):
        with self._lock:
            self.queries_used = 0


class SyntheticOracle(LossOracle):
    """L(x) = L0 + <g, x - x0> + (q/2) ||x - x0||^2 with a known gradient g at x0."""

    def __init__(self, anchor, gradient, base_loss=0.0, curvature=0.0):
        super().__init__()
        self.anchor = np.asarray(anchor, dtype=np.float64)
        self.gradient = np.asarray(gradient, dtype=np.float64)
        if self.anchor.shape != self.gradient.shape:
            raise ValueError("anchor and gradient shapes differ")
        if curvature < 0:
            raise ValueError("curvature must be non-negative")
        self.base_loss = float(base_loss)
        self.curvature = float(curvature)

    def _loss(self, x, y):
        d = x - self.anchor
        return self.base_loss + np.vdot(self.gradient, d) + 0.5 * self.curvature * np.vdot(d, d)

    def true_gradient(self, x=None):
        if x is None:
            return self.gradient.copy()
        return self.gradient + self.curvature * (np.asarray(x) - self.anchor)


def gmrf_gradient_oracle(model, anchor=None, rng_seed=None, base_loss=0.0, curvature=0.0):
    """Synthetic oracle whose gradient is a draw from the GMRF prior of ``model``."""
    if anchor is None:
        anchor = np.full(model.shape, 0.5)
    return SyntheticOracle(anchor, sample_prior(model, rng_seed), base_loss, curvature)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ToyClassifier:
    """Softmax regression (``arch="softmax"``) or a one-hidden-layer tanh network.

    ``params`` holds ``W``/``b`` for softmax regression and ``W1``/``b1``/``W2``/``b2``
    for the network; inputs are flattened (c, h, w) images.
    """

    arch: str
    shape: tuple
    n_classes: int
    params: dict
    history: dict = field(default_factory=dict)

    def _forward(self, X):
        if self.arch == "softmax":
            return X @ self.params["W"].T + self.params["b"], None
        hidden = np.tanh(X @ self.params["W1"].T + self.params["b1"])
        return hidden @ self.params["W2"].T + self.params["b2"], hidden

    def _flat(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x.reshape(-1, int(np.prod(self.shape)))

    def logits(self, x):
        return self._forward(self._flat(x))[0]

    def probabilities(self, x):
        return _softmax(self.logits(x))

    def predict(self, x):
        """Arg-max class; a scalar for one image, an array for a batch."""
        pred = np.argmax(self.logits(x), axis=-1)
        return int(pred[0]) if np.ndim(x) == 3 else pred

    def loss(self, x, y):
        """Cross-entropy; per-example array when ``x`` is a batch."""
        z = self.logits(x)
        z = z - z.max(axis=-1, keepdims=True)
        y = np.atleast_1d(y)
        ce = np.log(np.exp(z).sum(axis=-1)) - z[np.arange(len(z)), y]
        return float(ce[0]) if np.ndim(x) == 3 else ce

    def input_gradient(self, x, y):
        """Analytic d(cross-entropy)/dx, same shape as ``x``."""
        X = self._flat(x)
        z, hidden = self._forward(X)
        r = _softmax(z)
        y = np.atleast_1d(y)
        r[np.arange(len(r)), y] -= 1.0
        if self.arch == "softmax":
            g = r @ self.params["W"]
        else:
            g = ((r @ self.params["W2"]) * (1.0 - hidden**2)) @ self.params["W1"]
        return g.reshape(np.shape(x))

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savez(directory / "weights.npz", **self.params)
        meta = {"arch": self.arch, "shape": list(self.shape), "n_classes": self.n_classes, "history": self.history}
        (directory / "classifier.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = json.loads((directory / "classifier.json").read_text())
        with np.load(directory / "weights.npz") as npz:
            params = {k: npz[k].copy() for k in npz.files}
        return cls(meta["arch"], tuple(meta["shape"]), meta["n_classes"], params, meta.get("history", {}))


class ClassifierOracle(LossOracle):
    """Cross-entropy loss of a :class:`ToyClassifier` as a black box."""

    def __init__(self, classifier):
        super().__init__()
        self.classifier = classifier

    def _loss(self, x, y):
        return self.classifier.loss(x, y)

    def predict(self, x):
        return self.classifier.predict(x)

    def true_gradient(self, x, y):
        return self.classifier.input_gradient(x, y)


def white_box_gradient(clf, x, y):
    return clf.input_gradient(x, y)


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype="<U5")
        if self.images.ndim != 4:
            raise ValueError("images must be an (n, c, h, w) stack")
        if not (len(self.images) == len(self.labels) == len(self.split)):
            raise ValueError("images, labels and split tags differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label out of range")

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def __len__(self):
        return len(self.labels)

    def subset(self, tag):
        keep = self.split == tag
        return Dataset(self.images[keep], self.labels[keep], self.split[keep], self.n_classes)

    def save(self, directory):
        """Write images as one GTZ1 tensor (images stacked along channels) plus a manifest."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        n, c, h, w = self.images.shape
        write_gtz(directory / "images.gtz", self.images.reshape(n * c, h, w))
        manifest = {
            "count": n,
            "channels": c,
            "n_classes": self.n_classes,
            "labels": self.labels.tolist(),
            "split": self.split.tolist(),
        }
        (directory / "dataset.json").write_text(json.dumps(manifest) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest = json.loads((directory / "dataset.json").read_text())
        stack = read_gtz(directory / "images.gtz")
        n, c = manifest["count"], manifest["channels"]
        images = stack.reshape(n, c, *stack.shape[1:])
        split = manifest.get("split", ["test"] * n)
        return cls(images, manifest["labels"], split, manifest["n_classes"])


def make_synthetic_dataset(kind, size, shape=(1, 16, 16), rng_seed=0, test_fraction=0.5):
    """Reproducible two-class image data in [0, 1].

    ``"blobs"``: a smooth Gaussian bump whose centre is drawn around a
    class-specific location.  ``"bars"``: horizontal (class 0) or vertical
    (class 1) stripes with a jittered phase.  Both add pixel noise.
    """
    rng = np.random.default_rng(rng_seed)
    c, h, w = shape
    labels = np.arange(size) % 2
    rng.shuffle(labels)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    images = np.empty((size, c, h, w))
    if kind == "blobs":
        centers = np.array([[0.3 * h, 0.3 * w], [0.7 * h, 0.7 * w]])
        spread = 0.12 * min(h, w)
        width = 0.16 * min(h, w)
        for i, lab in enumerate(labels):
            cy, cx = centers[lab] + spread * rng.standard_normal(2)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
            images[i] = 0.1 + 0.7 * bump + 0.1 * rng.standard_normal((c, h, w))
    elif kind == "bars":
        for i, lab in enumerate(labels):
            phase = rng.uniform(-np.pi / 3, np.pi / 3)
            coord = yy / h if lab == 0 else xx / w
            stripes = 0.5 + 0.3 * np.cos(2 * np.pi * 2 * coord + phase)
            images[i] = stripes + 0.15 * rng.standard_normal((c, h, w))
    else:
        raise ValueError(f"unknown dataset kind {kind!r}; use 'blobs' or 'bars'")
    np.clip(images, 0.0, 1.0, out=images)
    n_test = int(round(test_fraction * size))
    split = np.array(["train"] * (size - n_test) + ["test"] * n_test)
    return Dataset(images, labels, split, 2)


def train_toy(dataset, arch="mlp", hidden=32, epochs=300, lr=0.5, weight_decay=1e-4,
              init_scale=0.1, rng_seed=0):
    """Full-batch gradient descent on mean cross-entropy.

    The output layer starts at zero, so an untrained model predicts the
    uniform distribution.  Train/test accuracies are stored in
    ``clf.history``.
    """
    train = dataset.subset("train")
    if len(train) == 0:
        raise ValueError("dataset has no training images")
    rng = np.random.default_rng(rng_seed)
    D = int(np.prod(dataset.shape))
    K = dataset.n_classes
    if arch == "softmax":
        params = {"W": np.zeros((K, D)), "b": np.zeros(K)}
    elif arch == "mlp":
        params = {
            "W1": init_scale * rng.standard_normal((hidden, D)) / np.sqrt(D),
            "b1": np.zeros(hidden),
            "W2": np.zeros((K, hidden)),
            "b2": np.zeros(K),
        }
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    clf = ToyClassifier(arch, dataset.shape, K, params)

    X = train.images.reshape(len(train), D)
    Y = train.labels
    onehot = np.eye(K)[Y]
    n = len(X)
    losses = []
    for epoch in range(epochs):
        z, hid = clf._forward(X)
        p = _softmax(z)
        loss = float(-np.mean(np.log(p[np.arange(n), Y] + 1e-300)))
        if not np.isfinite(loss):
            raise FloatingPointError(f"training diverged at epoch {epoch}")
        losses.append(loss)
        r = (p - onehot) / n
        if arch == "softmax":
            grads = {"W": r.T @ X + weight_decay * params["W"], "b": r.sum(0)}
        else:
            da = (r @ params["W2"]) * (1.0 - hid**2)
            grads = {
                "W2": r.T @ hid + weight_decay * params["W2"],
                "b2": r.sum(0),
                "W1": da.T @ X + weight_decay * params["W1"],
                "b1": da.sum(0),
            }
        for k, g in grads.items():
            params[k] -= lr * g

    clf.history = {
        "epochs": epochs,
        "final_loss": losses[-1] if losses else None,
        "train_accuracy": accuracy(clf, train),
        "test_accuracy": accuracy(clf, dataset.subset("test")),
    }
    log.info("trained %s: %s", arch, clf.history)
    return clf


def accuracy(clf, dataset):
    if len(dataset) == 0:
        return None
    return float(np.mean(clf.predict(dataset.images) == dataset.labels))


def checked_loss(oracle, x, y):
    """Query ``oracle`` and raise :class:`OracleError` on a non-finite value."""
    value = oracle.query(x, y)
    if not np.isfinite(value):
        raise OracleError(f"oracle returned non-finite loss {value}")
    return value
