"""Split inference over lossy UAV links and dropout fine-tuning.

A small convolutional classifier is cut into input, middle and output
sub-networks hosted on three UAVs. Intermediate activations cross two
wireless links that drop packets independently; lost elements arrive as
zeros. Fine-tuning with dropout at every block boundary teaches the network
to tolerate that zeroing.
"""

from __future__ import annotations

import copy
import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, DimensionError
from .nn import (Adam, Conv2D, Dense, Dropout, Flatten, MaxPool2D, ReLU, Sequential,
                 cross_entropy, load_checkpoint, save_checkpoint)
from .rng import substream
from .validation import check_images

SWEEP_COLUMNS = ("model_tag", "cut_a", "cut_b", "p12", "p23", "seed", "accuracy")


# ---- synthetic data ---------------------------------------------------------------------

def make_patterns(n: int, seed: int = 0, size: int = 16, n_classes: int = 10,
                  noise: float = 0.6) -> tuple[np.ndarray, np.ndarray]:
    """Oriented sinusoidal gratings; the class is the orientation.

    Frequency, phase, contrast and a small orientation jitter vary per image,
    and Gaussian pixel noise is added on top. Returns ``X[n, 1, size, size]``
    and integer labels ``y[n]``.
    """
    rng = np.random.default_rng(seed)
    y = rng.integers(n_classes, size=n)
    theta = (y + rng.uniform(-0.2, 0.2, n)) * np.pi / n_classes
    freq = rng.uniform(0.10, 0.22, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    contrast = rng.uniform(0.7, 1.3, n)
    coords = np.arange(size) - (size - 1) / 2
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
    img = contrast[:, None, None] * np.cos(2 * np.pi * freq[:, None, None] * proj
                                           + phase[:, None, None])
    img = img + noise * rng.normal(size=img.shape)
    return img[:, None].astype(np.float64), y.astype(np.int64)


# ---- network -------------------------------------------------------------------------------

def build_blocks(channels: Sequence[int], n_classes: int, image_size: int, in_channels: int,
                 dropout_rate: float, rng: np.random.Generator) -> list[Sequential]:
    """Conv blocks (conv, ReLU, 2x2 pool, dropout) followed by one dense block.

    A block pools only while the feature map is still at least 2x2, so on
    16x16 inputs the fifth block keeps its 1x1 map.
    """
    blocks, c_prev, side = [], in_channels, image_size
    for c in channels:
        layers = [Conv2D(c_prev, c, 3, rng=rng), ReLU()]
        if side >= 2 and side % 2 == 0:
            layers.append(MaxPool2D())
            side //= 2
        layers.append(Dropout(dropout_rate))
        blocks.append(Sequential(layers))
        c_prev = c
    blocks.append(Sequential([Flatten(), Dense(c_prev * side * side, n_classes, rng=rng)]))
    return blocks


def set_dropout(blocks: Iterable[Sequential], rate: float) -> None:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    for block in blocks:
        for layer in block.layers:
            if isinstance(layer, Dropout):
                layer.rate = float(rate)


class DeskNetClassifier(ClassifierMixin, BaseEstimator):
    """Five-block convolutional classifier with an estimator interface.

    ``blocks_`` holds six ``Sequential`` blocks (five conv blocks and the
    dense head); ``split_model`` cuts between them. ``dropout_rate`` sets the
    dropout at the end of every conv block, active only while training.
    """

    def __init__(self, channels=(32, 64, 64, 64, 64), epochs=8, batch_size=64,
                 learning_rate=2e-3, dropout_rate=0.0, random_state=0):
        self.channels = channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.dropout_rate = dropout_rate
        self.random_state = random_state

    def _build(self, X) -> None:
        rng = np.random.default_rng([self.random_state or 0, 0])
        self.blocks_ = build_blocks(self.channels, len(self.classes_), X.shape[2], X.shape[1],
                                    self.dropout_rate, rng)
        self.net_ = Sequential(self.blocks_)
        self.input_shape_ = tuple(X.shape[1:])

    def _check(self, X) -> np.ndarray:
        X = check_images(X)
        if hasattr(self, "input_shape_") and tuple(X.shape[1:]) != self.input_shape_:
            raise DimensionError(f"expected images {self.input_shape_}, got {X.shape[1:]}")
        return X

    def fit(self, X, y):
        X = self._check(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise DimensionError(f"{len(X)} images but {len(y)} labels")
        self.classes_ = unique_labels(y)
        self._build(X)
        return self._train(X, y, self.epochs)

    def _train(self, X, y, epochs: int):
        set_dropout(self.blocks_, self.dropout_rate)
        labels = np.searchsorted(self.classes_, y)
        rng = np.random.default_rng([self.random_state or 0, 1])
        opt = Adam(self.net_, learning_rate=self.learning_rate)
        self.loss_curve_ = []
        for _ in range(epochs):
            order = rng.permutation(len(X))
            total = 0.0
            for start in range(0, len(X), self.batch_size):
                b = order[start:start + self.batch_size]
                logits = self.net_.forward(X[b], training=True, rng=rng)
                loss, grad = cross_entropy(logits, labels[b])
                self.net_.backward(grad)
                opt.step()
                total += loss * len(b)
            self.loss_curve_.append(total / len(X))
        return self

    def fine_tune(self, X, y, dropout_rate: float, epochs: int | None = None,
                  random_state: int | None = None) -> "DeskNetClassifier":
        """Copy of this fitted model trained further with the given dropout rate."""
        check_is_fitted(self, "blocks_")
        set_dropout([], dropout_rate)  # validates the rate before any work
        X = self._check(X)
        model = copy.deepcopy(self)
        model.dropout_rate = float(dropout_rate)
        if random_state is not None:
            model.random_state = random_state
        return model._train(X, np.asarray(y), self.epochs if epochs is None else epochs)

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "blocks_")
        return self.net_.forward(self._check(X))

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    # ---- persistence ------------------------------------------------------------

    def save(self, path, meta: dict | None = None):
        check_is_fitted(self, "blocks_")
        params = self.get_params()
        params["channels"] = list(params["channels"])
        arch = {"kind": "desknet", "params": params, "classes": self.classes_.tolist(),
                "input_shape": list(self.input_shape_)}
        return save_checkpoint(path, arch, self.net_.params, meta)

    @classmethod
    def load(cls, path) -> "DeskNetClassifier":
        arch, tensors, _ = load_checkpoint(path)
        if arch.get("kind") != "desknet":
            raise ConfigError(f"{path} is not a DeskNet checkpoint")
        params = dict(arch["params"])
        params["channels"] = tuple(params["channels"])
        model = cls(**params)
        model.classes_ = np.asarray(arch["classes"])
        model._build(np.zeros((1, *arch["input_shape"])))
        for key, value in model.net_.params.items():
            value[...] = tensors[key]
        return model


# ---- splitting and links ----------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    """Cut after block ``cut_a`` and after block ``cut_b`` (1-based block counts)."""

    cut_a: int
    cut_b: int

    def validate(self, n_blocks: int) -> "SplitPlan":
        if not 0 < self.cut_a < self.cut_b < n_blocks:
            raise ConfigError(f"split ({self.cut_a}, {self.cut_b}) needs 0 < a < b < {n_blocks}")
        return self


def split_model(model: DeskNetClassifier, plan: SplitPlan) -> tuple[Sequential, Sequential, Sequential]:
    """Input, middle and output sub-networks sharing the model's parameters."""
    check_is_fitted(model, "blocks_")
    blocks = model.blocks_
    plan.validate(len(blocks))
    return (Sequential(blocks[:plan.cut_a]), Sequential(blocks[plan.cut_a:plan.cut_b]),
            Sequential(blocks[plan.cut_b:]))


@dataclass(frozen=True)
class LossyLink:
    """A wireless hop that drops each packet with probability ``p``.

    ``rescale`` multiplies surviving elements by ``1 / (1 - p)``; it is off
    by default and exists for ablations.
    """

    p: float
    elements_per_packet: int = 1
    seed: int = 0
    rescale: bool = False

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"packet loss rate must lie in [0, 1], got {self.p}")
        if self.elements_per_packet < 1:
            raise ConfigError("elements_per_packet must be at least 1")


def transmit(activation, link: LossyLink, rng: np.random.Generator | None = None) -> np.ndarray:
    """Send a batch of activations over ``link``.

    Each sample is flattened row-major and cut into packets of
    ``elements_per_packet`` elements; every packet is lost independently and
    its elements are zero-filled. The shape is preserved.
    """
    x = np.asarray(activation, dtype=np.float64)
    if link.p == 0.0:
        return x.copy()
    rng = rng if rng is not None else np.random.default_rng(link.seed)
    n = x.shape[0] if x.ndim else 1
    flat = x.reshape(n, -1)
    k = link.elements_per_packet
    n_packets = -(-flat.shape[1] // k)
    keep = rng.random((n, n_packets)) >= link.p
    if k > 1:
        keep = np.repeat(keep, k, axis=1)[:, :flat.shape[1]]
    out = np.where(keep, flat, 0.0)
    if link.rescale and link.p < 1.0:
        out = out / (1.0 - link.p)
    return out.reshape(x.shape)


def _link_rngs(links: Sequence[LossyLink]) -> list[np.random.Generator]:
    return [np.random.default_rng(link.seed) for link in links]


def distributed_infer(subnns: Sequence[Sequential], links: Sequence[LossyLink], X,
                      cached_input: np.ndarray | None = None) -> np.ndarray:
    """Logits after the input -> link -> middle -> link -> output chain.

    ``cached_input`` may hold the input sub-network's output for ``X`` (it
    does not depend on the links), which saves recomputing it across a sweep.
    """
    if len(subnns) != 3 or len(links) != 2:
        raise DimensionError("need three sub-networks and two links")
    first, middle, last = subnns
    r12, r23 = _link_rngs(links)
    h = first.forward(X) if cached_input is None else cached_input
    h = middle.forward(transmit(h, links[0], r12))
    return last.forward(transmit(h, links[1], r23))


def predict_distributed(model: DeskNetClassifier, plan: SplitPlan, links: Sequence[LossyLink], X,
                        cached_input: np.ndarray | None = None) -> np.ndarray:
    logits = distributed_infer(split_model(model, plan), links, model._check(X), cached_input)
    return model.classes_[logits.argmax(axis=1)]


def fine_tune_with_dropout(model: DeskNetClassifier, rates: Iterable[float], X, y, seed: int = 0,
                           epochs: int | None = None) -> dict[float, DeskNetClassifier]:
    """One fine-tuned copy of ``model`` per dropout rate."""
    rates = [float(r) for r in rates]
    for r in rates:
        if not 0.0 <= r < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {r}")
    return {r: model.fine_tune(X, y, r, epochs=epochs, random_state=seed) for r in rates}


# ---- sweeps -----------------------------------------------------------------------------

PROTOCOLS = ("vary_p12", "vary_p23")


def sweep_eval(models: dict[str, DeskNetClassifier], plans: Sequence[SplitPlan],
               p_grid: Sequence[float], X, y, seeds: Sequence[int], protocol: str = "vary_p12",
               fixed_p: float = 0.5, elements_per_packet: int = 1, rescale: bool = False,
               base_seed: int = 0) -> list[dict]:
    """Accuracy of every (model, plan, p, seed) cell.

    ``vary_p12`` sweeps the first link with the second held at ``fixed_p``;
    ``vary_p23`` does the reverse. The loss pattern for a cell depends only on
    ``(base_seed, plan, p index, seed)``, so all models in one cell see the
    same losses and comparisons between them are paired.
    """
    if protocol not in PROTOCOLS:
        raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    y = np.asarray(y)
    rows = []
    for tag, model in models.items():
        X_checked = model._check(X)
        for plan in plans:
            subnns = split_model(model, plan)
            cached = subnns[0].forward(X_checked)
            for pi, p in enumerate(p_grid):
                p12, p23 = (p, fixed_p) if protocol == "vary_p12" else (fixed_p, p)
                for s in seeds:
                    stream = substream(base_seed, "loss-links", plan.cut_a, plan.cut_b, pi, s)
                    link_seeds = stream.integers(2**63, size=2)
                    links = [LossyLink(p12, elements_per_packet, int(link_seeds[0]), rescale),
                             LossyLink(p23, elements_per_packet, int(link_seeds[1]), rescale)]
                    logits = distributed_infer(subnns, links, X_checked, cached)
                    acc = float(np.mean(model.classes_[logits.argmax(axis=1)] == y))
                    rows.append({"model_tag": tag, "cut_a": plan.cut_a, "cut_b": plan.cut_b,
                                 "p12": float(p12), "p23": float(p23), "seed": int(s),
                                 "accuracy": acc})
    return rows


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([r["model_tag"], r["cut_a"], r["cut_b"], repr(r["p12"]), repr(r["p23"]),
                    r["seed"], repr(r["accuracy"])])
    return buf.getvalue()


def summarize_sweep(rows: Sequence[dict], protocol: str = "vary_p12") -> list[dict]:
    """Mean accuracy and standard error per (model, plan, swept p)."""
    key_p = "p12" if protocol == "vary_p12" else "p23"
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r["model_tag"], r["cut_a"], r["cut_b"], r[key_p]), []).append(r["accuracy"])
    out = []
    for (tag, a, b, p), accs in groups.items():
        arr = np.asarray(accs)
        stderr = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
        out.append({"model_tag": tag, "cut_a": a, "cut_b": b, "p": p,
                    "mean_accuracy": float(arr.mean()), "stderr": stderr, "n": len(arr)})
    return out


def plotdata_text(summary: Sequence[dict], protocol: str) -> str:
    """Whitespace-separated columns, one block per (model, plan) series."""
    lines = [f"# protocol {protocol}", "# model_tag cut_a cut_b p mean_accuracy stderr n"]
    for r in summary:
        lines.append(f"{r['model_tag']} {r['cut_a']} {r['cut_b']} {r['p']:.4f} "
                     f"{r['mean_accuracy']:.6f} {r['stderr']:.6f} {r['n']}")
    return "\n".join(lines) + "\n"


def accuracy_table(rows: Sequence[dict], tag: str, protocol: str = "vary_p12") -> tuple[np.ndarray, np.ndarray]:
    """``(p values, accuracy[n_p, n_seeds])`` for one model tag, seeds in row order."""
    key_p = "p12" if protocol == "vary_p12" else "p23"
    sel = [r for r in rows if r["model_tag"] == tag]
    ps = sorted({r[key_p] for r in sel})
    table = np.array([[r["accuracy"] for r in sel if r[key_p] == p] for p in ps])
    return np.asarray(ps), table


def isotonic_violation(means: Sequence[float]) -> float:
    """Largest amount by which a sequence rises above its running minimum."""
    worst, low = 0.0, np.inf
    for m in means:
        low = min(low, m)
        worst = max(worst, m - low)
    return float(worst)
