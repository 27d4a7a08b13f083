"""Per-block crime-count forecaster: one LSTM layer and a ReLU dense head."""

from __future__ import annotations

import csv
import io

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DimensionError, InsufficientDataError
from .nn import LSTM, Adam, Dense, Sequential, load_checkpoint, mse_loss, save_checkpoint
from .rng import as_generator
from .validation import check_sequences, check_series


def make_training_set(counts, window_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Sliding windows over a ``[T, B]`` count series.

    Returns ``inputs[N, window_len, B]`` and ``targets[N, B]`` with
    ``N = T - window_len``; each target is the row right after its window.
    """
    counts = check_series(counts)
    t = counts.shape[0]
    if window_len < 1 or t <= window_len:
        raise InsufficientDataError(f"need more than {window_len} cycles, got {t}")
    idx = np.arange(t - window_len)[:, None] + np.arange(window_len)[None, :]
    return counts[idx], counts[window_len:].copy()


class LstmForecaster(RegressorMixin, BaseEstimator):
    """Predicts next-cycle crime counts per block from the last few cycles.

    Parameters
    ----------
    hidden_units : int
        LSTM width.
    window_len : int
        Number of past cycles in each input sequence.
    epochs, batch_size, learning_rate :
        Adam mini-batch training schedule on mean squared error.
    standardize : bool
        Scale inputs per block by training mean and standard deviation.
        Targets stay raw counts.
    random_state : int or None
        Seeds weight init and batch shuffling.
    """

    def __init__(self, hidden_units=100, window_len=4, epochs=100, batch_size=100,
                 learning_rate=1e-3, standardize=False, random_state=0):
        self.hidden_units = hidden_units
        self.window_len = window_len
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.standardize = standardize
        self.random_state = random_state

    def initialize(self, n_blocks: int, zero: bool = False) -> "LstmForecaster":
        rng = as_generator(self.random_state)
        self.n_blocks_ = int(n_blocks)
        self.net_ = Sequential([
            LSTM(n_blocks, self.hidden_units, rng=rng, zero_init=zero),
            Dense(self.hidden_units, n_blocks, "relu", rng=rng, zero_init=zero),
        ])
        self.mean_ = np.zeros(n_blocks)
        self.scale_ = np.ones(n_blocks)
        self.loss_curve_ = []
        return self

    def _scaled(self, X):
        return (X - self.mean_) / self.scale_

    def fit(self, X, y):
        X = check_sequences(X, window_len=self.window_len)
        y = np.asarray(y, dtype=np.float64)
        if len(X) == 0:
            raise InsufficientDataError("empty training set")
        if y.shape != (X.shape[0], X.shape[2]):
            raise DimensionError(f"targets {y.shape} do not match inputs {X.shape}")
        rng = as_generator(self.random_state)
        self.initialize(X.shape[2])
        if self.standardize:
            flat = X.reshape(-1, X.shape[2])
            self.mean_ = flat.mean(axis=0)
            self.scale_ = np.where(flat.std(axis=0) > 0, flat.std(axis=0), 1.0)
        # head starts at the mean predictor so no ReLU output begins dead
        self.net_.layers[1].params["b"][:] = np.maximum(y.mean(axis=0), 0.0)
        Xs = self._scaled(X)
        opt = Adam(self.net_, learning_rate=self.learning_rate)
        n = len(Xs)
        self.loss_curve_ = [self._mse(Xs, y)]
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                b = order[start:start + self.batch_size]
                out = self.net_.forward(Xs[b], training=True, rng=rng)
                _, grad = mse_loss(out, y[b])
                self.net_.backward(grad)
                opt.step()
            self.loss_curve_.append(self._mse(Xs, y))
        return self

    def _mse(self, Xs, y) -> float:
        return float(np.mean((self.net_.forward(Xs) - y) ** 2))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_sequences(X, window_len=self.window_len, n_features=self.n_blocks_)
        return self.net_.forward(self._scaled(X))

    def fit_series(self, counts) -> "LstmForecaster":
        return self.fit(*make_training_set(counts, self.window_len))

    # ---- persistence ----------------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "net_")
        tensors = dict(self.net_.params)
        tensors["input_mean"] = self.mean_
        tensors["input_scale"] = self.scale_
        arch = {"kind": "lstm_forecaster", "params": self.get_params(),
                "n_blocks": self.n_blocks_}
        return save_checkpoint(path, arch, tensors)

    @classmethod
    def load(cls, path) -> "LstmForecaster":
        arch, tensors, _ = load_checkpoint(path)
        if arch.get("kind") != "lstm_forecaster":
            raise DimensionError(f"{path} holds a {arch.get('kind')!r}, not a forecaster")
        model = cls(**arch["params"]).initialize(arch["n_blocks"])
        params = model.net_.params
        for k in params:
            params[k][...] = tensors[k]
        model.mean_ = tensors["input_mean"]
        model.scale_ = tensors["input_scale"]
        return model

    def loss_log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(self.loss_curve_):
            w.writerow([i, repr(float(loss))])
        return buf.getvalue()


def train_predictor(counts, model: LstmForecaster | None = None, seed: int = 0) -> LstmForecaster:
    """Fit a forecaster on a ``[T, B]`` count series."""
    model = model if model is not None else LstmForecaster()
    model.set_params(random_state=seed)
    return model.fit_series(counts)


def predict_counts(model: LstmForecaster, history_window) -> np.ndarray:
    """Forecast the next cycle from a ``[window_len, B]`` history; always >= 0."""
    w = np.asarray(history_window, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != model.window_len:
        raise DimensionError(f"history must be [{model.window_len}, B], got {w.shape}")
    return model.predict(w[None])[0]
