"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .layers import Dropout, Layer, backward


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _dropouts(net) -> list[Dropout]:
    layers = getattr(net, "layers", [net])
    found = []
    for layer in layers:
        if isinstance(layer, Dropout):
            found.append(layer)
        elif hasattr(layer, "layers"):
            found.extend(_dropouts(layer))
    return found


def check_gradients(net: Layer, x: np.ndarray,
                    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
                    n_samples: int = 100, h: float = 1e-5,
                    rng: np.random.Generator | None = None,
                    training: bool = False) -> dict:
    """Compare analytic parameter gradients with central differences.

    ``loss_fn`` maps the network output to ``(loss, d loss / d output)``.
    Parameters are sampled uniformly (with replacement across tensors,
    without replacement inside one tensor). In training mode dropout masks
    are frozen after the first pass so every evaluation sees the same mask.

    Returns a dict with ``max_rel_error``, ``n_checked`` and per-sample
    ``errors``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    drop_rng = np.random.default_rng(rng.integers(2**32))
    dropouts = _dropouts(net)
    for d in dropouts:
        d.frozen = False
    out = net.forward(x, training=training, rng=drop_rng)
    for d in dropouts:
        d.frozen = True
    _, dout = loss_fn(out)
    grads = backward(net, dout)
    params = net.params

    names = sorted(params)
    sizes = np.array([params[n].size for n in names], dtype=float)
    picks = rng.choice(len(names), size=n_samples, p=sizes / sizes.sum())
    errors = []
    try:
        for k in picks:
            name = names[k]
            flat = params[name].reshape(-1)
            j = int(rng.integers(flat.size))
            old = flat[j]
            flat[j] = old + h
            lp, _ = loss_fn(net.forward(x, training=training, rng=drop_rng))
            flat[j] = old - h
            lm, _ = loss_fn(net.forward(x, training=training, rng=drop_rng))
            flat[j] = old
            numeric = (lp - lm) / (2.0 * h)
            analytic = float(grads[name].reshape(-1)[j])
            errors.append((name, j, analytic, numeric, relative_error(analytic, numeric)))
    finally:
        for d in dropouts:
            d.frozen = False
    return {
        "max_rel_error": max(e[4] for e in errors),
        "n_checked": len(errors),
        "errors": errors,
    }
