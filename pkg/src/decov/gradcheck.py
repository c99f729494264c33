"""Central finite-difference checks for layers and the DeCov penalty."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from .decov import decov_backward, decov_forward
from .tensor import Rng


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||, floor) with Euclidean norms over all entries.

    Entries that are tiny next to the rest of the gradient would otherwise
    be judged on finite-difference roundoff alone.
    """
    a, b = np.asarray(a, dtype=float).ravel(), np.asarray(b, dtype=float).ravel()
    if a.size == 0:
        return 0.0
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_layer(layer: L.Layer, x: np.ndarray, rng: Rng, eps: float = 1e-6) -> dict[str, float]:
    """Relative errors of the input and parameter gradients of ``layer``.

    The scalar being differentiated is <forward(x), R> for a fixed random R,
    so every output element contributes. Dropout is checked in training mode
    with its mask frozen by re-seeding.
    """
    seed = int(rng.integers(2**31))
    training = isinstance(layer, L.Dropout)

    def run():
        return layer.forward(x, training=training, rng=Rng(seed))

    R = rng.normal(run().shape)

    def f():
        return float(np.sum(run() * R))

    for p in layer.params():
        p.grad = np.zeros_like(p.value)
    run()
    dx = layer.backward(R)
    errs = {}
    if dx is not None:
        errs["input"] = relative_error(dx, numerical_gradient(f, x, eps))
    analytic = {p.name: p.grad.copy() for p in layer.params()}
    for p in layer.params():
        errs[p.name] = relative_error(analytic[p.name], numerical_gradient(f, p.value, eps))
    return errs


def check_decov(H: np.ndarray, eps: float = 1e-6) -> float:
    H = np.array(H, dtype=float)
    with warnings.catch_warnings():
        # single-row batches are valid here: loss and gradient are both zero
        warnings.simplefilter("ignore", RuntimeWarning)
        num = numerical_gradient(lambda: decov_forward(H)[0], H, eps)
    return relative_error(decov_backward(H), num)


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def _kink_free(x: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    # keep ReLU inputs away from 0 so differences never straddle the kink
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def verify(instances: int = 100, seed: int = 0, tol: float = 1e-5) -> list[CheckResult]:
    """DeCov gradient over random batches plus one check per layer kind."""
    rng = Rng(seed)
    worst = 0.0
    for _ in range(instances):
        n, d = int(rng.integers(8)) + 1, int(rng.integers(8)) + 1
        worst = max(worst, check_decov(rng.normal((n, d))))
    results = [CheckResult(f"decov_backward ({instances} batches)", worst, tol)]

    def distinct(shape):
        # a permutation of well-separated values keeps max-pool ties away
        return rng.permutation(int(np.prod(shape))).astype(float).reshape(shape) * 0.1

    cases = [
        ("FullyConnected", L.FullyConnected(5, 4, rng), rng.normal((3, 5))),
        ("ReLU", L.ReLU(), _kink_free(rng.normal((4, 6)))),
        ("Dropout", L.Dropout(0.4), rng.normal((4, 6))),
        ("Flatten", L.Flatten(), rng.normal((2, 3, 3, 2))),
        ("Conv2D", L.Conv2D(2, 3, 3, rng, stride=1, pad=1), rng.normal((2, 5, 5, 2))),
        ("Conv2D stride 2", L.Conv2D(2, 3, 3, rng, stride=2, pad=0), rng.normal((2, 7, 7, 2))),
        ("MaxPool2D", L.MaxPool2D(2), distinct((2, 4, 4, 3))),
    ]
    for name, layer, x in cases:
        errs = check_layer(layer, x, rng)
        results.append(CheckResult(name, max(errs.values()), tol))

    logits, labels = rng.normal((5, 4)), rng.integers(4, size=5)
    _, g = L.softmax_xent(logits, labels)
    num = numerical_gradient(lambda: L.softmax_xent(logits, labels)[0], logits)
    results.append(CheckResult("softmax_xent", relative_error(g, num), tol))
    pred, target = rng.normal((3, 6)), rng.normal((3, 6))
    _, g = L.mse_loss(pred, target)
    num = numerical_gradient(lambda: L.mse_loss(pred, target)[0], pred)
    results.append(CheckResult("mse_loss", relative_error(g, num), tol))
    return results
