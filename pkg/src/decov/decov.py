"""Batch cross-covariance penalty on hidden activations.

For a batch ``H`` of shape (N, d), with ``mu`` the column means,

    C = (H - mu)^T (H - mu) / N
    loss = 0.5 * (||C||_F^2 - ||diag(C)||_2^2) = 0.5 * sum_{i != j} C_ij^2

The diagonal (the per-unit variances) is not penalised.

Gradient. Each off-diagonal covariance ``C_aj`` shows up twice in the sum
(as ``C_aj`` and ``C_ja``), so the exact derivative is

    dL/dh_a^m = (2/N) * sum_{j != a} C_aj * (h_j^m - mu_j)

The centring terms contribute nothing: d(mu_j)/d(h_a^m) multiplies
sum_m (h^m - mu) which is identically zero on any finite batch, not only in
expectation. ``importance_weighted_gradient`` returns the commonly quoted
single-counted form ``(1/N) sum_{j != a} C_aj I(j, m)`` with the importance
term ``I(j, m) = h_j^m - mu_j``; it is exactly half of ``decov_backward``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, EmptyBatchError, as_tensor, reduce_mean_rows


@dataclass(frozen=True)
class CovMatrix:
    C: np.ndarray
    mu: np.ndarray


@dataclass(frozen=True)
class DecovDiagnostics:
    offdiag_frob_sq: float
    loss: float
    layer: str = "hidden"

    @property
    def offdiag_norm(self) -> float:
        return float(np.sqrt(self.offdiag_frob_sq))


def _check_batch(H) -> np.ndarray:
    H = as_tensor(H)
    if H.ndim != 2:
        raise DimensionError(f"activation batch must be N x d, got shape {H.shape}")
    if H.shape[0] == 0:
        raise EmptyBatchError("activation batch has no rows")
    if H.shape[1] == 0:
        raise DimensionError("activation batch has no features")
    return H


def _centered(H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # shift by the first row before averaging: identical rows then centre to
    # exact zeros, and large common offsets cost no precision
    ref = H[0]
    D = H - ref
    shift = reduce_mean_rows(D)
    return D - shift, ref + shift


def covariance(H) -> CovMatrix:
    """Biased (1/N) sample covariance of the columns of ``H``."""
    H = _check_batch(H)
    Hc, mu = _centered(H)
    C = Hc.T @ Hc / H.shape[0]
    # the product is symmetric in exact arithmetic; force it bitwise
    C = 0.5 * (C + C.T)
    return CovMatrix(C=C, mu=mu)


def _offdiag(C: np.ndarray) -> np.ndarray:
    off = C.copy()
    np.fill_diagonal(off, 0.0)
    return off


def decov_forward(H, layer: str = "hidden") -> tuple[float, DecovDiagnostics]:
    H = _check_batch(H)
    if H.shape[0] == 1:
        # default warning filters report this once per call site
        warnings.warn("DeCov on a batch of one example is identically zero", RuntimeWarning, stacklevel=2)
    # BLAS may round an entry differently depending on where its columns
    # sit, so evaluate on a content-defined column order; with the exactly
    # rounded fsum the value is then bitwise independent of unit order
    canonical = np.ascontiguousarray(H[:, np.lexsort(H)])
    C = covariance(canonical).C
    upper = C[np.triu_indices(C.shape[0], k=1)]
    loss = math.fsum(upper * upper)
    frob_sq = 2.0 * loss
    return loss, DecovDiagnostics(offdiag_frob_sq=frob_sq, loss=loss, layer=layer)


def decov_backward(H) -> np.ndarray:
    """Exact gradient of ``decov_forward`` with respect to ``H``."""
    H = _check_batch(H)
    N = H.shape[0]
    Hc, _ = _centered(H)
    C = Hc.T @ Hc / N
    C = 0.5 * (C + C.T)
    return (2.0 / N) * (Hc @ _offdiag(C))


def importance_weighted_gradient(H) -> np.ndarray:
    """Per-element ``(1/N) sum_{j != a} C_aj (h_j^m - mu_j)``.

    Written as explicit loops over the redundancy and importance terms so it
    can serve as an independent check on the vectorised backward pass.
    """
    H = _check_batch(H)
    N, d = H.shape
    cov = covariance(H)
    importance = _centered(H)[0]
    out = np.zeros_like(H)
    for m in range(N):
        for a in range(d):
            s = 0.0
            for j in range(d):
                if j != a:
                    s += cov.C[a, j] * importance[m, j]
            out[m, a] = s / N
    return out


def offdiag_covariance_norm(H) -> float:
    """sqrt(||C||_F^2 - ||diag C||^2): the redundancy diagnostic."""
    _, diag = decov_forward(H)
    return diag.offdiag_norm


class DecovPenalty:
    """Stateful wrapper used by the trainer: caches the last batch's value."""

    def __init__(self, weight: float, layer: str = "hidden"):
        if weight < 0:
            raise ValueError(f"DeCov weight must be >= 0, got {weight}")
        self.weight = float(weight)
        self.layer = layer
        self.last: DecovDiagnostics | None = None

    def __call__(self, H) -> tuple[float, np.ndarray | None]:
        """Return (raw loss value, weighted gradient or None when weight is 0)."""
        loss, self.last = decov_forward(H, self.layer)
        if self.weight == 0.0:
            return loss, None
        return loss, self.weight * decov_backward(H)
