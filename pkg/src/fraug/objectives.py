"""Scalar objectives: cross-entropy, prediction entropy, kernel MMD, proximal term."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fraug import kernels
from fraug.params import ParameterSet, StructureError
from fraug.tensor import DimensionError, Tensor, _result, add, check_labels, log_softmax_np, mul, square, stack_scalars, tsum

DEFAULT_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian mixture kernel ``sum_s exp(-||a-b||^2 / (2 sigma_s^2))``.

    ``base_bandwidth`` is either ``"median"`` (median pairwise squared
    distance of the pooled sample, recomputed per call and held constant
    for differentiation) or a fixed positive ``sigma^2``.
    """

    base_bandwidth: str | float = "median"
    multipliers: tuple[float, ...] = DEFAULT_MULTIPLIERS

    def __post_init__(self):
        if not self.multipliers or any(m <= 0 for m in self.multipliers):
            raise ValueError("kernel multipliers must be a non-empty list of positive numbers")
        if self.base_bandwidth != "median":
            if not isinstance(self.base_bandwidth, (int, float)) or self.base_bandwidth <= 0:
                raise ValueError(f"base bandwidth must be 'median' or a positive number, got {self.base_bandwidth!r}")

    def bandwidths(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Resolved ``sigma^2`` values for the sample pair."""
        if self.base_bandwidth == "median":
            base = median_sqdist(np.concatenate([x, y], axis=0))
        else:
            base = float(self.base_bandwidth)
        return base * np.asarray(self.multipliers, dtype=np.float64)

    def frozen(self, x: np.ndarray, y: np.ndarray) -> "KernelSpec":
        """Fixed-bandwidth copy resolved at ``(x, y)``."""
        if self.base_bandwidth != "median":
            return self
        return KernelSpec(median_sqdist(np.concatenate([x, y], axis=0)), self.multipliers)


def median_sqdist(z: np.ndarray) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[0] < 2:
        return 1.0
    sq = (z * z).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
    med = float(np.median(d[np.triu_indices(z.shape[0], k=1)]))
    # all points coincide (or rounding): any positive scale gives the same kernel values
    return med if med > 1e-12 else 1.0


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Mean (or summed) negative log-likelihood of ``labels`` under softmax(logits)."""
    z = logits.data
    if z.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B x C] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (z.shape[0],):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    check_labels(labels, z.shape[1])
    b = z.shape[0]
    lp = log_softmax_np(z)
    rows = np.arange(b)
    total = -lp[rows, labels].sum()
    scale = 1.0 / b if reduction == "mean" else 1.0

    def backward(g):
        grad = np.exp(lp)
        grad[rows, labels] -= 1
        return (grad * (g * scale),)

    return _result(np.asarray(total * scale, dtype=z.dtype), (logits,), backward, "cross_entropy")


def entropy(logits: Tensor, reduction: str = "mean") -> Tensor:
    """Mean (or summed) Shannon entropy of softmax(logits) rows, in nats."""
    z = logits.data
    if z.ndim != 2 or z.shape[0] < 1:
        raise DimensionError(f"entropy expects [B x C] logits with B >= 1, got {logits.shape}")
    lp = log_softmax_np(z)
    p = np.exp(lp)
    h = -(p * lp).sum(axis=1)
    scale = 1.0 / z.shape[0] if reduction == "mean" else 1.0

    def backward(g):
        return (-(p * (lp + h[:, None])) * (g * scale),)

    return _result(np.asarray(h.sum() * scale, dtype=z.dtype), (logits,), backward, "entropy")


def mmd(x: Tensor, y: Tensor, kernel: KernelSpec | None = None) -> Tensor:
    """Biased (V-statistic) squared MMD between the row sets of ``x`` and ``y``."""
    kernel = kernel or KernelSpec()
    if x.data.ndim != 2 or y.data.ndim != 2:
        raise DimensionError(f"mmd expects 2-D sample matrices, got {x.shape} and {y.shape}")
    if x.shape[0] < 1 or y.shape[0] < 1:
        raise ValueError("mmd needs at least one sample on each side")
    if x.shape[1] != y.shape[1]:
        raise DimensionError(f"mmd dimension mismatch: {x.shape} vs {y.shape}")
    coefs = 0.5 / kernel.bandwidths(x.data, y.data)
    need = x.requires_grad or y.requires_grad
    value, gx, gy = kernels.mmd_value_grad(x.data, y.data, coefs, need_grad=need)
    dtype = x.dtype

    def backward(g):
        g = float(g)
        return ((gx * g).astype(dtype, copy=False), (gy * g).astype(dtype, copy=False))

    return _result(np.asarray(value, dtype=dtype), (x, y), backward, "mmd")


def proximal_penalty(local: ParameterSet, global_ref: ParameterSet, mu: float) -> Tensor:
    """``mu / 2 * ||local - global_ref||^2`` over matching entries."""
    if mu < 0:
        raise ValueError("mu must be non-negative")
    try:
        local.check_compatible(global_ref)
    except StructureError as exc:
        raise StructureError(f"proximal penalty: {exc}") from None
    terms = []
    for (name, t, _), (_, ref, _) in zip(local.items(), global_ref.items()):
        terms.append(tsum(square(add(t, Tensor(-ref.data)))))
    return mul(stack_scalars(terms), 0.5 * mu)

