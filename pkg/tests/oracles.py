"""Independent reference implementations used only by the tests."""
from fractions import Fraction

import numpy as np
import torch


def pairwise_auroc(scores, labels) -> Fraction:
    """O(n^2) Mann-Whitney: P(s+ > s-) + 1/2 P(s+ = s-), as an exact fraction.

    Compare with ``float(...)``: both sides are then the correctly rounded ratio.
    """
    s = list(np.asarray(scores, dtype=np.float64).ravel())
    y = list(np.asarray(labels).ravel())
    pos = [a for a, l in zip(s, y) if l]
    neg = [a for a, l in zip(s, y) if not l]
    twice = sum(2 if p > n else 1 if p == n else 0 for p in pos for n in neg)
    return Fraction(twice, 2 * len(pos) * len(neg))


def central_difference(f, param: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``f()`` with respect to every entry of ``param`` (float64)."""
    grad = torch.zeros_like(param)
    flat, gflat = param.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = float(f())
        flat[i] = old - eps
        lo = float(f())
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(float(a.norm()), float(b.norm()), 1e-12))
