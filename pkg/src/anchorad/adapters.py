"""Residual adapters for the shallow layers of a frozen transformer encoder.

An adapter maps a layer output ``x`` to ``Norm(Act(W x))`` and the encoder
continues with ``lam * residual + (1 - lam) * x``.  Act is GELU and Norm is a
row-wise L2 normalisation guarded by ``eps`` in the denominator.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_EPS = 1e-8


class AdapterError(RuntimeError):
    pass


def l2_rows(x: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    return x / (x.norm(dim=-1, keepdim=True) + eps)


def fuse(x: torch.Tensor, x_residual: torch.Tensor, lam: float) -> torch.Tensor:
    """Blend an adapter output back into the frozen feature stream."""
    if x.shape != x_residual.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_residual.shape)}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"fusion ratio must lie in [0, 1], got {lam}")
    return lam * x_residual + (1.0 - lam) * x


class ResidualAdapter(nn.Module):
    def __init__(self, width: int, activation: str = "gelu", norm: str = "l2"):
        super().__init__()
        if activation not in ("gelu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        if norm != "l2":
            raise ValueError(f"unknown norm {norm!r}")
        self.width = width
        self.activation = activation
        self.norm = norm
        bound = 1.0 / math.sqrt(width)
        self.weight = nn.Parameter(torch.empty(width, width).uniform_(-bound, bound))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x @ self.weight.t()
        if self.activation == "gelu":
            h = F.gelu(h)
        return l2_rows(h)


class AdapterStack(nn.Module):
    """One adapter per adapted layer ``1..K`` plus the shared fusion ratio."""

    def __init__(self, width: int, k: int, lam: float = 0.1, activation: str = "gelu"):
        super().__init__()
        if k < 1:
            raise ValueError("adapter stack needs at least one layer")
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"fusion ratio must lie in [0, 1], got {lam}")
        self.k = k
        self.lam = float(lam)
        self.width = width
        self.adapters = nn.ModuleList(ResidualAdapter(width, activation) for _ in range(k))

    def adapter_forward(self, x: torch.Tensor, layer_index: int) -> torch.Tensor:
        """Adapter output for 1-based ``layer_index``."""
        if not 1 <= layer_index <= self.k:
            raise AdapterError(f"no adapter at layer {layer_index} (K={self.k})")
        return self.adapters[layer_index - 1](x)

    def apply(self, x: torch.Tensor, layer_index: int) -> torch.Tensor:
        if layer_index > self.k:
            return x
        return fuse(x, self.adapter_forward(x, layer_index), self.lam)

    def config(self) -> dict:
        return {"k": self.k, "lam": self.lam, "width": self.width,
                "activation": self.adapters[0].activation}


def attach(encoder: nn.Module, stack: AdapterStack) -> nn.Module:
    """Insert ``stack`` into the first ``stack.k`` layers of ``encoder`` in place.

    The encoder must expose ``depth``, ``width`` and an ``adapter_stack`` slot
    that its forward pass consults after every layer.
    """
    if getattr(encoder, "adapter_stack", None) is not None:
        raise AdapterError("encoder already has adapters attached")
    if stack.k > encoder.depth:
        raise AdapterError(f"K={stack.k} exceeds encoder depth {encoder.depth}")
    if stack.width != encoder.width:
        raise AdapterError(f"adapter width {stack.width} != encoder width {encoder.width}")
    p = next(encoder.parameters())
    encoder.adapter_stack = stack.to(device=p.device, dtype=p.dtype)
    return encoder


def detach(encoder: nn.Module) -> AdapterStack | None:
    stack = getattr(encoder, "adapter_stack", None)
    encoder.adapter_stack = None
    return stack


def export_adapters(stack: AdapterStack, stage: str) -> dict:
    """Adapter-only sub-archive: weights, fusion ratio, K and stage tag."""
    return {
        "stage": stage,
        "config": stack.config(),
        "state_dict": {k: v.detach().clone() for k, v in stack.state_dict().items()},
    }


def import_adapters(archive: dict) -> AdapterStack:
    cfg = archive["config"]
    stack = AdapterStack(cfg["width"], cfg["k"], cfg["lam"], cfg.get("activation", "gelu"))
    first = next(iter(archive["state_dict"].values()))
    stack.to(first.dtype)
    stack.load_state_dict(archive["state_dict"])
    return stack
