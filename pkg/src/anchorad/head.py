"""Cosine-similarity heads over text anchors and multi-granularity patch aggregation."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .adapters import l2_rows


class DegenerateFeatureWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SimilarityConfig:
    temperature: float = 0.07

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass
class AnomalyPrediction:
    p_cls: torch.Tensor  # (2,)
    p_seg: torch.Tensor  # (H, W, 2)

    @property
    def anomaly_score(self) -> float:
        return float(self.p_cls[1])

    @property
    def anomaly_map(self) -> torch.Tensor:
        return self.p_seg[..., 1]


class GranularityProjectors(nn.Module):
    """Four trainable linear maps from encoder width to the joint embedding dim."""

    def __init__(self, width: int, embed_dim: int, count: int = 4):
        super().__init__()
        self.proj = nn.ModuleList(nn.Linear(width, embed_dim, bias=False) for _ in range(count))

    def forward(self, tapped):
        return [p(f) for p, f in zip(self.proj, tapped)]


def aggregate_patches(tapped, projectors: GranularityProjectors) -> torch.Tensor:
    """Sum of the projected tap features, L2-normalised per patch."""
    if len(tapped) != len(projectors.proj):
        raise ValueError(f"expected {len(projectors.proj)} tapped features, got {len(tapped)}")
    v = torch.stack(projectors(tapped)).sum(0)
    if (v.detach().abs().amax(dim=-1) == 0).any():
        warnings.warn("zero patch feature rows", DegenerateFeatureWarning, stacklevel=2)
    return l2_rows(v)


def _anchor_pairs(anchors: torch.Tensor, batch: int) -> torch.Tensor:
    if anchors.dim() == 2:
        anchors = anchors.unsqueeze(0).expand(batch, -1, -1)
    return anchors


def classify(v_image: torch.Tensor, anchors: torch.Tensor, cfg: SimilarityConfig = SimilarityConfig()) -> torch.Tensor:
    """Softmax over (cos to T_N, cos to T_A) / tau.

    v_image: (d,) or (B, d); anchors: (2, d) or (B, 2, d).
    """
    if not (torch.isfinite(v_image).all() and torch.isfinite(anchors).all()):
        raise ValueError("non-finite input to classify")
    single = v_image.dim() == 1
    v = v_image.unsqueeze(0) if single else v_image
    a = _anchor_pairs(anchors, v.shape[0])
    logits = torch.einsum("bd,bkd->bk", v, a) / cfg.temperature
    p = logits.softmax(dim=-1)
    return p[0] if single else p


def patch_probabilities(v_patch: torch.Tensor, anchors: torch.Tensor, cfg: SimilarityConfig) -> torch.Tensor:
    """(B, N, d) patches against anchors -> (B, N, 2) per-patch probabilities."""
    a = _anchor_pairs(anchors, v_patch.shape[0])
    return (torch.einsum("bnd,bkd->bnk", v_patch, a) / cfg.temperature).softmax(dim=-1)


def segment(v_patch: torch.Tensor, anchors: torch.Tensor, cfg: SimilarityConfig = SimilarityConfig(),
            out_size: tuple[int, int] | None = None) -> torch.Tensor:
    """Per-patch probabilities reshaped to the patch grid and bilinearly upsampled.

    Returns (B, H, W, 2) (or (H, W, 2) for an unbatched (N, d) input), renormalised
    so that every pixel sums to one.
    """
    single = v_patch.dim() == 2
    if single:
        v_patch = v_patch.unsqueeze(0)
        anchors = anchors if anchors.dim() == 2 else anchors.unsqueeze(0)
    b, n, _ = v_patch.shape
    g = math.isqrt(n)
    if g * g != n:
        raise ValueError(f"{n} patches do not form a square grid")
    out_size = out_size or (g, g)
    if out_size[0] < g or out_size[1] < g:
        raise ValueError("output size smaller than the patch grid")
    p = patch_probabilities(v_patch, anchors, cfg)
    p = p.view(b, g, g, 2).permute(0, 3, 1, 2)
    if tuple(out_size) != (g, g):
        p = F.interpolate(p, size=tuple(out_size), mode="bilinear", align_corners=False)
        p = p / p.sum(dim=1, keepdim=True)
    p = p.permute(0, 2, 3, 1)
    return p[0] if single else p


class Detector(nn.Module):
    """Backbone plus optional granularity projectors; predicts against given anchors.

    Without projectors the patch features are the backbone's own final-layer
    tokens through its head (the frozen baseline and the stage-1 reference).
    """

    def __init__(self, backbone, projectors: GranularityProjectors | None = None,
                 sim: SimilarityConfig = SimilarityConfig()):
        super().__init__()
        self.backbone = backbone
        self.projectors = projectors
        self.sim = sim

    @property
    def image_size(self) -> int:
        return self.backbone.vision_spec.image_size

    def features(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(V_image (B, d), V_patch (B, N, d)) for a (B, C, H, W) batch."""
        if self.projectors is None:
            return self.backbone.native_patch_features(images)
        v_image, taps = self.backbone.encode_image(images)
        return v_image, aggregate_patches(taps, self.projectors)

    def predict(self, images: torch.Tensor, anchors: torch.Tensor):
        """Batched (p_cls (B, 2), p_seg (B, H, W, 2))."""
        v_image, v_patch = self.features(images)
        anchors = anchors.to(v_image.dtype)
        size = (images.shape[-2], images.shape[-1])
        return classify(v_image, anchors, self.sim), segment(v_patch, anchors, self.sim, size)


def infer(image: torch.Tensor, anchors, model: Detector) -> AnomalyPrediction:
    """Predict a single (H, W, C) image against a TextAnchors pair (or a (2, d) tensor)."""
    pair = anchors.stacked() if hasattr(anchors, "stacked") else anchors
    with torch.no_grad():
        p_cls, p_seg = model.predict(image.permute(2, 0, 1).unsqueeze(0), pair)
    return AnomalyPrediction(p_cls[0], p_seg[0])
