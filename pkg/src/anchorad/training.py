"""Two-stage adaptation: text anchors first, then patch alignment.

Stage 1 attaches residual adapters to the first ``k_text`` text layers and
trains them together with the text projector against features of the frozen
vision tower.  Stage 2 freezes the resulting anchors and trains vision
adapters plus the four granularity projectors.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .adapters import AdapterStack, attach
from .backbone import apply_partition, digest, frozen_digest, partition_parameters
from .checkpoint import Bundle, CheckpointError
from .evaluation import anchors_for, evaluate
from .head import Detector, GranularityProjectors, SimilarityConfig, classify, segment
from .losses import LossWeights, total_loss
from .prompts import class_anchor_tensor
from .synthdata import AugmentConfig, augment, sample_seed

log = logging.getLogger(__name__)


class FreezeViolation(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class AdapterConfig:
    lam: float = 0.1
    k_text: int = 3
    k_vision: int = 6


@dataclass
class StageConfig:
    stage: int = 1
    epochs: int = 5
    lr: float = 1e-5
    batch_size: int = 16
    betas: tuple[float, float] = (0.5, 0.999)
    epoch_factor: int = 4
    gamma: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_smooth: float = 1.0
    dice_empty_masks: bool = False
    temperature: float = 0.07
    grad_clip: float = 1.0
    augment: bool = True
    seed: int = 0

    @classmethod
    def stage1(cls, **kw) -> "StageConfig":
        return cls(**{"stage": 1, "epochs": 5, "lr": 1e-5, "batch_size": 16, "epoch_factor": 4, **kw})

    @classmethod
    def stage2(cls, **kw) -> "StageConfig":
        return cls(**{"stage": 2, "epochs": 20, "lr": 5e-4, "batch_size": 2, "epoch_factor": 1, **kw})

    @property
    def total_epochs(self) -> int:
        return self.epochs * self.epoch_factor

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.gamma, self.focal_gamma, self.focal_alpha, self.dice_smooth, self.dice_empty_masks)

    @property
    def sim(self) -> SimilarityConfig:
        return SimilarityConfig(self.temperature)


@dataclass
class TrainLog:
    """Per-step loss breakdowns and epoch-level validation metrics."""

    steps: list[dict] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    digests: dict = field(default_factory=dict)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.steps:
                fh.write(json.dumps(row) + "\n")


def _batches(samples, cfg: StageConfig, epoch: int, dtype):
    """Shuffled, augmented mini-batches; order and augmentation depend only on the seed."""
    rng = np.random.default_rng(sample_seed(cfg.seed, f"stage{cfg.stage}", epoch, "order"))
    order = rng.permutation(len(samples))
    for start in range(0, len(order), cfg.batch_size):
        chunk = []
        for i in order[start:start + cfg.batch_size]:
            s = samples[i]
            if cfg.augment:
                s = augment(s, sample_seed(cfg.seed, f"stage{cfg.stage}/{epoch}", int(i), "augment"), AugmentConfig())
            chunk.append(s)
        images = torch.stack([s.tensors()[0] for s in chunk]).to(dtype)
        masks = torch.stack([s.tensors()[1] for s in chunk]).to(dtype)
        labels = torch.tensor([s.label for s in chunk])
        yield images, masks, labels, [s.class_id for s in chunk]


def _step(opt, params, loss, cfg: StageConfig, where: str):
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss at {where}")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    opt.step()


def stage1_train(pretrained: Bundle, train_set, bank, registry, cfg: StageConfig = StageConfig.stage1(),
                 adapters: AdapterConfig = AdapterConfig(), train_log: TrainLog | None = None) -> Bundle:
    """Learn anomaly-aware text anchors against the frozen vision tower."""
    if pretrained.stage != "pretrain":
        raise CheckpointError(f"stage 1 starts from a pretrained backbone, got stage {pretrained.stage!r}")
    train_log = train_log if train_log is not None else TrainLog()
    bundle = pretrained.clone()
    bb = bundle.backbone
    torch.manual_seed(cfg.seed)
    attach(bb.text, AdapterStack(bb.text.width, min(adapters.k_text, bb.text.depth), adapters.lam))
    part = partition_parameters(bb, "stage1")
    params = apply_partition(bb, part)
    before = frozen_digest(bb, part)
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas)
    reference = Detector(bb, None, cfg.sim)
    bb.eval()
    step = 0
    for epoch in range(cfg.total_epochs):
        for images, masks, labels, classes in _batches(train_set, cfg, epoch, bb.dtype):
            with torch.no_grad():
                v_image, v_patch = reference.features(images)
            uniq = sorted(set(classes))
            class_pairs = class_anchor_tensor([registry[c] for c in uniq], bank, bb)
            pairs = class_pairs[[uniq.index(c) for c in classes]]
            p_cls = classify(v_image, pairs, cfg.sim)
            p_seg = segment(v_patch, pairs, cfg.sim, tuple(images.shape[-2:]))
            loss, parts = total_loss(p_cls, labels, p_seg, masks, pairs, cfg.weights)
            _step(opt, params, loss, cfg, f"stage 1 epoch {epoch} step {step}")
            train_log.steps.append({"stage": 1, "step": step, "epoch": epoch, **parts})
            step += 1
        log.info("stage1 epoch %d loss %.4f", epoch, train_log.steps[-1]["total"])
    after = frozen_digest(bb, part)
    if before != after:
        raise FreezeViolation("vision parameters changed during stage 1")
    train_log.digests["stage1_frozen"] = after
    for p in bb.parameters():
        p.requires_grad_(False)
    bundle.stage = "stage1"
    bundle.anchors = anchors_for(bb, list(registry), bank, registry)
    bundle.meta = {**bundle.meta, "stage1": asdict(cfg), "adapters": asdict(adapters)}
    return bundle


def anchors_digest(anchors: dict) -> str:
    return digest(("anchor/" + k, v) for k, v in anchors.items())


def stage2_train(stage1: Bundle, train_set, cfg: StageConfig = StageConfig.stage2(),
                 adapters: AdapterConfig = AdapterConfig(), val_set=None, train_log: TrainLog | None = None) -> Bundle:
    """Align multi-granularity patch features with the frozen stage-1 anchors."""
    stage1.require_anchors()
    if stage1.stage != "stage1":
        raise CheckpointError(f"stage 2 starts from a stage-1 checkpoint, got stage {stage1.stage!r}")
    train_log = train_log if train_log is not None else TrainLog()
    bundle = stage1.clone()
    bb = bundle.backbone
    torch.manual_seed(cfg.seed)
    attach(bb.visual, AdapterStack(bb.visual.width, min(adapters.k_vision, bb.visual.depth), adapters.lam))
    vs = bb.vision_spec
    bundle.projectors = GranularityProjectors(vs.width, vs.embed_dim).to(bb.dtype)
    detector = bundle.detector(cfg.temperature)
    part = partition_parameters(detector, "stage2")
    params = apply_partition(detector, part)
    anchors = {k: v.to(bb.dtype) for k, v in bundle.anchors.items()}
    before = frozen_digest(detector, part, [("anchor/" + k, v) for k, v in anchors.items()])
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas)

    def validate(epoch):
        if val_set:
            m = evaluate(detector, val_set, anchors)
            train_log.validation.append({"epoch": epoch, "pixel_auroc": m["pixel_auroc"],
                                         "image_auroc": m["image_auroc"]})
            detector.train()

    validate(0)
    step = 0
    for epoch in range(cfg.total_epochs):
        detector.train()
        for images, masks, labels, classes in _batches(train_set, cfg, epoch, bb.dtype):
            pairs = torch.stack([anchors[c] for c in classes])
            p_cls, p_seg = detector.predict(images, pairs)
            loss, parts = total_loss(p_cls, labels, p_seg, masks, None, cfg.weights)
            _step(opt, params, loss, cfg, f"stage 2 epoch {epoch} step {step}")
            train_log.steps.append({"stage": 2, "step": step, "epoch": epoch, **parts})
            step += 1
        log.info("stage2 epoch %d loss %.4f", epoch, train_log.steps[-1]["total"])
    validate(cfg.total_epochs)
    after = frozen_digest(detector, part, [("anchor/" + k, v) for k, v in anchors.items()])
    if before != after:
        raise FreezeViolation("text parameters or anchors changed during stage 2")
    train_log.digests["stage2_frozen"] = after
    detector.eval()
    for p in detector.parameters():
        p.requires_grad_(False)
    bundle.stage = "stage2"
    bundle.meta = {**bundle.meta, "stage2": asdict(cfg)}
    return bundle


def one_stage_train(pretrained: Bundle, train_set, bank, registry, cfg: StageConfig = StageConfig.stage2(),
                    adapters: AdapterConfig = AdapterConfig(), train_log: TrainLog | None = None) -> Bundle:
    """Ablation: adapt text and vision jointly in a single stage (off by default)."""
    if pretrained.stage != "pretrain":
        raise CheckpointError("one-stage training starts from a pretrained backbone")
    train_log = train_log if train_log is not None else TrainLog()
    bundle = pretrained.clone()
    bb = bundle.backbone
    torch.manual_seed(cfg.seed)
    attach(bb.text, AdapterStack(bb.text.width, min(adapters.k_text, bb.text.depth), adapters.lam))
    attach(bb.visual, AdapterStack(bb.visual.width, min(adapters.k_vision, bb.visual.depth), adapters.lam))
    vs = bb.vision_spec
    bundle.projectors = GranularityProjectors(vs.width, vs.embed_dim).to(bb.dtype)
    detector = bundle.detector(cfg.temperature)
    params = apply_partition(detector, partition_parameters(detector, "one_stage"))
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas)
    step = 0
    for epoch in range(cfg.total_epochs):
        detector.train()
        for images, masks, labels, classes in _batches(train_set, cfg, epoch, bb.dtype):
            uniq = sorted(set(classes))
            pairs = class_anchor_tensor([registry[c] for c in uniq], bank, bb)[[uniq.index(c) for c in classes]]
            p_cls, p_seg = detector.predict(images, pairs)
            loss, parts = total_loss(p_cls, labels, p_seg, masks, pairs, cfg.weights)
            _step(opt, params, loss, cfg, f"one-stage epoch {epoch} step {step}")
            train_log.steps.append({"stage": "one_stage", "step": step, "epoch": epoch, **parts})
            step += 1
    detector.eval()
    for p in detector.parameters():
        p.requires_grad_(False)
    bundle.stage = "one_stage"
    bundle.anchors = anchors_for(bb, list(registry), bank, registry)
    bundle.meta = {**bundle.meta, "one_stage": asdict(cfg)}
    return bundle

