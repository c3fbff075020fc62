"""Contrastive pretraining of the miniature dual encoder on synthetic captions."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import (DualEncoder, TextEncoderSpec, Tokenizer, VisionEncoderSpec,
                       apply_partition, partition_parameters)
from .prompts import anchor_similarity, compute_anchors, expand
from .synthdata import caption_corpus, class_specs

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 3e-4
    weight_decay: float = 0.05
    temperature: float = 0.07
    n_per_class: int = 100
    anomaly_fraction: float = 0.2
    heldout_per_class: int = 24
    pool_size: int = 16
    fresh_corpus: bool = False  # draw new image/caption pairs every epoch
    seed: int = 0


def contrastive_loss(image_emb: torch.Tensor, text_emb: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """Symmetric InfoNCE over the B x B similarity matrix."""
    if image_emb.shape[0] < 2 or image_emb.shape != text_emb.shape:
        raise ValueError("contrastive loss needs a matched batch of at least two pairs")
    logits = image_emb @ text_emb.t() / temperature
    target = torch.arange(logits.shape[0], device=logits.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.t(), target))


def build_tokenizer(registry, caption_bank, context_length: int = 32) -> Tokenizer:
    texts = []
    for desc in registry.values():
        normal, anomaly = expand(desc, caption_bank)
        texts += normal + anomaly
    return Tokenizer.build(texts, context_length)


def build_backbone(tokenizer: Tokenizer, vision: dict | None = None, text: dict | None = None,
                   seed: int = 0, dtype=torch.float32) -> DualEncoder:
    torch.manual_seed(seed)
    vspec = VisionEncoderSpec(**(vision or {}))
    tspec = TextEncoderSpec(vocab_size=len(tokenizer.vocab), context_length=tokenizer.context_length,
                            **(text or {}))
    return DualEncoder(vspec, tspec, tokenizer).to(dtype)


def _stack(pairs, dtype):
    images = torch.stack([torch.from_numpy(p.sample.image).permute(2, 0, 1) for p in pairs]).to(dtype)
    return images


@torch.no_grad()
def retrieval_accuracy(model: DualEncoder, pairs, pool_size: int = 32, seed: int = 0) -> float:
    """Top-1 image-to-caption accuracy over random pools of ``pool_size`` pairs.

    A retrieval counts as correct when the chosen caption has the same class and
    normal/anomaly state as the image's own caption: several templates describe
    the same image and cannot be told apart from pixels.
    """
    model.eval()
    images = _stack(pairs, model.dtype)
    img = torch.cat([model.encode_image(images[i:i + 128])[0] for i in range(0, len(pairs), 128)])
    txt = model.encode_prompts([p.caption for p in pairs])
    keys = [(p.sample.class_id, p.sample.label) for p in pairs]
    order = np.random.default_rng(seed).permutation(len(pairs))
    hits = total = 0
    for start in range(0, len(order) - pool_size + 1, pool_size):
        idx = order[start:start + pool_size]
        sims = img[idx] @ txt[idx].t()
        best = sims.argmax(dim=1).tolist()
        hits += sum(keys[idx[i]] == keys[idx[j]] for i, j in enumerate(best))
        total += len(idx)
    return hits / total


def entanglement(model: DualEncoder, bank, registry, class_ids) -> dict[str, float]:
    """Per-class inner product between the normal and anomaly anchors."""
    out = {}
    for cid in class_ids:
        a = compute_anchors(cid, bank, model, registry)
        out[cid] = float(anchor_similarity(a, a)[0, 1])
    return out


def pretrain(registry, caption_bank, cfg: PretrainConfig = PretrainConfig(), backbone_cfg: dict | None = None,
             dtype=torch.float32, progress=None):
    """Train a backbone from scratch; returns (model, report dict)."""
    backbone_cfg = backbone_cfg or {}
    tokenizer = build_tokenizer(registry, caption_bank, backbone_cfg.get("context_length", 32))
    model = build_backbone(tokenizer, backbone_cfg.get("vision"), backbone_cfg.get("text"), cfg.seed, dtype)
    classes = [c for c in class_specs() if c.class_id in registry]
    corpus = caption_corpus(classes, caption_bank, registry, cfg.n_per_class, cfg.seed, cfg.anomaly_fraction)
    heldout = caption_corpus(classes, caption_bank, registry, cfg.heldout_per_class, cfg.seed,
                             cfg.anomaly_fraction, purpose="caption-heldout")

    params = apply_partition(model, partition_parameters(model, "pretrain"))
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(corpus) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * s / total_steps)))
    gen = torch.Generator().manual_seed(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        if cfg.fresh_corpus and epoch > 0:
            corpus = caption_corpus(classes, caption_bank, registry, cfg.n_per_class, cfg.seed,
                                    cfg.anomaly_fraction, purpose=f"caption/{epoch}")
        if epoch == 0 or cfg.fresh_corpus:
            images = _stack(corpus, dtype)
            tokens = tokenizer([p.caption for p in corpus])
        model.train()
        perm = torch.randperm(len(corpus), generator=gen)
        running = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            v, _ = model.encode_image(images[idx])
            t = model.encode_text(tokens[idx])
            loss = contrastive_loss(v, t, cfg.temperature)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite contrastive loss at epoch {epoch}, step {start // cfg.batch_size}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            running += loss.item() * len(idx)
        history.append(running / len(corpus))
        log.info("pretrain epoch %d loss %.4f", epoch, history[-1])
        if progress:
            progress(epoch, history[-1])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    report = {
        "loss_history": history,
        "retrieval_top1": retrieval_accuracy(model, heldout, cfg.pool_size, cfg.seed),
        "pool_size": cfg.pool_size,
    }
    return model, report
