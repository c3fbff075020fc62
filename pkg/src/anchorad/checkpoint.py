"""Staged model bundles and their single-file checkpoint format.

File layout: an 8-byte magic, the format version (uint32), the payload length
(uint64), the SHA-256 of the payload, then the ``torch.save`` payload.  A
truncated or altered file fails the length/digest check before unpickling.
"""
from __future__ import annotations

import copy
import hashlib
import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .adapters import AdapterStack, attach
from .backbone import DualEncoder, TextEncoderSpec, Tokenizer, VisionEncoderSpec
from .head import Detector, GranularityProjectors, SimilarityConfig

FORMAT_VERSION = 1
MAGIC = b"ANCHORAD"
_HEADER = struct.Struct("<8sIQ32s")
STAGES = ("pretrain", "stage1", "stage2", "one_stage")


class CheckpointError(RuntimeError):
    pass


class MissingAnchorsError(CheckpointError):
    pass


@dataclass
class Bundle:
    """A backbone at a given training stage plus everything inference needs."""

    backbone: DualEncoder
    stage: str = "pretrain"
    anchors: dict[str, torch.Tensor] = field(default_factory=dict)  # class_id -> (2, d)
    projectors: GranularityProjectors | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    @property
    def text_adapters(self) -> AdapterStack | None:
        return self.backbone.text.adapter_stack

    @property
    def vision_adapters(self) -> AdapterStack | None:
        return self.backbone.visual.adapter_stack

    def require_anchors(self):
        if self.stage not in ("stage1", "stage2", "one_stage") or not self.anchors:
            raise MissingAnchorsError("missing anchors: stage-1 anchors required")

    def detector(self, temperature: float = 0.07) -> Detector:
        return Detector(self.backbone, self.projectors, SimilarityConfig(temperature))

    def clone(self) -> "Bundle":
        return copy.deepcopy(self)


def _to_payload(bundle: Bundle) -> dict:
    bb = bundle.backbone
    return {
        "format_version": FORMAT_VERSION,
        "stage": bundle.stage,
        "vision_spec": bb.specs()["vision"],
        "text_spec": bb.specs()["text"],
        "vocab": list(bb.tokenizer.vocab),
        "context_length": bb.tokenizer.context_length,
        "text_adapters": bundle.text_adapters.config() if bundle.text_adapters is not None else None,
        "vision_adapters": bundle.vision_adapters.config() if bundle.vision_adapters is not None else None,
        "state_dict": {k: v.detach().cpu().clone() for k, v in bb.state_dict().items()},
        "projectors": (None if bundle.projectors is None else
                       {k: v.detach().cpu().clone() for k, v in bundle.projectors.state_dict().items()}),
        "anchors": {k: v.detach().cpu().clone() for k, v in bundle.anchors.items()},
        "meta": bundle.meta,
    }


def _from_payload(p: dict) -> Bundle:
    if p.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {p.get('format_version')} != {FORMAT_VERSION}")
    tok = Tokenizer(p["vocab"], p["context_length"])
    vs = VisionEncoderSpec(**p["vision_spec"])
    ts = TextEncoderSpec(**p["text_spec"])
    dtype = next(iter(p["state_dict"].values())).dtype
    bb = DualEncoder(vs, ts, tok).to(dtype)
    for slot, enc in (("text_adapters", bb.text), ("vision_adapters", bb.visual)):
        cfg = p[slot]
        if cfg is not None:
            attach(enc, AdapterStack(cfg["width"], cfg["k"], cfg["lam"], cfg["activation"]))
    bb.load_state_dict(p["state_dict"])
    proj = None
    if p["projectors"] is not None:
        proj = GranularityProjectors(vs.width, vs.embed_dim).to(dtype)
        proj.load_state_dict(p["projectors"])
    bb.eval()
    for prm in bb.parameters():
        prm.requires_grad_(False)
    return Bundle(bb, p["stage"], dict(p["anchors"]), proj, p.get("meta", {}))


def dumps(bundle: Bundle) -> bytes:
    buf = io.BytesIO()
    torch.save(_to_payload(bundle), buf)
    payload = buf.getvalue()
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(payload), hashlib.sha256(payload).digest()) + payload


def loads(data: bytes) -> Bundle:
    if len(data) < _HEADER.size:
        raise CheckpointError("checkpoint truncated (header)")
    magic, version, length, sha = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} != {FORMAT_VERSION}")
    payload = data[_HEADER.size:]
    if len(payload) != length:
        raise CheckpointError(f"checkpoint truncated: {len(payload)} of {length} payload bytes")
    if hashlib.sha256(payload).digest() != sha:
        raise CheckpointError("checkpoint digest mismatch")
    return _from_payload(torch.load(io.BytesIO(payload), map_location="cpu", weights_only=False))


def save(bundle: Bundle, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(bundle))
    os.replace(tmp, path)
    return path


def load(path) -> Bundle:
    return loads(Path(path).read_bytes())
