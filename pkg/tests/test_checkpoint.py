import pytest
import torch

from anchorad import checkpoint
from anchorad.adapters import AdapterStack, attach
from anchorad.checkpoint import Bundle, CheckpointError, MissingAnchorsError
from anchorad.evaluation import anchors_for
from anchorad.head import GranularityProjectors

from conftest import tiny_backbone


def _stage2_bundle(registry, bank, dtype=torch.float64):
    torch.manual_seed(0)
    bb = tiny_backbone(dtype)
    attach(bb.text, AdapterStack(16, 2, 0.1))
    attach(bb.visual, AdapterStack(16, 3, 0.1))
    with torch.no_grad():
        for p in list(bb.text.adapter_stack.parameters()) + list(bb.visual.adapter_stack.parameters()):
            p.normal_()
    proj = GranularityProjectors(16, 16).to(dtype)
    return Bundle(bb, "stage2", anchors_for(bb, ["disk", "capsule"], bank, registry), proj, {"note": "x"})


def test_round_trip_bit_identical(tmp_path, registry, bank):
    b = _stage2_bundle(registry, bank)
    path = checkpoint.save(b, tmp_path / "m.ckpt")
    back = checkpoint.load(path)
    images = torch.rand(3, 3, 24, 24, dtype=torch.float64)
    pair = b.anchors["disk"]
    p1 = b.detector().predict(images, pair)
    p2 = back.detector().predict(images, back.anchors["disk"])
    assert torch.equal(p1[0], p2[0]) and torch.equal(p1[1], p2[1])
    assert back.stage == "stage2" and back.meta == {"note": "x"}
    assert all(torch.equal(back.anchors[k], v) for k, v in b.anchors.items())
    assert back.text_adapters.config() == b.text_adapters.config()
    assert checkpoint.dumps(back) == checkpoint.dumps(b)


def test_truncated_and_corrupt_files(tmp_path, registry, bank):
    data = checkpoint.dumps(_stage2_bundle(registry, bank))
    for bad in (data[:10], data[:-1]):
        with pytest.raises(CheckpointError):
            checkpoint.loads(bad)
    flipped = bytearray(data)
    flipped[-5] ^= 0xFF
    with pytest.raises(CheckpointError):
        checkpoint.loads(bytes(flipped))
    with pytest.raises(CheckpointError):
        checkpoint.loads(b"NOTACKPT" + data[8:])


def test_loaded_bundle_is_frozen(tmp_path, registry, bank):
    back = checkpoint.loads(checkpoint.dumps(_stage2_bundle(registry, bank)))
    assert not any(p.requires_grad for p in back.backbone.parameters())
    assert not back.backbone.training


def test_anchor_requirement(bundle):
    with pytest.raises(MissingAnchorsError, match="stage-1 anchors required"):
        bundle.require_anchors()
    with pytest.raises(ValueError):
        Bundle(bundle.backbone, "stage3")


def test_clone_is_independent(bundle):
    c = bundle.clone()
    with torch.no_grad():
        c.backbone.visual.proj.weight.add_(1.0)
    assert not torch.equal(c.backbone.visual.proj.weight, bundle.backbone.visual.proj.weight)
