import pytest
import torch

from anchorad.adapters import AdapterStack, attach
from anchorad.backbone import (PartitionError, TextEncoderSpec, Tokenizer, TokenizerError, VisionEncoderSpec,
                               apply_partition, frozen_digest, partition_parameters)
from anchorad.head import GranularityProjectors, Detector

from conftest import tiny_backbone


@pytest.fixture
def tok():
    return Tokenizer.build(["damaged bottle", "a photo of a bottle."], context_length=8)


def test_tokenize_structure(tok):
    ids = tok.encode("damaged bottle")
    assert ids[:4] == [1, tok.index["damaged"], tok.index["bottle"], 2]
    assert ids[4:] == [0] * 4 and len(ids) == 8
    assert tok.encode("damaged bottle") == ids


def test_tokenize_errors(tok):
    with pytest.raises(TokenizerError):
        tok.encode("")
    with pytest.raises(TokenizerError):
        tok.encode("a photo of a bottle a photo of a bottle")
    with pytest.raises(TokenizerError):
        tok.encode("damaged botté")


def test_unknown_word_maps_to_unk(tok):
    assert tok.encode("zebra")[1] == 3


def test_punctuation_is_its_own_token(tok):
    assert tok.encode("a photo of a bottle.")[6] == tok.index["."]


def test_vision_spec_validation():
    with pytest.raises(ValueError):
        VisionEncoderSpec(image_size=30, patch_size=8)
    with pytest.raises(ValueError):
        VisionEncoderSpec(tap_layers=(2, 4, 4, 8))
    with pytest.raises(ValueError):
        VisionEncoderSpec(tap_layers=(2, 4, 6))
    assert VisionEncoderSpec().num_patches == 64


def test_output_norms_and_tap_shapes(backbone):
    v, taps = backbone.encode_image(torch.rand(3, 3, 24, 24))
    torch.testing.assert_close(v.norm(dim=-1), torch.ones(3), rtol=0, atol=1e-5)
    assert len(taps) == 4 and all(t.shape == (3, 9, 16) for t in taps)
    t = backbone.encode_prompts(["damaged disk", "a photo of a disk"])
    torch.testing.assert_close(t.norm(dim=-1), torch.ones(2), rtol=0, atol=1e-5)


def test_single_hwc_image(backbone):
    img = torch.rand(24, 24, 3)
    v, taps = backbone.encode_image(img)
    assert v.shape == (16,) and taps[0].shape == (9, 16)
    vb, _ = backbone.encode_image(img.permute(2, 0, 1).unsqueeze(0))
    torch.testing.assert_close(v, vb[0])


def test_image_shape_mismatch(backbone):
    with pytest.raises(ValueError):
        backbone.encode_image(torch.rand(1, 3, 32, 32))


def test_eval_mode_determinism(backbone):
    img = torch.rand(2, 3, 24, 24)
    a, ta = backbone.encode_image(img)
    b, tb = backbone.encode_image(img)
    assert torch.equal(a, b) and all(torch.equal(x, y) for x, y in zip(ta, tb))
    tokens = backbone.tokenizer(["broken ring"])
    assert torch.equal(backbone.encode_text(tokens), backbone.encode_text(tokens))


def test_partition_before_adapters_fails(backbone):
    with pytest.raises(PartitionError):
        partition_parameters(backbone, "stage1")
    with pytest.raises(PartitionError):
        partition_parameters(Detector(backbone, GranularityProjectors(16, 16)), "stage2")


def test_pretrain_partition_covers_everything(backbone):
    part = partition_parameters(backbone, "pretrain")
    names = {n for n, _ in backbone.named_parameters()}
    assert part.trainable == names and not part.frozen


def test_stage1_partition(backbone):
    attach(backbone.text, AdapterStack(16, 2))
    part = partition_parameters(backbone, "stage1")
    assert not part.trainable & part.frozen
    assert part.trainable | part.frozen == {n for n, _ in backbone.named_parameters()}
    assert all(n.startswith("text.") for n in part.trainable)
    assert "text.proj.weight" in part.trainable
    assert all(n in part.frozen for n, _ in backbone.visual.named_parameters(prefix="visual"))
    with pytest.raises(PartitionError):
        partition_parameters(backbone, "pretrain")


def test_stage2_partition():
    bb = tiny_backbone()
    attach(bb.text, AdapterStack(16, 2))
    attach(bb.visual, AdapterStack(16, 3))
    det = Detector(bb, GranularityProjectors(16, 16))
    part = partition_parameters(det, "stage2")
    assert all(n.startswith(("projectors.", "backbone.visual.adapter_stack.")) for n in part.trainable)
    assert len([n for n in part.trainable if n.startswith("projectors.")]) == 4
    assert all(n in part.frozen for n, _ in det.named_parameters() if n.startswith("backbone.text."))


def test_frozen_digest_detects_change(backbone):
    attach(backbone.text, AdapterStack(16, 2))
    part = partition_parameters(backbone, "stage1")
    params = apply_partition(backbone, part)
    before = frozen_digest(backbone, part)
    with torch.no_grad():
        params[0].add_(1.0)
    assert frozen_digest(backbone, part) == before
    with torch.no_grad():
        backbone.visual.proj.weight.add_(1e-6)
    assert frozen_digest(backbone, part) != before


def test_text_spec_mismatch():
    tok = Tokenizer.build(["a b"], 8)
    with pytest.raises(ValueError):
        from anchorad.backbone import DualEncoder
        DualEncoder(VisionEncoderSpec(image_size=16, patch_size=8, depth=4, width=16, heads=2, embed_dim=16,
                                      tap_layers=(1, 2, 3, 4)),
                    TextEncoderSpec(vocab_size=len(tok.vocab), context_length=16, width=16, heads=2, embed_dim=16),
                    tok)
