import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorad.prompts import (PromptBank, RegistryError, TextAnchors, anchor_similarity, anchors_from_embeddings,
                              compute_anchors, expand, load_bank_text)


def test_shipped_bank_counts(bank, registry):
    for desc in registry.values():
        normal, anomaly = expand(desc, bank)
        assert (len(normal), len(anomaly)) == (6, 10)


def test_verbatim_substitution(bank):
    normal, anomaly = expand("bottle", bank)
    assert "damaged bottle" in anomaly
    assert "a photo of a the bottle" in normal
    # template-major order
    assert normal[:3] == ["bottle", "a bottle", "the bottle"]


def test_empty_templates_give_empty_outputs(bank):
    assert expand("bottle", bank.replace(templates=[])) == ([], [])


def test_bank_validation():
    with pytest.raises(ValueError):
        PromptBank(["{} {}"], ["[CLS]"], ["broken [CLS]"])
    with pytest.raises(ValueError):
        PromptBank(["{}"], ["[CLS] [CLS]"], ["broken [CLS]"])
    with pytest.raises(ValueError):
        PromptBank(["{}"], [], ["broken [CLS]"])
    with pytest.raises(ValueError):
        load_bank_text("[templates]\n{}\n[normal]\n[CLS]\n")


def test_unseen_descriptor_needs_no_code_change(backbone, registry, bank):
    swapped = bank.replace(anomaly=["defective [CLS]", "flawed [CLS]"])
    a = compute_anchors("disk", swapped, backbone, registry)
    assert abs(float(a.t_a.norm()) - 1) < 1e-5


def test_unknown_class(backbone, registry, bank):
    with pytest.raises(RegistryError):
        compute_anchors("bottle", bank, backbone, registry)


def test_anchor_mean_of_identical_is_identity():
    e = torch.nn.functional.normalize(torch.randn(8, dtype=torch.float64), dim=0)
    pair = anchors_from_embeddings(e.expand(6, 8), e.expand(10, 8))
    torch.testing.assert_close(pair[0], e)


def test_anchor_two_orthonormal():
    e1, e2 = torch.eye(4, dtype=torch.float64)[:2]
    pair = anchors_from_embeddings(torch.stack([e1, e2]), torch.stack([e1, e1]))
    torch.testing.assert_close(pair[0], (e1 + e2) / (e1 + e2).norm())


def test_anchors_unit_norm_and_deterministic(backbone, registry, bank):
    for cid in registry:
        a = compute_anchors(cid, bank, backbone, registry)
        assert abs(float(a.t_n.norm()) - 1) < 1e-5 and abs(float(a.t_a.norm()) - 1) < 1e-5
    a1 = compute_anchors("ring", bank, backbone, registry)
    a2 = compute_anchors("ring", bank, backbone, registry)
    assert torch.equal(a1.t_n, a2.t_n) and torch.equal(a1.t_a, a2.t_a)


def test_similarity_grid_orthogonal():
    e1, e2 = torch.eye(3)[:2]
    a = TextAnchors(e1, e2)
    torch.testing.assert_close(anchor_similarity(a, a), torch.eye(2))


vec = st.lists(st.floats(-1, 1, allow_nan=False), min_size=5, max_size=5).filter(
    lambda v: sum(x * x for x in v) > 1e-3)


@settings(max_examples=40, deadline=None)
@given(vec, vec, vec, vec)
def test_similarity_symmetry(a, b, c, d):
    n = lambda v: torch.nn.functional.normalize(torch.tensor(v, dtype=torch.float64), dim=0)  # noqa: E731
    x, y = TextAnchors(n(a), n(b)), TextAnchors(n(c), n(d))
    torch.testing.assert_close(anchor_similarity(x, y), anchor_similarity(y, x).t())
