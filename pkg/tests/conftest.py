import pytest
import torch

from anchorad.backbone import DualEncoder, TextEncoderSpec, Tokenizer, VisionEncoderSpec
from anchorad.checkpoint import Bundle
from anchorad.prompts import ClassRegistry, expand, load_bank, load_caption_bank

torch.set_num_threads(1)


def tiny_backbone(dtype=torch.float32, seed=0, width=16, image_size=24, patch=8, depth=4, text_depth=3):
    """A backbone small enough for finite-difference checks (N = 9 patches at the defaults)."""
    reg = ClassRegistry.load()
    texts = []
    for d in reg.values():
        n, a = expand(d, load_caption_bank())
        texts += n + a
    tok = Tokenizer.build(texts, 16)
    torch.manual_seed(seed)
    vs = VisionEncoderSpec(image_size=image_size, patch_size=patch, depth=depth, width=width, heads=2,
                           embed_dim=width, tap_layers=tuple(range(1, depth + 1))[-4:])
    ts = TextEncoderSpec(vocab_size=len(tok.vocab), context_length=16, depth=text_depth, width=width,
                         heads=2, embed_dim=width)
    return DualEncoder(vs, ts, tok).to(dtype).eval()


@pytest.fixture
def backbone():
    return tiny_backbone()


@pytest.fixture
def bundle():
    return Bundle(tiny_backbone(), "pretrain")


@pytest.fixture(scope="session")
def registry():
    return ClassRegistry.load()


@pytest.fixture(scope="session")
def bank():
    return load_bank()


ACCEPTANCE_LINES: list[str] = []


def report(number: int, passed: bool, detail: str) -> None:
    """Record one acceptance line; the lines are printed in the terminal summary."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
