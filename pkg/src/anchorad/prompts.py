"""Prompt ensembles and the normal/anomaly text anchors built from them."""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import torch
import torch.nn.functional as F

CLS_SLOT = "[CLS]"
TEMPLATE_SLOT = "{}"


class RegistryError(KeyError):
    pass


@dataclass(frozen=True)
class PromptBank:
    templates: tuple[str, ...]
    normal_descriptors: tuple[str, ...]
    anomaly_descriptors: tuple[str, ...]

    def __post_init__(self):
        for name in ("templates", "normal_descriptors", "anomaly_descriptors"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for t in self.templates:
            if t.count(TEMPLATE_SLOT) != 1:
                raise ValueError(f"template needs exactly one '{{}}': {t!r}")
        for d in self.normal_descriptors + self.anomaly_descriptors:
            if d.count(CLS_SLOT) != 1:
                raise ValueError(f"descriptor needs exactly one '[CLS]': {d!r}")
        if not self.normal_descriptors or not self.anomaly_descriptors:
            raise ValueError("descriptor lists must be non-empty")

    def replace(self, templates=None, normal=None, anomaly=None) -> "PromptBank":
        return PromptBank(
            self.templates if templates is None else templates,
            self.normal_descriptors if normal is None else normal,
            self.anomaly_descriptors if anomaly is None else anomaly,
        )


def _read_sections(text: str) -> dict[str, list[str]]:
    sections: dict[str, list[str]] = {}
    current = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]") and line != CLS_SLOT:
            current = line[1:-1].strip().lower()
            sections[current] = []
        elif current is None:
            raise ValueError(f"entry outside a section: {line!r}")
        else:
            sections[current].append(line)
    return sections


def _resource_text(name: str) -> str:
    return resources.files("anchorad.resources").joinpath(name).read_text()


def load_bank(path: str | Path | None = None) -> PromptBank:
    """Read a ``[templates]/[normal]/[anomaly]`` text file; default is the shipped ensemble."""
    return load_bank_text(Path(path).read_text() if path else _resource_text("prompts.txt"))


def load_caption_bank() -> PromptBank:
    return load_bank_text(_resource_text("caption_prompts.txt"))


def load_bank_text(text: str) -> PromptBank:
    s = _read_sections(text)
    missing = {"templates", "normal", "anomaly"} - s.keys()
    if missing:
        raise ValueError(f"prompt bank lacks sections {sorted(missing)}")
    return PromptBank(s["templates"], s["normal"], s["anomaly"])


class ClassRegistry(dict):
    """class_id -> human-readable description."""

    @classmethod
    def load(cls, path: str | Path | None = None) -> "ClassRegistry":
        text = Path(path).read_text() if path else _resource_text("classes.txt")
        reg = cls()
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, desc = line.partition(":")
            key, desc = key.strip(), desc.strip()
            if not sep or not key or not desc:
                raise ValueError(f"bad registry line: {raw!r}")
            if key in reg:
                raise ValueError(f"duplicate class id {key!r}")
            reg[key] = desc
        return reg

    def __missing__(self, key):
        raise RegistryError(f"unknown class id {key!r}")


def expand(class_description: str, bank: PromptBank) -> tuple[list[str], list[str]]:
    """Template-major cartesian product of templates and descriptors."""
    def fill(descs):
        return [t.replace(TEMPLATE_SLOT, d.replace(CLS_SLOT, class_description))
                for t in bank.templates for d in descs]
    return fill(bank.normal_descriptors), fill(bank.anomaly_descriptors)


@dataclass
class TextAnchors:
    t_n: torch.Tensor
    t_a: torch.Tensor
    class_id: str = ""

    def stacked(self) -> torch.Tensor:
        return torch.stack([self.t_n, self.t_a])


def anchors_from_embeddings(normal: torch.Tensor, anomaly: torch.Tensor) -> torch.Tensor:
    """Mean the prompt embeddings of each state, then renormalise: returns (2, d)."""
    return F.normalize(torch.stack([normal.mean(0), anomaly.mean(0)]), dim=-1)


def class_anchor_tensor(descriptions: list[str], bank: PromptBank, backbone) -> torch.Tensor:
    """Differentiable anchors for several classes at once: (C, 2, d)."""
    prompts, spans = [], []
    for desc in descriptions:
        normal, anomaly = expand(desc, bank)
        spans.append((len(normal), len(anomaly)))
        prompts += normal + anomaly
    emb = backbone.encode_prompts(prompts)
    out, pos = [], 0
    for n_norm, n_anom in spans:
        out.append(anchors_from_embeddings(emb[pos:pos + n_norm], emb[pos + n_norm:pos + n_norm + n_anom]))
        pos += n_norm + n_anom
    return torch.stack(out)


def compute_anchors(class_id: str, bank: PromptBank, backbone, registry: ClassRegistry) -> TextAnchors:
    desc = registry[class_id]
    with torch.no_grad():
        pair = class_anchor_tensor([desc], bank, backbone)[0]
    return TextAnchors(pair[0], pair[1], class_id)


def anchor_similarity(a: TextAnchors, b: TextAnchors) -> torch.Tensor:
    """2x2 grid of inner products, rows (T_N^a, T_A^a), columns (T_N^b, T_A^b)."""
    return a.stacked() @ b.stacked().t()
