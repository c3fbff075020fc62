"""Miniature CLIP-style dual encoder trained from scratch.

The vision tower is a pre-LN ViT with a class token; the text tower is a causal
transformer read out at the EOS position.  Both expose an ``adapter_stack``
slot (see :mod:`anchorad.adapters`) consulted after every layer, and the
vision tower returns the patch tokens of its tap layers.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK)
_WORD_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")

# Fixed pixel normalisation applied inside the vision tower.
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


class TokenizerError(ValueError):
    pass


class PartitionError(RuntimeError):
    pass


@dataclass(frozen=True)
class VisionEncoderSpec:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 8
    width: int = 128
    heads: int = 4
    embed_dim: int = 128
    channels: int = 3
    tap_layers: tuple[int, ...] = (2, 4, 6, 8)

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        taps = tuple(self.tap_layers)
        object.__setattr__(self, "tap_layers", taps)
        if len(taps) != 4:
            raise ValueError("exactly four tap layers are required")
        if any(b <= a for a, b in zip(taps, taps[1:])) or taps[0] < 1 or taps[-1] > self.depth:
            raise ValueError(f"tap layers must be strictly increasing within 1..{self.depth}")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2


@dataclass(frozen=True)
class TextEncoderSpec:
    vocab_size: int
    context_length: int = 32
    depth: int = 4
    width: int = 128
    heads: int = 4
    embed_dim: int = 128
    projector_trainable: bool = False


@dataclass
class ParameterPartition:
    trainable: set[str] = field(default_factory=set)
    frozen: set[str] = field(default_factory=set)

    def __post_init__(self):
        if self.trainable & self.frozen:
            raise PartitionError("trainable and frozen groups overlap")


class Tokenizer:
    """Lower-cased word-level tokenizer; punctuation marks are separate tokens."""

    def __init__(self, vocab: list[str], context_length: int = 32):
        if tuple(vocab[:4]) != SPECIAL_TOKENS:
            raise TokenizerError("vocabulary must start with the special tokens")
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.context_length = context_length

    @staticmethod
    def words(text: str) -> list[str]:
        return _WORD_RE.findall(text.lower())

    @classmethod
    def build(cls, texts, context_length: int = 32) -> "Tokenizer":
        seen = sorted({w for t in texts for w in cls.words(t)})
        return cls(list(SPECIAL_TOKENS) + seen, context_length)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return 2

    def encode(self, text: str) -> list[int]:
        if not text or not text.strip():
            raise TokenizerError("empty text")
        try:
            text.encode("ascii")
        except UnicodeEncodeError as err:
            raise TokenizerError(f"non-ASCII text: {text!r}") from err
        ids = [1] + [self.index.get(w, 3) for w in self.words(text)] + [2]
        if len(ids) > self.context_length:
            raise TokenizerError(
                f"text needs {len(ids)} tokens, context length is {self.context_length}: {text!r}")
        return ids + [0] * (self.context_length - len(ids))

    def __call__(self, texts) -> torch.Tensor:
        if isinstance(texts, str):
            texts = [texts]
        return torch.tensor([self.encode(t) for t in texts], dtype=torch.long)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x, mask=None):
        b, n, c = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) * (c // self.heads) ** -0.5
        if mask is not None:
            att = att.masked_fill(mask, float("-inf"))
        out = att.softmax(dim=-1) @ v
        return self.out(out.transpose(1, 2).reshape(b, n, c))


class Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x, mask=None):
        x = x + self.attn(self.ln_1(x), mask)
        return x + self.mlp(self.ln_2(x))


class VisionTransformer(nn.Module):
    def __init__(self, spec: VisionEncoderSpec):
        super().__init__()
        self.spec = spec
        self.depth, self.width = spec.depth, spec.width
        self.patch_embed = nn.Conv2d(spec.channels, spec.width, spec.patch_size, spec.patch_size, bias=False)
        scale = spec.width ** -0.5
        self.class_embedding = nn.Parameter(scale * torch.randn(spec.width))
        self.positional_embedding = nn.Parameter(scale * torch.randn(spec.num_patches + 1, spec.width))
        self.ln_pre = nn.LayerNorm(spec.width)
        self.blocks = nn.ModuleList(Block(spec.width, spec.heads) for _ in range(spec.depth))
        self.ln_post = nn.LayerNorm(spec.width)
        self.proj = nn.Linear(spec.width, spec.embed_dim, bias=False)
        self.adapter_stack = None

    def forward(self, images: torch.Tensor):
        """images: (B, C, H, W) in [0, 1].  Returns (class token, tapped patch tokens, final tokens)."""
        s = self.spec
        if images.dim() != 4 or tuple(images.shape[1:]) != (s.channels, s.image_size, s.image_size):
            raise ValueError(f"expected (B, {s.channels}, {s.image_size}, {s.image_size}), got {tuple(images.shape)}")
        x = self.patch_embed((images - PIXEL_MEAN) / PIXEL_STD).flatten(2).transpose(1, 2)
        cls = self.class_embedding.to(x.dtype).expand(x.shape[0], 1, -1)
        x = self.ln_pre(torch.cat([cls, x], dim=1) + self.positional_embedding)
        taps = []
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if self.adapter_stack is not None:
                x = self.adapter_stack.apply(x, i)
            if i in s.tap_layers:
                taps.append(x[:, 1:, :])
        return x[:, 0, :], taps, x[:, 1:, :]

    def head(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.proj(self.ln_post(tokens))


class TextTransformer(nn.Module):
    def __init__(self, spec: TextEncoderSpec):
        super().__init__()
        self.spec = spec
        self.depth, self.width = spec.depth, spec.width
        self.token_embedding = nn.Embedding(spec.vocab_size, spec.width)
        self.positional_embedding = nn.Parameter(0.01 * torch.randn(spec.context_length, spec.width))
        self.blocks = nn.ModuleList(Block(spec.width, spec.heads) for _ in range(spec.depth))
        self.ln_final = nn.LayerNorm(spec.width)
        self.proj = nn.Linear(spec.width, spec.embed_dim, bias=False)
        mask = torch.ones(spec.context_length, spec.context_length, dtype=torch.bool).triu(1)
        self.register_buffer("causal_mask", mask, persistent=False)
        self.adapter_stack = None

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = self.token_embedding(tokens) + self.positional_embedding
        for i, block in enumerate(self.blocks, start=1):
            x = block(x, self.causal_mask)
            if self.adapter_stack is not None:
                x = self.adapter_stack.apply(x, i)
        eos = (tokens == 2).int().argmax(dim=-1)
        x = self.ln_final(x[torch.arange(x.shape[0]), eos])
        return self.proj(x)


class DualEncoder(nn.Module):
    def __init__(self, vision_spec: VisionEncoderSpec, text_spec: TextEncoderSpec, tokenizer: Tokenizer):
        super().__init__()
        if vision_spec.embed_dim != text_spec.embed_dim:
            raise ValueError("vision and text embed_dim differ")
        if tokenizer.context_length != text_spec.context_length or len(tokenizer.vocab) != text_spec.vocab_size:
            raise ValueError("tokenizer does not match text spec")
        self.vision_spec = vision_spec
        self.text_spec = text_spec
        self.tokenizer = tokenizer
        self.visual = VisionTransformer(vision_spec)
        self.text = TextTransformer(text_spec)

    @property
    def dtype(self) -> torch.dtype:
        return self.visual.proj.weight.dtype

    def tokenize(self, text: str) -> list[int]:
        return self.tokenizer.encode(text)

    def encode_text(self, tokens: torch.Tensor) -> torch.Tensor:
        """Unit-norm embedding(s) read at the EOS position."""
        single = tokens.dim() == 1
        if single:
            tokens = tokens.unsqueeze(0)
        out = F.normalize(self.text(tokens), dim=-1)
        return out[0] if single else out

    def encode_prompts(self, prompts: list[str]) -> torch.Tensor:
        return self.encode_text(self.tokenizer(prompts).to(self.visual.proj.weight.device))

    def encode_image(self, images: torch.Tensor):
        """Returns (unit-norm V_image, tapped patch features F^1..F^4).

        Accepts a single (H, W, C) image or a batch (B, C, H, W).
        """
        single = images.dim() == 3
        if single:
            images = images.permute(2, 0, 1).unsqueeze(0)
        cls, taps, _ = self.visual(images.to(self.dtype))
        v = F.normalize(self.visual.head(cls), dim=-1)
        if single:
            return v[0], [t[0] for t in taps]
        return v, taps

    def native_patch_features(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(V_image, unit-norm final-layer patch tokens through the backbone head)."""
        cls, _, tokens = self.visual(images.to(self.dtype))
        return F.normalize(self.visual.head(cls), dim=-1), F.normalize(self.visual.head(tokens), dim=-1)

    def specs(self) -> dict:
        return {"vision": asdict(self.vision_spec), "text": asdict(self.text_spec)}


def param_groups(model: nn.Module) -> dict[str, list[str]]:
    """Map every named parameter of a (possibly adapted) model to its group."""
    groups: dict[str, list[str]] = {}
    for name, _ in model.named_parameters():
        if ".adapter_stack." in name or name.startswith("adapter_stack."):
            g = "text_adapters" if "text." in name.split("adapter_stack")[0] else "vision_adapters"
        elif name.startswith("projectors.") or ".projectors." in name:
            g = "projectors"
        elif name.endswith("text.proj.weight"):
            g = "text_projector"
        elif "visual." in name:
            g = "vision"
        elif "text." in name:
            g = "text"
        else:
            g = "other"
        groups.setdefault(g, []).append(name)
    return groups


STAGE_TRAINABLE = {
    "pretrain": {"vision", "text", "text_projector"},
    "stage1": {"text_adapters", "text_projector"},
    "stage2": {"vision_adapters", "projectors"},
    "one_stage": {"text_adapters", "text_projector", "vision_adapters", "projectors"},
}


def partition_parameters(model: nn.Module, stage: str) -> ParameterPartition:
    """Split named parameters of ``model`` into trainable and frozen sets for ``stage``."""
    if stage not in STAGE_TRAINABLE:
        raise ValueError(f"unknown stage {stage!r}")
    groups = param_groups(model)
    if stage == "pretrain" and ({"text_adapters", "vision_adapters"} & groups.keys()):
        raise PartitionError("pretraining runs without adapters")
    if stage == "stage1" and "text_adapters" not in groups:
        raise PartitionError("stage1 requires adapters attached to the text encoder")
    if stage in ("stage2", "one_stage") and ("vision_adapters" not in groups or "projectors" not in groups):
        raise PartitionError(f"{stage} requires vision adapters and granularity projectors")
    if stage == "one_stage" and "text_adapters" not in groups:
        raise PartitionError("one_stage requires adapters attached to the text encoder")
    wanted = STAGE_TRAINABLE[stage]
    part = ParameterPartition()
    for g, names in groups.items():
        (part.trainable if g in wanted else part.frozen).update(names)
    return part


def apply_partition(model: nn.Module, part: ParameterPartition) -> list[nn.Parameter]:
    params = []
    for name, p in model.named_parameters():
        p.requires_grad_(name in part.trainable)
        if name in part.trainable:
            params.append(p)
    return params


def digest(tensors) -> str:
    """SHA-256 over (name, dtype, shape, bytes) of an iterable of named tensors."""
    h = hashlib.sha256()
    for name, t in sorted(tensors, key=lambda kv: kv[0]):
        t = t.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def frozen_digest(model: nn.Module, part: ParameterPartition, extra=()) -> str:
    named = [(n, p) for n, p in model.named_parameters() if n in part.frozen]
    return digest(list(named) + list(extra))
