"""Procedural object classes, pixel-masked defects, captions and shot-limited splits.

Every sample is a pure function of a per-sample seed derived from
``(global_seed, class_id, index, purpose)``, so generation order and
parallelism never change the result.  Rendered images are quantised to
multiples of 1/255 so that PNG round-trips are exact.
"""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision.transforms import InterpolationMode
from torchvision.transforms.v2 import functional as TF

IMAGE_SIZE = 64
CONTRAST_FLOOR = 0.15
DEFECT_FAMILIES = ("scratch", "hole", "stain", "crack", "texture")


class DefectPlacementError(RuntimeError):
    pass


@dataclass
class LabeledSample:
    image: np.ndarray  # (H, W, C) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    label: int
    class_id: str
    seed: int = 0
    foreground: np.ndarray | None = field(default=None, repr=False)

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        """(C, H, W) image and (H, W) mask tensors."""
        return torch.from_numpy(self.image).permute(2, 0, 1).contiguous(), torch.from_numpy(self.mask)


@dataclass(frozen=True)
class ClassSpec:
    class_id: str
    shape: str
    color: tuple[float, float, float]
    texture: str = "flat"
    size_range: tuple[float, float] = (13.0, 17.0)
    image_size: int = IMAGE_SIZE


@dataclass(frozen=True)
class DefectSpec:
    families: tuple[str, ...] = DEFECT_FAMILIES
    size_range: tuple[float, float] = (0.01, 0.12)
    count_range: tuple[int, int] = (1, 2)
    contrast_floor: float = CONTRAST_FLOOR
    max_retries: int = 50


DEFAULT_CLASSES = (
    ClassSpec("disk", "disk", (0.85, 0.55, 0.20), "flat"),
    ClassSpec("square", "square", (0.45, 0.55, 0.80), "grid"),
    ClassSpec("ring", "ring", (0.80, 0.80, 0.35), "flat"),
    ClassSpec("cross", "cross", (0.30, 0.75, 0.40), "gradient"),
    ClassSpec("triangle", "triangle", (0.85, 0.35, 0.45), "flat"),
    ClassSpec("hexagon", "hexagon", (0.65, 0.65, 0.65), "stripes"),
    ClassSpec("ellipse", "ellipse", (0.90, 0.90, 0.85), "gradient"),
    ClassSpec("star", "star", (0.95, 0.80, 0.25), "flat"),
    ClassSpec("capsule", "capsule", (0.55, 0.35, 0.75), "gradient"),
    ClassSpec("stripes", "square", (0.40, 0.70, 0.70), "stripes"),
    ClassSpec("blob", "blob", (0.60, 0.50, 0.40), "grid"),
    ClassSpec("diamond", "diamond", (0.35, 0.60, 0.90), "flat"),
)
TRAIN_CLASSES = ("disk", "square", "ring", "cross", "triangle", "hexagon", "ellipse", "star")
TEST_CLASSES = ("capsule", "stripes", "blob", "diamond")


def class_specs(ids=None) -> list[ClassSpec]:
    table = {c.class_id: c for c in DEFAULT_CLASSES}
    return [table[i] for i in (ids or table)]


def sample_seed(global_seed: int, class_id: str, index: int, purpose: str = "") -> int:
    key = f"{global_seed}|{class_id}|{index}|{purpose}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little") >> 1


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _grid(n: int):
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    return yy, xx


def _polygon(u, v, r, sides):
    # regular polygon with circumradius r, as intersection of half-planes
    apothem = r * math.cos(math.pi / sides)
    inside = np.ones_like(u, dtype=bool)
    for k in range(sides):
        a = 2 * math.pi * k / sides
        inside &= u * math.cos(a) + v * math.sin(a) <= apothem
    return inside


def _shape_mask(shape: str, u, v, r, rng) -> np.ndarray:
    d = np.hypot(u, v)
    phi = np.arctan2(v, u)
    if shape == "disk":
        return d <= r
    if shape == "square":
        return np.maximum(abs(u), abs(v)) <= 0.8 * r
    if shape == "ring":
        return (d <= r) & (d >= 0.5 * r)
    if shape == "cross":
        arm = 0.32 * r
        return ((abs(u) <= arm) & (abs(v) <= r)) | ((abs(v) <= arm) & (abs(u) <= r))
    if shape == "triangle":
        return _polygon(u, v, r, 3)
    if shape == "hexagon":
        return _polygon(u, v, r, 6)
    if shape == "ellipse":
        return (u / r) ** 2 + (v / (0.6 * r)) ** 2 <= 1.0
    if shape == "star":
        return d <= r * (0.6 + 0.4 * np.abs(np.cos(2.5 * phi)))
    if shape == "capsule":
        seg = np.clip(u, -0.55 * r, 0.55 * r)
        return np.hypot(u - seg, v) <= 0.45 * r
    if shape == "diamond":
        return abs(u) + abs(v) <= r
    if shape == "blob":
        coef = rng.uniform(-0.15, 0.15, size=(3, 2))
        rad = r * (0.85 + sum(coef[k, 0] * np.cos((k + 2) * phi) + coef[k, 1] * np.sin((k + 2) * phi)
                              for k in range(3)))
        return d <= rad
    raise ValueError(f"unknown shape {shape!r}")


def _texture(kind: str, u, v, r, rng) -> np.ndarray:
    if kind == "flat":
        return np.zeros_like(u)
    if kind == "gradient":
        return 0.12 * (u / r)
    if kind == "stripes":
        return 0.08 * np.sin(2 * math.pi * v / rng.uniform(5.0, 7.0))
    if kind == "grid":
        period = rng.uniform(6.0, 8.0)
        return 0.06 * (np.sin(2 * math.pi * u / period) + np.sin(2 * math.pi * v / period))
    raise ValueError(f"unknown texture {kind!r}")


def render_normal(spec: ClassSpec, seed: int) -> LabeledSample:
    """Defect-free rendering of one object of class ``spec``."""
    rng = np.random.default_rng(seed)
    n = spec.image_size
    yy, xx = _grid(n)
    cy, cx = n / 2 + rng.uniform(-3, 3, size=2)
    theta = rng.uniform(0, 2 * math.pi)
    r = rng.uniform(*spec.size_range)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    fg = _shape_mask(spec.shape, u, v, r, rng)

    bg_level = rng.uniform(0.08, 0.2)
    img = bg_level + 0.02 * rng.standard_normal((n, n, 3))
    color = np.clip(np.asarray(spec.color) + rng.uniform(-0.05, 0.05, size=3), 0, 1)
    obj = color + _texture(spec.texture, u, v, r, rng)[..., None] + 0.015 * rng.standard_normal((n, n, 3))
    img = np.where(fg[..., None], obj, img)
    return LabeledSample(_quantize(img), np.zeros((n, n), np.uint8), 0, spec.class_id, seed, fg)


def _blob_region(n, cy, cx, radius, rng):
    yy, xx = _grid(n)
    phi = np.arctan2(yy - cy, xx - cx)
    wobble = 1.0 + 0.25 * np.sin(3 * phi + rng.uniform(0, 2 * math.pi))
    return np.hypot(yy - cy, xx - cx) <= radius * wobble


def _stroke_region(n, points, width):
    yy, xx = _grid(n)
    region = np.zeros((n, n), bool)
    for (y0, x0), (y1, x1) in zip(points, points[1:]):
        dy, dx = y1 - y0, x1 - x0
        t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / max(dy * dy + dx * dx, 1e-9), 0, 1)
        region |= np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx)) <= width / 2
    return region


def _candidate_region(family, n, center, target_area, rng):
    cy, cx = center
    if family in ("hole", "stain", "texture"):
        return _blob_region(n, cy, cx, math.sqrt(target_area / math.pi), rng)
    width = rng.uniform(2.2, 3.2)
    length = max(target_area / width, 3.0)
    if family == "scratch":
        a = rng.uniform(0, math.pi)
        half = np.array([math.sin(a), math.cos(a)]) * length / 2
        return _stroke_region(n, [center - half, center + half], width)
    pts = [np.asarray(center, float)]
    seg = length / 3
    a = rng.uniform(0, 2 * math.pi)
    for _ in range(3):
        a += rng.uniform(-0.9, 0.9)
        pts.append(pts[-1] + seg * np.array([math.sin(a), math.cos(a)]))
    return _stroke_region(n, pts, width)


def _away(old: np.ndarray, amount: float) -> np.ndarray:
    # push intensities away from the nearer bound so the change survives clipping
    direction = np.where(old.mean(-1, keepdims=True) > 0.5, -1.0, 1.0)
    return old + direction * amount


def _paint(family, old, rng):
    if family == "hole":
        return np.broadcast_to(rng.uniform(0.0, 0.06, size=3), old.shape)
    if family == "stain":
        return 0.3 * old + 0.7 * rng.uniform(0.0, 1.0, size=3)
    if family == "texture":
        return rng.uniform(0.0, 1.0, size=old.shape)
    return _away(old, rng.uniform(0.3, 0.5))


def inject_defect(sample: LabeledSample, dspec: DefectSpec, seed: int) -> LabeledSample:
    """Return an anomalous copy of a normal sample with an exact change mask."""
    if sample.label != 0:
        raise ValueError("defects are injected into normal samples only")
    lo, hi = dspec.size_range
    if hi <= 0 or lo > hi or dspec.count_range[0] < 1:
        raise ValueError(f"degenerate defect spec: {dspec}")
    fg = sample.foreground
    if fg is None:
        raise ValueError("sample carries no foreground mask")
    rng = np.random.default_rng(seed)
    n = sample.image.shape[0]
    fg_area = int(fg.sum())
    fg_pixels = np.argwhere(fg)
    for _ in range(dspec.max_retries):
        img = sample.image.astype(np.float64)
        count = int(rng.integers(dspec.count_range[0], dspec.count_range[1] + 1))
        target = rng.uniform(max(lo, 1e-4), hi) * fg_area
        for _ in range(count):
            family = dspec.families[rng.integers(len(dspec.families))]
            center = fg_pixels[rng.integers(len(fg_pixels))] + 0.5
            region = _candidate_region(family, n, center, target / count, rng) & fg
            img[region] = _paint(family, img[region], rng)
        new = _quantize(img)
        changed = np.abs(new - sample.image).max(-1) >= dspec.contrast_floor - 1e-6
        new[~changed] = sample.image[~changed]
        frac = changed.sum() / fg_area
        if changed.any() and lo <= frac <= hi:
            return LabeledSample(new, changed.astype(np.uint8), 1, sample.class_id, seed, fg)
    raise DefectPlacementError(f"no valid defect for class {sample.class_id} after {dspec.max_retries} tries")


@dataclass(frozen=True)
class AugmentConfig:
    p: float = 0.5
    max_rotation: float = 30.0
    max_translate: float = 0.1
    scale_range: tuple[float, float] = (0.9, 1.05)
    jitter: float = 0.2


def augment(sample: LabeledSample, seed: int, cfg: AugmentConfig = AugmentConfig()) -> LabeledSample:
    """Colour jitter, rotation, affine, h-flip and v-flip, each with probability ``cfg.p``."""
    rng = np.random.default_rng(seed)
    fire = rng.random(5) < cfg.p
    params = rng.uniform(-1, 1, size=6)
    if not fire.any():
        return sample
    img = torch.from_numpy(sample.image).permute(2, 0, 1).float()
    fg = sample.foreground if sample.foreground is not None else np.zeros_like(sample.mask, bool)
    planes = torch.from_numpy(np.stack([sample.mask, fg]).astype(np.float32))
    if fire[0]:
        img = TF.adjust_brightness(img, 1 + cfg.jitter * params[0])
        img = TF.adjust_contrast(img, 1 + cfg.jitter * params[1])
    fill = [float(c) for c in img[:, 0, :].mean(-1)]
    geo = dict(interpolation=InterpolationMode.BILINEAR)
    if fire[1]:
        angle = float(cfg.max_rotation * params[2])
        img = TF.rotate(img, angle, fill=fill, **geo)
        planes = TF.rotate(planes, angle, fill=0.0, **geo)
    if fire[2]:
        n = img.shape[-1]
        shift = [float(cfg.max_translate * n * params[3]), float(cfg.max_translate * n * params[4])]
        lo, hi = cfg.scale_range
        scale = float(lo + (hi - lo) * (params[5] + 1) / 2)
        img = TF.affine(img, angle=0.0, translate=shift, scale=scale, shear=[0.0], fill=fill, **geo)
        planes = TF.affine(planes, angle=0.0, translate=shift, scale=scale, shear=[0.0], fill=0.0, **geo)
    if fire[3]:
        img, planes = TF.horizontal_flip(img), TF.horizontal_flip(planes)
    if fire[4]:
        img, planes = TF.vertical_flip(img), TF.vertical_flip(planes)
    planes = (planes >= 0.5).numpy()
    mask = planes[0].astype(np.uint8)
    image = img.clamp(0, 1).permute(1, 2, 0).numpy().astype(np.float32)
    return LabeledSample(image, mask, int(mask.any()), sample.class_id, sample.seed, planes[1])


@dataclass(frozen=True)
class SplitSpec:
    shots: int | str = "full"
    train_classes: tuple[str, ...] = TRAIN_CLASSES
    test_classes: tuple[str, ...] = TEST_CLASSES
    full_per_class: int = 128
    test_per_class: int = 64
    defect: DefectSpec = DefectSpec()

    def __post_init__(self):
        object.__setattr__(self, "train_classes", tuple(self.train_classes))
        object.__setattr__(self, "test_classes", tuple(self.test_classes))
        if set(self.train_classes) & set(self.test_classes):
            raise ValueError("train and test class sets overlap")

    @property
    def train_per_class(self) -> int:
        shots = self.full_per_class if self.shots == "full" else int(self.shots)
        if shots < 2 or shots % 2:
            raise ValueError(f"shot count must be even and >= 2, got {self.shots!r}")
        return shots


def make_sample(spec: ClassSpec, global_seed: int, index: int, anomalous: bool, purpose: str,
                dspec: DefectSpec = DefectSpec()) -> LabeledSample:
    state = "anomaly" if anomalous else "normal"
    s = sample_seed(global_seed, spec.class_id, index, f"{purpose}/{state}")
    sample = render_normal(spec, s)
    if anomalous:
        sample = inject_defect(sample, dspec, sample_seed(global_seed, spec.class_id, index, f"{purpose}/defect"))
    return sample


def _job(args):
    return make_sample(*args)


def balanced_set(classes, per_class: int, global_seed: int, purpose: str,
                 dspec: DefectSpec = DefectSpec(), workers: int = 0) -> list[LabeledSample]:
    """``per_class / 2`` normal and anomalous samples for every class, in a fixed order."""
    jobs = [(spec, global_seed, i, anomalous, purpose, dspec)
            for spec in classes for anomalous in (False, True) for i in range(per_class // 2)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_job, jobs, chunksize=16))
    return [_job(j) for j in jobs]


def make_split(spec: SplitSpec, seed: int, workers: int = 0):
    """Shot-limited 1:1 training set on the train classes, and the held-out test set."""
    train = balanced_set(class_specs(spec.train_classes), spec.train_per_class, seed, "train", spec.defect, workers)
    test = balanced_set(class_specs(spec.test_classes), spec.test_per_class, seed, "test", spec.defect, workers)
    return train, test


def make_validation(spec: SplitSpec, seed: int, per_class: int = 8) -> list[LabeledSample]:
    """Held-out images of the *seen* classes, disjoint from any training index."""
    return balanced_set(class_specs(spec.train_classes), per_class, seed, "val", spec.defect)


@dataclass
class CaptionPair:
    sample: LabeledSample
    caption: str


def caption_corpus(classes, bank, registry, n_per_class: int, seed: int,
                   anomaly_fraction: float = 0.2, purpose: str = "caption") -> list[CaptionPair]:
    """Image/caption pairs: defect images get anomaly captions, the rest normal ones."""
    from .prompts import expand

    if not classes:
        raise ValueError("no classes given")
    n_anom = int(round(n_per_class * anomaly_fraction))
    pairs = []
    for spec in classes:
        normal_caps, anomaly_caps = expand(registry[spec.class_id], bank)
        for i in range(n_per_class):
            anomalous = i < n_anom
            sample = make_sample(spec, seed, i, anomalous, purpose)
            rng = np.random.default_rng(sample_seed(seed, spec.class_id, i, purpose + "/caption"))
            caps = anomaly_caps if anomalous else normal_caps
            pairs.append(CaptionPair(sample, caps[rng.integers(len(caps))]))
    return pairs


def write_dataset(samples, root, split: str) -> list[dict]:
    """Write PNG images and masks under ``root/split/class_id`` and return manifest rows."""
    root = Path(root)
    rows, counters = [], {}
    for s in samples:
        idx = counters.get(s.class_id, 0)
        counters[s.class_id] = idx + 1
        rel = Path(split) / s.class_id
        (root / rel).mkdir(parents=True, exist_ok=True)
        img_path, mask_path = rel / f"{idx:04d}.png", rel / f"{idx:04d}_mask.png"
        Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(root / img_path)
        Image.fromarray(s.mask * 255).save(root / mask_path)
        rows.append({"path": str(img_path), "mask": str(mask_path), "label": int(s.label),
                     "class": s.class_id, "seed": int(s.seed), "split": split})
    return rows


def write_manifest(rows, path) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_dataset(root, split: str | None = None) -> list[LabeledSample]:
    root = Path(root)
    out = []
    for row in read_manifest(root / "manifest.jsonl"):
        if split is not None and row["split"] != split:
            continue
        image = np.asarray(Image.open(root / row["path"]), dtype=np.float32) / 255.0
        mask = (np.asarray(Image.open(root / row["mask"])) > 127).astype(np.uint8)
        out.append(LabeledSample(image, mask, int(row["label"]), row["class"], int(row["seed"])))
    return out


def with_defect_spec(spec: SplitSpec, **kw) -> SplitSpec:
    return replace(spec, defect=replace(spec.defect, **kw))
