"""AUROC metrics, dataset evaluation, the zero-shot protocol and diagnostic exports."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .prompts import class_anchor_tensor, expand


class UndefinedMetricError(ValueError):
    pass


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with midrank tie handling, via one sort."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative label")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    # midrank of each distinct value (1-based), doubled to stay integral
    ends = np.cumsum(counts)
    twice_midrank = 2 * ends - counts + 1
    twice_rank_sum = int(twice_midrank[inverse[y]].sum())
    twice_u = twice_rank_sum - n_pos * (n_pos + 1)
    return twice_u / (2 * n_pos * n_neg)


def _safe_auroc(scores, labels):
    try:
        return auroc(scores, labels)
    except UndefinedMetricError:
        return None


@torch.no_grad()
def predict_dataset(detector, samples, anchors: dict, batch_size: int = 64):
    """(scores (n,), maps (n, H, W)) in dataset order."""
    detector.eval()
    dtype = detector.backbone.dtype
    scores, maps = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = torch.stack([s.tensors()[0] for s in chunk]).to(dtype)
        pairs = torch.stack([anchors[s.class_id] for s in chunk]).to(dtype)
        p_cls, p_seg = detector.predict(images, pairs)
        scores.append(p_cls[:, 1].double().numpy())
        maps.append(p_seg[..., 1].double().numpy())
    return np.concatenate(scores), np.concatenate(maps)


def metrics_from_predictions(samples, scores, maps) -> dict:
    labels = np.array([s.label for s in samples])
    masks = np.stack([s.mask for s in samples])
    out = {
        "image_auroc": _safe_auroc(scores, labels),
        "pixel_auroc": _safe_auroc(maps, masks),
        "n_images": len(samples),
        "per_class": {},
    }
    classes = np.array([s.class_id for s in samples])
    for cid in sorted(set(classes)):
        sel = classes == cid
        out["per_class"][cid] = {
            "image_auroc": _safe_auroc(scores[sel], labels[sel]),
            "pixel_auroc": _safe_auroc(maps[sel], masks[sel]),
            "n_images": int(sel.sum()),
        }
    return out


def evaluate(detector, samples, anchors: dict, batch_size: int = 64) -> dict:
    """Image AUROC over scores, pixel AUROC over all pixels pooled across the dataset."""
    scores, maps = predict_dataset(detector, samples, anchors, batch_size)
    return metrics_from_predictions(samples, scores, maps)


@torch.no_grad()
def anchors_for(backbone, class_ids, bank, registry) -> dict[str, torch.Tensor]:
    """Fresh (T_N, T_A) pairs for ``class_ids`` from the backbone's current text encoder."""
    backbone.eval()
    pairs = class_anchor_tensor([registry[c] for c in class_ids], bank, backbone)
    return {c: pairs[i].clone() for i, c in enumerate(class_ids)}


def zero_shot_protocol(bundle, test_samples, bank, registry, trained_classes=(), temperature: float = 0.07,
                       batch_size: int = 64) -> dict:
    """Evaluate on held-out classes with anchors computed on the fly, no per-class training."""
    test_classes = sorted({s.class_id for s in test_samples})
    overlap = set(test_classes) & set(trained_classes)
    if overlap:
        raise ValueError(f"held-out classes were used in training: {sorted(overlap)}")
    anchors = anchors_for(bundle.backbone, test_classes, bank, registry)
    metrics = evaluate(bundle.detector(temperature), test_samples, anchors, batch_size)
    metrics["anchor_entanglement"] = {c: float(a[0] @ a[1]) for c, a in anchors.items()}
    return metrics


@torch.no_grad()
def prompt_embeddings(backbone, class_ids, bank, registry):
    """Embeddings of every expanded prompt with (class, state, prompt) row labels."""
    backbone.eval()
    rows, texts = [], []
    for cid in class_ids:
        normal, anomaly = expand(registry[cid], bank)
        rows += [(cid, "normal", p) for p in normal] + [(cid, "anomaly", p) for p in anomaly]
        texts += normal + anomaly
    return backbone.encode_prompts(texts).double(), rows


def normal_anomaly_block_mean(sim: np.ndarray, rows) -> float:
    """Mean similarity between normal and anomaly prompts of the same class."""
    vals = []
    for cid in sorted({r[0] for r in rows}):
        n = [i for i, r in enumerate(rows) if r[0] == cid and r[1] == "normal"]
        a = [i for i, r in enumerate(rows) if r[0] == cid and r[1] == "anomaly"]
        vals.append(sim[np.ix_(n, a)].mean())
    return float(np.mean(vals))


def export_diagnostics(bundle, class_ids, bank, registry, out_dir) -> dict:
    """Write the prompt similarity matrix and a labelled embedding dump for external t-SNE."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    emb, rows = prompt_embeddings(bundle.backbone, class_ids, bank, registry)
    sim = (emb @ emb.t()).numpy()
    labels = [f"{c}|{s}|{p}" for c, s, p in rows]
    with open(out / "similarity.tsv", "w") as fh:
        fh.write("label\t" + "\t".join(labels) + "\n")
        for lab, row in zip(labels, sim):
            fh.write(lab + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
    with open(out / "embeddings.tsv", "w") as fh:
        fh.write("class\tstate\tprompt\t" + "\t".join(f"e{i}" for i in range(emb.shape[1])) + "\n")
        for (c, s, p), vec in zip(rows, emb.numpy()):
            fh.write(f"{c}\t{s}\t{p}\t" + "\t".join(repr(float(v)) for v in vec) + "\n")
    summary = {"rows": len(rows), "stage": bundle.stage,
               "normal_anomaly_block_mean": normal_anomaly_block_mean(sim, rows)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return {"similarity": sim, "rows": rows, **summary}


def read_similarity(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")[1:]
        body = [line.rstrip("\n").split("\t") for line in fh]
    return header, np.array([[float(v) for v in r[1:]] for r in body])
