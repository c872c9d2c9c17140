"""Utterance classification and phoneme-boundary decoding.

The boundary decoder follows the contrastive training signal: cosine
similarity between each pair of adjacent frame embeddings is computed over
the whole utterance (across segment borders, so boundaries are not artifacts
of the fixed partition), and a boundary is declared wherever the similarity
drops below a threshold.

Score files: one line per utterance, ``utterance_id`` then C tab-separated
logits. Boundary files: ``utterance_id`` TAB threshold TAB space-separated
frame indices.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .data import SegmentedUtterance
from .model import PhonotacticLidNet


def classify(scores: np.ndarray) -> int:
    """Index of the highest score; ties break to the lowest index."""
    scores = np.asarray(scores).reshape(-1)
    if scores.size == 0:
        raise ValueError("empty score vector")
    return int(np.argmax(scores))


def similarity_curve(z: np.ndarray) -> np.ndarray:
    """Cosine similarity of each adjacent embedding pair.

    ``z`` is (n_frames, dim) with n_frames >= 2; the result has length
    n_frames - 1 and is clamped to [-1, 1] against rounding. Zero-norm rows
    contribute similarity 0.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError(f"need at least 2 embedding rows, got shape {z.shape}")
    norms = np.linalg.norm(z, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    zn = z / safe[:, None]
    curve = np.sum(zn[:-1] * zn[1:], axis=1)
    return np.clip(curve, -1.0, 1.0)


def smooth_curve(curve: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average; window=1 returns the curve unchanged."""
    if window < 1 or window % 2 == 0:
        raise ValueError("smoothing window must be a positive odd integer")
    if window == 1:
        return np.asarray(curve, dtype=np.float64)
    pad = window // 2
    padded = np.pad(np.asarray(curve, dtype=np.float64), pad, mode="edge")
    kernel = np.full(window, 1.0 / window)
    return np.convolve(padded, kernel, mode="valid")


def detect_boundaries(curve: np.ndarray, threshold: float,
                      merge_window: int = 1) -> np.ndarray:
    """Frame indices where the similarity curve falls below ``threshold``.

    With ``merge_window`` > 1, detections within that many frames of each
    other collapse to the local similarity minimum. Threshold monotonicity
    (boundaries(t1) is a subset of boundaries(t2) for t1 <= t2) holds for the
    default merge_window of 1.
    """
    if not -1.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [-1, 1], got {threshold}")
    if merge_window < 1:
        raise ValueError("merge_window must be >= 1")
    curve = np.asarray(curve, dtype=np.float64)
    hits = np.flatnonzero(curve < threshold)
    if merge_window == 1 or hits.size == 0:
        return hits
    kept = []
    cluster = [hits[0]]
    for j in hits[1:]:
        if j - cluster[-1] < merge_window:
            cluster.append(j)
        else:
            kept.append(min(cluster, key=lambda i: (curve[i], i)))
            cluster = [j]
    kept.append(min(cluster, key=lambda i: (curve[i], i)))
    return np.asarray(kept, dtype=hits.dtype)


def boundary_recall(predicted: np.ndarray, reference: np.ndarray,
                    tolerance: int = 0) -> float:
    """Fraction of reference boundaries with a prediction within ``tolerance``."""
    reference = np.asarray(reference)
    if reference.size == 0:
        raise ValueError("reference boundary set is empty")
    predicted = np.asarray(predicted)
    if predicted.size == 0:
        return 0.0
    hit = np.abs(reference[:, None] - predicted[None, :]).min(axis=1) <= tolerance
    return float(hit.mean())


def boundary_f1(predicted: np.ndarray, reference: np.ndarray,
                tolerance: int = 0) -> float:
    predicted = np.asarray(predicted)
    reference = np.asarray(reference)
    if predicted.size == 0 or reference.size == 0:
        return 0.0
    recall = boundary_recall(predicted, reference, tolerance)
    matched = np.abs(predicted[:, None] - reference[None, :]).min(axis=1) <= tolerance
    precision = float(matched.mean())
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def tune_boundary_threshold(curves: list[np.ndarray], references: list[np.ndarray],
                            candidates: np.ndarray | None = None,
                            tolerance: int = 0) -> float:
    """Pick the threshold maximizing mean boundary F1 over held-out data.

    F1 (not recall) is the tuning criterion: recall alone is maximized by the
    degenerate threshold that marks every frame.
    """
    if len(curves) != len(references) or not curves:
        raise ValueError("need matching, non-empty curve and reference lists")
    if candidates is None:
        candidates = np.unique(np.concatenate([np.asarray(c) for c in curves]))
        # midpoints between observed similarity values, plus the extremes
        candidates = np.clip(np.concatenate([
            [-1.0], (candidates[:-1] + candidates[1:]) / 2.0, [1.0]
        ]), -1.0, 1.0)
    best_threshold, best_f1 = 0.0, -1.0
    for threshold in candidates:
        f1 = float(np.mean([
            boundary_f1(detect_boundaries(c, threshold), r, tolerance)
            for c, r in zip(curves, references)
        ]))
        if f1 > best_f1:
            best_threshold, best_f1 = float(threshold), f1
    return best_threshold


# -- model application ---------------------------------------------------


def _as_batch(utt: SegmentedUtterance) -> tuple[torch.Tensor, torch.Tensor | None]:
    x = torch.as_tensor(utt.segments, dtype=torch.float32).unsqueeze(0)
    mask = None
    if utt.frame_mask is not None:
        mask = torch.as_tensor(utt.frame_mask, dtype=torch.bool).unsqueeze(0)
    return x, mask


@torch.no_grad()
def segmentation_embeddings_for(model: PhonotacticLidNet,
                                utt: SegmentedUtterance) -> np.ndarray:
    """Per-frame segmentation embeddings (n_valid_frames, G) for one utterance."""
    model.eval()
    x, _ = _as_batch(utt)
    z = model.segmentation_embeddings(model.encode_frames(x))[0]
    return z.numpy()[: utt.n_valid_frames]


@torch.no_grad()
def score_utterance(model: PhonotacticLidNet, utt: SegmentedUtterance) -> np.ndarray:
    """Language logits (C,) for one utterance."""
    model.eval()
    x, frame_mask = _as_batch(utt)
    return model.forward_lid(x, frame_mask=frame_mask)[0].numpy()


def score_dataset(model: PhonotacticLidNet,
                  dataset: list[SegmentedUtterance]) -> tuple[list[str], np.ndarray]:
    """Score every utterance; returns (utterance_ids, (N, C) logit matrix)."""
    ids = [utt.utterance_id for utt in dataset]
    scores = np.stack([score_utterance(model, utt) for utt in dataset])
    return ids, scores


# -- file formats ----------------------------------------------------------


def write_scores(path: str | Path, ids: list[str], scores: np.ndarray) -> None:
    scores = np.asarray(scores)
    if len(ids) != scores.shape[0]:
        raise ValueError(f"{len(ids)} ids but {scores.shape[0]} score rows")
    lines = [uid + "\t" + "\t".join(format(s, ".17g") for s in row)
             for uid, row in zip(ids, scores)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scores(path: str | Path) -> tuple[list[str], np.ndarray]:
    ids, rows = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise ValueError(f"{path}:{lineno}: expected id and at least one score")
        ids.append(parts[0])
        rows.append([float(v) for v in parts[1:]])
    if not ids:
        raise ValueError(f"{path}: empty score file")
    return ids, np.asarray(rows, dtype=np.float64)


def write_boundaries(path: str | Path,
                     rows: list[tuple[str, float, np.ndarray]]) -> None:
    lines = []
    for uid, threshold, indices in rows:
        idx = " ".join(str(int(i)) for i in np.asarray(indices).reshape(-1))
        lines.append(f"{uid}\t{format(threshold, '.17g')}\t{idx}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_boundaries(path: str | Path) -> list[tuple[str, float, np.ndarray]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'id<TAB>threshold<TAB>indices'")
        uid, threshold, idx = parts
        indices = np.asarray([int(v) for v in idx.split()] if idx.strip() else [],
                             dtype=np.int64)
        rows.append((uid, float(threshold), indices))
    return rows
