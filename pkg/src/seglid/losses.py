"""Contrastive and classification losses.

The frame-level contrastive loss treats frame i as the anchor, frame i+1 as
the positive, and M non-adjacent frames of the same utterance as negatives:

    loss(i) = -log( exp(sim(z_i, z_{i+1}))
                    / sum_{j in {i+1} u Neg(i)} exp(sim(z_i, z_j)) )

with cosine similarity. The utterance-level loss averages loss(i) over every
frame that has a successor (the final frame is not an anchor), so the
normalizer is the true anchor count N-1 rather than N.
"""

from __future__ import annotations

import warnings

import torch
from torch import Tensor

NORM_EPS = 1e-12


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors; zero-norm inputs give 0 with a warning."""
    a = a.reshape(-1)
    b = b.reshape(-1)
    na = torch.linalg.vector_norm(a)
    nb = torch.linalg.vector_norm(b)
    if na.item() == 0.0 or nb.item() == 0.0:
        warnings.warn("zero-norm vector in cosine similarity; defining sim = 0")
        return torch.zeros((), dtype=a.dtype, device=a.device)
    return (a @ b) / (na * nb)


def _unit_rows(z: Tensor) -> Tensor:
    # Zero rows stay zero, so their similarity to anything is 0.
    return z / torch.linalg.vector_norm(z, dim=-1, keepdim=True).clamp_min(NORM_EPS)


def _excluded(anchor: int, n_frames: int) -> set[int]:
    return {j for j in (anchor - 1, anchor, anchor + 1) if 0 <= j < n_frames}


def sample_negatives(n_frames: int, anchor: int, m: int,
                     generator: torch.Generator | None = None) -> Tensor:
    """Draw M distinct negative frame indices for one anchor.

    Negatives are uniform without replacement over all frames of the
    utterance except the anchor and its two neighbours.
    """
    if not 0 <= anchor < n_frames:
        raise ValueError(f"anchor {anchor} outside utterance of {n_frames} frames")
    excluded = _excluded(anchor, n_frames)
    n_candidates = n_frames - len(excluded)
    if m < 1:
        raise ValueError(f"need m >= 1 negatives, got {m}")
    if m > n_candidates:
        raise ValueError(
            f"cannot draw {m} negatives from {n_candidates} non-adjacent frames "
            f"(n_frames={n_frames}, anchor={anchor})"
        )
    weights = torch.ones(n_frames)
    weights[list(excluded)] = 0.0
    return torch.multinomial(weights, m, replacement=False, generator=generator)


def sample_negative_matrix(n_frames: int, m: int,
                           generator: torch.Generator | None = None,
                           batch: int | None = None) -> Tensor:
    """Negatives for every anchor 0..n_frames-2 at once.

    Returns (n_frames-1, m), or (batch, n_frames-1, m) when ``batch`` is
    given. Requires n_frames >= m + 3 so every anchor has enough candidates.
    """
    if n_frames < m + 3:
        raise ValueError(
            f"utterance of {n_frames} frames too short to draw {m} non-adjacent negatives"
        )
    n_anchors = n_frames - 1
    weights = torch.ones(n_anchors, n_frames)
    anchors = torch.arange(n_anchors)
    weights[anchors, anchors] = 0.0
    weights[anchors, anchors + 1] = 0.0
    weights[anchors[1:], anchors[1:] - 1] = 0.0
    if batch is not None:
        weights = weights.repeat(batch, 1)
    drawn = torch.multinomial(weights, m, replacement=False, generator=generator)
    if batch is not None:
        return drawn.reshape(batch, n_anchors, m)
    return drawn


def _check_negatives(negatives: Tensor, n_frames: int) -> None:
    if negatives.ndim < 2:
        raise ValueError("negatives must be (..., n_anchors, m)")
    n_anchors = negatives.shape[-2]
    if n_anchors != n_frames - 1:
        raise ValueError(f"expected {n_frames - 1} anchor rows, got {n_anchors}")
    if negatives.numel() == 0:
        raise ValueError("empty negative set")
    if negatives.min() < 0 or negatives.max() >= n_frames:
        raise ValueError("negative index outside utterance")
    anchors = torch.arange(n_anchors).reshape((1,) * (negatives.ndim - 2) + (-1, 1))
    if bool(((negatives - anchors).abs() <= 1).any()):
        raise ValueError("negative set violates the adjacency exclusion")


def frame_nce(z: Tensor, anchor: int, negatives: Tensor) -> Tensor:
    """Contrastive loss for a single anchor frame.

    ``z`` is the (n_frames, dim) embedding matrix for one utterance and
    ``negatives`` holds M frame indices obeying the adjacency exclusion.
    """
    n_frames = z.shape[0]
    if anchor + 1 >= n_frames:
        raise ValueError("the final frame has no successor and cannot anchor the loss")
    negatives = torch.as_tensor(negatives, dtype=torch.long, device=z.device)
    bad = _excluded(anchor, n_frames)
    if any(int(j) in bad for j in negatives) or negatives.min() < 0 or negatives.max() >= n_frames:
        raise ValueError("negative set violates the adjacency exclusion")
    zn = _unit_rows(z)
    pos = zn[anchor] @ zn[anchor + 1]
    sims = torch.cat([pos.unsqueeze(0), zn[negatives] @ zn[anchor]])
    return torch.logsumexp(sims, dim=0) - pos


def nce_from_negatives(z: Tensor, negatives: Tensor) -> Tensor:
    """Mean contrastive loss over all anchors, given pre-drawn negatives.

    ``z`` is (n_frames, dim) or (batch, n_frames, dim); ``negatives`` is the
    matching (n_frames-1, m) or (batch, n_frames-1, m) index tensor. The
    batched form averages over anchors within each utterance, then over the
    batch.
    """
    squeeze = z.ndim == 2
    if squeeze:
        z = z.unsqueeze(0)
        negatives = torch.as_tensor(negatives).unsqueeze(0)
    b, n_frames, _ = z.shape
    negatives = torch.as_tensor(negatives, dtype=torch.long, device=z.device)
    _check_negatives(negatives, n_frames)
    n_anchors, m = negatives.shape[-2:]
    zn = _unit_rows(z)
    pos = (zn[:, :n_anchors] * zn[:, 1:]).sum(dim=-1)                      # (b, a)
    flat = negatives.reshape(b, n_anchors * m, 1).expand(-1, -1, z.shape[-1])
    neg = torch.gather(zn, 1, flat).reshape(b, n_anchors, m, -1)           # (b, a, m, g)
    neg_sims = torch.einsum("bag,bamg->bam", zn[:, :n_anchors], neg)
    logits = torch.cat([pos.unsqueeze(-1), neg_sims], dim=-1)              # (b, a, 1+m)
    per_utt = (torch.logsumexp(logits, dim=-1) - pos).mean(dim=-1)
    return per_utt[0] if squeeze else per_utt.mean()


def utterance_nce(z: Tensor, m: int, generator: torch.Generator | None = None) -> Tensor:
    """Draw fresh negatives and average :func:`frame_nce` over all anchors."""
    negatives = sample_negative_matrix(z.shape[0], m, generator=generator)
    return nce_from_negatives(z, negatives)


def batch_nce(z: Tensor, m: int, generator: torch.Generator | None = None) -> Tensor:
    """Utterance-level contrastive loss averaged over a (B, N, G) batch."""
    negatives = sample_negative_matrix(z.shape[1], m, generator=generator, batch=z.shape[0])
    return nce_from_negatives(z, negatives)


def lid_cross_entropy(scores: Tensor, labels: Tensor) -> Tensor:
    """Mean -log softmax(scores)[label] over the batch."""
    scores = torch.atleast_2d(scores)
    labels = torch.as_tensor(labels, dtype=torch.long, device=scores.device).reshape(-1)
    if labels.shape[0] != scores.shape[0]:
        raise ValueError(f"{scores.shape[0]} score rows but {labels.shape[0]} labels")
    if labels.numel() and (labels.min() < 0 or labels.max() >= scores.shape[1]):
        raise ValueError(f"label outside [0, {scores.shape[1]})")
    return torch.nn.functional.cross_entropy(scores, labels)


def multi_task_loss(l_lid: Tensor | float, l_nce: Tensor | float, alpha: float) -> Tensor | float:
    """alpha * l_lid + (1 - alpha) * l_nce, with alpha in [0, 1]."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * l_lid + (1.0 - alpha) * l_nce
