"""Central finite-difference gradient checking for model ops and losses.

Every check builds a scalar function of explicit float64 leaf tensors, takes
autograd gradients, and compares them against central differences computed by
re-evaluating the function (the finite differences are computed here, not by
torch machinery). The comparison is a vector-level relative error over the
sampled coordinates of each leaf.
"""

from __future__ import annotations

import numpy as np
import torch

from seglid.losses import (frame_nce, lid_cross_entropy, multi_task_loss,
                           nce_from_negatives, sample_negative_matrix)
from seglid.model import ModelConfig, build_model, segment_stats_pool

REL_TOL = 1e-4

TINY_CONFIG = ModelConfig(
    n_languages=3, feature_dim=5, frames_per_segment=4,
    cnn_channels=(6, 6, 6), seg_embed_dim=4, phonotactic_dim=4,
    n_transformer_layers=2, n_heads=2, d_model=8, d_ff=12,
    classifier_hidden=(7, 7),
)


def central_diff_check(scalar_fn, leaves: list[torch.Tensor], h: float = 1e-6,
                       max_coords: int = 64, seed: int = 0) -> float:
    """Worst per-leaf relative error between autograd and central differences."""
    value = scalar_fn()
    grads = torch.autograd.grad(value, leaves)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf, grad in zip(leaves, grads):
        flat = leaf.detach().reshape(-1)
        gflat = grad.reshape(-1)
        n = flat.numel()
        coords = (np.arange(n) if n <= max_coords
                  else np.sort(rng.choice(n, size=max_coords, replace=False)))
        analytic = np.empty(len(coords))
        numeric = np.empty(len(coords))
        with torch.no_grad():
            for k, c in enumerate(coords):
                c = int(c)
                analytic[k] = float(gflat[c])
                orig = float(flat[c])
                flat[c] = orig + h
                up = float(scalar_fn())
                flat[c] = orig - h
                down = float(scalar_fn())
                flat[c] = orig
                numeric[k] = (up - down) / (2.0 * h)
        err = np.linalg.norm(analytic - numeric)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-10)
        worst = max(worst, err / scale)
    return worst


def _tiny_model(seed: int = 0):
    model = build_model(TINY_CONFIG, seed=seed).double()
    model.train()
    return model


def _weighted(out: torch.Tensor, seed: int = 1) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(out.shape, generator=gen, dtype=out.dtype)
    return (w * out).sum()


def _randn(*shape, seed: int = 2, grad: bool = True) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    t = torch.randn(*shape, generator=gen, dtype=torch.float64)
    return t.requires_grad_(grad)


def check_encode_frames() -> float:
    model = _tiny_model()
    x = _randn(2, 3, 4, 5, seed=3)
    leaves = [x] + list(model.encoder.parameters())
    return central_diff_check(lambda: _weighted(model.encode_frames(x)), leaves)


def check_segmentation_head() -> float:
    model = _tiny_model()
    h = _randn(2, 12, 6, seed=4)
    leaves = [h] + list(model.seg_head.parameters())
    return central_diff_check(lambda: _weighted(model.segmentation_embeddings(h)), leaves)


def check_segment_stats_pool() -> float:
    h = _randn(2, 12, 6, seed=5)
    return central_diff_check(lambda: _weighted(segment_stats_pool(h, 3, 4)), [h])


def check_phonotactic_projection() -> float:
    model = _tiny_model()
    stats = _randn(2, 3, 12, seed=6)
    leaves = [stats] + list(model.phonotactic_proj.parameters())
    return central_diff_check(lambda: _weighted(model.project_phonotactic(stats)), leaves)


def check_transformer() -> float:
    model = _tiny_model()
    e = _randn(2, 3, 4, seed=7)
    leaves = [e] + list(model.pre_norm.parameters()) + list(model.lift.parameters()) \
        + list(model.transformer.parameters())
    return central_diff_check(lambda: _weighted(model.contextualize(e)), leaves,
                              max_coords=24)


def check_utterance_classifier() -> float:
    model = _tiny_model()
    u = _randn(2, 3, 8, seed=8)
    leaves = [u] + list(model.classifier.parameters())
    return central_diff_check(lambda: _weighted(model.classify_utterance(u)), leaves)


def check_full_forward_multi_task() -> float:
    """Composite graph: both heads, combined with the multi-task weighting."""
    model = _tiny_model()
    x = _randn(2, 3, 4, 5, seed=9)
    labels = torch.tensor([0, 2])
    gen = torch.Generator().manual_seed(10)
    negatives = sample_negative_matrix(12, 3, generator=gen, batch=2)

    def fn():
        logits, z = model(x)
        return multi_task_loss(lid_cross_entropy(logits, labels),
                               nce_from_negatives(z, negatives), 0.7)

    leaves = [x] + list(model.parameters())
    return central_diff_check(fn, leaves, max_coords=16)


def check_frame_nce() -> float:
    z = _randn(9, 4, seed=11)
    negatives = torch.tensor([0, 5, 8])
    return central_diff_check(lambda: frame_nce(z, 2, negatives), [z])


def check_utterance_nce() -> float:
    z = _randn(10, 4, seed=12)
    gen = torch.Generator().manual_seed(13)
    negatives = sample_negative_matrix(10, 3, generator=gen)
    return central_diff_check(lambda: nce_from_negatives(z, negatives), [z])


def check_lid_cross_entropy() -> float:
    scores = _randn(4, 3, seed=14)
    labels = torch.tensor([0, 2, 1, 1])
    return central_diff_check(lambda: lid_cross_entropy(scores, labels), [scores])


def check_multi_task_combination() -> float:
    parts = _randn(2, seed=15)
    return central_diff_check(
        lambda: multi_task_loss(parts[0].square(), parts[1].exp(), 0.25), [parts])


OP_CHECKS = {
    "encode_frames": check_encode_frames,
    "segmentation_head": check_segmentation_head,
    "segment_stats_pool": check_segment_stats_pool,
    "phonotactic_projection": check_phonotactic_projection,
    "transformer": check_transformer,
    "utterance_classifier": check_utterance_classifier,
    "full_forward_multi_task": check_full_forward_multi_task,
    "frame_nce": check_frame_nce,
    "utterance_nce": check_utterance_nce,
    "lid_cross_entropy": check_lid_cross_entropy,
    "multi_task_combination": check_multi_task_combination,
}
