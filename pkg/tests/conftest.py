import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from seglid.data import SegmentedUtterance, partition  # noqa: E402
from seglid.model import ModelConfig, build_model  # noqa: E402


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(
        n_languages=3, feature_dim=5, frames_per_segment=4,
        cnn_channels=(6, 6, 6), seg_embed_dim=4, phonotactic_dim=4,
        n_transformer_layers=2, n_heads=2, d_model=8, d_ff=12,
        classifier_hidden=(7, 7),
    )


@pytest.fixture
def tiny_model(tiny_config):
    model = build_model(tiny_config, seed=0)
    model.eval()
    return model


def make_labeled_dataset(n_utts: int, n_frames: int, k: int, feature_dim: int,
                         n_languages: int, seed: int) -> list[SegmentedUtterance]:
    """Random labeled utterances with a weak class-dependent mean shift."""
    rng = np.random.default_rng(seed)
    dataset = []
    for u in range(n_utts):
        label = u % n_languages
        frames = rng.standard_normal((n_frames, feature_dim)) + 0.5 * label
        from seglid.data import FeatureSequence

        utt = partition(FeatureSequence(frames=frames.astype(np.float32),
                                        utterance_id=f"u{u:03d}"), k=k)
        utt.label = label
        dataset.append(utt)
    return dataset


def clone_params(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {name: p.detach().clone() for name, p in model.named_parameters()}


def params_bitwise_equal(a: dict[str, torch.Tensor], b: dict[str, torch.Tensor]) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)
