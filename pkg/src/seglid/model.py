"""The shared-encoder LID network.

Input is a batch of segmented utterances (B, T, K, F). A stack of kernel-1
convolutions encodes each frame independently (receptive field = 1 frame,
shorter than the minimum phoneme length). The encoder output feeds two heads:

  * a linear segmentation head producing per-frame embeddings (B, T*K, G)
    for the contrastive phoneme-segmentation objective, and
  * the LID branch: per-segment mean+std pooling, linear projection to
    segment-level phonotactic embeddings (B, T, D), layer norm, a linear lift
    to d_model, two standard transformer encoder layers, utterance-level
    mean+std pooling, and a small classifier emitting C logits.

All std pooling is population std computed as sqrt(var + 1e-8). No positional
encoding is added to the segment sequence, so the transformer stage is
permutation-equivariant over segments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

STD_EPS = 1e-8

_ACTIVATIONS = {"gelu": nn.GELU, "relu": nn.ReLU, "tanh": nn.Tanh}


@dataclass
class ModelConfig:
    n_languages: int
    feature_dim: int = 1024
    frames_per_segment: int = 20
    cnn_channels: tuple[int, ...] = (512, 512, 512)
    cnn_kernel: int = 1
    seg_embed_dim: int = 64
    phonotactic_dim: int = 64
    n_transformer_layers: int = 2
    n_heads: int = 8
    d_model: int = 512
    d_ff: int = 2048
    classifier_hidden: tuple[int, ...] = (512, 512)
    dropout: float = 0.0
    use_batchnorm: bool = True
    activation: str = "gelu"

    def __post_init__(self) -> None:
        if isinstance(self.cnn_channels, list):
            self.cnn_channels = tuple(self.cnn_channels)
        if isinstance(self.classifier_hidden, list):
            self.classifier_hidden = tuple(self.classifier_hidden)
        dims = (self.n_languages, self.feature_dim, self.seg_embed_dim,
                self.phonotactic_dim, self.n_transformer_layers, self.n_heads,
                self.d_model, self.d_ff, *self.cnn_channels, *self.classifier_hidden)
        if any(d < 1 for d in dims):
            raise ValueError("all model dimensions must be >= 1")
        if self.frames_per_segment < 2:
            raise ValueError("frames_per_segment must be >= 2")
        if self.cnn_kernel != 1:
            raise ValueError("cnn_kernel must be 1 (frame-local receptive field)")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def encoder_dim(self) -> int:
        return self.cnn_channels[-1]


def scaled_config(cfg: ModelConfig, divisor: int) -> ModelConfig:
    """Shrink every width of ``cfg`` by ``divisor`` (for desk-scale runs)."""
    def s(d: int) -> int:
        return max(1, d // divisor)

    return ModelConfig(
        n_languages=cfg.n_languages,
        feature_dim=cfg.feature_dim,
        frames_per_segment=cfg.frames_per_segment,
        cnn_channels=tuple(s(c) for c in cfg.cnn_channels),
        seg_embed_dim=s(cfg.seg_embed_dim),
        phonotactic_dim=s(cfg.phonotactic_dim),
        n_transformer_layers=cfg.n_transformer_layers,
        n_heads=min(cfg.n_heads, s(cfg.d_model)),
        d_model=s(cfg.d_model),
        d_ff=s(cfg.d_ff),
        classifier_hidden=tuple(s(c) for c in cfg.classifier_hidden),
        dropout=cfg.dropout,
        use_batchnorm=cfg.use_batchnorm,
        activation=cfg.activation,
    )


def mean_std_pool(x: Tensor, mask: Tensor | None = None) -> Tensor:
    """Concatenate mean and population std over the second-to-last axis.

    ``x`` is (..., n, d); the result is (..., 2d). ``mask`` (..., n) marks
    valid positions; unmasked positions are excluded from both statistics.
    Std is sqrt(var + 1e-8) so the gradient stays finite at zero variance.
    """
    if mask is None:
        mean = x.mean(dim=-2)
        var = x.var(dim=-2, unbiased=False)
    else:
        m = mask.to(x.dtype).unsqueeze(-1)
        count = m.sum(dim=-2).clamp_min(1.0)
        mean = (x * m).sum(dim=-2) / count
        centered = (x - mean.unsqueeze(-2)) * m
        var = centered.square().sum(dim=-2) / count
    return torch.cat([mean, torch.sqrt(var + STD_EPS)], dim=-1)


def segment_stats_pool(h: Tensor, n_segments: int, frames_per_segment: int,
                       frame_mask: Tensor | None = None) -> Tensor:
    """Pool frame encodings into per-segment mean+std vectors.

    ``h`` is (T*K, H) or (B, T*K, H) with exactly T*K rows per utterance;
    returns (T, 2H) or (B, T, 2H).
    """
    squeeze = h.ndim == 2
    if squeeze:
        h = h.unsqueeze(0)
        if frame_mask is not None:
            frame_mask = frame_mask.reshape(1, -1)
    b, n, d = h.shape
    if n != n_segments * frames_per_segment:
        raise ValueError(
            f"got {n} frame rows, expected T*K = {n_segments}*{frames_per_segment}"
        )
    h = h.reshape(b, n_segments, frames_per_segment, d)
    if frame_mask is not None:
        frame_mask = frame_mask.reshape(b, n_segments, frames_per_segment)
    pooled = mean_std_pool(h, frame_mask)
    return pooled[0] if squeeze else pooled


class PhonotacticLidNet(nn.Module):
    """Shared frame encoder with segmentation and LID heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        act = _ACTIVATIONS[cfg.activation]

        layers: list[nn.Module] = []
        in_ch = cfg.feature_dim
        for out_ch in cfg.cnn_channels:
            layers.append(nn.Conv1d(in_ch, out_ch, kernel_size=cfg.cnn_kernel))
            if cfg.use_batchnorm:
                layers.append(nn.BatchNorm1d(out_ch))
            layers.append(act())
            in_ch = out_ch
        self.encoder = nn.Sequential(*layers)

        self.seg_head = nn.Linear(cfg.encoder_dim, cfg.seg_embed_dim)

        self.phonotactic_proj = nn.Linear(2 * cfg.encoder_dim, cfg.phonotactic_dim)
        self.pre_norm = nn.LayerNorm(cfg.phonotactic_dim)
        self.lift = nn.Linear(cfg.phonotactic_dim, cfg.d_model)
        encoder_layer = nn.TransformerEncoderLayer(
            d_model=cfg.d_model, nhead=cfg.n_heads, dim_feedforward=cfg.d_ff,
            dropout=cfg.dropout, activation="gelu", batch_first=True,
        )
        self.transformer = nn.TransformerEncoder(encoder_layer, cfg.n_transformer_layers)

        clf: list[nn.Module] = []
        in_d = 2 * cfg.d_model
        for hidden in cfg.classifier_hidden:
            clf += [nn.Linear(in_d, hidden), act()]
            in_d = hidden
        clf.append(nn.Linear(in_d, cfg.n_languages))
        self.classifier = nn.Sequential(*clf)

    # -- parameter groups -------------------------------------------------

    def pretrain_parameters(self) -> list[nn.Parameter]:
        """Encoder + segmentation head: what contrastive pretraining updates."""
        return list(self.encoder.parameters()) + list(self.seg_head.parameters())

    def lid_parameters(self) -> list[nn.Parameter]:
        """Everything except the segmentation head."""
        seg = set(id(p) for p in self.seg_head.parameters())
        return [p for p in self.parameters() if id(p) not in seg]

    # -- forward ops -------------------------------------------------------

    def encode_frames(self, x: Tensor) -> Tensor:
        """(B, T, K, F) -> (B, T*K, H). Kernel-1 convs keep frames independent."""
        if x.ndim != 4:
            raise ValueError(f"expected (B, T, K, F), got shape {tuple(x.shape)}")
        b, t, k, f = x.shape
        if f != self.cfg.feature_dim:
            raise ValueError(f"feature dim {f} != configured {self.cfg.feature_dim}")
        h = x.reshape(b, t * k, f).transpose(1, 2)  # (B, F, T*K)
        h = self.encoder(h)
        return h.transpose(1, 2)

    def segmentation_embeddings(self, h: Tensor) -> Tensor:
        """(B, T*K, H) -> (B, T*K, G) per-frame linear projection."""
        if h.shape[-1] != self.cfg.encoder_dim:
            raise ValueError(f"encoder dim {h.shape[-1]} != configured {self.cfg.encoder_dim}")
        return self.seg_head(h)

    def project_phonotactic(self, stats: Tensor) -> Tensor:
        """(B, T, 2H) -> (B, T, D) segment-level phonotactic embeddings."""
        if stats.shape[-1] != 2 * self.cfg.encoder_dim:
            raise ValueError(
                f"pooled dim {stats.shape[-1]} != 2H = {2 * self.cfg.encoder_dim}"
            )
        return self.phonotactic_proj(stats)

    def contextualize(self, e: Tensor, seg_mask: Tensor | None = None) -> Tensor:
        """(B, T, D) -> (B, T, d_model) via layer norm, lift, and the encoder stack.

        ``seg_mask`` (B, T, bool) marks valid segments; padded segments are
        excluded from attention.
        """
        if e.ndim != 3 or e.shape[1] < 1:
            raise ValueError(f"expected (B, T>=1, D), got shape {tuple(e.shape)}")
        u = self.lift(self.pre_norm(e))
        padding = None if seg_mask is None else ~seg_mask
        return self.transformer(u, src_key_padding_mask=padding)

    def classify_utterance(self, u: Tensor, seg_mask: Tensor | None = None) -> Tensor:
        """(B, T, d_model) -> (B, C) logits via utterance mean+std pooling."""
        pooled = mean_std_pool(u, seg_mask)
        return self.classifier(pooled)

    def forward_lid(self, x: Tensor, seg_mask: Tensor | None = None,
                    frame_mask: Tensor | None = None) -> Tensor:
        """LID branch only: (B, T, K, F) -> (B, C) logits."""
        b, t, k, _ = x.shape
        h = self.encode_frames(x)
        stats = segment_stats_pool(h, t, k, frame_mask)
        e = self.project_phonotactic(stats)
        u = self.contextualize(e, seg_mask)
        return self.classify_utterance(u, seg_mask)

    def forward(self, x: Tensor, seg_mask: Tensor | None = None,
                frame_mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Both heads off one shared encoding.

        Returns ``(logits (B, C), seg_embeddings (B, T*K, G))``.
        """
        b, t, k, _ = x.shape
        h = self.encode_frames(x)
        z = self.segmentation_embeddings(h)
        stats = segment_stats_pool(h, t, k, frame_mask)
        e = self.project_phonotactic(stats)
        u = self.contextualize(e, seg_mask)
        return self.classify_utterance(u, seg_mask), z


def build_model(cfg: ModelConfig, seed: int | None = None) -> PhonotacticLidNet:
    """Construct a model, optionally with deterministic parameter init."""
    if seed is not None:
        torch.manual_seed(seed)
    return PhonotacticLidNet(cfg)
