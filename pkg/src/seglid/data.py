"""Feature ingestion, segment partitioning, manifests, and synthetic corpora.

Feature files are binary, little-endian, bit-exact:
    header  = magic b"PHOF", u32 version, u32 n_frames, u32 feature_dim
    payload = n_frames * feature_dim float32, row-major

Manifests are UTF-8 text, one utterance per line, tab-separated:
    <feature_file_path> <TAB> <label> <TAB> <n_frames>
An optional label-map file ("label<TAB>index") pins label indices; without
one, indices are assigned by first appearance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"PHOF"
FEATURE_VERSION = 1
FEATURE_SUFFIX = ".phof"

# Frame geometry of the upstream feature extractor (25 ms window, 20 ms step).
FRAME_STEP_MS = 20.0
FRAME_WINDOW_MS = 25.0

DEFAULT_FRAMES_PER_SEGMENT = 20  # ~400 ms per segment at a 20 ms step


@dataclass
class FeatureSequence:
    """Frame-level features of one utterance, shape (n_frames, feature_dim)."""

    frames: np.ndarray
    utterance_id: str

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise ValueError(
                f"{self.utterance_id}: frames must be 2-D, got shape {self.frames.shape}"
            )
        n, f = self.frames.shape
        if n < 1 or f < 1:
            raise ValueError(f"{self.utterance_id}: empty feature matrix {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"{self.utterance_id}: non-finite feature values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class SegmentedUtterance:
    """An utterance partitioned into fixed-length segments.

    ``segments`` has shape (T, K, F). ``frame_mask`` (T, K, bool) marks real
    frames and is only present when zero-padding was applied.
    """

    segments: np.ndarray
    utterance_id: str
    label: int | None = None
    frame_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.segments = np.asarray(self.segments)
        if self.segments.ndim != 3:
            raise ValueError(
                f"{self.utterance_id}: segments must be (T, K, F), got {self.segments.shape}"
            )
        t, k, f = self.segments.shape
        if t < 1 or k < 2 or f < 1:
            raise ValueError(f"{self.utterance_id}: bad segment shape {self.segments.shape}")
        if not np.all(np.isfinite(self.segments)):
            raise ValueError(f"{self.utterance_id}: non-finite segment values")
        if self.frame_mask is not None:
            self.frame_mask = np.asarray(self.frame_mask, dtype=bool)
            if self.frame_mask.shape != (t, k):
                raise ValueError(
                    f"{self.utterance_id}: frame_mask shape {self.frame_mask.shape} != {(t, k)}"
                )

    @property
    def n_segments(self) -> int:
        return self.segments.shape[0]

    @property
    def frames_per_segment(self) -> int:
        return self.segments.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.segments.shape[2]

    @property
    def n_valid_frames(self) -> int:
        if self.frame_mask is None:
            return self.segments.shape[0] * self.segments.shape[1]
        return int(self.frame_mask.sum())


@dataclass
class ManifestEntry:
    path: str
    label: str
    n_frames: int


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    label_map: dict[str, int]

    def __post_init__(self) -> None:
        indices = sorted(self.label_map.values())
        if indices != list(range(len(self.label_map))):
            raise ValueError(f"label_map indices must be exactly 0..C-1, got {indices}")
        for e in self.entries:
            if e.label not in self.label_map:
                raise ValueError(f"entry {e.path!r} has label {e.label!r} not in label map")

    @property
    def n_languages(self) -> int:
        return len(self.label_map)

    def label_names(self) -> list[str]:
        inv = {i: name for name, i in self.label_map.items()}
        return [inv[i] for i in range(len(inv))]


@dataclass
class SyntheticLanguageSpec:
    """Markov phone-sequence generator for one synthetic language.

    Frames are emitted as ``phone_means[state] + noise_std * N(0, I)``; the
    state dwells a uniform number of frames in ``dwell_frames`` before
    transitioning per the row-stochastic ``transition`` matrix.
    """

    name: str
    phone_means: np.ndarray
    transition: np.ndarray
    dwell_frames: tuple[int, int] = (3, 8)
    noise_std: float = 0.0

    def __post_init__(self) -> None:
        self.phone_means = np.asarray(self.phone_means, dtype=np.float64)
        self.transition = np.asarray(self.transition, dtype=np.float64)
        p = self.phone_means.shape[0]
        if self.phone_means.ndim != 2 or p < 1:
            raise ValueError(f"{self.name}: phone_means must be (n_phones, F)")
        if self.transition.shape != (p, p):
            raise ValueError(f"{self.name}: transition must be {p}x{p}")
        if np.any(self.transition < 0):
            raise ValueError(f"{self.name}: negative transition probability")
        rowsums = self.transition.sum(axis=1)
        if np.any(np.abs(rowsums - 1.0) > 1e-9):
            raise ValueError(f"{self.name}: transition rows must sum to 1, got {rowsums}")
        lo, hi = self.dwell_frames
        if lo < 2 or hi < lo:
            raise ValueError(f"{self.name}: dwell_frames must satisfy 2 <= min <= max")
        if self.noise_std < 0:
            raise ValueError(f"{self.name}: noise_std must be >= 0")

    @property
    def n_phones(self) -> int:
        return self.phone_means.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.phone_means.shape[1]


@dataclass
class SynthUtterance:
    """One synthetic utterance plus its latent phone ids (ground truth)."""

    features: FeatureSequence
    label: int
    phone_ids: np.ndarray = field(repr=False)


def write_feature_file(path: str | Path, seq: FeatureSequence) -> None:
    """Write ``seq`` in the binary feature-file format (bit-exact float32)."""
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    header = FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, *frames.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(frames.tobytes(order="C"))


def read_feature_file(path: str | Path, utterance_id: str | None = None) -> FeatureSequence:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file (bad magic)")
    version, n_frames, feature_dim = struct.unpack("<III", raw[4:16])
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature-file version {version}")
    expected = 16 + 4 * n_frames * feature_dim
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated payload ({len(raw)} bytes, expected {expected})")
    frames = np.frombuffer(raw, dtype="<f4", offset=16).reshape(n_frames, feature_dim)
    return FeatureSequence(frames=frames.copy(), utterance_id=utterance_id or path.stem)


def partition(seq: FeatureSequence, k: int = DEFAULT_FRAMES_PER_SEGMENT,
              policy: str = "drop") -> SegmentedUtterance:
    """Partition an utterance into non-overlapping segments of ``k`` frames.

    policy="drop" keeps T = floor(n_frames / k) segments and discards the
    tail; policy="pad" keeps every frame, zero-padding the final partial
    segment and recording a frame validity mask.
    """
    if k < 2:
        raise ValueError(f"frames per segment must be >= 2, got {k}")
    if policy not in ("drop", "pad"):
        raise ValueError(f"unknown tail policy {policy!r}")
    n, f = seq.frames.shape
    if policy == "drop":
        t = n // k
        if t == 0:
            raise ValueError(
                f"{seq.utterance_id}: utterance too short ({n} frames < {k})"
            )
        segments = seq.frames[: t * k].reshape(t, k, f).copy()
        return SegmentedUtterance(segments=segments, utterance_id=seq.utterance_id)
    t = -(-n // k)
    padded = np.zeros((t * k, f), dtype=seq.frames.dtype)
    padded[:n] = seq.frames
    mask = np.zeros(t * k, dtype=bool)
    mask[:n] = True
    if n % k == 0:
        return SegmentedUtterance(segments=padded.reshape(t, k, f),
                                  utterance_id=seq.utterance_id)
    return SegmentedUtterance(segments=padded.reshape(t, k, f),
                              utterance_id=seq.utterance_id,
                              frame_mask=mask.reshape(t, k))


def flatten_segments(utt: SegmentedUtterance) -> np.ndarray:
    """Inverse view of :func:`partition`: the (T*K, F) frame stream."""
    t, k, f = utt.segments.shape
    return utt.segments.reshape(t * k, f)


def energy_vad(seq: FeatureSequence, threshold: float) -> FeatureSequence:
    """Drop frames whose mean-square energy falls below ``threshold``."""
    energy = np.mean(np.square(seq.frames.astype(np.float64)), axis=1)
    keep = energy >= threshold
    if not np.any(keep):
        raise ValueError(f"{seq.utterance_id}: VAD threshold {threshold} removed every frame")
    return FeatureSequence(frames=seq.frames[keep], utterance_id=seq.utterance_id)


def load_label_map(path: str | Path) -> dict[str, int]:
    label_map: dict[str, int] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'label<TAB>index', got {line!r}")
        label, idx = parts[0], parts[1]
        try:
            label_map[label] = int(idx)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-integer index {idx!r}") from None
    if not label_map:
        raise ValueError(f"{path}: empty label map")
    return label_map


def save_label_map(path: str | Path, label_map: dict[str, int]) -> None:
    lines = [f"{name}\t{idx}" for name, idx in sorted(label_map.items(), key=lambda kv: kv[1])]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path, label_map: dict[str, int] | None = None) -> Manifest:
    """Parse a manifest file.

    Without an explicit ``label_map``, indices follow first appearance in
    file order. With one, unknown labels are an error.
    """
    path = Path(path)
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(
                f"{path}:{lineno}: expected 'path<TAB>label<TAB>n_frames', got {line!r}"
            )
        fpath, label, n_frames_s = parts
        try:
            n_frames = int(n_frames_s)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-integer n_frames {n_frames_s!r}") from None
        if n_frames < 1:
            raise ValueError(f"{path}:{lineno}: n_frames must be >= 1, got {n_frames}")
        if label_map is not None:
            if label not in label_map:
                raise ValueError(f"{path}:{lineno}: label {label!r} not in explicit label map")
        elif label not in seen:
            seen[label] = len(seen)
        entries.append(ManifestEntry(path=fpath, label=label, n_frames=n_frames))
    if not entries:
        raise ValueError(f"{path}: empty manifest")
    return Manifest(entries=entries, label_map=dict(label_map) if label_map else seen)


def save_manifest(path: str | Path, manifest: Manifest) -> None:
    lines = [f"{e.path}\t{e.label}\t{e.n_frames}" for e in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(manifest: Manifest, base_dir: str | Path,
                 k: int = DEFAULT_FRAMES_PER_SEGMENT,
                 policy: str = "drop") -> list[SegmentedUtterance]:
    """Read and partition every utterance in ``manifest``.

    Relative feature paths are resolved against ``base_dir``.
    """
    base = Path(base_dir)
    out = []
    for entry in manifest.entries:
        p = Path(entry.path)
        if not p.is_absolute():
            p = base / p
        seq = read_feature_file(p)
        if seq.n_frames != entry.n_frames:
            raise ValueError(
                f"{p}: manifest says {entry.n_frames} frames, file has {seq.n_frames}"
            )
        utt = partition(seq, k=k, policy=policy)
        utt.label = manifest.label_map[entry.label]
        out.append(utt)
    return out


def _sample_markov_utterance(spec: SyntheticLanguageSpec, n_frames: int,
                             rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = spec.dwell_frames
    phone_ids = np.empty(n_frames, dtype=np.int64)
    state = int(rng.integers(spec.n_phones))
    pos = 0
    while pos < n_frames:
        dwell = int(rng.integers(lo, hi + 1))
        end = min(pos + dwell, n_frames)
        phone_ids[pos:end] = state
        pos = end
        state = int(rng.choice(spec.n_phones, p=spec.transition[state]))
    frames = spec.phone_means[phone_ids]
    if spec.noise_std > 0:
        frames = frames + spec.noise_std * rng.standard_normal(frames.shape)
    return frames.astype(np.float32), phone_ids


def synth_corpus(specs: list[SyntheticLanguageSpec], n_utts: int, n_frames: int,
                 seed: int) -> list[SynthUtterance]:
    """Generate a balanced synthetic corpus.

    Utterance ``u`` is drawn from ``specs[u % len(specs)]`` with its own RNG
    stream spawned from ``seed``, so output is deterministic and utterances
    are independent.
    """
    if len(specs) < 2:
        raise ValueError("need at least 2 language specs")
    dims = {s.feature_dim for s in specs}
    if len(dims) != 1:
        raise ValueError(f"language specs disagree on feature_dim: {sorted(dims)}")
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    streams = np.random.SeedSequence(seed).spawn(n_utts)
    corpus = []
    for u in range(n_utts):
        label = u % len(specs)
        rng = np.random.Generator(np.random.PCG64(streams[u]))
        frames, phone_ids = _sample_markov_utterance(specs[label], n_frames, rng)
        seq = FeatureSequence(frames=frames, utterance_id=f"utt_{u:05d}_{specs[label].name}")
        corpus.append(SynthUtterance(features=seq, label=label, phone_ids=phone_ids))
    return corpus


def build_synthetic_languages(n_languages: int | list[str], feature_dim: int,
                              n_phones: int, seed: int,
                              n_shared_phones: int = 0,
                              cycle_weight: float = 0.6,
                              preference_strength: float = 2.0,
                              dwell_frames: tuple[int, int] = (3, 8),
                              noise_std: float = 0.0,
                              mean_scale: float = 1.0) -> list[SyntheticLanguageSpec]:
    """Draw a family of related synthetic languages.

    Each language mixes a language-specific phone-transition cycle (weight
    ``cycle_weight``) with a language-specific phone-preference distribution
    (Dirichlet, concentration ``preference_strength``), so languages differ
    in both bigram structure and phone frequencies. The first
    ``n_shared_phones`` phone means are shared across languages; the rest are
    language-private. Tighter sharing and higher noise make the corpus harder.
    """
    names = ([f"lang_{chr(ord('a') + i)}" for i in range(n_languages)]
             if isinstance(n_languages, int) else list(n_languages))
    if n_shared_phones > n_phones:
        raise ValueError("n_shared_phones cannot exceed n_phones")
    if not 0.0 <= cycle_weight <= 1.0:
        raise ValueError("cycle_weight must be in [0, 1]")
    rng = np.random.Generator(np.random.PCG64(seed))
    shared = mean_scale * rng.standard_normal((n_shared_phones, feature_dim))
    specs = []
    for name in names:
        private = mean_scale * rng.standard_normal((n_phones - n_shared_phones, feature_dim))
        means = np.concatenate([shared, private], axis=0)
        cycle = rng.permutation(n_phones)
        preference = rng.dirichlet(np.full(n_phones, preference_strength))
        transition = np.tile((1.0 - cycle_weight) * preference, (n_phones, 1))
        transition[np.arange(n_phones), cycle] += cycle_weight
        transition /= transition.sum(axis=1, keepdims=True)
        specs.append(SyntheticLanguageSpec(name=name, phone_means=means,
                                           transition=transition,
                                           dwell_frames=dwell_frames,
                                           noise_std=noise_std))
    return specs


def phone_change_points(phone_ids: np.ndarray) -> np.ndarray:
    """Frame indices b where phone_ids[b] != phone_ids[b+1]."""
    phone_ids = np.asarray(phone_ids)
    return np.flatnonzero(phone_ids[:-1] != phone_ids[1:])


def default_synth_config() -> dict:
    """Built-in 3-language synthetic recipe used by the CLI and test harness.

    Languages share the full phone inventory and differ in transition
    structure and phone preferences; the noise level is set so a LID-only
    model performs well but not perfectly.
    """
    return {
        "seed": 1207,
        "n_utterances": 600,
        "n_frames": 160,
        "feature_dim": 16,
        "languages": 3,
        "n_phones": 8,
        "n_shared_phones": 8,
        "cycle_weight": 0.65,
        "preference_strength": 0.8,
        "dwell_frames": [3, 8],
        "noise_std": 0.85,
        "mean_scale": 1.0,
        "split": {"train": 500, "test": 100},
    }


def build_corpus_from_config(cfg: dict) -> tuple[list[SynthUtterance],
                                                 list[SyntheticLanguageSpec]]:
    """Materialize a synthetic corpus from a config dict.

    Either ``language_specs`` gives explicit per-language dicts (phone_means,
    transition, ...) or the family parameters of
    :func:`build_synthetic_languages` are read from the top level. Language
    generation uses ``seed``; utterance sampling uses ``seed + 1`` so the two
    draws are independent.
    """
    seed = int(cfg.get("seed", 0))
    if "language_specs" in cfg:
        specs = [SyntheticLanguageSpec(
            name=s["name"],
            phone_means=np.asarray(s["phone_means"], dtype=np.float64),
            transition=np.asarray(s["transition"], dtype=np.float64),
            dwell_frames=tuple(s.get("dwell_frames", (3, 8))),
            noise_std=float(s.get("noise_std", 0.0)),
        ) for s in cfg["language_specs"]]
    else:
        specs = build_synthetic_languages(
            n_languages=cfg.get("languages", 3),
            feature_dim=int(cfg.get("feature_dim", 16)),
            n_phones=int(cfg.get("n_phones", 8)),
            seed=seed,
            n_shared_phones=int(cfg.get("n_shared_phones", 0)),
            cycle_weight=float(cfg.get("cycle_weight", 0.6)),
            preference_strength=float(cfg.get("preference_strength", 2.0)),
            dwell_frames=tuple(cfg.get("dwell_frames", (3, 8))),
            noise_std=float(cfg.get("noise_std", 0.0)),
            mean_scale=float(cfg.get("mean_scale", 1.0)),
        )
    corpus = synth_corpus(specs, n_utts=int(cfg.get("n_utterances", 300)),
                          n_frames=int(cfg.get("n_frames", 200)), seed=seed + 1)
    return corpus, specs
