"""Command-line pipeline: prepare, train, evaluate, segment, report.

Every command writes a run manifest (JSON) into its output directory with
the resolved config, input/output paths, and seed, so a run can be repeated
from the manifest alone. Commands exit 0 on success; on failure they print
one line ``ERROR <category>: <message>`` to stderr and exit nonzero.

The default output root is ``./runs``, overridable with the environment
variable ``SEGLID_OUT_ROOT``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from filelock import FileLock

from . import data as D
from . import inference as I
from . import metrics as M
from .model import ModelConfig, scaled_config
from .training import (Strategy, TrainingConfig, load_checkpoint, restore_model,
                       run_training)

OUT_ROOT_ENV = "SEGLID_OUT_ROOT"


class CliError(Exception):
    """User-facing command failure with a machine-parseable category."""

    def __init__(self, category: str, message: str):
        self.category = category
        super().__init__(message)


def _out_dir(args: argparse.Namespace, command: str) -> Path:
    if args.out is not None:
        return Path(args.out)
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    return root / f"{command}_{time.strftime('%Y%m%d_%H%M%S')}"


def write_run_manifest(out_dir: Path, command: str, config: dict,
                       inputs: dict[str, str], outputs: dict[str, str],
                       seed: int | None = None, results: dict | None = None) -> Path:
    for name, p in outputs.items():
        if not Path(p).exists():
            raise CliError("internal", f"output {name} missing at write time: {p}")
    manifest = {
        "command": command,
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "argv": sys.argv[1:],
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "results": results,
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


# -- figures ----------------------------------------------------------------


def confusion_heatmap(counts: np.ndarray, labels: list[str], path: Path) -> None:
    """Row-normalized confusion heatmap with language labels on both axes."""
    counts = np.asarray(counts, dtype=np.float64)
    rows = counts.sum(axis=1, keepdims=True)
    normalized = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * len(labels), 0.8 + 0.6 * len(labels)))
    im = ax.imshow(normalized, vmin=0.0, vmax=1.0, cmap="Blues")
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(len(labels)):
        for j in range(len(labels)):
            ax.text(j, i, f"{normalized[i, j]:.2f}", ha="center", va="center",
                    fontsize=8, color="black" if normalized[i, j] < 0.6 else "white")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def segmentation_figure(curve: np.ndarray, boundaries: np.ndarray, threshold: float,
                        path: Path, features: np.ndarray | None = None,
                        audio: np.ndarray | None = None,
                        sample_rate: int | None = None) -> None:
    """Similarity curve with dashed boundary markers, plus an aligned panel.

    The lower panel is an audio spectrogram when a waveform is supplied,
    otherwise a heatmap of the (learned) input features.
    """
    fig, axes = plt.subplots(2, 1, figsize=(10, 5), sharex=False)
    ax = axes[0]
    ax.plot(np.arange(len(curve)), curve, lw=1.0, label="adjacent-frame similarity")
    ax.axhline(threshold, color="gray", lw=0.8, ls=":", label=f"threshold {threshold:g}")
    for b in boundaries:
        ax.axvline(b, color="crimson", lw=0.8, ls="--")
    ax.set_xlim(0, max(len(curve) - 1, 1))
    ax.set_ylabel("cosine similarity")
    ax.set_xlabel("frame index")
    ax.legend(loc="lower left", fontsize=8)
    ax.set_title("predicted phoneme boundaries")

    ax2 = axes[1]
    if audio is not None and sample_rate is not None:
        from scipy import signal

        win = int(round(sample_rate * D.FRAME_WINDOW_MS / 1000.0))
        hop = int(round(sample_rate * D.FRAME_STEP_MS / 1000.0))
        freqs, times, stft = signal.stft(audio, fs=sample_rate, nperseg=win,
                                         noverlap=win - hop, boundary=None)
        power_db = 20.0 * np.log10(np.abs(stft) + 1e-10)
        ax2.pcolormesh(times, freqs, power_db, shading="auto", cmap="magma")
        ax2.set_ylabel("frequency (Hz)")
        ax2.set_xlabel("time (s)")
        ax2.set_title(f"spectrogram (window {D.FRAME_WINDOW_MS:g} ms, "
                      f"step {D.FRAME_STEP_MS:g} ms)")
    elif features is not None:
        ax2.imshow(features.T, aspect="auto", origin="lower", cmap="magma",
                   interpolation="nearest")
        ax2.set_ylabel("feature dim")
        ax2.set_xlabel("frame index")
        ax2.set_title("input feature heatmap (learned representations, not spectra)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


# -- prepare ----------------------------------------------------------------


def _load_synth_config(args: argparse.Namespace) -> dict:
    if args.synth_spec is not None:
        cfg = json.loads(Path(args.synth_spec).read_text(encoding="utf-8"))
    elif args.synth_default:
        cfg = D.default_synth_config()
    else:
        raise CliError("usage", "prepare needs --synth-spec, --synth-default, or --import-dir")
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def cmd_prepare(args: argparse.Namespace) -> int:
    out_dir = _out_dir(args, "prepare")
    out_dir.mkdir(parents=True, exist_ok=True)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(exist_ok=True)
    inputs: dict[str, str] = {}
    seed = None

    if args.import_dir is not None:
        inputs["import_dir"] = str(args.import_dir)
        sequences = _import_feature_dir(Path(args.import_dir))
        config: dict = {"mode": "import"}
        phone_sidecars = {}
    else:
        cfg = _load_synth_config(args)
        seed = cfg.get("seed", 0)
        if args.synth_spec:
            inputs["synth_spec"] = str(args.synth_spec)
        corpus, specs = D.build_corpus_from_config(cfg)
        label_names = [s.name for s in specs]
        sequences = [(u.features, label_names[u.label]) for u in corpus]
        phone_sidecars = {u.features.utterance_id: u.phone_ids for u in corpus}
        config = {"mode": "synth", **cfg}

    if args.vad_threshold is not None:
        sequences = [(D.energy_vad(seq, args.vad_threshold), label)
                     for seq, label in sequences]
        config["vad_threshold"] = args.vad_threshold

    dims = {seq.feature_dim for seq, _ in sequences}
    if len(dims) > 1:
        offender = next(seq.utterance_id for seq, _ in sequences
                        if seq.feature_dim != sequences[0][0].feature_dim)
        raise CliError("data", f"inconsistent feature dimensions {sorted(dims)}; "
                               f"first offender: {offender}")

    entries = []
    label_map: dict[str, int] = {}
    for seq, label in sequences:
        if label not in label_map:
            label_map[label] = len(label_map)
        rel = f"features/{seq.utterance_id}{D.FEATURE_SUFFIX}"
        D.write_feature_file(out_dir / rel, seq)
        entries.append(D.ManifestEntry(path=rel, label=label, n_frames=seq.n_frames))

    if phone_sidecars:
        phones_dir = out_dir / "phones"
        phones_dir.mkdir(exist_ok=True)
        for uid, phone_ids in phone_sidecars.items():
            np.save(phones_dir / f"{uid}.npy", phone_ids)

    manifest = D.Manifest(entries=entries, label_map=label_map)
    D.save_manifest(out_dir / "manifest.tsv", manifest)
    D.save_label_map(out_dir / "label_map.tsv", label_map)
    outputs = {"manifest": str(out_dir / "manifest.tsv"),
               "label_map": str(out_dir / "label_map.tsv")}

    split = config.get("split")
    if split:
        n_train = int(split["train"])
        n_test = int(split["test"])
        if n_train + n_test != len(entries):
            raise CliError("config", f"split {split} does not sum to {len(entries)} utterances")
        D.save_manifest(out_dir / "manifest_train.tsv",
                        D.Manifest(entries=entries[:n_train], label_map=label_map))
        D.save_manifest(out_dir / "manifest_test.tsv",
                        D.Manifest(entries=entries[n_train:], label_map=label_map))
        outputs["manifest_train"] = str(out_dir / "manifest_train.tsv")
        outputs["manifest_test"] = str(out_dir / "manifest_test.tsv")

    write_run_manifest(out_dir, "prepare", config, inputs, outputs, seed=seed,
                       results={"n_utterances": len(entries),
                                "n_languages": len(label_map)})
    print(f"prepared {len(entries)} utterances, {len(label_map)} languages -> {out_dir}")
    return 0


def _import_feature_dir(import_dir: Path) -> list[tuple[D.FeatureSequence, str]]:
    """Read <import_dir>/<label>/*.npy into labeled feature sequences."""
    if not import_dir.is_dir():
        raise CliError("data", f"import directory not found: {import_dir}")
    sequences = []
    for label_dir in sorted(p for p in import_dir.iterdir() if p.is_dir()):
        for npy in sorted(label_dir.glob("*.npy")):
            arr = np.load(npy)
            if arr.ndim != 2:
                raise CliError("data", f"{npy}: expected a 2-D frame matrix, got {arr.shape}")
            sequences.append((D.FeatureSequence(frames=arr.astype(np.float32),
                                                utterance_id=npy.stem),
                              label_dir.name))
    if not sequences:
        raise CliError("data", f"no <label>/*.npy files under {import_dir}")
    return sequences


# -- train -------------------------------------------------------------------


def _resolve_configs(args: argparse.Namespace, n_languages: int,
                     feature_dim: int) -> tuple[ModelConfig, TrainingConfig]:
    file_cfg: dict = {}
    if args.config is not None:
        file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    model_kw = dict(file_cfg.get("model", {}))
    divisor = model_kw.pop("scale_divisor", None)
    model_kw.setdefault("n_languages", n_languages)
    model_kw.setdefault("feature_dim", feature_dim)
    model_cfg = ModelConfig(**model_kw)
    if divisor:
        model_cfg = scaled_config(model_cfg, int(divisor))

    train_kw = dict(file_cfg.get("training", {}))
    overrides = {"strategy": args.strategy, "alpha": args.alpha, "n_negatives": args.M,
                 "total_epochs": args.epochs, "pretrain_epochs": args.pretrain_epochs,
                 "seed": args.seed, "batch_size": args.batch_size}
    train_kw.update({k: v for k, v in overrides.items() if v is not None})
    return model_cfg, TrainingConfig(**train_kw)


def cmd_train(args: argparse.Namespace) -> int:
    out_dir = _out_dir(args, "train")
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = D.load_manifest(args.data)
    base_dir = Path(args.data).parent
    first = D.read_feature_file(_resolve_entry_path(manifest.entries[0], base_dir))
    model_cfg, train_cfg = _resolve_configs(args, manifest.n_languages,
                                            first.feature_dim)
    dataset = D.load_dataset(manifest, base_dir, k=model_cfg.frames_per_segment,
                             policy="drop")
    config = {"model": asdict(model_cfg),
              "training": {**asdict(train_cfg), "strategy": train_cfg.strategy.value}}
    (out_dir / "config.json").write_text(json.dumps(config, indent=2) + "\n",
                                         encoding="utf-8")
    with FileLock(out_dir / ".lock"):
        result = run_training(dataset, model_cfg, train_cfg, out_dir,
                              label_map=manifest.label_map,
                              resume_from=args.resume)
    write_run_manifest(
        out_dir, "train", config,
        inputs={"manifest": str(args.data)},
        outputs={"checkpoint": str(result.checkpoint_path),
                 "training_log": str(result.log_path),
                 "config": str(out_dir / "config.json")},
        seed=train_cfg.seed,
        results={"epochs_run": result.epochs_run, "final_losses": result.final_losses},
    )
    print(f"trained {result.epochs_run} epochs -> {result.checkpoint_path}")
    return 0


def _resolve_entry_path(entry: D.ManifestEntry, base_dir: Path) -> Path:
    p = Path(entry.path)
    return p if p.is_absolute() else base_dir / p


# -- evaluate ----------------------------------------------------------------


def cmd_evaluate(args: argparse.Namespace) -> int:
    out_dir = _out_dir(args, "evaluate")
    out_dir.mkdir(parents=True, exist_ok=True)
    model, payload = restore_model(args.checkpoint)
    label_map = payload.get("label_map")
    if not label_map:
        raise CliError("checkpoint", f"{args.checkpoint} carries no label map")
    try:
        manifest = D.load_manifest(args.data, label_map=label_map)
    except ValueError as exc:
        raise CliError("data", f"label-map mismatch between checkpoint and manifest: {exc}")
    dataset = D.load_dataset(manifest, Path(args.data).parent,
                             k=model.cfg.frames_per_segment, policy="pad")
    ids, scores = I.score_dataset(model, dataset)
    labels = np.asarray([utt.label for utt in dataset])
    trials = M.TrialSet(scores=scores, labels=labels)
    report = M.make_report(trials, manifest.label_names(), p_target=args.p_target)

    I.write_scores(out_dir / "scores.tsv", ids, scores)
    M.write_report(out_dir / "metrics.json", report)
    confusion_heatmap(np.asarray(report["confusion"]), manifest.label_names(),
                      out_dir / "confusion.png")
    write_run_manifest(
        out_dir, "evaluate",
        {"p_target": args.p_target, "model": asdict(model.cfg)},
        inputs={"checkpoint": str(args.checkpoint), "manifest": str(args.data)},
        outputs={"scores": str(out_dir / "scores.tsv"),
                 "metrics": str(out_dir / "metrics.json"),
                 "confusion": str(out_dir / "confusion.png")},
        results={"accuracy": report["accuracy"], "eer": report["eer"],
                 "c_avg": report["c_avg"]},
    )
    print(M.format_report(report))
    return 0


# -- segment -----------------------------------------------------------------


def _read_wav(path: Path) -> tuple[int, np.ndarray]:
    from scipy.io import wavfile

    rate, samples = wavfile.read(path)
    if samples.ndim > 1:
        samples = samples.mean(axis=1)
    if np.issubdtype(samples.dtype, np.integer):
        samples = samples / float(np.iinfo(samples.dtype).max)
    return rate, samples.astype(np.float64)


def cmd_segment(args: argparse.Namespace) -> int:
    out_dir = _out_dir(args, "segment")
    out_dir.mkdir(parents=True, exist_ok=True)
    model, _ = restore_model(args.checkpoint)
    seq = D.read_feature_file(args.features)
    utt = D.partition(seq, k=model.cfg.frames_per_segment, policy="pad")

    audio = None
    sample_rate = None
    if args.audio is not None:
        sample_rate, audio = _read_wav(Path(args.audio))
        hop = sample_rate * D.FRAME_STEP_MS / 1000.0
        expected = int(len(audio) // hop)
        if abs(expected - seq.n_frames) > 2:
            raise CliError("data", f"audio implies ~{expected} frames at a "
                                   f"{D.FRAME_STEP_MS:g} ms step but feature file has "
                                   f"{seq.n_frames}")

    z = I.segmentation_embeddings_for(model, utt)
    curve = I.smooth_curve(I.similarity_curve(z), args.smooth)
    boundaries = I.detect_boundaries(curve, args.threshold, args.merge_window)
    I.write_boundaries(out_dir / "boundaries.tsv",
                       [(seq.utterance_id, args.threshold, boundaries)])
    segmentation_figure(curve, boundaries, args.threshold,
                        out_dir / "segmentation.png",
                        features=seq.frames, audio=audio, sample_rate=sample_rate)
    write_run_manifest(
        out_dir, "segment",
        {"threshold": args.threshold, "smooth": args.smooth,
         "merge_window": args.merge_window},
        inputs={"checkpoint": str(args.checkpoint), "features": str(args.features),
                **({"audio": str(args.audio)} if args.audio else {})},
        outputs={"boundaries": str(out_dir / "boundaries.tsv"),
                 "figure": str(out_dir / "segmentation.png")},
    )
    print(f"{seq.utterance_id}: {len(boundaries)} boundaries at threshold "
          f"{args.threshold:g} -> {out_dir}")
    return 0


# -- report ------------------------------------------------------------------


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    manifest_path = run_dir / "run_manifest.json"
    if not manifest_path.exists():
        raise CliError("data", f"no run_manifest.json under {run_dir}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    print(f"command: {manifest['command']}  ({manifest['created_utc']})")
    print(f"seed:    {manifest.get('seed')}")
    for kind in ("inputs", "outputs"):
        for name, path in (manifest.get(kind) or {}).items():
            print(f"{kind[:-1]:>7}: {name} = {path}")
    if manifest.get("results"):
        print(f"results: {json.dumps(manifest['results'])}")
    metrics_path = run_dir / "metrics.json"
    if metrics_path.exists():
        print()
        print(M.format_report(M.read_report(metrics_path)))
    return 0


# -- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seglid",
        description="Language identification with self-supervised phoneme "
                    "segmentation pretraining.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a feature/manifest dataset")
    p.add_argument("--synth-spec", help="JSON synthetic-corpus spec")
    p.add_argument("--synth-default", action="store_true",
                   help="use the built-in 3-language synthetic recipe")
    p.add_argument("--import-dir", help="directory of <label>/*.npy frame matrices")
    p.add_argument("--vad-threshold", type=float, default=None,
                   help="drop frames with mean-square energy below this")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="pretrain and train a model")
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--config", help="JSON file with model/training sections")
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--M", type=int, default=None, help="negatives per anchor")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--pretrain-epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a manifest and report metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="evaluation manifest")
    p.add_argument("--p-target", type=float, default=0.5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("segment", help="decode phoneme boundaries for one utterance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True, help="feature file to segment")
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--smooth", type=int, default=1, help="odd moving-average window")
    p.add_argument("--merge-window", type=int, default=1)
    p.add_argument("--audio", default=None, help="optional wav for the spectrogram panel")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)

    return parser


_ERROR_CATEGORIES = {
    FileNotFoundError: "missing-file",
    ValueError: "invalid-input",
    RuntimeError: "runtime",
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"ERROR {exc.category}: {exc}", file=sys.stderr)
        return 1
    except tuple(_ERROR_CATEGORIES) as exc:
        category = next(cat for typ, cat in _ERROR_CATEGORIES.items()
                        if isinstance(exc, typ))
        print(f"ERROR {category}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
