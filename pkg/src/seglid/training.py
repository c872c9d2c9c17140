"""Two-phase training: contrastive pretraining, then LID or multi-task updates.

Pretraining updates only the shared encoder and the segmentation head with a
constant learning rate. The main phase updates the LID branch (strategy
"lid-only") or all parameters (strategy "multi-task"), with a learning rate
that warms up linearly from 0 to the peak over ``warmup_epochs`` and then
follows cosine annealing down to 0 at the final epoch.

Every stochastic choice (parameter init, epoch shuffles, negative draws) is
seeded by a stable hash of (seed, purpose, epoch, step), so runs are
reproducible and training can resume from any epoch checkpoint bitwise.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import torch

from .data import SegmentedUtterance
from .losses import batch_nce, lid_cross_entropy, multi_task_loss
from .model import ModelConfig, PhonotacticLidNet, build_model

CHECKPOINT_VERSION = 1


class Strategy(str, Enum):
    LID_ONLY = "lid-only"
    MULTI_TASK = "multi-task"


class Phase(str, Enum):
    PRETRAIN = "pretrain"
    MAIN = "main"


@dataclass
class TrainingConfig:
    total_epochs: int = 13
    pretrain_epochs: int = 3
    pretrain_lr: float = 1e-4
    peak_lr: float = 1e-4
    warmup_epochs: int = 3
    batch_size: int = 128
    alpha: float = 0.95
    n_negatives: int = 3
    seed: int = 0
    strategy: Strategy = Strategy.MULTI_TASK

    def __post_init__(self) -> None:
        self.strategy = Strategy(self.strategy)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.pretrain_epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.pretrain_epochs + self.warmup_epochs > self.total_epochs:
            raise ValueError(
                f"pretrain ({self.pretrain_epochs}) + warmup ({self.warmup_epochs}) "
                f"epochs exceed total ({self.total_epochs})"
            )
        if self.n_negatives < 1:
            raise ValueError("n_negatives must be >= 1")

    @property
    def main_epochs(self) -> int:
        return self.total_epochs - self.pretrain_epochs


def lr_at(epoch_fraction: float, cfg: TrainingConfig) -> float:
    """Main-phase learning rate at ``epoch_fraction`` epochs into that phase.

    Linear from 0 to ``peak_lr`` over ``warmup_epochs``, then cosine decay to
    0 at ``main_epochs``. Both branches equal ``peak_lr`` at the junction.
    """
    if epoch_fraction < 0:
        raise ValueError("epoch_fraction must be >= 0")
    main = cfg.main_epochs
    warm = cfg.warmup_epochs
    if epoch_fraction > main:
        raise ValueError(f"epoch_fraction {epoch_fraction} beyond main phase of {main} epochs")
    if epoch_fraction < warm:
        return cfg.peak_lr * epoch_fraction / warm
    span = main - warm
    if span == 0:
        return cfg.peak_lr
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch_fraction - warm) / span))


def derive_seed(base: int, *tags) -> int:
    """Stable 63-bit seed from a base seed and a tag tuple."""
    digest = hashlib.blake2b(repr((base,) + tags).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def make_batches(dataset: list[SegmentedUtterance], batch_size: int,
                 seed: int) -> list[list[int]]:
    """Shuffled batches of utterance indices, bucketed by segment count.

    Utterances within a batch share T, so batches need no padding. Every
    utterance appears exactly once per epoch.
    """
    buckets: dict[int, list[int]] = {}
    for idx, utt in enumerate(dataset):
        buckets.setdefault(utt.n_segments, []).append(idx)
    gen = torch.Generator().manual_seed(seed)
    batches: list[list[int]] = []
    for t in sorted(buckets):
        order = torch.randperm(len(buckets[t]), generator=gen).tolist()
        shuffled = [buckets[t][i] for i in order]
        batches.extend(shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size))
    batch_order = torch.randperm(len(batches), generator=gen).tolist()
    return [batches[i] for i in batch_order]


def collate(dataset: list[SegmentedUtterance], indices: list[int],
            device: torch.device | str = "cpu") -> tuple[torch.Tensor, torch.Tensor]:
    """Stack same-T utterances into (B, T, K, F) plus a label vector."""
    x = torch.stack([torch.as_tensor(dataset[i].segments, dtype=torch.float32)
                     for i in indices]).to(device)
    labels = torch.tensor([dataset[i].label for i in indices], dtype=torch.long,
                          device=device)
    if torch.any(labels < 0):
        raise ValueError("training requires every utterance to carry a label")
    return x, labels


class TrainingLog:
    """Machine-parseable per-step log: step, phase, lr, l_lid, l_nce, l_mul."""

    COLUMNS = ("step", "phase", "lr", "l_lid", "l_nce", "l_mul")

    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        if not append or not self.path.exists():
            self.path.write_text("\t".join(self.COLUMNS) + "\n", encoding="utf-8")

    @staticmethod
    def _fmt(value: float | None) -> str:
        return "-" if value is None else format(value, ".17g")

    def write(self, step: int, phase: Phase, lr: float, l_lid: float | None,
              l_nce: float | None, l_mul: float | None) -> None:
        line = "\t".join([str(step), phase.value, self._fmt(lr), self._fmt(l_lid),
                          self._fmt(l_nce), self._fmt(l_mul)])
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        rows = []
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        for line in lines[1:]:
            step, phase, lr, l_lid, l_nce, l_mul = line.split("\t")
            rows.append({
                "step": int(step), "phase": phase, "lr": float(lr),
                "l_lid": None if l_lid == "-" else float(l_lid),
                "l_nce": None if l_nce == "-" else float(l_nce),
                "l_mul": None if l_mul == "-" else float(l_mul),
            })
        return rows


def save_checkpoint(path: str | Path, model: PhonotacticLidNet,
                    train_cfg: TrainingConfig, optimizer: torch.optim.Optimizer | None,
                    epoch: int, step: int, phase: Phase,
                    label_map: dict[str, int] | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "train_config": {**asdict(train_cfg), "strategy": train_cfg.strategy.value},
        "model_state": model.state_dict(),
        "optimizer_state": None if optimizer is None else optimizer.state_dict(),
        "epoch": epoch,
        "step": step,
        "phase": phase.value,
        "label_map": label_map,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path,
                    expect_model_config: ModelConfig | None = None) -> dict:
    """Load a checkpoint dict, materializing the config dataclasses.

    A caller-supplied ``expect_model_config`` that differs from the stored
    one is a hard error (shapes would silently mismatch otherwise).
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise ValueError(f"{path}: not a checkpoint file")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: checkpoint version {payload['format_version']} "
            f"!= supported {CHECKPOINT_VERSION}"
        )
    payload["model_config"] = ModelConfig(**payload["model_config"])
    payload["train_config"] = TrainingConfig(**payload["train_config"])
    payload["phase"] = Phase(payload["phase"])
    if expect_model_config is not None and payload["model_config"] != expect_model_config:
        raise ValueError(
            f"{path}: checkpoint model config {payload['model_config']} does not match "
            f"requested config {expect_model_config}"
        )
    return payload


def restore_model(path: str | Path) -> tuple[PhonotacticLidNet, dict]:
    """Build the model a checkpoint describes and load its weights."""
    payload = load_checkpoint(path)
    model = PhonotacticLidNet(payload["model_config"])
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, payload


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    epochs_run: int
    final_losses: dict


def _phase_optimizer(model: PhonotacticLidNet, phase: Phase,
                     cfg: TrainingConfig) -> torch.optim.Optimizer:
    if phase == Phase.PRETRAIN:
        return torch.optim.Adam(model.pretrain_parameters(), lr=cfg.pretrain_lr)
    params = (model.parameters() if cfg.strategy == Strategy.MULTI_TASK
              else model.lid_parameters())
    return torch.optim.Adam(params, lr=cfg.peak_lr)


def _train_step(model: PhonotacticLidNet, optimizer: torch.optim.Optimizer,
                x: torch.Tensor, labels: torch.Tensor, phase: Phase,
                cfg: TrainingConfig, neg_seed: int
                ) -> tuple[float | None, float | None, float | None]:
    """One optimizer step; returns (l_lid, l_nce, l_mul) as floats or None.

    At alpha exactly 0 or 1 the unused head is skipped entirely, so those
    runs are step-for-step identical to single-objective ones.
    """
    gen = torch.Generator().manual_seed(neg_seed)
    optimizer.zero_grad(set_to_none=True)
    l_lid_v = l_nce_v = l_mul_v = None
    if phase == Phase.PRETRAIN:
        z = model.segmentation_embeddings(model.encode_frames(x))
        loss = batch_nce(z, cfg.n_negatives, gen)
        l_nce_v = loss.item()
    elif cfg.strategy == Strategy.LID_ONLY:
        loss = lid_cross_entropy(model.forward_lid(x), labels)
        l_lid_v = loss.item()
        l_mul_v = l_lid_v
    elif cfg.alpha == 1.0:
        loss = lid_cross_entropy(model.forward_lid(x), labels)
        l_lid_v = loss.item()
        l_mul_v = l_lid_v
    elif cfg.alpha == 0.0:
        z = model.segmentation_embeddings(model.encode_frames(x))
        loss = batch_nce(z, cfg.n_negatives, gen)
        l_nce_v = loss.item()
        l_mul_v = l_nce_v
    else:
        logits, z = model(x)
        l_lid = lid_cross_entropy(logits, labels)
        l_nce = batch_nce(z, cfg.n_negatives, gen)
        loss = multi_task_loss(l_lid, l_nce, cfg.alpha)
        l_lid_v, l_nce_v, l_mul_v = l_lid.item(), l_nce.item(), loss.item()
    if not math.isfinite(loss.item()):
        raise _NonFiniteLoss(loss.item())
    loss.backward()
    optimizer.step()
    return l_lid_v, l_nce_v, l_mul_v


class _NonFiniteLoss(Exception):
    def __init__(self, value: float):
        self.value = value
        super().__init__(f"non-finite loss {value}")


def run_training(dataset: list[SegmentedUtterance], model_cfg: ModelConfig,
                 train_cfg: TrainingConfig, out_dir: str | Path,
                 label_map: dict[str, int] | None = None,
                 resume_from: str | Path | None = None,
                 stop_after_epoch: int | None = None) -> TrainResult:
    """Run the full two-phase schedule, checkpointing after every epoch.

    ``resume_from`` restarts from an epoch checkpoint and continues the exact
    trajectory. ``stop_after_epoch`` ends the run early (for later resume).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.pt"
    log_path = out_dir / "training_log.tsv"

    if resume_from is not None:
        payload = load_checkpoint(resume_from, expect_model_config=model_cfg)
        stored = payload["train_config"]
        if stored != train_cfg:
            raise ValueError("checkpoint training config does not match requested config")
        model = PhonotacticLidNet(model_cfg)
        model.load_state_dict(payload["model_state"])
        start_epoch = payload["epoch"]
        step = payload["step"]
        prev_phase = payload["phase"]
        optimizer = _phase_optimizer(model, prev_phase, train_cfg)
        if payload["optimizer_state"] is not None:
            optimizer.load_state_dict(payload["optimizer_state"])
        log = TrainingLog(log_path, append=True)
    else:
        model = build_model(model_cfg, seed=derive_seed(train_cfg.seed, "init"))
        start_epoch = 0
        step = 0
        prev_phase = None
        optimizer = None
        log = TrainingLog(log_path)

    model.train()
    final_losses: dict = {}
    epoch = start_epoch
    for epoch in range(start_epoch, train_cfg.total_epochs):
        phase = Phase.PRETRAIN if epoch < train_cfg.pretrain_epochs else Phase.MAIN
        if optimizer is None or phase != prev_phase:
            optimizer = _phase_optimizer(model, phase, train_cfg)
            prev_phase = phase
        batches = make_batches(dataset, train_cfg.batch_size,
                               derive_seed(train_cfg.seed, "shuffle", epoch))
        n_batches = len(batches)
        for batch_idx, indices in enumerate(batches):
            x, labels = collate(dataset, indices)
            if phase == Phase.PRETRAIN:
                lr = train_cfg.pretrain_lr
            else:
                frac = (epoch - train_cfg.pretrain_epochs) + batch_idx / n_batches
                lr = lr_at(frac, train_cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            neg_seed = derive_seed(train_cfg.seed, "negatives", epoch, batch_idx)
            try:
                l_lid, l_nce, l_mul = _train_step(model, optimizer, x, labels,
                                                  phase, train_cfg, neg_seed)
            except _NonFiniteLoss as exc:
                snap = out_dir / "diagnostic_nan.pt"
                save_checkpoint(snap, model, train_cfg, optimizer, epoch, step,
                                phase, label_map)
                raise RuntimeError(
                    f"non-finite loss {exc.value} at epoch {epoch} step {step}; "
                    f"state snapshot written to {snap}"
                ) from exc
            log.write(step, phase, lr, l_lid, l_nce, l_mul)
            final_losses = {"l_lid": l_lid, "l_nce": l_nce, "l_mul": l_mul}
            step += 1
        save_checkpoint(ckpt_path, model, train_cfg, optimizer, epoch + 1, step,
                        phase, label_map)
        if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
            break
    return TrainResult(checkpoint_path=ckpt_path, log_path=log_path,
                       epochs_run=epoch + 1 - start_epoch, final_losses=final_losses)
