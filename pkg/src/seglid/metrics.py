"""Closed-set LID evaluation: accuracy, pooled EER, average detection cost.

Each scored utterance yields C detection trials: one target trial (its true
language) and C-1 non-target trials. The pooled EER sweeps a single threshold
over these trials and interpolates linearly between adjacent operating points
on the miss/false-alarm polyline; interpolation is parametric in the
operating-point index, so the EER is invariant under any strictly increasing
transform of the scores.

The average cost uses hard argmax decisions (closed-set task):

    c_avg = (1/C) * sum_L [ p_target * p_miss(L)
                            + (1 - p_target)/(C-1) * sum_{L' != L} p_fa(L, L') ]

with unit miss and false-alarm costs. Per-language detection thresholds can
be supplied instead of argmax for the open-set style soft-decision variant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class TrialSet:
    """Scores (n_utts, C) and integer labels (n_utts,) for one evaluation."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.ndim != 2 or self.scores.shape[0] < 1:
            raise ValueError(f"scores must be (n_utts, C), got {self.scores.shape}")
        if self.labels.shape != (self.scores.shape[0],):
            raise ValueError("labels must be one integer per utterance")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("non-finite scores")
        if self.labels.min() < 0 or self.labels.max() >= self.scores.shape[1]:
            raise ValueError("label outside [0, C)")

    @property
    def n_utts(self) -> int:
        return self.scores.shape[0]

    @property
    def n_languages(self) -> int:
        return self.scores.shape[1]


def predictions(t: TrialSet) -> np.ndarray:
    """Argmax decisions; ties break to the lowest language index."""
    return np.argmax(t.scores, axis=1)


def accuracy(t: TrialSet) -> float:
    return float(np.mean(predictions(t) == t.labels))


def confusion(t: TrialSet) -> np.ndarray:
    """C x C count matrix, rows = true language, columns = predicted."""
    c = t.n_languages
    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (t.labels, predictions(t)), 1)
    return counts


def detection_operating_points(scores: np.ndarray,
                               is_target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(p_miss, p_fa) at -inf and just above each distinct score.

    The decision rule is accept when score >= threshold, so p_miss rises from
    0 to 1 while p_fa falls from 1 to 0 along the sweep.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    is_target = np.asarray(is_target, dtype=bool).reshape(-1)
    n_tar = int(is_target.sum())
    n_non = int((~is_target).sum())
    if n_tar == 0 or n_non == 0:
        raise ValueError("need at least one target and one non-target trial")
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    tar = is_target[order].astype(np.float64)
    group_end = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    cum_tar = np.cumsum(tar)[group_end]
    cum_non = np.cumsum(1.0 - tar)[group_end]
    p_miss = np.concatenate([[0.0], cum_tar / n_tar])
    p_fa = np.concatenate([[1.0], 1.0 - cum_non / n_non])
    return p_miss, p_fa


def eer_from_points(p_miss: np.ndarray, p_fa: np.ndarray) -> float:
    """Crossing of the miss/false-alarm polyline, linearly interpolated."""
    diff = p_miss - p_fa
    j = int(np.flatnonzero(diff >= 0.0)[0])
    if diff[j] == 0.0 or j == 0:
        return float(p_miss[j])
    d0, d1 = diff[j - 1], diff[j]
    lam = -d0 / (d1 - d0)
    return float(p_miss[j - 1] + lam * (p_miss[j] - p_miss[j - 1]))


def pooled_eer(t: TrialSet) -> float:
    """EER of the pooled per-language detection trials."""
    is_target = np.zeros_like(t.scores, dtype=bool)
    is_target[np.arange(t.n_utts), t.labels] = True
    if t.n_languages < 2:
        raise ValueError("pooled EER needs non-target trials (C >= 2)")
    p_miss, p_fa = detection_operating_points(t.scores.reshape(-1),
                                              is_target.reshape(-1))
    return eer_from_points(p_miss, p_fa)


def detection_decisions(t: TrialSet, thresholds: np.ndarray | None = None) -> np.ndarray:
    """(n_utts, C) boolean accept matrix.

    Default is closed-set argmax (exactly one accept per utterance); with
    per-language ``thresholds`` each detector accepts independently.
    """
    if thresholds is None:
        accept = np.zeros_like(t.scores, dtype=bool)
        accept[np.arange(t.n_utts), predictions(t)] = True
        return accept
    thresholds = np.asarray(thresholds, dtype=np.float64).reshape(-1)
    if thresholds.shape[0] != t.n_languages:
        raise ValueError(f"need {t.n_languages} per-language thresholds")
    return t.scores >= thresholds[None, :]


def miss_fa_rates(t: TrialSet,
                  thresholds: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-language miss vector (C,) and false-alarm matrix (C, C).

    ``p_fa[L, L']`` is the rate at which detector L accepts true-L'
    utterances; the diagonal is undefined for the cost and left at 0.
    """
    present = np.unique(t.labels)
    missing = sorted(set(range(t.n_languages)) - set(present.tolist()))
    if missing:
        raise ValueError(f"languages with no trials: {missing}")
    accept = detection_decisions(t, thresholds)
    c = t.n_languages
    p_miss = np.zeros(c)
    p_fa = np.zeros((c, c))
    for lang in range(c):
        of_lang = t.labels == lang
        p_miss[lang] = float(np.mean(~accept[of_lang, lang]))
        for other in range(c):
            if other == lang:
                continue
            p_fa[lang, other] = float(np.mean(accept[t.labels == other, lang]))
    return p_miss, p_fa


def c_avg(t: TrialSet, p_target: float = 0.5,
          thresholds: np.ndarray | None = None) -> float:
    """Average detection cost with unit miss/false-alarm costs."""
    if not 0.0 <= p_target <= 1.0:
        raise ValueError("p_target must be in [0, 1]")
    if t.n_languages < 2:
        raise ValueError("average cost needs C >= 2")
    p_miss, p_fa = miss_fa_rates(t, thresholds)
    c = t.n_languages
    per_lang = p_target * p_miss + (1.0 - p_target) / (c - 1) * p_fa.sum(axis=1)
    return float(per_lang.mean())


def make_report(t: TrialSet, label_names: list[str] | None = None,
                p_target: float = 0.5) -> dict:
    """Full evaluation report as a JSON-serializable dict."""
    if label_names is None:
        label_names = [f"lang_{i}" for i in range(t.n_languages)]
    if len(label_names) != t.n_languages:
        raise ValueError(f"need {t.n_languages} label names, got {len(label_names)}")
    p_miss, p_fa = miss_fa_rates(t)
    eer = pooled_eer(t)
    return {
        "n_trials": t.n_utts,
        "labels": list(label_names),
        "accuracy": accuracy(t),
        "eer": eer,
        "eer_percent": 100.0 * eer,
        "c_avg": c_avg(t, p_target=p_target),
        "p_target": p_target,
        "per_language": {
            name: {
                "p_miss": float(p_miss[i]),
                "p_fa": {label_names[j]: float(p_fa[i, j])
                         for j in range(t.n_languages) if j != i},
            }
            for i, name in enumerate(label_names)
        },
        "confusion": confusion(t).tolist(),
    }


def write_report(path: str | Path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")


def read_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def format_report(report: dict) -> str:
    """Human-readable rendering of :func:`make_report` output."""
    lines = [
        f"trials:    {report['n_trials']}",
        f"accuracy:  {report['accuracy']:.4f}",
        f"EER:       {report['eer_percent']:.3f}%",
        f"C_avg:     {report['c_avg']:.4f}  (p_target={report['p_target']})",
        "",
        f"{'language':<16} {'P_miss':>8} {'mean P_fa':>10}",
    ]
    for name in report["labels"]:
        stats = report["per_language"][name]
        fa = list(stats["p_fa"].values())
        mean_fa = sum(fa) / len(fa) if fa else 0.0
        lines.append(f"{name:<16} {stats['p_miss']:>8.4f} {mean_fa:>10.4f}")
    return "\n".join(lines)
