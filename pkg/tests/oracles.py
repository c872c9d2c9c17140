"""Independent brute-force oracles, coded with plain Python loops.

These deliberately avoid the library's vectorized code paths (and torch
entirely) so they can serve as an independent check of the losses and
metrics. Metric oracles use exact rational arithmetic.
"""

from __future__ import annotations

import math
from fractions import Fraction


def cosine_oracle(a, b) -> float:
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def _logsumexp(values) -> float:
    m = max(values)
    return m + math.log(sum(math.exp(v - m) for v in values))


def frame_nce_oracle(z, anchor, negatives) -> float:
    sims = [cosine_oracle(z[anchor], z[anchor + 1])]
    sims += [cosine_oracle(z[anchor], z[j]) for j in negatives]
    return _logsumexp(sims) - sims[0]


def utterance_nce_oracle(z, negatives) -> float:
    """Mean frame loss over anchors 0..len(z)-2 with the given negatives."""
    total = 0.0
    n_anchors = len(z) - 1
    for i in range(n_anchors):
        total += frame_nce_oracle(z, i, negatives[i])
    return total / n_anchors


def cross_entropy_oracle(score_rows, labels) -> float:
    total = 0.0
    for row, label in zip(score_rows, labels):
        total += _logsumexp(list(row)) - row[label]
    return total / len(score_rows)


def multi_task_oracle(l_lid, l_nce, alpha) -> float:
    return alpha * l_lid + (1.0 - alpha) * l_nce


def accuracy_oracle(score_rows, labels) -> float:
    hits = 0
    for row, label in zip(score_rows, labels):
        best = 0
        for j in range(1, len(row)):
            if row[j] > row[best]:
                best = j
        hits += best == label
    return hits / len(labels)


def eer_oracle(scores, is_target) -> float:
    """Exact-rational polyline crossing over all distinct-score thresholds."""
    trials = list(zip(scores, is_target))
    n_tar = sum(1 for _, t in trials if t)
    n_non = len(trials) - n_tar
    points = [(Fraction(0), Fraction(1))]
    for s in sorted(set(scores)):
        miss = Fraction(sum(1 for sc, t in trials if t and sc <= s), n_tar)
        fa = Fraction(sum(1 for sc, t in trials if not t and sc > s), n_non)
        points.append((miss, fa))
    for k, (miss, fa) in enumerate(points):
        d = miss - fa
        if d == 0:
            return float(miss)
        if d > 0:
            m0, f0 = points[k - 1]
            d0 = m0 - f0
            lam = -d0 / (d - d0)
            return float(m0 + lam * (miss - m0))
    raise AssertionError("no crossing found")


def c_avg_oracle(score_rows, labels, p_target=Fraction(1, 2)) -> float:
    """Hard argmax decisions, per-language miss/false-alarm costs, exact."""
    n_langs = len(score_rows[0])
    preds = []
    for row in score_rows:
        best = 0
        for j in range(1, len(row)):
            if row[j] > row[best]:
                best = j
        preds.append(best)
    p_target = Fraction(p_target)
    total = Fraction(0)
    for lang in range(n_langs):
        of_lang = [p for p, y in zip(preds, labels) if y == lang]
        miss = Fraction(sum(1 for p in of_lang if p != lang), len(of_lang))
        fa_sum = Fraction(0)
        for other in range(n_langs):
            if other == lang:
                continue
            of_other = [p for p, y in zip(preds, labels) if y == other]
            fa_sum += Fraction(sum(1 for p in of_other if p == lang), len(of_other))
        total += p_target * miss + (1 - p_target) / (n_langs - 1) * fa_sum
    return float(total / n_langs)
