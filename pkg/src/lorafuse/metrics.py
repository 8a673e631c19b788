"""Evaluation metrics: exact-match accuracy, sentence BLEU, ROUGE-1, ROUGE-L.

All scores live in [0, 1]; the CLI multiplies by 100 for display.
Tokenization is plain whitespace splitting.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

from .errors import ContractError

METRIC_NAMES = ("accuracy", "bleu", "rouge1", "rougeL")


def accuracy(predictions, golds) -> float:
    """Fraction of whitespace-normalized exact matches."""
    if len(predictions) != len(golds):
        raise ContractError(
            f"{len(predictions)} predictions vs {len(golds)} references"
        )
    if not golds:
        raise ContractError("accuracy of zero examples is undefined")
    hits = sum(
        " ".join(p.split()) == " ".join(g.split())
        for p, g in zip(predictions, golds)
    )
    return hits / len(golds)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: str, reference: str, max_n: int = 4, smooth: bool = False) -> float:
    """Sentence BLEU: geometric mean of clipped n-gram precisions with a
    brevity penalty.

    Orders longer than the candidate are dropped (weights renormalize over
    the rest). Without ``smooth``, any remaining zero precision zeroes the
    score; with it, empty counts are add-one smoothed.
    """
    ref = reference.split()
    cand = candidate.split()
    if not ref:
        raise ContractError("BLEU reference must be non-empty")
    if not cand:
        return 0.0
    log_sum = 0.0
    orders = 0
    for n in range(1, max_n + 1):
        cand_ngrams = _ngrams(cand, n)
        total = sum(cand_ngrams.values())
        if total == 0:
            continue
        ref_ngrams = _ngrams(ref, n)
        matched = sum(min(c, ref_ngrams[g]) for g, c in cand_ngrams.items())
        if matched == 0:
            if not smooth:
                return 0.0
            matched, total = 1, total + 1
        log_sum += math.log(matched / total)
        orders += 1
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return bp * math.exp(log_sum / orders)


def _prf(matched: int, cand_len: int, ref_len: int) -> dict[str, float]:
    p = matched / cand_len if cand_len else 0.0
    r = matched / ref_len if ref_len else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return {"precision": p, "recall": r, "f1": f1}


def rouge1(candidate: str, reference: str) -> dict[str, float]:
    """Clipped unigram overlap as precision / recall / f1."""
    ref = reference.split()
    cand = candidate.split()
    if not ref:
        raise ContractError("ROUGE reference must be non-empty")
    overlap = sum((Counter(cand) & Counter(ref)).values())
    return _prf(overlap, len(cand), len(ref))


def lcs_length(a: list[str], b: list[str]) -> int:
    """Longest common subsequence length, O(len(a) * len(b)) table."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rougeL(candidate: str, reference: str) -> dict[str, float]:
    """LCS-based precision / recall / f1 over whitespace tokens."""
    ref = reference.split()
    cand = candidate.split()
    if not ref:
        raise ContractError("ROUGE reference must be non-empty")
    return _prf(lcs_length(cand, ref), len(cand), len(ref))


@dataclass
class EvalReport:
    """Per-task metric table plus unweighted aggregate means."""

    per_task: dict[str, dict[str, float]] = field(default_factory=dict)

    def add(self, task_label: str, scores: dict[str, float]) -> None:
        for name, value in scores.items():
            if name not in METRIC_NAMES:
                raise ContractError(f"unknown metric {name!r}")
            if not 0.0 <= value <= 1.0 + 1e-9:
                raise ContractError(f"{name}={value} outside [0, 1]")
        self.per_task[task_label] = dict(scores)

    @property
    def aggregate(self) -> dict[str, float]:
        sums: dict[str, list[float]] = {}
        for scores in self.per_task.values():
            for name, value in scores.items():
                sums.setdefault(name, []).append(value)
        return {name: sum(vs) / len(vs) for name, vs in sums.items()}

    def to_json(self) -> str:
        return json.dumps(
            {"per_task": self.per_task, "aggregate": self.aggregate},
            indent=2, sort_keys=True,
        )

    def to_text(self) -> str:
        """Aligned table, scores shown as percentages."""
        cols = [m for m in METRIC_NAMES
                if any(m in s for s in self.per_task.values())]
        width = max([len(t) for t in self.per_task] + [len("aggregate"), 9])
        lines = [" ".join(["task".ljust(width)] + [c.rjust(9) for c in cols])]
        rows = list(self.per_task.items()) + [("aggregate", self.aggregate)]
        for label, scores in rows:
            cells = [
                f"{scores[c] * 100:9.2f}" if c in scores else " " * 9 for c in cols
            ]
            lines.append(" ".join([label.ljust(width)] + cells))
        return "\n".join(lines)
