"""Classification, faithfulness and rationale-quality metrics."""

from __future__ import annotations

import json
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np


def micro_f1(predictions: Sequence[Sequence[float]], golds: Sequence[Sequence[float]]) -> float:
    """F1 pooled over every (case, label) cell; 1.0 when nothing is positive."""
    pred = np.asarray(predictions, dtype=bool)
    gold = np.asarray(golds, dtype=bool)
    if pred.shape != gold.shape:
        raise ValueError(f"micro_f1: shapes differ {pred.shape} and {gold.shape}")
    tp = int(np.sum(pred & gold))
    fp = int(np.sum(pred & ~gold))
    fn = int(np.sum(~pred & gold))
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def per_label_f1(predictions, golds) -> np.ndarray:
    pred = np.asarray(predictions, dtype=bool)
    gold = np.asarray(golds, dtype=bool)
    tp = (pred & gold).sum(axis=0)
    denom = 2 * tp + (pred & ~gold).sum(axis=0) + (~pred & gold).sum(axis=0)
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 1.0)


def _gold_gap(p_full, p_other, golds) -> float:
    diffs = []
    for full, other, gold in zip(p_full, p_other, golds):
        gold = np.asarray(gold, dtype=bool)
        if not gold.any():
            continue
        diffs.extend(np.asarray(full)[gold] - np.asarray(other)[gold])
    return float(np.mean(diffs)) if diffs else 0.0


def sufficiency(p_full, p_masked, golds=None) -> float:
    """Mean drop in gold-label probability when only the rationale is kept.

    Without ``golds`` the inputs are taken to be gold-label probabilities
    already (flat or one list per case).
    """
    if golds is None:
        return float(np.mean(np.concatenate([np.atleast_1d(np.asarray(p, float)) for p in p_full]) -
                             np.concatenate([np.atleast_1d(np.asarray(p, float)) for p in p_masked])))
    return _gold_gap(p_full, p_masked, golds)


def comprehensiveness_metric(p_full, p_complement, golds=None) -> float:
    """Mean drop in gold-label probability when the rationale is removed."""
    return sufficiency(p_full, p_complement, golds)


def rationale_f1(pred_mask, gold_mask) -> float:
    pred = set(np.flatnonzero(np.asarray(pred_mask)).tolist())
    gold = set(np.flatnonzero(np.asarray(gold_mask)).tolist())
    if len(np.asarray(pred_mask)) != len(np.asarray(gold_mask)):
        raise ValueError("rationale_f1: mask lengths differ")
    if not pred and not gold:
        return 1.0
    if not pred or not gold:
        return 0.0
    tp = len(pred & gold)
    return 2 * tp / (len(pred) + len(gold))


def rank_selected(scores, mask) -> list[int]:
    """Indices with ``mask == 1`` by decreasing score, ties by index."""
    scores = np.asarray(scores, dtype=float)
    selected = np.flatnonzero(np.asarray(mask) > 0)
    order = sorted(selected.tolist(), key=lambda i: (-scores[i], i))
    return order


def _r_precision_exact(ranking: Sequence[int], gold: Iterable[int]) -> Fraction | None:
    gold = set(gold)
    if not gold:
        return None
    k = len(gold)
    return Fraction(len(set(list(ranking)[:k]) & gold), k)


def r_precision(ranking: Sequence[int], gold: Iterable[int]) -> float | None:
    value = _r_precision_exact(ranking, gold)
    return None if value is None else float(value)


def mean_r_precision(rankings: Sequence[Sequence[int]], golds: Sequence[Iterable[int]]) -> float:
    """Average Precision@k with k the gold size; cases with empty gold are skipped.

    The average is taken in exact rational arithmetic, so the result is the
    correctly rounded value regardless of case order.
    """
    values = [v for v in (_r_precision_exact(r, g) for r, g in zip(rankings, golds)) if v is not None]
    return float(sum(values) / len(values)) if values else 0.0


@dataclass
class RunAggregate:
    mean: float
    std: float
    n_runs: int

    def __str__(self) -> str:
        return f"{self.mean:.3f} ± {self.std:.3f}"


def aggregate_runs(values: Sequence[float]) -> RunAggregate:
    if len(values) == 0:
        raise ValueError("aggregate_runs: no values")
    arr = np.asarray(values, dtype=float)
    return RunAggregate(float(arr.mean()), float(arr.std()), len(arr))


@dataclass
class EvalReport:
    micro_f1_full: float
    micro_f1_masked: float
    micro_f1_complement: float
    sufficiency: float
    comprehensiveness: float
    rationale_f1: float
    mean_r_precision: float
    observed_sparsity: float
    rationale_source: str = "gold"
    per_label_f1: dict[str, tuple[float, int]] = field(default_factory=dict)

    SCORES = ("micro_f1_full", "micro_f1_masked", "micro_f1_complement", "sufficiency",
              "comprehensiveness", "rationale_f1", "mean_r_precision", "observed_sparsity")

    def scores(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.SCORES}

    def to_dict(self) -> dict:
        return asdict(self)

    def to_machine(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_table(self) -> str:
        return render_table([("model", {k: v for k, v in self.scores().items()})], self.rationale_source)


def _fmt(value) -> str:
    if isinstance(value, RunAggregate):
        return f"{value.mean:.3f} ± {value.std:.3f}"
    return f"{value:.3f}"


def render_table(rows: Sequence[tuple[str, dict]], rationale_source: str = "gold") -> str:
    """Two text tables: classification/faithfulness, then rationale quality."""
    cols = [
        ("sparsity %", "observed_sparsity"),
        ("F1 entire", "micro_f1_full"),
        ("F1 masked Z", "micro_f1_masked"),
        ("Suff.", "sufficiency"),
        ("F1 compl. Zc", "micro_f1_complement"),
        ("Comp.", "comprehensiveness"),
    ]
    quality = [(f"mRP ({rationale_source})", "mean_r_precision"), (f"F1 ({rationale_source})", "rationale_f1")]
    out = []
    for columns in (cols, quality):
        width = max(len(name) for name, _ in rows) if rows else 6
        header = ["method".ljust(width)] + [name for name, _ in columns]
        lines = [" | ".join(header)]
        lines.append("-" * len(lines[0]))
        for name, values in rows:
            cells = [name.ljust(width)]
            for title, key in columns:
                cells.append(_fmt(values[key]).rjust(len(title)))
            lines.append(" | ".join(cells))
        out.append("\n".join(lines))
    return "\n\n".join(out)
