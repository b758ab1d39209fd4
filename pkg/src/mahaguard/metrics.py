"""OOD evaluation metrics: AUROC and FPR at a target TPR, plus report assembly.

ID is the positive class throughout: a false positive is an OOD sample
accepted as ID.  AUROC uses the Mann-Whitney U statistic with midrank tie
handling, so ties earn half credit and auroc(a, b) + auroc(b, a) == 1 holds
exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyScores, InvalidParams, NonFiniteScore
from .scorers import ScoreVector, calibrate_threshold


def _validate_scores(scores, name: str) -> np.ndarray:
    arr = scores.scores if isinstance(scores, ScoreVector) else np.asarray(scores, dtype=np.float64)
    arr = arr.reshape(-1)
    if arr.size == 0:
        raise EmptyScores(f"{name} scores are empty")
    if not np.isfinite(arr).all():
        raise NonFiniteScore(f"{name} scores contain NaN or Inf")
    return arr


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their group."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    boundaries = np.flatnonzero(np.diff(sorted_vals) != 0) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [values.size]))
    ranks = np.empty(values.size)
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0  # mean of 1-based ranks s+1 .. e
    return ranks


def auroc(id_scores, ood_scores) -> float:
    """P(random ID score > random OOD score), ties at half credit.

    Single sort with midranks, O((n_id + n_ood) log n); equals brute-force
    pair counting exactly (both numerators are exact half-integers).
    """
    ids = _validate_scores(id_scores, "ID")
    oods = _validate_scores(ood_scores, "OOD")
    combined = np.concatenate([ids, oods])
    ranks = _midranks(combined)
    n_id, n_ood = ids.size, oods.size
    u2 = 2.0 * ranks[:n_id].sum() - n_id * (n_id + 1)  # 2 * (wins + 0.5 * ties)
    return u2 / (2.0 * n_id * n_ood)


def fpr_at_tpr(id_scores, ood_scores, target_tpr: float = 0.95) -> tuple[float, float]:
    """FPR on OOD scores at the threshold where ID TPR first meets the target.

    Returns ``(fpr, threshold)``; the threshold is the largest tau keeping the
    ID true-positive rate >= target_tpr, and ties at tau count as ID.
    """
    ids = _validate_scores(id_scores, "ID")
    oods = _validate_scores(ood_scores, "OOD")
    rule = calibrate_threshold(ids, target_tpr)
    fpr = float((oods >= rule.tau).sum() / oods.size)
    return fpr, rule.tau


def _summary(arr: np.ndarray) -> dict:
    return {
        "min": float(arr.min()),
        "max": float(arr.max()),
        "mean": float(arr.mean()),
        "median": float(np.median(arr)),
    }


@dataclass
class ScorerReport:
    """Metrics for one scorer on one ID/OOD split."""

    scorer: str
    auroc: float
    fpr95: float
    threshold: float
    n_id: int
    n_ood: int
    id_summary: dict = field(default_factory=dict)
    ood_summary: dict = field(default_factory=dict)
    ood_set: str = ""

    def to_dict(self) -> dict:
        out = {
            "scorer": self.scorer,
            "auroc": self.auroc,
            "fpr95": self.fpr95,
            "threshold": self.threshold,
            "n_id": self.n_id,
            "n_ood": self.n_ood,
            "id_summary": self.id_summary,
            "ood_summary": self.ood_summary,
        }
        if self.ood_set:
            out["ood_set"] = self.ood_set
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ScorerReport":
        return cls(
            scorer=d["scorer"],
            auroc=d["auroc"],
            fpr95=d["fpr95"],
            threshold=d["threshold"],
            n_id=d["n_id"],
            n_ood=d["n_ood"],
            id_summary=d.get("id_summary", {}),
            ood_summary=d.get("ood_summary", {}),
            ood_set=d.get("ood_set", ""),
        )


@dataclass
class EvalReport:
    """Per-scorer evaluation results, serializable to a JSON array."""

    entries: list[ScorerReport]
    target_tpr: float = 0.95

    def to_json(self) -> str:
        return json.dumps([e.to_dict() for e in self.entries], indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, target_tpr: float = 0.95) -> "EvalReport":
        return cls(
            entries=[ScorerReport.from_dict(d) for d in json.loads(text)],
            target_tpr=target_tpr,
        )


def evaluate(
    id_scores: Sequence[ScoreVector],
    ood_scores: Sequence[ScoreVector],
    target_tpr: float = 0.95,
    ood_set: str = "",
) -> EvalReport:
    """Assemble one report entry per scorer; inputs are matched by scorer id."""
    by_id = {sv.scorer_id: sv for sv in ood_scores}
    if len(by_id) != len(ood_scores):
        raise InvalidParams("duplicate scorer ids in OOD scores")
    entries = []
    for id_sv in id_scores:
        ood_sv = by_id.pop(id_sv.scorer_id, None)
        if ood_sv is None:
            raise InvalidParams(f"no OOD scores for scorer {id_sv.scorer_id!r}")
        fpr, tau = fpr_at_tpr(id_sv, ood_sv, target_tpr)
        entries.append(
            ScorerReport(
                scorer=id_sv.scorer_id,
                auroc=auroc(id_sv, ood_sv),
                fpr95=fpr,
                threshold=tau,
                n_id=len(id_sv),
                n_ood=len(ood_sv),
                id_summary=_summary(id_sv.scores),
                ood_summary=_summary(ood_sv.scores),
                ood_set=ood_set,
            )
        )
    if by_id:
        raise InvalidParams(f"no ID scores for scorers {sorted(by_id)}")
    return EvalReport(entries=entries, target_tpr=target_tpr)


def macro_average(reports: Sequence[EvalReport], target_tpr: float = 0.95) -> EvalReport:
    """Average auroc/fpr95 per scorer across several OOD sets."""
    buckets: dict[str, list[ScorerReport]] = {}
    for report in reports:
        for entry in report.entries:
            buckets.setdefault(entry.scorer, []).append(entry)
    entries = []
    for scorer in sorted(buckets):
        group = buckets[scorer]
        entries.append(
            ScorerReport(
                scorer=scorer,
                auroc=float(np.mean([e.auroc for e in group])),
                fpr95=float(np.mean([e.fpr95 for e in group])),
                threshold=float(np.mean([e.threshold for e in group])),
                n_id=group[0].n_id,
                n_ood=int(sum(e.n_ood for e in group)),
                ood_set="macro",
            )
        )
    return EvalReport(entries=entries, target_tpr=target_tpr)
