"""Test-time OOD scoring functions and the threshold decision rule.

Every scorer returns scores where higher means more in-distribution, so a
single decision rule applies everywhere: ID iff score >= tau.  Mahalanobis
quadratic forms are evaluated through triangular solves against the stored
Cholesky factors; no covariance inverse is ever materialized.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .embio import EmbeddingSet
from .errors import (
    ClassOutOfRange,
    DimensionMismatch,
    EmptyBank,
    EmptyScores,
    InvalidParams,
    IoError,
    NonFiniteScore,
    NonPositiveTemperature,
    UnknownScorer,
)
from .stats import GaussianStats

SCORER_IDS = ("md", "rmd", "msp", "energy", "knn")


def check_scorer_id(scorer_id: str) -> str:
    sid = scorer_id.lower()
    if sid not in SCORER_IDS:
        raise UnknownScorer(
            f"unknown scorer {scorer_id!r}; valid names: {', '.join(SCORER_IDS)}"
        )
    return sid


@dataclass
class ScoreVector:
    """Scores for a batch of rows; higher = more in-distribution."""

    scores: np.ndarray
    scorer_id: str

    def __post_init__(self):
        self.scorer_id = check_scorer_id(self.scorer_id)
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not np.isfinite(scores).all():
            raise NonFiniteScore(f"{self.scorer_id}: non-finite score")
        self.scores = scores

    def __len__(self) -> int:
        return len(self.scores)


@dataclass(frozen=True)
class ThresholdRule:
    """Decision threshold tau: a row is ID iff its score >= tau."""

    tau: float

    def __post_init__(self):
        if not np.isfinite(self.tau):
            raise InvalidParams(f"threshold must be finite, got {self.tau}")


def _as_matrix(batch) -> np.ndarray:
    data = batch.data if isinstance(batch, EmbeddingSet) else np.asarray(batch, dtype=np.float64)
    return np.atleast_2d(data)


def _mahalanobis_all(x: np.ndarray, means: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Quadratic forms (x_i - mu_k)' Sigma^-1 (x_i - mu_k) for all rows and classes.

    Returns an (n, K) matrix, computed as squared norms of L^-1 (x - mu_k)'.
    """
    n, k = x.shape[0], means.shape[0]
    out = np.empty((n, k))
    for j in range(k):
        diff = (x - means[j]).T                       # (d, n)
        solved = solve_triangular(chol, diff, lower=True)
        out[:, j] = np.einsum("dn,dn->n", solved, solved)
    return np.maximum(out, 0.0)


def mahalanobis_distance(z: np.ndarray, stats: GaussianStats, k: int) -> float:
    """Squared Mahalanobis distance of one vector to class k's centroid."""
    if not 0 <= k < stats.num_classes:
        raise ClassOutOfRange(f"class {k} out of range [0, {stats.num_classes})")
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.shape[0] != stats.dim:
        raise DimensionMismatch(f"vector dim {z.shape[0]} != stats dim {stats.dim}")
    return float(
        _mahalanobis_all(z[None, :], stats.class_means[k : k + 1], stats.chol_factor)[0, 0]
    )


def class_mahalanobis(batch, stats: GaussianStats) -> np.ndarray:
    """(n, K) matrix of squared Mahalanobis distances to every class centroid."""
    x = _as_matrix(batch)
    if x.shape[1] != stats.dim:
        raise DimensionMismatch(f"batch dim {x.shape[1]} != stats dim {stats.dim}")
    return _mahalanobis_all(x, stats.class_means, stats.chol_factor)


def background_mahalanobis(batch, stats: GaussianStats) -> np.ndarray:
    """(n,) squared Mahalanobis distances under the background Gaussian."""
    x = _as_matrix(batch)
    if x.shape[1] != stats.dim:
        raise DimensionMismatch(f"batch dim {x.shape[1]} != stats dim {stats.dim}")
    return _mahalanobis_all(x, stats.background_mean[None, :], stats.background_chol)[:, 0]


def score_md(batch, stats: GaussianStats) -> ScoreVector:
    """Mahalanobis score: minus the distance to the closest class centroid."""
    md = class_mahalanobis(batch, stats)
    return ScoreVector(scores=-md.min(axis=1), scorer_id="md")


def score_rmd(batch, stats: GaussianStats) -> ScoreVector:
    """Relative Mahalanobis score: class distance minus the background distance.

    score = -min_k [ MD_k(z) - MD_bg(z) ]; positive values are possible when
    the background is farther than the best class.
    """
    md = class_mahalanobis(batch, stats)
    md0 = background_mahalanobis(batch, stats)
    return ScoreVector(scores=-(md - md0[:, None]).min(axis=1), scorer_id="rmd")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def score_msp(logits: np.ndarray) -> ScoreVector:
    """Maximum softmax probability over the model's output logits."""
    z = _as_matrix(logits)
    if z.shape[1] < 2:
        raise DimensionMismatch(f"MSP needs K >= 2 logits, got {z.shape[1]}")
    return ScoreVector(scores=softmax(z).max(axis=1), scorer_id="msp")


def score_energy(logits: np.ndarray, temperature: float = 1.0) -> ScoreVector:
    """Energy score T * logsumexp(logits / T); higher = more ID."""
    if not temperature > 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    z = _as_matrix(logits) / temperature
    zmax = z.max(axis=1)
    lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
    return ScoreVector(scores=temperature * lse, scorer_id="energy")


class KnnIndex:
    """Unit-normalized reference bank for k-th-nearest-neighbor scoring."""

    def __init__(self, reference: np.ndarray | EmbeddingSet, k: int = 10):
        bank = _as_matrix(reference).copy()
        if bank.shape[0] == 0:
            raise EmptyBank("reference bank is empty")
        if not 1 <= k <= bank.shape[0]:
            raise InvalidParams(f"k must be in [1, {bank.shape[0]}], got {k}")
        self.bank = _unit_rows(bank)
        self.k = int(k)

    @property
    def dim(self) -> int:
        return self.bank.shape[1]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def score_knn(batch, index: KnnIndex) -> ScoreVector:
    """Minus the Euclidean distance to the k-th nearest bank row (unit-normalized).

    Exact full scan with partial selection; ties share the same distance value
    so the score is deterministic regardless of neighbor identity.
    """
    x = _as_matrix(batch)
    if x.shape[1] != index.dim:
        raise DimensionMismatch(f"query dim {x.shape[1]} != bank dim {index.dim}")
    q = _unit_rows(x)
    kth = np.empty(q.shape[0])
    chunk = max(1, int(2**22 // max(index.bank.size, 1)))
    for start in range(0, q.shape[0], chunk):
        block = q[start : start + chunk]
        diff = block[:, None, :] - index.bank[None, :, :]
        d2 = np.einsum("qbd,qbd->qb", diff, diff)
        kth[start : start + chunk] = np.partition(d2, index.k - 1, axis=1)[:, index.k - 1]
    return ScoreVector(scores=-np.sqrt(np.maximum(kth, 0.0)), scorer_id="knn")


def decide(scores: ScoreVector, rule: ThresholdRule) -> np.ndarray:
    """Boolean decisions per row: True = ID (score >= tau, boundary inclusive)."""
    return scores.scores >= rule.tau


def calibrate_threshold(id_scores, target_tpr: float = 0.95) -> ThresholdRule:
    """Largest tau such that the fraction of ID scores >= tau is still >= target_tpr."""
    scores = id_scores.scores if isinstance(id_scores, ScoreVector) else np.asarray(id_scores, dtype=np.float64)
    scores = scores.reshape(-1)
    if scores.size == 0:
        raise EmptyScores("cannot calibrate a threshold on empty scores")
    if not np.isfinite(scores).all():
        raise NonFiniteScore("non-finite score in calibration set")
    if not 0.0 < target_tpr <= 1.0:
        raise InvalidParams(f"target TPR must be in (0, 1], got {target_tpr}")
    s = np.sort(scores)
    n = s.size
    # Candidate thresholds are the distinct score values; for tau = s[i] (first
    # occurrence) the TPR is (n - i) / n.  Scan for the largest admissible one.
    first = np.ones(n, dtype=bool)
    first[1:] = s[1:] != s[:-1]
    idx = np.arange(n)
    admissible = first & ((n - idx) / n >= target_tpr)
    return ThresholdRule(tau=float(s[idx[admissible].max()]))


def write_scores_csv(scores: ScoreVector, destination, rule: ThresholdRule | None = None) -> None:
    """Export scores as CSV, adding a decision column when a threshold is supplied."""
    dest = Path(destination)
    try:
        with dest.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if rule is None:
                writer.writerow(["row_index", "score"])
                for i, v in enumerate(scores.scores):
                    writer.writerow([i, repr(float(v))])
            else:
                writer.writerow(["row_index", "score", "decision"])
                flags = decide(scores, rule)
                for i, (v, is_id) in enumerate(zip(scores.scores, flags)):
                    writer.writerow([i, repr(float(v)), "ID" if is_id else "OOD"])
    except OSError as exc:
        raise IoError(f"cannot write {dest}: {exc}") from exc
