"""Class-conditional Gaussian estimation: batch MLE, shrinkage, and EMA streaming.

The model is K class means with a single tied covariance, plus one
class-agnostic "background" Gaussian fit to all rows (the reference
distribution for relative-Mahalanobis scoring).  Covariances are always
shrunk toward a scaled identity before use, so the estimates stay
well-conditioned even when batches are smaller than the feature dimension.

Streaming estimation keeps an exponential moving average of the means and of
the per-batch shrunk covariances; each batch covariance is shrunk first and
then blended, so every accumulated term is positive definite on its own.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .embio import EmbeddingSet
from .errors import (
    BadMagic,
    DimensionMismatch,
    EmptyBatch,
    EmptyClass,
    InvalidParams,
    IoError,
    NotPositiveDefinite,
    TruncatedFile,
    UnseenClass,
)

_JITTER_EPS = 1e-6
_MAX_JITTER_DOUBLINGS = 8

_STATS_MAGIC = b"MGS1"


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return (a + a.T) / 2.0


def _check_symmetric(a: np.ndarray, name: str, rtol: float = 1e-9) -> None:
    scale = max(float(np.abs(a).max()), 1.0)
    if np.abs(a - a.T).max() > rtol * scale:
        raise InvalidParams(f"{name} is not symmetric within {rtol} relative tolerance")


def cholesky_with_jitter(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lower Cholesky factor of ``cov``, adding scale-aware jitter on failure.

    Jitter is eps * m * I with m = trace/d (or 1.0 for a zero-trace matrix),
    doubled up to 8 times.  Returns ``(L, repaired_cov)`` where repaired_cov
    includes whatever jitter was needed, so L @ L.T reconstructs it.
    """
    cov = _symmetrize(np.asarray(cov, dtype=np.float64))
    d = cov.shape[0]
    trace = float(np.trace(cov))
    m = trace / d if trace > 0 else 1.0
    eps = 0.0
    for attempt in range(_MAX_JITTER_DOUBLINGS + 1):
        candidate = cov if eps == 0.0 else cov + eps * m * np.eye(d)
        try:
            return np.linalg.cholesky(candidate), candidate
        except np.linalg.LinAlgError:
            eps = _JITTER_EPS if eps == 0.0 else eps * 2.0
    raise NotPositiveDefinite(
        f"covariance not positive definite after {_MAX_JITTER_DOUBLINGS} jitter doublings"
    )


@dataclass
class GaussianStats:
    """Fitted per-class means, tied covariance, and the background Gaussian.

    Immutable after construction; Cholesky factors are precomputed so score
    evaluation never materializes a matrix inverse.
    """

    class_means: np.ndarray          # (K, d)
    tied_covariance: np.ndarray      # (d, d), SPD
    chol_factor: np.ndarray          # lower triangular, L @ L.T == tied_covariance
    background_mean: np.ndarray      # (d,)
    background_covariance: np.ndarray
    background_chol: np.ndarray
    num_classes: int
    dim: int

    @classmethod
    def create(
        cls,
        class_means: np.ndarray,
        tied_covariance: np.ndarray,
        background_mean: np.ndarray,
        background_covariance: np.ndarray,
    ) -> "GaussianStats":
        means = np.atleast_2d(np.asarray(class_means, dtype=np.float64))
        k, d = means.shape
        bg_mean = np.asarray(background_mean, dtype=np.float64).reshape(-1)
        tied = np.asarray(tied_covariance, dtype=np.float64)
        bg_cov = np.asarray(background_covariance, dtype=np.float64)
        if tied.shape != (d, d) or bg_cov.shape != (d, d) or bg_mean.shape != (d,):
            raise DimensionMismatch(
                f"inconsistent shapes: means {means.shape}, tied {tied.shape}, "
                f"background {bg_mean.shape}/{bg_cov.shape}"
            )
        _check_symmetric(tied, "tied covariance")
        _check_symmetric(bg_cov, "background covariance")
        chol, tied = cholesky_with_jitter(tied)
        bg_chol, bg_cov = cholesky_with_jitter(bg_cov)
        return cls(
            class_means=means,
            tied_covariance=tied,
            chol_factor=chol,
            background_mean=bg_mean,
            background_covariance=bg_cov,
            background_chol=bg_chol,
            num_classes=k,
            dim=d,
        )

    def log_det_tied(self) -> float:
        return 2.0 * float(np.log(np.diag(self.chol_factor)).sum())


@dataclass(frozen=True)
class Shrinkage:
    """Covariance shrinkage mode: Ledoit-Wolf auto or a fixed coefficient."""

    mode: str  # "auto" | "fixed"
    lam: float = 0.0

    def __post_init__(self):
        if self.mode not in ("auto", "fixed"):
            raise InvalidParams(f"unknown shrinkage mode {self.mode!r}")
        if self.mode == "fixed" and not 0.0 <= self.lam <= 1.0:
            raise InvalidParams(f"fixed shrinkage coefficient must be in [0,1], got {self.lam}")

    @classmethod
    def auto(cls) -> "Shrinkage":
        return cls("auto")

    @classmethod
    def fixed(cls, lam: float) -> "Shrinkage":
        return cls("fixed", float(lam))

    @classmethod
    def parse(cls, text: str) -> "Shrinkage":
        """Parse ``"auto"`` or ``"fixed:<lam>"``."""
        text = text.strip()
        if text == "auto":
            return cls.auto()
        if text.startswith("fixed:"):
            try:
                return cls.fixed(float(text.split(":", 1)[1]))
            except ValueError:
                raise InvalidParams(f"cannot parse shrinkage coefficient in {text!r}") from None
        raise InvalidParams(f"shrinkage must be 'auto' or 'fixed:<lam>', got {text!r}")

    def apply(self, sample_covariance: np.ndarray, centered_data: np.ndarray):
        if self.mode == "auto":
            return ledoit_wolf_shrink(sample_covariance, centered_data)
        return shrink_to_identity_target(sample_covariance, self.lam), self.lam


def shrink_to_identity_target(sample_covariance: np.ndarray, lam: float) -> np.ndarray:
    """(1 - lam) * S + lam * m * I with m = trace(S)/d."""
    s = np.asarray(sample_covariance, dtype=np.float64)
    d = s.shape[0]
    m = float(np.trace(s)) / d
    return (1.0 - lam) * s + lam * m * np.eye(d)


def ledoit_wolf_shrink(
    sample_covariance: np.ndarray, centered_data: np.ndarray
) -> tuple[np.ndarray, float]:
    """Shrink S toward m*I with the Ledoit-Wolf analytic coefficient.

    ``centered_data`` are the n x d residuals the sample covariance was
    computed from (S = X'X/n); the coefficient estimate is

        m     = trace(S) / d
        delta = ||S - m I||^2_F / d
        beta  = min(delta, (1/(d n)) * sum_jk[ mean_t(x_tj^2 x_tk^2) - S_jk^2 ])
        lam   = beta / delta   (0 when delta == 0), clamped to [0, 1].
    """
    s = np.asarray(sample_covariance, dtype=np.float64)
    x = np.atleast_2d(np.asarray(centered_data, dtype=np.float64))
    d = s.shape[0]
    if s.shape != (d, d):
        raise DimensionMismatch(f"sample covariance must be square, got {s.shape}")
    if x.shape[1] != d:
        raise DimensionMismatch(
            f"centered data dim {x.shape[1]} does not match covariance dim {d}"
        )
    _check_symmetric(s, "sample covariance")
    n = x.shape[0]
    if n < 1:
        raise EmptyBatch("need at least one centered row")
    m = float(np.trace(s)) / d
    delta = float(((s - m * np.eye(d)) ** 2).sum()) / d
    if delta <= 0.0:
        # S already equals the target; any coefficient is a fixed point.
        return s.copy(), 0.0
    x2 = x * x
    beta_hat = (float((x2.T @ x2).sum()) / n - float((s * s).sum())) / (d * n)
    lam = min(beta_hat, delta) / delta
    lam = min(max(lam, 0.0), 1.0)
    return shrink_to_identity_target(s, lam), lam


def _class_means(data: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=num_classes)
    for k in range(num_classes):
        if counts[k] == 0:
            raise EmptyClass(k)
    sums = np.zeros((num_classes, data.shape[1]))
    np.add.at(sums, labels, data)
    return sums / counts[:, None]


def fit_batch_mle(embeddings: EmbeddingSet, num_classes: int | None = None):
    """Per-class means and the tied covariance MLE (1/n pooled centered outer products)."""
    if embeddings.labels is None:
        raise InvalidParams("fit_batch_mle requires a labeled embedding set")
    data, labels = embeddings.data, embeddings.labels
    k = num_classes if num_classes is not None else embeddings.num_classes()
    means = _class_means(data, labels, k)
    centered = data - means[labels]
    tied = (centered.T @ centered) / data.shape[0]
    return means, _symmetrize(tied)


@dataclass
class OnlineStatsState:
    """EMA accumulators for the Gaussian parameters, updated once per batch.

    Single-writer: updates are sequential and return a fresh state.  Background
    accumulators mirror the class-conditional ones so the streaming path can
    produce the relative-Mahalanobis reference distribution without retaining
    any data.
    """

    num_classes: int
    dim: int
    momentum: float
    shrinkage: Shrinkage
    ema_means: np.ndarray                 # (K, d)
    ema_covariance: np.ndarray            # (d, d)
    ema_background_mean: np.ndarray       # (d,)
    ema_background_covariance: np.ndarray
    updates_seen: int = 0
    per_class_seen: np.ndarray = None     # (K,) sample counts

    @classmethod
    def init(
        cls,
        num_classes: int,
        dim: int,
        momentum: float = 0.95,
        shrinkage: Shrinkage = Shrinkage("auto"),
    ) -> "OnlineStatsState":
        if not 0.0 <= momentum < 1.0:
            raise InvalidParams(f"momentum must be in [0,1), got {momentum}")
        if num_classes < 1 or dim < 1:
            raise InvalidParams("need num_classes >= 1 and dim >= 1")
        return cls(
            num_classes=num_classes,
            dim=dim,
            momentum=momentum,
            shrinkage=shrinkage,
            ema_means=np.zeros((num_classes, dim)),
            ema_covariance=np.zeros((dim, dim)),
            ema_background_mean=np.zeros(dim),
            ema_background_covariance=np.zeros((dim, dim)),
            updates_seen=0,
            per_class_seen=np.zeros(num_classes, dtype=np.int64),
        )


def ema_update(state: OnlineStatsState, batch: EmbeddingSet) -> OnlineStatsState:
    """Blend one labeled batch into the EMA state; returns a new state.

    Per class present in the batch the mean moves toward the batch mean
    (classes absent are untouched; a class seen for the first time adopts the
    batch mean outright).  The batch covariance is computed from rows centered
    at the post-update means, shrunk, and then blended; the very first update
    sets the accumulators directly to the batch estimates.
    """
    if batch.labels is None:
        raise InvalidParams("ema_update requires a labeled batch")
    if batch.data.shape[0] == 0:
        raise EmptyBatch("empty batch")
    if batch.dim != state.dim:
        raise DimensionMismatch(f"batch dim {batch.dim} != state dim {state.dim}")
    labels = batch.labels
    if labels.max() >= state.num_classes:
        raise DimensionMismatch(
            f"batch label {labels.max()} out of range for K={state.num_classes}"
        )
    data = batch.data
    m = state.momentum
    first = state.updates_seen == 0

    means = state.ema_means.copy()
    present = np.unique(labels)
    for k in present:
        batch_mean = data[labels == k].mean(axis=0)
        if state.per_class_seen[k] == 0:
            means[k] = batch_mean
        else:
            means[k] = m * means[k] + (1.0 - m) * batch_mean

    bg_batch_mean = data.mean(axis=0)
    if first:
        bg_mean = bg_batch_mean
    else:
        bg_mean = m * state.ema_background_mean + (1.0 - m) * bg_batch_mean

    n = data.shape[0]
    class_centered = data - means[labels]
    batch_cov = _symmetrize((class_centered.T @ class_centered) / n)
    shrunk_cov, _ = state.shrinkage.apply(batch_cov, class_centered)

    bg_centered = data - bg_mean
    bg_batch_cov = _symmetrize((bg_centered.T @ bg_centered) / n)
    shrunk_bg_cov, _ = state.shrinkage.apply(bg_batch_cov, bg_centered)

    if first:
        cov = shrunk_cov
        bg_cov = shrunk_bg_cov
    else:
        cov = _symmetrize(m * state.ema_covariance + (1.0 - m) * shrunk_cov)
        bg_cov = _symmetrize(m * state.ema_background_covariance + (1.0 - m) * shrunk_bg_cov)

    seen = state.per_class_seen.copy()
    seen += np.bincount(labels, minlength=state.num_classes)
    return replace(
        state,
        ema_means=means,
        ema_covariance=cov,
        ema_background_mean=bg_mean,
        ema_background_covariance=bg_cov,
        updates_seen=state.updates_seen + 1,
        per_class_seen=seen,
    )


def fit_gaussian_stats(
    embeddings: EmbeddingSet,
    shrinkage: Shrinkage = Shrinkage("auto"),
    num_classes: int | None = None,
) -> tuple[GaussianStats, float]:
    """Offline fit: batch MLE, shrink, plus the background Gaussian on all rows.

    Returns the stats and the shrinkage coefficient used for the tied covariance.
    """
    means, tied_mle = fit_batch_mle(embeddings, num_classes=num_classes)
    data, labels = embeddings.data, embeddings.labels
    class_centered = data - means[labels]
    tied, lam = shrinkage.apply(tied_mle, class_centered)

    bg_mean = data.mean(axis=0)
    bg_centered = data - bg_mean
    bg_mle = _symmetrize((bg_centered.T @ bg_centered) / data.shape[0])
    bg_cov, _ = shrinkage.apply(bg_mle, bg_centered)
    stats = GaussianStats.create(means, tied, bg_mean, bg_cov)
    return stats, lam


def finalize_stats(
    state: OnlineStatsState, full_data: EmbeddingSet | None = None
) -> GaussianStats:
    """Freeze the streaming state into scorer-ready GaussianStats.

    When ``full_data`` is given the parameters are recomputed offline from it
    (same shrinkage mode); otherwise the EMA accumulators are used as-is.
    """
    for k in range(state.num_classes):
        if state.per_class_seen is None or state.per_class_seen[k] == 0:
            raise UnseenClass(k)
    if full_data is not None:
        stats, _ = fit_gaussian_stats(
            full_data, shrinkage=state.shrinkage, num_classes=state.num_classes
        )
        return stats
    return GaussianStats.create(
        state.ema_means,
        state.ema_covariance,
        state.ema_background_mean,
        state.ema_background_covariance,
    )


def save_stats(stats: GaussianStats, destination) -> None:
    """Write the "MGS1" binary stats file (little-endian, float64 payload)."""
    dest = Path(destination)
    parts = [
        _STATS_MAGIC,
        struct.pack("<II", stats.num_classes, stats.dim),
        np.ascontiguousarray(stats.class_means, dtype="<f8").tobytes(),
        np.ascontiguousarray(stats.tied_covariance, dtype="<f8").tobytes(),
        np.ascontiguousarray(stats.background_mean, dtype="<f8").tobytes(),
        np.ascontiguousarray(stats.background_covariance, dtype="<f8").tobytes(),
    ]
    try:
        dest.write_bytes(b"".join(parts))
    except OSError as exc:
        raise IoError(f"cannot write {dest}: {exc}") from exc


def load_stats(source) -> GaussianStats:
    """Read an "MGS1" stats file; Cholesky factors are recomputed, never stored."""
    path = Path(source)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 12:
        raise TruncatedFile(f"{path}: shorter than the 12-byte header")
    if raw[:4] != _STATS_MAGIC:
        raise BadMagic(f"{path}: bad magic {raw[:4]!r}, expected {_STATS_MAGIC!r}")
    k, d = struct.unpack_from("<II", raw, 4)
    expected = (k * d + d * d + d + d * d) * 8
    actual = len(raw) - 12
    if actual != expected:
        raise TruncatedFile(f"{path}: expected {expected} payload bytes, found {actual}")
    off = 12
    def take(count):
        nonlocal off
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).copy()
        off += count * 8
        return arr
    means = take(k * d).reshape(k, d)
    tied = take(d * d).reshape(d, d)
    bg_mean = take(d)
    bg_cov = take(d * d).reshape(d, d)
    return GaussianStats.create(means, tied, bg_mean, bg_cov)
