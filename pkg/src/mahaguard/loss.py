"""Training objective: cross-entropy over Mahalanobis-derived logits.

Class posteriors come from softmax over logits ``-scale * MD_k(z)``, i.e. the
Gaussian likelihood with uniform class priors (the priors cancel).  The
blended objective is

    total = (1 - alpha) * base_ce + alpha * maha_ce

where base_ce is ordinary softmax cross-entropy on the model's output logits.
Gradients treat the Gaussian parameters as constants: the statistics are a
streaming estimate, not differentiable parameters.

Note on signs: distances enter the logits negated, so nearby centroids get
high probability.  Scaling all distance logits by a positive constant only
changes the softmax temperature, never the argmax; the Gaussian 1/2 factor is
absorbed into ``logit_scale``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .errors import DimensionMismatch, InvalidParams, LabelOutOfRange
from .scorers import class_mahalanobis, softmax
from .stats import GaussianStats


@dataclass(frozen=True)
class LossConfig:
    """alpha blends base and Mahalanobis cross-entropies; logit_scale tempers the latter."""

    alpha: float = 0.5
    logit_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidParams(f"alpha must be in [0,1], got {self.alpha}")
        if not self.logit_scale > 0:
            raise InvalidParams(f"logit_scale must be > 0, got {self.logit_scale}")


@dataclass
class LossOutput:
    total: float
    base_ce: float
    maha_ce: float
    grad_logits: np.ndarray    # (n, K), d total / d base_logits
    grad_features: np.ndarray  # (n, d), d total / d features


def maha_posteriors(features, stats: GaussianStats, scale: float = 1.0) -> np.ndarray:
    """Class posteriors softmax(-scale * MD_k(z)) with uniform priors; rows sum to 1."""
    md = class_mahalanobis(features, stats)
    return softmax(-scale * md)


def _check_labels(labels: np.ndarray, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != n:
        raise DimensionMismatch(f"labels length {labels.shape[0]} != n={n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    return labels.astype(np.int64)


def maha_ce_loss(
    features: np.ndarray,
    labels: np.ndarray,
    stats: GaussianStats,
    scale: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of the Mahalanobis posteriors plus its feature gradient.

    The analytic gradient (statistics held constant) reduces to

        g_i = (2 scale / n) * Sigma^-1 (sum_k p_ik mu_k - mu_{y_i})

    because the z_i terms cancel when summing (p_ik - 1{k=y_i}) over classes.
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = x.shape[0]
    labels = _check_labels(labels, n, stats.num_classes)
    probs = maha_posteriors(x, stats, scale)
    picked = np.clip(probs[np.arange(n), labels], 1e-300, None)
    loss = float(-np.log(picked).mean())
    mean_residual = probs @ stats.class_means - stats.class_means[labels]
    grad = (2.0 * scale / n) * cho_solve((stats.chol_factor, True), mean_residual.T).T
    return loss, grad


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its logits gradient (softmax - onehot)/n."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n, k = z.shape
    labels = _check_labels(labels, n, k)
    probs = softmax(z)
    picked = np.clip(probs[np.arange(n), labels], 1e-300, None)
    loss = float(-np.log(picked).mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def combined_loss(
    features: np.ndarray,
    base_logits: np.ndarray,
    labels: np.ndarray,
    stats: GaussianStats,
    config: LossConfig,
) -> LossOutput:
    """Weighted blend of base and Mahalanobis cross-entropies with both gradients.

    grad_logits carries the (1 - alpha)-scaled base branch; grad_features the
    alpha-scaled Mahalanobis branch.  At the boundaries one branch's gradient
    is exactly zero.
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    z = np.atleast_2d(np.asarray(base_logits, dtype=np.float64))
    if z.shape[0] != x.shape[0]:
        raise DimensionMismatch(
            f"features n={x.shape[0]} != logits n={z.shape[0]}"
        )
    base_ce, grad_logits = softmax_cross_entropy(z, labels)
    maha_ce, grad_features = maha_ce_loss(x, labels, stats, config.logit_scale)
    alpha = config.alpha
    total = (1.0 - alpha) * base_ce + alpha * maha_ce
    return LossOutput(
        total=float(total),
        base_ce=base_ce,
        maha_ce=maha_ce,
        grad_logits=(1.0 - alpha) * grad_logits,
        grad_features=alpha * grad_features,
    )
