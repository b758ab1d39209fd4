"""Toy feed-forward trainer wiring the blended objective to streaming statistics.

The per-batch recipe: forward pass, EMA update of the Gaussian parameters from
the current penultimate features, blended loss (base cross-entropy on the head
logits plus the Mahalanobis cross-entropy on the features), manual backprop,
SGD step.  Statistics are updated before the loss by default so every class
mean exists from step one; the opposite ordering is available behind a config
flag for sensitivity checks.

Everything is plain float64 numpy and fully deterministic under a fixed seed.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embio import EmbeddingSet
from .errors import (
    BadMagic,
    DimensionMismatch,
    InvalidParams,
    IoError,
    NonFiniteLoss,
    ShapeMismatch,
    TruncatedFile,
    UnsupportedVersion,
)
from .loss import LossConfig, combined_loss, softmax_cross_entropy
from .metrics import EvalReport, evaluate
from .scorers import (
    KnnIndex,
    class_mahalanobis,
    score_energy,
    score_knn,
    score_md,
    score_msp,
    score_rmd,
)
from .stats import (
    GaussianStats,
    OnlineStatsState,
    Shrinkage,
    ema_update,
    finalize_stats,
)

_MODEL_MAGIC = b"MGM1"
_ACTIVATIONS = ("relu", "tanh")


@dataclass
class MlpModel:
    """Feed-forward network: hidden layers with activation, then a linear head.

    ``layers[i]`` is ``(W, b)`` with W of shape (in, out); the last entry is the
    classification head and the features are the activations feeding it.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise InvalidParams(f"activation must be one of {_ACTIVATIONS}")
        if not self.layers:
            raise InvalidParams("model needs at least the head layer")
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeMismatch(f"layer {i}: W {w.shape} and b {b.shape} do not chain")
            if i > 0 and self.layers[i - 1][0].shape[1] != w.shape[0]:
                raise ShapeMismatch(
                    f"layer {i - 1} output {self.layers[i - 1][0].shape[1]} != "
                    f"layer {i} input {w.shape[0]}"
                )

    @property
    def feature_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @classmethod
    def init(
        cls,
        input_dim: int,
        hidden_dims: tuple[int, ...],
        num_classes: int,
        activation: str = "relu",
        seed: int = 0,
    ) -> "MlpModel":
        rng = np.random.default_rng(seed)
        dims = [input_dim, *hidden_dims, num_classes]
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            scale = math.sqrt(2.0 / fan_in) if activation == "relu" else math.sqrt(1.0 / fan_in)
            layers.append((rng.normal(0.0, scale, size=(fan_in, fan_out)), np.zeros(fan_out)))
        return cls(layers=layers, activation=activation)

    def copy(self) -> "MlpModel":
        return MlpModel(
            layers=[(w.copy(), b.copy()) for w, b in self.layers],
            activation=self.activation,
        )


def _activate(pre: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(pre, 0.0) if kind == "relu" else np.tanh(pre)


def _activation_grad(pre: np.ndarray, post: np.ndarray, kind: str) -> np.ndarray:
    return (pre > 0).astype(np.float64) if kind == "relu" else 1.0 - post * post


def forward(model: MlpModel, inputs: np.ndarray):
    """Run the network; returns (features, logits, cache) with cache for backprop."""
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[1] != model.input_dim:
        raise DimensionMismatch(f"input dim {x.shape[1]} != model input {model.input_dim}")
    acts = [x]
    pres = []
    for w, b in model.layers[:-1]:
        pre = acts[-1] @ w + b
        pres.append(pre)
        acts.append(_activate(pre, model.activation))
    features = acts[-1]
    w_head, b_head = model.layers[-1]
    logits = features @ w_head + b_head
    cache = {"acts": acts, "pres": pres, "n": x.shape[0]}
    return features, logits, cache


def backward(model: MlpModel, cache, grad_logits: np.ndarray, grad_features: np.ndarray):
    """Manual reverse pass; returns per-layer (dW, db) gradients.

    grad_features (the Mahalanobis branch) is injected at the penultimate
    activations and summed with the head's backpropagated contribution.
    """
    acts, pres = cache["acts"], cache["pres"]
    n = cache["n"]
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    grad_features = np.asarray(grad_features, dtype=np.float64)
    if grad_logits.shape != (n, model.num_classes):
        raise ShapeMismatch(f"grad_logits {grad_logits.shape} != ({n}, {model.num_classes})")
    if grad_features.shape != (n, model.feature_dim):
        raise ShapeMismatch(f"grad_features {grad_features.shape} != ({n}, {model.feature_dim})")
    w_head, _ = model.layers[-1]
    grads: list[tuple[np.ndarray, np.ndarray]] = [
        (acts[-1].T @ grad_logits, grad_logits.sum(axis=0))
    ]
    upstream = grad_logits @ w_head.T + grad_features
    for i in range(len(model.layers) - 2, -1, -1):
        w, _ = model.layers[i]
        dz = upstream * _activation_grad(pres[i], acts[i + 1], model.activation)
        grads.append((acts[i].T @ dz, dz.sum(axis=0)))
        upstream = dz @ w.T
    grads.reverse()
    return grads


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9              # optimizer momentum
    seed: int = 0
    alpha: float = 0.5
    logit_scale: float = 0.5
    ema_momentum: float = 0.95
    shrinkage: Shrinkage = Shrinkage("auto")
    eval_every: int = 1
    warmup_ramp: bool = True
    stats_before_loss: bool = True
    hidden_dims: tuple[int, ...] = (64, 16)
    activation: str = "relu"

    def __post_init__(self):
        if self.batch_size < 2:
            raise InvalidParams(f"batch_size must be >= 2, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise InvalidParams(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidParams(f"alpha must be in [0,1], got {self.alpha}")
        if self.epochs < 1:
            raise InvalidParams("epochs must be >= 1")


@dataclass(frozen=True)
class GeneratorParams:
    """Synthetic mixture: Gaussian class blobs pushed through a fixed random warp."""

    num_classes: int = 4
    input_dim: int = 16
    mean_radius: float = 2.0
    class_spread: float = 0.7
    warp_strength: float = 0.5
    far_radius: float = 40.0
    n_train: int = 2000
    n_test: int = 500
    n_ood: int = 500

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidParams("need at least 2 ID classes")
        if self.input_dim < 1 or self.n_train < 2 * self.num_classes:
            raise InvalidParams("input_dim >= 1 and n_train >= 2K required")
        if self.class_spread <= 0 or self.mean_radius <= 0:
            raise InvalidParams("mean_radius and class_spread must be positive")
        if self.far_radius <= 2 * self.mean_radius:
            raise InvalidParams("far-OOD radius must clear the ID means")


@dataclass
class SyntheticTask:
    id_train: EmbeddingSet
    id_test: EmbeddingSet
    ood_near: EmbeddingSet
    ood_far: EmbeddingSet
    params: GeneratorParams
    seed: int


def _balanced_labels(n: int, k: int) -> np.ndarray:
    counts = np.full(k, n // k)
    counts[: n % k] += 1
    return np.repeat(np.arange(k), counts)


def make_synthetic_task(params: GeneratorParams | None = None, seed: int = 0) -> SyntheticTask:
    """Generate the default desk-scale task: labeled ID splits plus near/far OOD blobs.

    Near-OOD sits between the ID class means; far-OOD sits at roughly ten times
    the intra-class spread.  All sets share one fixed random nonlinearity, so
    the observed inputs are non-Gaussian.
    """
    params = params or GeneratorParams()
    rng = np.random.default_rng(seed)
    k, d = params.num_classes, params.input_dim
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    if k > d:
        raise InvalidParams(f"num_classes {k} exceeds input_dim {d}")
    latent_means = params.mean_radius * basis[:, :k].T          # (K, d)
    rot, _ = np.linalg.qr(rng.standard_normal((d, d)))
    mix = rng.standard_normal((d, d)) / math.sqrt(d)

    def warp(u: np.ndarray) -> np.ndarray:
        return u @ rot + params.warp_strength * np.tanh(u @ mix)

    def draw_id(n: int, tag: str) -> EmbeddingSet:
        labels = _balanced_labels(n, k)
        u = latent_means[labels] + params.class_spread * rng.standard_normal((n, d))
        perm = rng.permutation(n)
        return EmbeddingSet(data=warp(u)[perm], labels=labels[perm], source_tag=tag)

    def draw_blob(center: np.ndarray, n: int, tag: str) -> EmbeddingSet:
        u = center + params.class_spread * rng.standard_normal((n, d))
        return EmbeddingSet(data=warp(u), source_tag=tag)

    id_train = draw_id(params.n_train, "id_train")
    id_test = draw_id(params.n_test, "id_test")
    near_center = latent_means.mean(axis=0)
    ood_near = draw_blob(near_center, params.n_ood, "ood_near")
    far_direction = rng.standard_normal(d)
    far_direction /= np.linalg.norm(far_direction)
    ood_far = draw_blob(params.far_radius * far_direction, params.n_ood, "ood_far")
    return SyntheticTask(
        id_train=id_train,
        id_test=id_test,
        ood_near=ood_near,
        ood_far=ood_far,
        params=params,
        seed=seed,
    )


def gaussian_log_likelihood(features, labels, stats: GaussianStats) -> float:
    """Mean log-density of each row under its labeled class Gaussian."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != x.shape[0]:
        raise DimensionMismatch(f"labels length {labels.shape[0]} != n={x.shape[0]}")
    md = class_mahalanobis(x, stats)[np.arange(x.shape[0]), labels]
    log_det = stats.log_det_tied()
    return float(-0.5 * (md + stats.dim * math.log(2.0 * math.pi) + log_det).mean())


@dataclass
class EpochRecord:
    epoch: int
    total: float
    base_ce: float
    maha_ce: float
    acc: float
    gauss_ll: float | None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "total": self.total,
            "base_ce": self.base_ce,
            "maha_ce": self.maha_ce,
            "acc": self.acc,
            "gauss_ll": self.gauss_ll,
        }


def write_history_jsonl(history: list[EpochRecord], destination) -> None:
    dest = Path(destination)
    try:
        with dest.open("w", encoding="utf-8") as fh:
            for record in history:
                fh.write(json.dumps(record.to_dict()) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {dest}: {exc}") from exc


def train(model: MlpModel, task: SyntheticTask, config: TrainConfig):
    """Run the full recipe; returns (model, final GaussianStats, history).

    Deterministic given config.seed: batch order, and nothing else, is random.
    Raises NonFiniteLoss (with the offending batch) instead of clamping.
    """
    data, labels = task.id_train.data, task.id_train.labels
    if labels is None:
        raise InvalidParams("training data must be labeled")
    k = model.num_classes
    if labels.max() >= k:
        raise DimensionMismatch(f"task has label {labels.max()} but model head is K={k}")
    rng = np.random.default_rng(config.seed)
    state = OnlineStatsState.init(
        k, model.feature_dim, momentum=config.ema_momentum, shrinkage=config.shrinkage
    )
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in model.layers]
    n = data.shape[0]
    steps_per_epoch = math.ceil(n / config.batch_size)
    history: list[EpochRecord] = []

    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        loss_sum = base_sum = 0.0
        maha_sum = maha_weight = 0.0
        hits = 0
        for step in range(steps_per_epoch):
            sel = perm[step * config.batch_size : (step + 1) * config.batch_size]
            xb, yb = data[sel], labels[sel]
            features, logits, cache = forward(model, xb)
            if config.stats_before_loss:
                state = ema_update(state, EmbeddingSet(features, yb, source_tag="batch"))

            if config.warmup_ramp and epoch == 0:
                alpha_eff = config.alpha * (step + 1) / steps_per_epoch
            else:
                alpha_eff = config.alpha

            stats_ready = bool((state.per_class_seen > 0).all())
            if stats_ready:
                snapshot = finalize_stats(state)
                out = combined_loss(
                    features, logits, yb, snapshot,
                    LossConfig(alpha=alpha_eff, logit_scale=config.logit_scale),
                )
                batch_total, batch_base, batch_maha = out.total, out.base_ce, out.maha_ce
                grad_logits, grad_features = out.grad_logits, out.grad_features
                maha_sum += batch_maha * len(sel)
                maha_weight += len(sel)
            else:
                # stats not yet defined for every class: base branch only
                batch_base, grad_ce = softmax_cross_entropy(logits, yb)
                batch_total = (1.0 - alpha_eff) * batch_base
                grad_logits = (1.0 - alpha_eff) * grad_ce
                grad_features = np.zeros_like(features)

            if not (np.isfinite(batch_total) and np.isfinite(batch_base)):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, batch {step}")

            grads = backward(model, cache, grad_logits, grad_features)
            for (w, b), (dw, db), (vw, vb) in zip(model.layers, grads, velocity):
                vw *= config.momentum
                vw += dw
                vb *= config.momentum
                vb += db
                w -= config.learning_rate * vw
                b -= config.learning_rate * vb

            if not config.stats_before_loss:
                state = ema_update(state, EmbeddingSet(features, yb, source_tag="batch"))

            loss_sum += batch_total * len(sel)
            base_sum += batch_base * len(sel)
            hits += int((logits.argmax(axis=1) == yb).sum())

        gauss_ll = None
        if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
            train_features, _, _ = forward(model, data)
            gauss_ll = gaussian_log_likelihood(train_features, labels, finalize_stats(state))
        history.append(
            EpochRecord(
                epoch=epoch,
                total=loss_sum / n,
                base_ce=base_sum / n,
                maha_ce=maha_sum / maha_weight if maha_weight else 0.0,
                acc=hits / n,
                gauss_ll=gauss_ll,
            )
        )

    return model, finalize_stats(state), history


def accuracy(model: MlpModel, embeddings: EmbeddingSet) -> float:
    """Classification accuracy of the head on a labeled set."""
    if embeddings.labels is None:
        raise InvalidParams("accuracy needs labels")
    _, logits, _ = forward(model, embeddings.data)
    return float((logits.argmax(axis=1) == embeddings.labels).mean())


def evaluate_ood(
    model: MlpModel,
    stats: GaussianStats,
    task: SyntheticTask,
    scorer_ids=("md", "rmd", "msp", "energy", "knn"),
    split: str = "far",
    k: int = 10,
    temperature: float = 1.0,
    target_tpr: float = 0.95,
) -> EvalReport:
    """Score id_test against one OOD split in feature space and assemble a report."""
    ood_sets = {"far": task.ood_far, "near": task.ood_near}
    if split not in ood_sets:
        raise InvalidParams(f"split must be one of {sorted(ood_sets)}")
    id_feats, id_logits, _ = forward(model, task.id_test.data)
    ood_feats, ood_logits, _ = forward(model, ood_sets[split].data)
    knn_index = None
    if "knn" in scorer_ids:
        train_feats, _, _ = forward(model, task.id_train.data)
        knn_index = KnnIndex(train_feats, k=min(k, train_feats.shape[0]))

    def run(feats, logits):
        out = []
        for sid in scorer_ids:
            if sid == "md":
                out.append(score_md(feats, stats))
            elif sid == "rmd":
                out.append(score_rmd(feats, stats))
            elif sid == "msp":
                out.append(score_msp(logits))
            elif sid == "energy":
                out.append(score_energy(logits, temperature))
            elif sid == "knn":
                out.append(score_knn(feats, knn_index))
            else:
                raise InvalidParams(f"unknown scorer {sid!r}")
        return out

    return evaluate(
        run(id_feats, id_logits),
        run(ood_feats, ood_logits),
        target_tpr=target_tpr,
        ood_set=split,
    )


def save_model(model: MlpModel, destination) -> None:
    """Write the "MGM1" checkpoint: activation code, layer count, dims, float64 params."""
    dest = Path(destination)
    parts = [
        _MODEL_MAGIC,
        struct.pack("<BI", _ACTIVATIONS.index(model.activation), len(model.layers)),
    ]
    for w, b in model.layers:
        parts.append(struct.pack("<II", w.shape[0], w.shape[1]))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    try:
        dest.write_bytes(b"".join(parts))
    except OSError as exc:
        raise IoError(f"cannot write {dest}: {exc}") from exc


def load_model(source) -> MlpModel:
    path = Path(source)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 9:
        raise TruncatedFile(f"{path}: shorter than the 9-byte header")
    if raw[:4] != _MODEL_MAGIC:
        raise BadMagic(f"{path}: bad magic {raw[:4]!r}")
    act_code, layer_count = struct.unpack_from("<BI", raw, 4)
    if act_code >= len(_ACTIVATIONS):
        raise UnsupportedVersion(f"{path}: unknown activation code {act_code}")
    off = 9
    layers = []
    for _ in range(layer_count):
        if off + 8 > len(raw):
            raise TruncatedFile(f"{path}: truncated layer header at offset {off}")
        fan_in, fan_out = struct.unpack_from("<II", raw, off)
        off += 8
        need = (fan_in * fan_out + fan_out) * 8
        if off + need > len(raw):
            raise TruncatedFile(f"{path}: expected {need} parameter bytes at offset {off}")
        w = np.frombuffer(raw, dtype="<f8", count=fan_in * fan_out, offset=off)
        off += fan_in * fan_out * 8
        b = np.frombuffer(raw, dtype="<f8", count=fan_out, offset=off)
        off += fan_out * 8
        layers.append((w.reshape(fan_in, fan_out).copy(), b.copy()))
    if off != len(raw):
        raise TruncatedFile(f"{path}: {len(raw) - off} trailing bytes")
    return MlpModel(layers=layers, activation=_ACTIVATIONS[act_code])
