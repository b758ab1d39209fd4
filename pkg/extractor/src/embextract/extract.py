"""Feature extraction: run a vision classifier and dump penultimate activations.

The penultimate representation is whatever feeds the final classification
head; it is captured with a forward hook on the last ``nn.Linear`` of the
model, so no architecture surgery is needed.  Evaluation mode is enforced and
shuffling is disabled, making the output rows deterministic for fixed weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .datasets import resolve_dataset
from .emb1 import write_emb1


class ExtractionError(Exception):
    """Model or dataset could not be resolved, or the run failed."""


@dataclass
class ExtractionJob:
    model: str                      # torchvision model name or "tinynet"
    data: str                       # dataset path or builtin "synth:<n>"
    out: str
    weights: str = "none"           # "none" (seeded random) or a torchvision weights name
    split: str = ""
    batch_size: int = 16
    include_labels: bool = False
    with_logits: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ExtractionError(f"batch size must be >= 1, got {self.batch_size}")


class TinyNet(nn.Module):
    """Small self-contained conv classifier; penultimate layer is 32-d."""

    def __init__(self, num_classes: int = 3):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 8, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(8, 16, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(4),
        )
        self.embed = nn.Linear(16 * 16, 32)
        self.head = nn.Linear(32, num_classes)

    def forward(self, x):
        z = self.features(x).flatten(1)
        z = torch.relu(self.embed(z))
        return self.head(z)


def load_model(name: str, weights: str = "none", init_seed: int = 0) -> nn.Module:
    """Build the classifier; random weights are seeded so runs are repeatable."""
    torch.manual_seed(init_seed)
    if name == "tinynet":
        model = TinyNet()
    else:
        import torchvision.models as tvm

        try:
            model = tvm.get_model(name, weights=None if weights == "none" else weights)
        except (ValueError, KeyError) as exc:
            raise ExtractionError(f"model not found: {name!r} ({exc})") from exc
        except Exception as exc:  # weight download/resolution failures
            raise ExtractionError(f"cannot load weights {weights!r} for {name!r}: {exc}") from exc
    model.eval()
    return model


def find_head(model: nn.Module) -> nn.Linear:
    """The final classification head: the last Linear module in the network."""
    head = None
    for module in model.modules():
        if isinstance(module, nn.Linear):
            head = module
    if head is None:
        raise ExtractionError("model has no Linear head to hook")
    return head


def extract(job: ExtractionJob) -> dict:
    """Run the job; returns a small summary dict (n, feature dim, paths)."""
    model = load_model(job.model, job.weights, job.init_seed)
    dataset = resolve_dataset(job.data, job.split)
    head = find_head(model)

    captured: list[torch.Tensor] = []
    hook = head.register_forward_hook(
        lambda module, inputs, output: captured.append(inputs[0].detach().flatten(1))
    )

    feature_blocks: list[np.ndarray] = []
    logit_blocks: list[np.ndarray] = []
    labels: list[int] = []
    try:
        with torch.no_grad():
            batch_images: list[torch.Tensor] = []
            for i in range(len(dataset)):
                image, label = dataset[i]
                batch_images.append(image)
                labels.append(int(label))
                if len(batch_images) == job.batch_size or i == len(dataset) - 1:
                    logits = model(torch.stack(batch_images))
                    logit_blocks.append(logits.numpy().astype(np.float64))
                    feature_blocks.append(captured.pop().numpy().astype(np.float64))
                    batch_images.clear()
    finally:
        hook.remove()

    features = np.concatenate(feature_blocks)
    out_path = Path(job.out)
    write_emb1(
        features, out_path, labels=np.array(labels) if job.include_labels else None
    )
    summary = {
        "n": int(features.shape[0]),
        "dim": int(features.shape[1]),
        "out": str(out_path),
    }
    if job.with_logits:
        logits = np.concatenate(logit_blocks)
        logits_path = companion_logits_path(out_path)
        write_emb1(logits, logits_path, labels=np.array(labels) if job.include_labels else None)
        summary["logits_out"] = str(logits_path)
        summary["num_classes"] = int(logits.shape[1])
    return summary


def companion_logits_path(out_path: Path) -> Path:
    """x.emb -> x.logits.emb (the `.logits.emb` suffix convention)."""
    name = out_path.name
    if name.endswith(".emb"):
        name = name[: -len(".emb")]
    return out_path.with_name(f"{name}.logits.emb")
