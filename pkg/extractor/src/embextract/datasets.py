"""Dataset resolution: an image-folder path or a built-in synthetic set.

The builtin ``synth:<n>`` dataset produces n deterministic 64x64 RGB images
from a seeded generator (labels cycle over 3 classes).  It exists so the
extractor can run, and be tested bit-for-bit, without downloading anything.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch


class SyntheticImages:
    """Deterministic random images; index i has label i % 3."""

    num_classes = 3

    def __init__(self, n: int, seed: int = 0, size: int = 64):
        if n < 1:
            raise ValueError("need at least one image")
        rng = np.random.default_rng(seed)
        # per-class base pattern plus per-image noise, all seeded
        bases = rng.uniform(0.0, 1.0, size=(self.num_classes, 3, size, size))
        self.images = []
        self.labels = []
        for i in range(n):
            label = i % self.num_classes
            noise = rng.normal(0.0, 0.15, size=(3, size, size))
            img = np.clip(bases[label] + noise, 0.0, 1.0).astype(np.float32)
            self.images.append(torch.from_numpy(img))
            self.labels.append(label)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int):
        return self.images[i], self.labels[i]


def resolve_dataset(spec: str, split: str = ""):
    """``synth:<n>`` or a directory readable by torchvision's ImageFolder."""
    if spec.startswith("synth:"):
        try:
            n = int(spec.split(":", 1)[1])
        except ValueError:
            raise FileNotFoundError(f"bad builtin dataset spec: {spec!r}") from None
        # split only varies the generator stream so train/test differ
        seed = {"": 0, "train": 0, "test": 1, "val": 2}.get(split, abs(hash(split)) % 1000)
        return SyntheticImages(n, seed=seed)

    root = Path(spec)
    if split:
        root = root / split
    if not root.is_dir():
        raise FileNotFoundError(f"dataset not found: {root}")
    from torchvision import datasets, transforms

    transform = transforms.Compose(
        [
            transforms.Resize(256),
            transforms.CenterCrop(224),
            transforms.ToTensor(),
            transforms.Normalize(
                mean=[0.485, 0.456, 0.406], std=[0.229, 0.224, 0.225]
            ),
        ]
    )
    return datasets.ImageFolder(str(root), transform=transform)
