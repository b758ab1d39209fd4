"""embextract: dump vision-model penultimate features into the EMB1 format."""

from .datasets import SyntheticImages, resolve_dataset
from .emb1 import write_emb1
from .extract import ExtractionError, ExtractionJob, TinyNet, extract, find_head, load_model

__version__ = "0.1.0"

__all__ = [
    "ExtractionError",
    "ExtractionJob",
    "SyntheticImages",
    "TinyNet",
    "extract",
    "find_head",
    "load_model",
    "resolve_dataset",
    "write_emb1",
]
