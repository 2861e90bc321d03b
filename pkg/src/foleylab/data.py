"""Corpus manifests and feature-file storage.

A manifest is a JSON-lines file with one record per clip. Paths inside a
manifest are relative to the manifest's directory. Per-frame video
features are stored as .npy (flat binary with a dtype/shape header).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class ClipRecord:
    clip_id: str
    wav_path: str
    category: str
    quality_tag: str  # "low" | "high"
    source: str  # "av" | "sfx"
    sample_rate: int
    duration_s: float
    event_times: list[float] = field(default_factory=list)
    feat_path: str | None = None  # per-frame video features, AV clips only
    fps: int | None = None
    synthesis_seed: int | None = None
    high_correspondence: bool = False

    def __post_init__(self):
        if self.quality_tag not in ("low", "high"):
            raise ValueError(f"bad quality_tag {self.quality_tag!r}")
        if self.source not in ("av", "sfx"):
            raise ValueError(f"bad source {self.source!r}")


def write_manifest(path: str | Path, records: list[ClipRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[ClipRecord]:
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(ClipRecord(**json.loads(line)))
    return records


def save_features(path: str | Path, feats: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.asarray(feats, dtype=np.float32))


def load_features(path: str | Path) -> np.ndarray:
    return np.load(path)
