"""Mono waveform container and WAV file I/O (PCM-16 and float-32)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile


@dataclass
class Waveform:
    """Mono audio samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray  # shape (n,), float32
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


def write_wav(path: str | Path, w: Waveform, encoding: str = "float32") -> None:
    """Write a mono WAV file. encoding is "float32" or "pcm16"."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = np.clip(w.samples, -1.0, 1.0)
    if encoding == "float32":
        wavfile.write(path, w.sample_rate, x.astype(np.float32))
    elif encoding == "pcm16":
        wavfile.write(path, w.sample_rate, np.round(x * 32767.0).astype(np.int16))
    else:
        raise ValueError(f"unknown encoding {encoding!r}")


def read_wav(path: str | Path) -> Waveform:
    """Read a mono WAV file (PCM-16 or float-32) into a Waveform."""
    rate, data = wavfile.read(path)
    if data.ndim == 2:  # take first channel of multichannel files
        data = data[:, 0]
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32767.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float32) / 2147483647.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float32)
    else:
        raise ValueError(f"unsupported WAV dtype {data.dtype} in {path}")
    return Waveform(samples=samples, sample_rate=int(rate))
