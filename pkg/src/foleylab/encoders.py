"""Condition encoders: captions/text and video features.

Both encoders are frozen, deterministic stand-ins behind the interfaces
the denoiser consumes: text becomes a sequence of per-token embedding
rows, video becomes per-frame feature rows that are later upsampled to
the audio latent rate by nearest-neighbor repetition.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np

TEXT_DIM = 768
VIDEO_DIM = 512
MAX_TEXT_TOKENS = 64


@dataclass
class Caption:
    """Caption body plus an optional audio-quality tag.

    Rendered as "<body>, low quality" / "<body>, high quality", tag alone
    when the body is empty, or the body alone when the tag is "none".
    """

    body: str
    quality_tag: str = "none"  # "low" | "high" | "none"

    def __post_init__(self):
        if self.quality_tag not in ("low", "high", "none"):
            raise ValueError(f"bad quality_tag {self.quality_tag!r}")

    def render(self) -> str:
        tag = "" if self.quality_tag == "none" else f"{self.quality_tag} quality"
        if self.body and tag:
            return f"{self.body}, {tag}"
        return self.body or tag


def make_caption(
    category: str,
    quality: str = "none",
    drop_caption: bool = False,
    drop_tag: bool = False,
) -> Caption | None:
    """Build one of the four caption variants; None is the null-text sentinel."""
    if drop_caption and (drop_tag or quality == "none"):
        return None
    if drop_caption:
        return Caption(body="", quality_tag=quality)
    if not category:
        raise ValueError("category must be non-empty when the caption is kept")
    if drop_tag:
        return Caption(body=category, quality_tag="none")
    return Caption(body=category, quality_tag=quality)


@dataclass
class TextEmbedding:
    tokens: np.ndarray  # (T_t, C_t) float32
    pad_mask: np.ndarray  # (T_t,) bool, True = padded row

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float32)
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        if self.tokens.ndim != 2 or len(self.pad_mask) != len(self.tokens):
            raise ValueError("tokens must be (T_t, C_t) with matching pad_mask")


def _token_vector(token: str, dim: int) -> np.ndarray:
    # Stable across processes: seed a generator from the token's sha256.
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal(dim).astype(np.float32) / np.sqrt(dim)


class HashTextEncoder:
    """Deterministic per-token hash embedding over whitespace tokens.

    Punctuation stays attached to its word ("barking," is one token), so
    "dog barking, low quality" yields 4 rows.
    """

    def __init__(self, dim: int = TEXT_DIM, max_tokens: int = MAX_TEXT_TOKENS):
        self.dim = dim
        self.max_tokens = max_tokens
        self._cache: dict[str, np.ndarray] = {}

    def encode(self, caption: Caption | None) -> TextEmbedding | None:
        """Embed a caption; None passes through as the null-text sentinel."""
        if caption is None:
            return None
        text = caption.render()
        if not text:
            raise ValueError("caption rendered empty; use None for null text")
        tokens = text.split()
        if len(tokens) > self.max_tokens:
            warnings.warn(
                f"caption has {len(tokens)} tokens, truncating to {self.max_tokens}"
            )
            tokens = tokens[: self.max_tokens]
        rows = np.stack([self._vector(t) for t in tokens])
        return TextEmbedding(tokens=rows, pad_mask=np.zeros(len(tokens), dtype=bool))

    def _vector(self, token: str) -> np.ndarray:
        if token not in self._cache:
            self._cache[token] = _token_vector(token, self.dim)
        return self._cache[token]


@dataclass
class VideoClip:
    """Either a toy frame-feature sequence (T_v, C) or pixels (T_v, 3, H, W)."""

    frames: np.ndarray
    fps: int
    duration_s: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        expected = round(self.duration_s * self.fps)
        if self.frames.shape[0] != expected:
            raise ValueError(
                f"clip declares {self.duration_s}s at {self.fps}fps "
                f"({expected} frames) but has {self.frames.shape[0]}"
            )

    @property
    def is_pixels(self) -> bool:
        return self.frames.ndim == 4


@dataclass
class VideoFeatures:
    feats: np.ndarray  # (T_v, C_v) float32
    fps: int

    def __post_init__(self):
        self.feats = np.asarray(self.feats, dtype=np.float32)
        if self.feats.ndim != 2:
            raise ValueError("video features must be (T_v, C_v)")
        if not np.all(np.isfinite(self.feats)):
            raise ValueError("video features contain non-finite values")


class ToyVideoEncoder:
    """Frozen video feature extractor.

    Toy clips are already frame-feature sequences and pass through
    unchanged. Pixel clips (T_v, 3, H, W) go through a fixed seeded random
    projection; that path is adapter plumbing for real footage.
    """

    def __init__(self, feature_dim: int = VIDEO_DIM, fps: int = 8, seed: int = 0):
        self.feature_dim = feature_dim
        self.fps = fps
        self._seed = seed
        self._pixel_proj: np.ndarray | None = None

    def encode(self, clip: VideoClip) -> VideoFeatures:
        if clip.fps != self.fps:
            raise ValueError(f"clip fps {clip.fps} != encoder fps {self.fps}")
        if clip.is_pixels:
            flat = clip.frames.reshape(clip.frames.shape[0], -1)
            proj = self._pixel_projection(flat.shape[1])
            feats = flat @ proj
        else:
            if clip.frames.shape[1] != self.feature_dim:
                raise ValueError(
                    f"toy clip feature width {clip.frames.shape[1]} "
                    f"!= encoder dim {self.feature_dim}"
                )
            feats = clip.frames
        return VideoFeatures(feats=feats, fps=clip.fps)

    def _pixel_projection(self, in_dim: int) -> np.ndarray:
        if self._pixel_proj is None or self._pixel_proj.shape[0] != in_dim:
            rng = np.random.Generator(np.random.PCG64(self._seed))
            self._pixel_proj = (
                rng.standard_normal((in_dim, self.feature_dim)).astype(np.float32)
                / np.sqrt(in_dim)
            )
        return self._pixel_proj


def align_video_features(vf: VideoFeatures, target_len: int) -> np.ndarray:
    """Upsample (T_v, C_v) to (target_len, C_v) by repeating each row.

    target_len must be an integer multiple of T_v; each source row is
    repeated contiguously factor = target_len / T_v times, preserving
    temporal order (8 Hz features reach 40 Hz latents with factor 5).
    """
    t_v = vf.feats.shape[0]
    if target_len % t_v != 0:
        raise ValueError(
            f"target length {target_len} is not an integer multiple of {t_v}"
        )
    factor = target_len // t_v
    return np.repeat(vf.feats, factor, axis=0)
