"""Diffusion transformer noise estimator.

Input pipeline per forward pass: latent frames first receive one of two
learned mask embeddings (conditional vs noisy position), then an MLP
projects them to the audio width; aligned per-frame video features are
MLP-projected to the video width (a learned null row stands in when video
is dropped); the two streams concatenate along channels to form the
transformer width. Blocks are adaLN-modulated by the timestep embedding:
self-attention, text cross-attention, and a gated feed-forward, each with
its own shift/scale/gate. A final modulated norm and linear head map back
to the latent dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import TextEmbedding


@dataclass
class DenoiserConfig:
    layers: int = 4
    hidden_dim: int = 256
    heads: int = 4
    ffn_dim: int = 768
    audio_proj_dim: int = 128
    video_proj_dim: int = 128
    latent_dim: int = 64
    text_dim: int = 768
    video_dim: int = 512
    max_len: int = 2048
    positional_encoding: str = "sinusoidal"

    def __post_init__(self):
        if self.audio_proj_dim + self.video_proj_dim != self.hidden_dim:
            raise ValueError("audio_proj_dim + video_proj_dim must equal hidden_dim")
        if self.hidden_dim % self.heads != 0:
            raise ValueError("hidden_dim must be divisible by heads")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")

    @classmethod
    def paper_scale(cls) -> "DenoiserConfig":
        """12-layer configuration at full published width."""
        return cls(
            layers=12, hidden_dim=1024, heads=8, ffn_dim=3072,
            audio_proj_dim=512, video_proj_dim=512,
        )


@dataclass
class DenoiserInput:
    """Single-item forward input; None marks dropped (null) conditions."""

    latents: np.ndarray  # (T_z, C_z), clean on conditional positions
    timestep: int
    condition_mask: np.ndarray | None = None  # (T_z,) bool, True = conditional
    video_feats: np.ndarray | None = None  # (T_z, C_v) aligned, None = null video
    text: TextEmbedding | None = None  # None = null text


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32) / half
    )
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _positional_table(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32)
    return sinusoidal_embedding(pos, dim)


class SwiGLU(nn.Module):
    def __init__(self, dim: int, inner: int):
        super().__init__()
        self.w12 = nn.Linear(dim, 2 * inner)
        self.w3 = nn.Linear(inner, dim)

    def forward(self, x):
        gate, val = self.w12(x).chunk(2, dim=-1)
        return self.w3(F.silu(gate) * val)


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class DiTBlock(nn.Module):
    """Self-attention, text cross-attention, and SwiGLU FFN, each gated and
    shift/scale modulated by the timestep embedding (9 vectors per block)."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.self_attn = nn.MultiheadAttention(d, cfg.heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.cross_attn = nn.MultiheadAttention(
            d, cfg.heads, batch_first=True, kdim=cfg.text_dim, vdim=cfg.text_dim
        )
        self.norm3 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.ffn = SwiGLU(d, cfg.ffn_dim)
        self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(d, 9 * d))

    def forward(self, x, temb, memory, memory_pad):
        mods = self.adaln(temb).chunk(9, dim=-1)
        (s1, sc1, g1, s2, sc2, g2, s3, sc3, g3) = mods
        h = _modulate(self.norm1(x), s1, sc1)
        h, _ = self.self_attn(h, h, h, need_weights=False)
        x = x + g1.unsqueeze(1) * h
        h = _modulate(self.norm2(x), s2, sc2)
        h, _ = self.cross_attn(
            h, memory, memory, key_padding_mask=memory_pad, need_weights=False
        )
        x = x + g2.unsqueeze(1) * h
        h = _modulate(self.norm3(x), s3, sc3)
        x = x + g3.unsqueeze(1) * self.ffn(h)
        return x


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        # index 0 = noisy position, index 1 = clean conditional position;
        # added to the raw latents before projection
        self.mask_embed = nn.Parameter(torch.randn(2, cfg.latent_dim) * 0.02)
        self.audio_proj = nn.Sequential(
            nn.Linear(cfg.latent_dim, cfg.audio_proj_dim),
            nn.SiLU(),
            nn.Linear(cfg.audio_proj_dim, cfg.audio_proj_dim),
        )
        self.video_proj = nn.Sequential(
            nn.Linear(cfg.video_dim, cfg.video_proj_dim),
            nn.SiLU(),
            nn.Linear(cfg.video_proj_dim, cfg.video_proj_dim),
        )
        self.null_video = nn.Parameter(torch.randn(cfg.video_proj_dim) * 0.02)
        self.null_text = nn.Parameter(torch.randn(cfg.text_dim) * 0.02)
        self.time_embed = nn.Sequential(
            nn.Linear(256, d), nn.SiLU(), nn.Linear(d, d)
        )
        self.blocks = nn.ModuleList(DiTBlock(cfg) for _ in range(cfg.layers))
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.final_adaln = nn.Sequential(nn.SiLU(), nn.Linear(d, 2 * d))
        self.head = nn.Linear(d, cfg.latent_dim)
        self.register_buffer(
            "pos_table", _positional_table(cfg.max_len, d), persistent=False
        )
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(
        self,
        latents: torch.Tensor,  # (B, T, C_z)
        t: torch.Tensor,  # (B,) int timesteps in 1..T
        cond_mask: torch.Tensor | None = None,  # (B, T) bool
        video: torch.Tensor | None = None,  # (B, T, C_v) aligned
        has_video: torch.Tensor | None = None,  # (B,) bool
        text: torch.Tensor | None = None,  # (B, T_t, C_t) padded
        text_pad: torch.Tensor | None = None,  # (B, T_t) bool, True = pad
        has_text: torch.Tensor | None = None,  # (B,) bool
    ) -> torch.Tensor:
        b, seq, _ = latents.shape
        if seq > self.cfg.max_len:
            raise ValueError(f"sequence length {seq} exceeds max_len {self.cfg.max_len}")

        if cond_mask is None:
            x = latents + self.mask_embed[0]
        else:
            x = latents + torch.where(
                cond_mask.unsqueeze(-1), self.mask_embed[1], self.mask_embed[0]
            )
        a = self.audio_proj(x)

        if video is None:
            v = self.null_video.view(1, 1, -1).expand(b, seq, -1)
        else:
            if video.shape[1] != seq:
                raise ValueError(
                    f"video length {video.shape[1]} != latent length {seq}"
                )
            v = self.video_proj(video)
            if has_video is not None and not bool(has_video.all()):
                v = torch.where(
                    has_video.view(-1, 1, 1), v, self.null_video.view(1, 1, -1)
                )

        h = torch.cat([a, v], dim=-1) + self.pos_table[:seq].to(latents.dtype)

        memory, memory_pad = self._text_memory(b, text, text_pad, has_text, latents.dtype)
        temb = self.time_embed(sinusoidal_embedding(t, 256).to(latents.dtype))

        for block in self.blocks:
            h = block(h, temb, memory, memory_pad)
        shift, scale = self.final_adaln(temb).chunk(2, dim=-1)
        h = _modulate(self.final_norm(h), shift, scale)
        return self.head(h)

    def _text_memory(self, b, text, text_pad, has_text, dtype):
        if text is None:
            memory = self.null_text.view(1, 1, -1).expand(b, 1, -1).to(dtype)
            return memory, None
        if text_pad is None:
            text_pad = torch.zeros(text.shape[:2], dtype=torch.bool)
        if has_text is not None and not bool(has_text.all()):
            memory = text.clone()
            pad = text_pad.clone()
            null_rows = ~has_text
            memory[null_rows] = 0.0
            memory[null_rows, 0] = self.null_text.to(dtype)
            pad[null_rows] = True
            pad[null_rows, 0] = False
            return memory, pad
        return text, text_pad

    @torch.no_grad()
    def denoise_single(self, inp: DenoiserInput) -> np.ndarray:
        """Run one unbatched forward pass on numpy inputs."""
        latents = torch.from_numpy(np.asarray(inp.latents, dtype=np.float32))[None]
        t = torch.tensor([inp.timestep], dtype=torch.long)
        cond = (
            torch.from_numpy(np.asarray(inp.condition_mask, dtype=bool))[None]
            if inp.condition_mask is not None
            else None
        )
        video = (
            torch.from_numpy(np.asarray(inp.video_feats, dtype=np.float32))[None]
            if inp.video_feats is not None
            else None
        )
        text = text_pad = None
        if inp.text is not None:
            text = torch.from_numpy(inp.text.tokens)[None]
            text_pad = torch.from_numpy(inp.text.pad_mask)[None]
        out = self.forward(latents, t, cond, video, None, text, text_pad, None)
        out_np = out[0].numpy()
        if not np.all(np.isfinite(out_np)):
            raise RuntimeError("denoiser produced non-finite output")
        return out_np


def count_parameters(cfg: DenoiserConfig) -> dict[str, int]:
    """Exact parameter counts by top-level module, plus "total".

    Instantiates on the meta device, so counting the full-width
    configuration costs no memory.
    """
    with torch.device("meta"):
        net = Denoiser(cfg)
    counts: dict[str, int] = {}
    for name, child in net.named_children():
        n = sum(p.numel() for p in child.parameters())
        if n:
            counts[name] = n
    for name, p in net.named_parameters(recurse=False):
        counts[name] = p.numel()
    counts["total"] = sum(p.numel() for p in net.parameters())
    return counts


def config_to_dict(cfg: DenoiserConfig) -> dict:
    return asdict(cfg)
