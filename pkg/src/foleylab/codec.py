"""Variational audio latent codec.

Strided 1-D convolutional encoder/decoder pair mapping mono waveforms to
continuous latent frames and back (e.g. 16 kHz -> 40 Hz x 64 channels).
The encoder parameterizes a diagonal Gaussian posterior; training
optimizes multiscale spectral reconstruction + waveform L1 + a weighted
KL toward N(0, I). Latents handed to the diffusion stage are normalized
by a single global scale computed over the training corpus and stored in
the checkpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import Waveform

CODEC_CHECKPOINT_VERSION = 1


@dataclass
class LatentSequence:
    """T_z x C_z continuous audio latents at a fixed latent rate."""

    frames: np.ndarray
    latent_rate: int = 40
    padded_samples: int = 0  # right-padding applied before encoding

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2:
            raise ValueError("latents must be (T_z, C_z)")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("latents contain non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class CodecConfig:
    sample_rate: int = 16000
    latent_rate: int = 40
    latent_dim: int = 64
    bands: int = 4  # fixed PQMF subbands ahead of the learned convs
    strides: tuple[int, ...] = (4, 5, 5)  # applied at the subband rate
    channels: tuple[int, ...] = (48, 80, 128)  # width after each stride
    stem_channels: int = 32
    kl_weight: float = 1e-4

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != len(self.strides):
            raise ValueError("channels must list one width per stride")
        if self.sample_rate % self.latent_rate != 0:
            raise ValueError("sample_rate must be an integer multiple of latent_rate")
        if self.downsample_ratio != self.sample_rate // self.latent_rate:
            raise ValueError(
                f"bands x strides {self.bands} x {self.strides} give ratio "
                f"{self.downsample_ratio}, need {self.sample_rate // self.latent_rate}"
            )
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")

    @property
    def downsample_ratio(self) -> int:
        return int(self.bands * np.prod(self.strides))

    @classmethod
    def for_rates(cls, sample_rate: int, latent_rate: int = 40, **kw) -> "CodecConfig":
        """Pick a stride stack for a sample rate (8/16/48 kHz presets)."""
        ratio = sample_rate // latent_rate
        presets = {200: (2, 5, 5), 400: (4, 5, 5), 1200: (4, 15, 5)}
        if ratio not in presets:
            raise ValueError(f"no stride preset for ratio {ratio}; pass strides=")
        return cls(
            sample_rate=sample_rate, latent_rate=latent_rate,
            strides=presets[ratio], **kw,
        )


class ResUnit(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv1d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv1d(ch, ch, 1)

    def forward(self, x):
        h = self.conv2(F.elu(self.conv1(F.elu(x))))
        return x + h


def _down(cin: int, cout: int, stride: int) -> nn.Conv1d:
    k = 2 * stride
    return nn.Conv1d(cin, cout, k, stride=stride, padding=math.ceil(stride / 2))


def _up(cin: int, cout: int, stride: int) -> nn.ConvTranspose1d:
    k = 2 * stride
    pad = math.ceil(stride / 2)
    return nn.ConvTranspose1d(
        cin, cout, k, stride=stride, padding=pad, output_padding=2 * pad - stride
    )


class AudioVae(nn.Module):
    """Conv encoder to (mean, logvar) latent frames and a mirrored decoder."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        enc = [nn.Conv1d(1, cfg.stem_channels, 7, padding=3)]
        ch = cfg.stem_channels
        for stride, width in zip(cfg.strides, cfg.channels):
            enc += [ResUnit(ch), _down(ch, width, stride)]
            ch = width
        enc += [ResUnit(ch)]
        self.encoder = nn.Sequential(*enc)
        self.enc_head = nn.Conv1d(ch, 2 * cfg.latent_dim, 3, padding=1)

        dec = [nn.Conv1d(cfg.latent_dim, ch, 3, padding=1)]
        for stride, width in zip(reversed(cfg.strides), (*reversed(cfg.channels[:-1]), cfg.stem_channels)):
            dec += [ResUnit(ch), _up(ch, width, stride)]
            ch = width
        dec += [ResUnit(ch)]
        self.decoder = nn.Sequential(*dec)
        self.dec_head = nn.Conv1d(ch, 1, 7, padding=3)

        # start the posterior tight so early reconstruction is not drowned in noise
        nn.init.constant_(self.enc_head.bias[cfg.latent_dim :], -6.0)

    def encode_posterior(self, wav: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """wav (B, L) with L a multiple of the ratio -> mean/logvar (B, T_z, C_z)."""
        h = self.encoder(wav.unsqueeze(1))
        stats = self.enc_head(h)
        mean, logvar = stats.chunk(2, dim=1)
        return mean.transpose(1, 2), logvar.transpose(1, 2)

    def decode_frames(self, z: torch.Tensor) -> torch.Tensor:
        """z (B, T_z, C_z) -> waveform (B, T_z * ratio), unclamped."""
        h = self.decoder(z.transpose(1, 2))
        return self.dec_head(h).squeeze(1)


class Codec:
    """Loaded codec: config + network + global latent scale."""

    def __init__(self, cfg: CodecConfig, net: AudioVae | None = None, latent_scale: float = 1.0):
        self.cfg = cfg
        self.net = net if net is not None else AudioVae(cfg)
        self.net.eval()
        self.net.requires_grad_(False)  # loaded codecs are frozen
        self.net.zero_grad(set_to_none=True)
        self.latent_scale = float(latent_scale)

    def _check_waveform(self, w: Waveform) -> np.ndarray:
        if w.sample_rate != self.cfg.sample_rate:
            raise ValueError(
                f"waveform rate {w.sample_rate} != codec rate {self.cfg.sample_rate}"
            )
        return w.samples

    @torch.no_grad()
    def encode(
        self,
        w: Waveform,
        deterministic: bool = False,
        generator: torch.Generator | None = None,
    ) -> LatentSequence:
        """Encode to latent frames; posterior mean when deterministic, else
        mean + sigma * xi. Input is right-padded with zeros to a multiple of
        the downsample ratio and the pad length recorded on the result."""
        x = self._check_waveform(w)
        ratio = self.cfg.downsample_ratio
        pad = (-len(x)) % ratio
        if pad:
            x = np.concatenate([x, np.zeros(pad, dtype=np.float32)])
        wav = torch.from_numpy(x).unsqueeze(0)
        mean, logvar = self.net.encode_posterior(wav)
        if deterministic:
            z = mean
        else:
            xi = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
            z = mean + torch.exp(0.5 * logvar) * xi
        frames = (z[0] / self.latent_scale).numpy().astype(np.float32)
        return LatentSequence(
            frames=frames, latent_rate=self.cfg.latent_rate, padded_samples=pad
        )

    @torch.no_grad()
    def decode(self, z: LatentSequence) -> Waveform:
        """Decode latent frames to a waveform clamped to [-1, 1]."""
        if z.dim != self.cfg.latent_dim:
            raise ValueError(f"latent dim {z.dim} != codec dim {self.cfg.latent_dim}")
        zt = torch.from_numpy(z.frames * self.latent_scale).unsqueeze(0)
        wav = self.net.decode_frames(zt)[0]
        samples = torch.clamp(wav, -1.0, 1.0).numpy().astype(np.float32)
        return Waveform(samples=samples, sample_rate=self.cfg.sample_rate)

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "version": CODEC_CHECKPOINT_VERSION,
                "config": self.cfg.__dict__ | {"strides": list(self.cfg.strides), "channels": list(self.cfg.channels)},
                "state_dict": self.net.state_dict(),
                "latent_scale": self.latent_scale,
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> "Codec":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("version") != CODEC_CHECKPOINT_VERSION:
            raise ValueError(f"unsupported codec checkpoint version {blob.get('version')}")
        cfgd = dict(blob["config"])
        cfgd["strides"] = tuple(cfgd["strides"])
        cfgd["channels"] = tuple(cfgd["channels"])
        cfg = CodecConfig(**cfgd)
        net = AudioVae(cfg)
        net.load_state_dict(blob["state_dict"])
        return cls(cfg, net, blob["latent_scale"])


def multiscale_stft_loss(
    x: torch.Tensor,
    y: torch.Tensor,
    windows: tuple[int, ...] = (1024, 512, 256, 128, 64),
    log_weight: float = 1.0,
) -> torch.Tensor:
    """L1 on linear + log STFT magnitudes across several resolutions.

    The log term weighs quiet bands on par with loud ones, which keeps
    low-energy high-frequency content from being dropped.
    """
    loss = x.new_zeros(())
    for win in windows:
        if x.shape[-1] < win:
            continue
        w = torch.hann_window(win, dtype=x.dtype)
        sx = torch.stft(x, win, hop_length=win // 4, window=w, return_complex=True).abs()
        sy = torch.stft(y, win, hop_length=win // 4, window=w, return_complex=True).abs()
        loss = loss + (sx - sy).abs().mean() / (sx.abs().mean() + 1e-6)
        loss = loss + (torch.log(sx + 1e-5) - torch.log(sy + 1e-5)).abs().mean() * log_weight
    return loss


def kl_divergence(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Mean per-dimension KL(q || N(0, I)); non-negative by construction."""
    return (-0.5 * (1.0 + logvar - mean.pow(2) - logvar.exp())).mean()


def _crop_batch(
    corpus: list[np.ndarray],
    event_starts: list[np.ndarray],
    crop: int,
    batch: int,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Random crops, biased toward event onsets so attacks stay in view."""
    out = np.empty((batch, crop), dtype=np.float32)
    for b in range(batch):
        i = int(rng.integers(len(corpus)))
        x = corpus[i]
        starts = event_starts[i]
        if len(starts) and rng.random() < 0.7:
            ev = int(starts[rng.integers(len(starts))])
            lo = max(0, ev - crop // 3)
            start = min(lo, len(x) - crop)
        else:
            start = int(rng.integers(0, max(1, len(x) - crop + 1)))
        out[b] = x[start : start + crop]
    return torch.from_numpy(out)


def train_codec(
    corpus: list[Waveform],
    cfg: CodecConfig,
    steps: int,
    seed: int = 0,
    batch_size: int = 4,
    lr: float = 5e-4,
    crop_s: float = 0.4,
    event_times: list[list[float]] | None = None,
    log_every: int = 100,
    waveform_weight: float = 25.0,
) -> tuple[Codec, list[dict]]:
    """Train the codec on a waveform corpus and return (codec, loss trace).

    The trace records total/recon/kl for each logged step. After training
    the global latent scale is measured on posterior means over the corpus
    and stored on the returned codec. Raises on non-finite loss.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    for w in corpus:
        if w.sample_rate != cfg.sample_rate:
            raise ValueError("corpus sample rate does not match codec config")

    torch.manual_seed(seed)
    net = AudioVae(cfg)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = np.random.Generator(np.random.PCG64(seed))

    ratio = cfg.downsample_ratio
    crop = max(ratio, int(crop_s * cfg.sample_rate) // ratio * ratio)
    waves = [w.samples for w in corpus]
    starts = [
        np.asarray([t * cfg.sample_rate for t in (event_times[i] if event_times else [])])
        for i in range(len(corpus))
    ]

    trace = []
    for step in range(steps):
        for group in opt.param_groups:  # cosine decay to a tenth of the peak
            group["lr"] = lr * (0.55 + 0.45 * math.cos(math.pi * step / steps))
        x = _crop_batch(waves, starts, crop, batch_size, rng)
        mean, logvar = net.encode_posterior(x)
        z = mean + torch.exp(0.5 * logvar) * torch.randn_like(mean)
        y = net.decode_frames(z)
        recon = multiscale_stft_loss(x, y) + (x - y).abs().mean() * waveform_weight
        kl = kl_divergence(mean, logvar)
        loss = recon + cfg.kl_weight * kl if cfg.kl_weight > 0 else recon
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"codec training diverged at step {step}: loss={loss.item()}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            trace.append(
                {
                    "step": step,
                    "loss": float(loss.item()),
                    "recon": float(recon.item()),
                    "kl": float(kl.item()),
                }
            )

    net.eval()
    codec = Codec(cfg, net, latent_scale=1.0)
    codec.latent_scale = _measure_latent_scale(codec, corpus)
    return codec, trace


@torch.no_grad()
def _measure_latent_scale(codec: Codec, corpus: list[Waveform]) -> float:
    sq_sum, count = 0.0, 0
    for w in corpus[:64]:
        z = codec.encode(w, deterministic=True)
        sq_sum += float((z.frames.astype(np.float64) ** 2).sum())
        count += z.frames.size
    std = math.sqrt(sq_sum / max(count, 1))
    return std if std > 1e-8 else 1.0


def snr_db(reference: np.ndarray, estimate: np.ndarray) -> float:
    """Signal-to-noise ratio of an estimate against a reference, in dB."""
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    n = min(len(reference), len(estimate))
    err = reference[:n] - estimate[:n]
    denom = float((err**2).sum())
    if denom == 0:
        return float("inf")
    return 10.0 * math.log10(float((reference[:n] ** 2).sum()) / denom)
