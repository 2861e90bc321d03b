"""Noise schedule, masked diffusion training loss, DDIM sampling, and the
three classifier-free-guidance modes.

Latents are noised as z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps with a
cosine cumulative-signal schedule over T = 1000 steps. Training predicts
eps with squared error restricted to non-conditional positions.
Sampling runs deterministic DDIM (eta = 0) over uniformly spaced steps,
combining a positive and a negative branch per step:

  text_negative  positive (v_q, t_pos)          negative (null video, t_neg)
  quality        positive (v_q, t_pos+"high")   negative ("low quality" or null)
  extension      positive ([z_c; z_t], video)   negative (fresh noise, all null)

with eps_hat = (gamma + 1) * eps_pos - gamma * eps_neg. Conditional
positions are re-asserted to z_c after every step and returned bitwise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .codec import LatentSequence
from .denoiser import Denoiser
from .encoders import Caption, HashTextEncoder, TextEmbedding


@dataclass
class NoiseSchedule:
    """Cumulative signal coefficients ab_t for t in 0..T (ab_0 = 1)."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        ab = self.alpha_bar
        if ab.ndim != 1 or len(ab) < 2 or ab[0] != 1.0:
            raise ValueError("alpha_bar must be 1-D with alpha_bar[0] == 1")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if ab[1] < 0.99:
            raise ValueError(f"alpha_bar[1] = {ab[1]:.4f}, expected >= 0.99")
        if ab[-1] > 0.01:
            raise ValueError(f"alpha_bar[T] = {ab[-1]:.4f}, expected <= 0.01")

    @property
    def num_steps(self) -> int:
        return len(self.alpha_bar) - 1

    @classmethod
    def cosine(cls, num_steps: int = 1000, s: float = 0.008, max_beta: float = 0.999) -> "NoiseSchedule":
        t = np.arange(num_steps + 1, dtype=np.float64)
        f = np.cos((t / num_steps + s) / (1 + s) * math.pi / 2) ** 2
        ratios = np.clip(f[1:] / f[:-1], 1.0 - max_beta, 1.0)
        return cls(alpha_bar=np.concatenate([[1.0], np.cumprod(ratios)]))

    def sample_timesteps(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """t ~ uniform over {1..T}."""
        return rng.integers(1, self.num_steps + 1, size=n)


def add_noise(z0, t, eps, sched: NoiseSchedule):
    """z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps; works on numpy or torch.

    t may be an int or a per-item vector matching z0's leading dimension.
    """
    ab = _gather_ab(z0, t, sched)
    return _sqrt(ab) * z0 + _sqrt(1.0 - ab) * eps


def _gather_ab(z, t, sched: NoiseSchedule):
    if np.isscalar(t) or getattr(t, "ndim", 0) == 0:
        t = int(t)
        if not 1 <= t <= sched.num_steps:
            raise ValueError(f"timestep {t} out of range [1, {sched.num_steps}]")
        return float(sched.alpha_bar[t])
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.num_steps):
        raise ValueError("timestep out of range")
    ab = sched.alpha_bar[t].reshape((-1,) + (1,) * (z.ndim - 1))
    if isinstance(z, torch.Tensor):
        return torch.from_numpy(ab).to(z.dtype)
    return ab.astype(np.float64 if np.asarray(z).dtype == np.float64 else np.float32)


def _sqrt(x):
    return math.sqrt(x) if isinstance(x, float) else x**0.5


def cfg_combine(eps_pos, eps_neg, gamma):
    """Classifier-free guidance: (gamma + 1) * eps_pos - gamma * eps_neg.

    gamma may be a scalar or broadcast against the estimates (per-item
    guidance scales in a batch).
    """
    if np.isscalar(gamma):
        if gamma < 0:
            raise ValueError("guidance scale must be >= 0")
    elif bool((np.asarray(gamma) < 0).any() if not isinstance(gamma, torch.Tensor) else (gamma < 0).any()):
        raise ValueError("guidance scale must be >= 0")
    return (gamma + 1.0) * eps_pos - gamma * eps_neg


def ddim_step(z_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule):
    """One deterministic DDIM update from t to t_prev (t_prev <= t).

    x0_hat = (z_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)
    z_prev = sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev) eps_hat
    """
    if t_prev > t:
        raise ValueError(f"t_prev {t_prev} must not exceed t {t}")
    if t_prev == t:
        return z_t + 0 * eps_hat
    ab_t = float(sched.alpha_bar[t])
    ab_prev = float(sched.alpha_bar[t_prev])
    if ab_t == 0.0:
        raise ValueError("alpha_bar at t is zero; cannot invert")
    x0 = (z_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps_hat


def ddim_timesteps(sched: NoiseSchedule, steps: int) -> list[int]:
    """Uniformly spaced integer timesteps T = t_0 > t_1 > ... > 0."""
    if not 1 <= steps <= sched.num_steps:
        raise ValueError("steps must be in [1, T]")
    ts = np.round(np.linspace(sched.num_steps, 0, steps + 1)).astype(int)
    return [int(t) for t in ts]


@dataclass
class ConditionBundle:
    """All conditioning for one clip; None marks a dropped condition."""

    text: TextEmbedding | None = None
    video: np.ndarray | None = None  # (T_z, C_v) aligned to the latent rate
    cond_latents: LatentSequence | None = None
    cond_mask: np.ndarray | None = None  # (T_z,) bool, True = conditional

    def __post_init__(self):
        if self.cond_mask is not None:
            self.cond_mask = np.asarray(self.cond_mask, dtype=bool)
        if self.cond_latents is not None:
            if self.cond_mask is None:
                raise ValueError("cond_latents requires cond_mask")
            if int(self.cond_mask.sum()) != self.cond_latents.num_frames:
                raise ValueError(
                    "cond_mask true-count must equal cond_latents frame count"
                )


@dataclass
class GuidanceSpec:
    """Inference-time guidance: mode, strength, and the two captions."""

    mode: str  # "text_negative" | "extension" | "quality"
    gamma: float = 3.0
    pos_caption: Caption | None = None
    neg_caption: Caption | None = None
    use_null_negative: bool = False  # quality mode: null text instead of "low quality"

    def __post_init__(self):
        if self.mode not in ("text_negative", "extension", "quality"):
            raise ValueError(f"unknown guidance mode {self.mode!r}")
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError("gamma must be finite and >= 0")

    def resolved_captions(self) -> tuple[Caption | None, Caption | None]:
        pos, neg = self.pos_caption, self.neg_caption
        if self.mode == "quality":
            body = pos.body if pos is not None else ""
            pos = Caption(body=body, quality_tag="high")
            if neg is None:
                neg = None if self.use_null_negative else Caption(body="", quality_tag="low")
        elif self.mode == "extension":
            neg = None  # the negative branch drops text entirely
        return pos, neg


@dataclass
class TrainingExample:
    latents: np.ndarray  # (T_z, C_z) clean latent frames
    bundle: ConditionBundle
    caption: Caption | None = None
    meta: dict = field(default_factory=dict)


def _collate_text(
    items: list[TextEmbedding | None], text_dim: int
) -> tuple[torch.Tensor | None, torch.Tensor | None, torch.Tensor | None]:
    if all(t is None for t in items):
        return None, None, None
    max_len = max(t.tokens.shape[0] for t in items if t is not None)
    b = len(items)
    text = torch.zeros(b, max_len, text_dim)
    pad = torch.ones(b, max_len, dtype=torch.bool)
    has = torch.zeros(b, dtype=torch.bool)
    for i, t in enumerate(items):
        if t is None:
            continue
        n = t.tokens.shape[0]
        text[i, :n] = torch.from_numpy(t.tokens)
        pad[i, :n] = torch.from_numpy(t.pad_mask)
        has[i] = True
    return text, pad, has


def _collate_video(
    items: list[np.ndarray | None], seq: int, video_dim: int
) -> tuple[torch.Tensor | None, torch.Tensor | None]:
    if all(v is None for v in items):
        return None, None
    b = len(items)
    video = torch.zeros(b, seq, video_dim)
    has = torch.zeros(b, dtype=torch.bool)
    for i, v in enumerate(items):
        if v is None:
            continue
        if v.shape[0] != seq:
            raise ValueError(f"video features length {v.shape[0]} != {seq}")
        video[i] = torch.from_numpy(np.asarray(v, dtype=np.float32))
        has[i] = True
    return video, has


def training_loss(
    batch: list[TrainingExample],
    denoiser: Denoiser,
    sched: NoiseSchedule,
    seed: int = 0,
) -> tuple[torch.Tensor, np.ndarray]:
    """Masked eps-prediction loss over a batch.

    Returns (scalar loss, per-position squared-error map of shape (B, T_z)).
    The loss is the mean over non-conditional positions of the per-frame
    channel-summed squared error; conditional positions contribute exactly
    zero and appear as zeros in the map. Items whose mask covers every
    position are skipped with a warning.
    """
    keep = []
    for ex in batch:
        mask = ex.bundle.cond_mask
        if mask is not None and bool(mask.all()):
            warnings.warn("skipping all-conditional example: loss undefined")
            continue
        keep.append(ex)
    if not keep:
        raise ValueError("no trainable examples in batch (all fully conditional)")

    b = len(keep)
    seq, dim = keep[0].latents.shape
    z0 = torch.stack([torch.from_numpy(np.asarray(ex.latents, dtype=np.float32)) for ex in keep])
    mask = torch.zeros(b, seq, dtype=torch.bool)
    for i, ex in enumerate(keep):
        if ex.bundle.cond_mask is not None:
            mask[i] = torch.from_numpy(ex.bundle.cond_mask)

    rng = np.random.Generator(np.random.PCG64(seed))
    t = sched.sample_timesteps(b, rng)
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(z0.shape, generator=gen)
    z_t = add_noise(z0, t, eps, sched)

    inputs = torch.where(mask.unsqueeze(-1), z0, z_t)
    for i, ex in enumerate(keep):  # honor the bundle's conditional latents
        if ex.bundle.cond_latents is not None:
            inputs[i, mask[i]] = torch.from_numpy(ex.bundle.cond_latents.frames)

    video, has_video = _collate_video(
        [ex.bundle.video for ex in keep], seq, denoiser.cfg.video_dim
    )
    text, text_pad, has_text = _collate_text(
        [ex.bundle.text for ex in keep], denoiser.cfg.text_dim
    )
    eps_hat = denoiser(
        inputs, torch.from_numpy(t), mask, video, has_video, text, text_pad, has_text
    )

    sq = ((eps - eps_hat) ** 2).sum(dim=-1)  # (B, T)
    loss = sq[~mask].mean()
    per_position = sq.detach().clone()
    per_position[mask] = 0.0
    return loss, per_position.numpy()


def _encode_captions(spec: GuidanceSpec, text_encoder) -> tuple:
    pos_c, neg_c = spec.resolved_captions()
    return text_encoder.encode(pos_c), text_encoder.encode(neg_c)


def sample(
    spec: GuidanceSpec,
    bundle: ConditionBundle,
    denoiser: Denoiser,
    sched: NoiseSchedule,
    steps: int = 100,
    seed: int = 0,
    text_encoder: HashTextEncoder | None = None,
    latent_rate: int = 40,
    num_frames: int | None = None,
) -> LatentSequence:
    """Generate one latent sequence under the guidance spec."""
    return sample_many(
        [spec], [bundle], denoiser, sched,
        steps=steps, seeds=[seed], text_encoder=text_encoder,
        latent_rate=latent_rate, num_frames=num_frames,
    )[0]


@torch.no_grad()
def sample_many(
    specs: list[GuidanceSpec],
    bundles: list[ConditionBundle],
    denoiser: Denoiser,
    sched: NoiseSchedule,
    steps: int = 100,
    seeds: list[int] | None = None,
    text_encoder: HashTextEncoder | None = None,
    latent_rate: int = 40,
    num_frames: int | None = None,
) -> list[LatentSequence]:
    """Batched sampling; all requests must share the same mode.

    Each item draws its noise from its own seeded generator, so results do
    not depend on how requests are grouped into batches.
    """
    if len(specs) != len(bundles):
        raise ValueError("specs and bundles must pair up")
    modes = {s.mode for s in specs}
    if len(modes) != 1:
        raise ValueError(f"one batch must use a single mode, got {modes}")
    mode = modes.pop()
    text_encoder = text_encoder or HashTextEncoder(dim=denoiser.cfg.text_dim)
    b = len(specs)
    seeds = seeds if seeds is not None else list(range(b))

    seq = num_frames
    for bundle in bundles:
        if bundle.video is not None:
            seq = bundle.video.shape[0] if seq is None else seq
        if mode == "extension" and bundle.cond_latents is None:
            raise ValueError("extension mode requires conditional latents")
        if bundle.cond_mask is not None:
            seq = len(bundle.cond_mask) if seq is None else seq
    if seq is None:
        raise ValueError("cannot infer sequence length; pass num_frames")

    dim = denoiser.cfg.latent_dim
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    z = torch.stack([torch.randn(seq, dim, generator=g) for g in gens])

    cond_mask = torch.zeros(b, seq, dtype=torch.bool)
    cond_vals: list[torch.Tensor | None] = [None] * b
    for i, bundle in enumerate(bundles):
        if bundle.cond_latents is not None:
            cond_mask[i] = torch.from_numpy(bundle.cond_mask)
            cond_vals[i] = torch.from_numpy(bundle.cond_latents.frames)
    use_mask = mode == "extension"

    pos_text_items, neg_text_items = [], []
    for s in specs:
        pt, nt = _encode_captions(s, text_encoder)
        pos_text_items.append(pt)
        neg_text_items.append(nt)
    pos_text, pos_pad, pos_has = _collate_text(pos_text_items, denoiser.cfg.text_dim)
    neg_text, neg_pad, neg_has = _collate_text(neg_text_items, denoiser.cfg.text_dim)
    video, has_video = _collate_video(
        [bd.video for bd in bundles], seq, denoiser.cfg.video_dim
    )

    gammas = torch.tensor([s.gamma for s in specs]).view(b, 1, 1)
    run_negative = any(s.gamma > 0 for s in specs)
    t_long = torch.zeros(b, dtype=torch.long)
    ts = ddim_timesteps(sched, steps)

    for t, t_prev in zip(ts, ts[1:]):
        t_long.fill_(t)
        if use_mask:
            pos_in = z.clone()
            for i in range(b):
                if cond_vals[i] is not None:
                    pos_in[i, cond_mask[i]] = cond_vals[i]
            eps_pos = denoiser(
                pos_in, t_long, cond_mask, video, has_video, pos_text, pos_pad, pos_has
            )
            if run_negative:
                neg_in = z.clone()
                for i in range(b):
                    n_cond = int(cond_mask[i].sum())
                    if n_cond:
                        neg_in[i, cond_mask[i]] = torch.randn(n_cond, dim, generator=gens[i])
                eps_neg = denoiser(neg_in, t_long, None, None, None, None, None, None)
        else:
            eps_pos = denoiser(
                z, t_long, None, video, has_video, pos_text, pos_pad, pos_has
            )
            if run_negative:
                eps_neg = denoiser(z, t_long, None, None, None, neg_text, neg_pad, neg_has)
        eps_hat = cfg_combine(eps_pos, eps_neg, gammas) if run_negative else eps_pos
        z = ddim_step(z, eps_hat, t, t_prev, sched)
        if use_mask:
            for i in range(b):
                if cond_vals[i] is not None:
                    z[i, cond_mask[i]] = cond_vals[i]

    out = []
    for i in range(b):
        frames = z[i].numpy().astype(np.float32)
        if cond_vals[i] is not None and use_mask:
            frames[cond_mask[i].numpy()] = bundles[i].cond_latents.frames
        if not np.all(np.isfinite(frames)):
            raise RuntimeError("sampling produced non-finite latents")
        out.append(LatentSequence(frames=frames, latent_rate=latent_rate))
    return out
