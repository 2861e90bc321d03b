"""Two-stage diffusion training: mixed-dataset sampling with condition
dropout, span masking, warmup + cosine learning rate, EMA, and bit-exact
resumable checkpoints.

The batch mixture draws 60% audio-visual / 40% SFX items. Within the AV
share, 60% keep all conditions (video + caption + quality tag) and the
remaining 40% split evenly across seven dropout variants; within the SFX
share the split is 60/10/15/15 over caption+tag / caption / tag /
unconditional. AV items additionally receive a clean conditional span of
0-2 s with probability 0.25. The codec and condition encoders stay frozen
throughout; clips are encoded to latents once per run with per-clip seeds
so epochs see identical latents.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec import Codec, LatentSequence
from .data import ClipRecord, load_features, read_manifest
from .audio import read_wav
from .denoiser import Denoiser, DenoiserConfig, config_to_dict
from .diffusion import ConditionBundle, NoiseSchedule, TrainingExample, training_loss
from .encoders import HashTextEncoder, VideoFeatures, align_video_features, make_caption

TRAIN_CHECKPOINT_VERSION = 1

AV_DROPOUT_VARIANTS = (
    "video_tag", "video_text", "video_only",
    "text_tag", "text_only", "tag_only", "uncond",
)
SFX_VARIANTS = ("text_tag", "text_only", "tag_only", "uncond")

# variant -> (has_video, has_caption_body, has_tag)
_VARIANT_FLAGS = {
    "full": (True, True, True),
    "video_tag": (True, False, True),
    "video_text": (True, True, False),
    "video_only": (True, False, False),
    "text_tag": (False, True, True),
    "text_only": (False, True, False),
    "tag_only": (False, False, True),
    "uncond": (False, False, False),
}


@dataclass
class MixPolicy:
    p_av_dataset: float = 0.60
    p_sfx_dataset: float = 0.40
    p_av_full: float = 0.60  # rest splits evenly across AV_DROPOUT_VARIANTS
    sfx_probs: dict = field(
        default_factory=lambda: {
            "text_tag": 0.60, "text_only": 0.10, "tag_only": 0.15, "uncond": 0.15
        }
    )

    def __post_init__(self):
        if abs(self.p_av_dataset + self.p_sfx_dataset - 1.0) > 1e-9:
            raise ValueError("dataset probabilities must sum to 1")
        if not 0.0 <= self.p_av_full <= 1.0:
            raise ValueError("p_av_full must lie in [0, 1]")
        if set(self.sfx_probs) != set(SFX_VARIANTS) or abs(sum(self.sfx_probs.values()) - 1.0) > 1e-9:
            raise ValueError("sfx variant probabilities must cover all variants and sum to 1")

    def av_variant_probs(self) -> dict[str, float]:
        rest = (1.0 - self.p_av_full) / len(AV_DROPOUT_VARIANTS)
        return {"full": self.p_av_full, **{v: rest for v in AV_DROPOUT_VARIANTS}}


@dataclass
class MaskPolicy:
    p_mask: float = 0.25
    max_span_s: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.p_mask <= 1.0:
            raise ValueError("p_mask must lie in [0, 1]")


@dataclass
class OptimSpec:
    lr: float = 1e-4
    warmup_steps: int = 4000
    total_steps: int = 20000
    finetune_steps: int = 2000
    ema_decay: float = 0.99
    batch_size: int = 8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.warmup_steps >= self.total_steps:
            raise ValueError("warmup must be shorter than total steps")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")


def lr_at(step: int, spec: OptimSpec, total_steps: int | None = None) -> float:
    """Linear warmup to spec.lr, then cosine decay to zero."""
    total = total_steps if total_steps is not None else spec.total_steps
    if step < spec.warmup_steps:
        return spec.lr * step / spec.warmup_steps
    frac = (step - spec.warmup_steps) / max(1, total - spec.warmup_steps)
    return spec.lr * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


class Ema:
    """Exponential moving average of model parameters.

    shadow <- decay * shadow + (1 - decay) * param
    """

    def __init__(self, model: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {
            name: p.detach().clone() for name, p in model.named_parameters()
        }

    @torch.no_grad()
    def update(self, model: torch.nn.Module) -> None:
        for name, p in model.named_parameters():
            s = self.shadow[name]
            s.mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)

    @torch.no_grad()
    def distance(self, model: torch.nn.Module) -> float:
        total = 0.0
        for name, p in model.named_parameters():
            total += float((p.detach() - self.shadow[name]).pow(2).sum())
        return math.sqrt(total)

    def state_dict(self) -> dict:
        return {k: v.clone() for k, v in self.shadow.items()}

    def load_state_dict(self, state: dict) -> None:
        self.shadow = {k: v.clone() for k, v in state.items()}


@dataclass
class ClipData:
    record: ClipRecord
    latents: np.ndarray  # (T_z, C_z)
    video: np.ndarray | None  # (T_z, C_v) aligned


class LatentDataset:
    """Clips pre-encoded to latents with aligned video features.

    Encoding happens exactly once per run with a per-clip seed derived
    from (seed, clip_id), so the frozen-codec outputs are bitwise stable
    across epochs and resumes.
    """

    def __init__(self, clips: list[ClipData], latent_rate: int):
        if not clips:
            raise ValueError("dataset is empty")
        self.clips = clips
        self.latent_rate = latent_rate

    def __len__(self) -> int:
        return len(self.clips)

    @classmethod
    def build(
        cls,
        manifest_path: str | Path,
        codec: Codec,
        seed: int = 0,
        posterior_sample: bool = True,
        subset_only: bool = False,
    ) -> "LatentDataset":
        manifest_path = Path(manifest_path)
        root = manifest_path.parent
        records = read_manifest(manifest_path)
        if subset_only:
            records = [r for r in records if r.high_correspondence]
        if not records:
            raise ValueError(f"no usable clips in {manifest_path}")
        clips = []
        for rec in records:
            wave = read_wav(root / rec.wav_path)
            gen = torch.Generator().manual_seed(_clip_seed(seed, rec.clip_id))
            z = codec.encode(wave, deterministic=not posterior_sample, generator=gen)
            video = None
            if rec.feat_path is not None:
                feats = load_features(root / rec.feat_path)
                video = align_video_features(
                    VideoFeatures(feats=feats, fps=rec.fps), z.num_frames
                )
            clips.append(ClipData(record=rec, latents=z.frames, video=video))
        return cls(clips, codec.cfg.latent_rate)


def _clip_seed(seed: int, clip_id: str) -> int:
    return int(np.random.SeedSequence([seed, abs(hash_str(clip_id))]).generate_state(1)[0])


def hash_str(s: str) -> int:
    """Stable across processes (unlike builtin hash)."""
    import hashlib

    return int.from_bytes(hashlib.sha256(s.encode()).digest()[:8], "little")


def _choose(rng: np.random.Generator, probs: dict[str, float]) -> str:
    names = list(probs)
    return names[int(rng.choice(len(names), p=np.array([probs[n] for n in names])))]


def sample_batch(
    av: LatentDataset | None,
    sfx: LatentDataset | None,
    mix: MixPolicy,
    mask_policy: MaskPolicy,
    batch_size: int,
    seed: int,
    text_encoder: HashTextEncoder | None = None,
) -> list[TrainingExample]:
    """Draw one training batch; fully determined by (datasets, seed)."""
    if mix.p_av_dataset > 0 and av is None:
        raise ValueError("mix requests AV items but no AV dataset was given")
    if mix.p_sfx_dataset > 0 and sfx is None:
        raise ValueError("mix requests SFX items but no SFX dataset was given")
    text_encoder = text_encoder or HashTextEncoder()
    rng = np.random.Generator(np.random.PCG64(seed))
    av_probs = mix.av_variant_probs()

    batch = []
    for _ in range(batch_size):
        use_av = rng.random() < mix.p_av_dataset
        ds = av if use_av else sfx
        variant = _choose(rng, av_probs if use_av else mix.sfx_probs)
        clip = ds.clips[int(rng.integers(len(ds)))]
        has_video, has_caption, has_tag = _VARIANT_FLAGS[variant]

        caption = make_caption(
            clip.record.category,
            clip.record.quality_tag,
            drop_caption=not has_caption,
            drop_tag=not has_tag,
        )
        video = clip.video if (has_video and clip.video is not None) else None

        cond_latents = cond_mask = None
        span = None
        if use_av and rng.random() < mask_policy.p_mask:
            t_z = clip.latents.shape[0]
            max_frames = min(t_z, int(mask_policy.max_span_s * ds.latent_rate))
            length = int(rng.integers(0, max_frames + 1))
            if length > 0:
                start = int(rng.integers(0, t_z - length + 1))
                cond_mask = np.zeros(t_z, dtype=bool)
                cond_mask[start : start + length] = True
                cond_latents = LatentSequence(
                    frames=clip.latents[start : start + length],
                    latent_rate=ds.latent_rate,
                )
                span = (start, length)

        bundle = ConditionBundle(
            text=text_encoder.encode(caption),
            video=video,
            cond_latents=cond_latents,
            cond_mask=cond_mask,
        )
        batch.append(
            TrainingExample(
                latents=clip.latents,
                bundle=bundle,
                caption=caption,
                meta={
                    "source": "av" if use_av else "sfx",
                    "variant": variant,
                    "category": clip.record.category,
                    "clip_id": clip.record.clip_id,
                    "span": span,
                },
            )
        )
    return batch


def check_frozen(codec: Codec, optimizer: torch.optim.Optimizer) -> None:
    """Assert the codec receives no gradient and is not being optimized."""
    opt_params = {id(p) for group in optimizer.param_groups for p in group["params"]}
    for name, p in codec.net.named_parameters():
        if id(p) in opt_params:
            raise AssertionError(f"codec parameter {name} is in the optimizer")
        if p.grad is not None and float(p.grad.norm()) != 0.0:
            raise AssertionError(f"codec parameter {name} received gradient")


def save_checkpoint(
    path: str | Path,
    denoiser: Denoiser,
    ema: Ema,
    optimizer: torch.optim.Optimizer,
    step: int,
    sched: NoiseSchedule,
    stage: str,
    seed: int,
    total_steps: int,
) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": TRAIN_CHECKPOINT_VERSION,
            "config": config_to_dict(denoiser.cfg),
            "state_dict": denoiser.state_dict(),
            "ema": ema.state_dict(),
            "optimizer": optimizer.state_dict(),
            "step": step,
            "stage": stage,
            "seed": seed,
            "total_steps": total_steps,
            "schedule": {"type": "cosine", "num_steps": sched.num_steps},
        },
        path,
    )


def load_checkpoint(path: str | Path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != TRAIN_CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    return blob


def load_denoiser(path: str | Path, use_ema: bool = True) -> tuple[Denoiser, dict]:
    """Load a denoiser for inference; EMA weights by default."""
    blob = load_checkpoint(path)
    cfg = DenoiserConfig(**blob["config"])
    net = Denoiser(cfg)
    net.load_state_dict(blob["state_dict"])
    if use_ema:
        params = dict(net.named_parameters())
        for name, shadow in blob["ema"].items():
            params[name].data.copy_(shadow)
    net.eval()
    return net, blob


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def train(
    stage: str,
    av_manifest: str | Path | None,
    sfx_manifest: str | Path | None,
    codec: Codec,
    out_dir: str | Path,
    denoiser_cfg: DenoiserConfig | None = None,
    mix: MixPolicy | None = None,
    mask_policy: MaskPolicy | None = None,
    optim: OptimSpec | None = None,
    seed: int = 0,
    sched: NoiseSchedule | None = None,
    steps: int | None = None,
    pretrain_checkpoint: str | Path | None = None,
    resume_from: str | Path | None = None,
    checkpoint_every: int | None = None,
    eval_every: int = 500,
    log_cb=None,
) -> Path:
    """Run one training stage and return the final checkpoint path.

    stage "pretrain" trains from scratch on the full mixture; "finetune"
    starts from a pretrain checkpoint and continues on the AV clips
    flagged high-correspondence (AV-only mixture). Per-step metrics go to
    out_dir/metrics.jsonl as line-delimited JSON. Training halts on a
    non-finite loss after dumping the last good checkpoint.
    """
    if stage not in ("pretrain", "finetune"):
        raise ValueError(f"unknown stage {stage!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mix = mix or MixPolicy()
    mask_policy = mask_policy or MaskPolicy()
    optim = optim or OptimSpec()
    sched = sched or NoiseSchedule.cosine()
    denoiser_cfg = denoiser_cfg or DenoiserConfig()

    if stage == "finetune":
        if pretrain_checkpoint is None:
            raise ValueError("finetune requires a pretrain checkpoint")
        mix = MixPolicy(
            p_av_dataset=1.0, p_sfx_dataset=0.0,
            p_av_full=mix.p_av_full, sfx_probs=mix.sfx_probs,
        )

    av = sfx = None
    if av_manifest is not None:
        av = LatentDataset.build(
            av_manifest, codec, seed=seed, subset_only=(stage == "finetune")
        )
    if sfx_manifest is not None and mix.p_sfx_dataset > 0:
        sfx = LatentDataset.build(sfx_manifest, codec, seed=seed)
    if mix.p_av_dataset > 0 and av is None:
        raise ValueError("AV manifest required by the mixing policy")
    if mix.p_sfx_dataset > 0 and sfx is None:
        raise ValueError("SFX manifest required by the mixing policy")

    total_steps = steps if steps is not None else (
        optim.finetune_steps if stage == "finetune" else optim.total_steps
    )

    torch.manual_seed(seed)
    denoiser = Denoiser(denoiser_cfg)
    start_step = 0
    if stage == "finetune":
        base, _ = load_denoiser(pretrain_checkpoint, use_ema=False)
        denoiser.load_state_dict(base.state_dict())
    optimizer = torch.optim.AdamW(
        denoiser.parameters(), lr=optim.lr, weight_decay=optim.weight_decay
    )
    ema = Ema(denoiser, optim.ema_decay)
    if resume_from is not None:
        blob = load_checkpoint(resume_from)
        denoiser.load_state_dict(blob["state_dict"])
        optimizer.load_state_dict(blob["optimizer"])
        ema.load_state_dict(blob["ema"])
        start_step = blob["step"]

    text_encoder = HashTextEncoder(dim=denoiser_cfg.text_dim)
    metrics_path = out_dir / "metrics.jsonl"
    last_good = out_dir / "last_good.pt"
    final_path = out_dir / f"{stage}_final.pt"

    denoiser.train()
    with open(metrics_path, "a") as metrics:
        for step in range(start_step, total_steps):
            step_seed = _step_seed(seed, step)
            batch = sample_batch(
                av, sfx, mix, mask_policy, optim.batch_size, step_seed, text_encoder
            )
            lr = lr_at(step, optim, total_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            loss, _ = training_loss(batch, denoiser, sched, seed=step_seed)
            if not torch.isfinite(loss):
                save_checkpoint(
                    last_good, denoiser, ema, optimizer, step, sched, stage, seed, total_steps
                )
                raise RuntimeError(
                    f"non-finite loss at step {step}; last good state in {last_good}"
                )
            optimizer.zero_grad()
            loss.backward()
            grad_norm = math.sqrt(
                sum(float(p.grad.pow(2).sum()) for p in denoiser.parameters() if p.grad is not None)
            )
            optimizer.step()
            ema.update(denoiser)

            rec = {
                "step": step,
                "loss": float(loss.item()),
                "lr": lr,
                "grad_norm": grad_norm,
                "ema_dist": ema.distance(denoiser),
            }
            metrics.write(json.dumps(rec) + "\n")
            if log_cb is not None:
                log_cb(rec)
            if step % eval_every == 0:
                check_frozen(codec, optimizer)
            # "step" in a checkpoint counts completed steps, so resume
            # continues at exactly the next step index
            if checkpoint_every and (step + 1) % checkpoint_every == 0:
                save_checkpoint(
                    out_dir / f"{stage}_step{step + 1}.pt",
                    denoiser, ema, optimizer, step + 1, sched, stage, seed, total_steps,
                )

    save_checkpoint(
        final_path, denoiser, ema, optimizer, total_steps, sched, stage, seed, total_steps
    )
    return final_path
