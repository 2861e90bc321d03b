"""Procedural audio/video/text corpus with known ground truth.

Two corpus flavors mirror the training mixture: an audio-visual corpus
whose audio is band-limited ("low quality" tag, paired with per-frame
video features) and an audio-text SFX corpus at full bandwidth ("high
quality" tag, no video). Every clip is a sparse sequence of class-typed
events over a quiet noise floor, so onset times, categories, and
bandwidth are all exactly measurable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform, write_wav
from .data import ClipRecord, save_features, write_manifest
from .encoders import Caption, VideoClip

DEFAULT_CLASSES = ("tone-a", "tone-b", "click", "chirp")

MIN_EVENT_GAP_S = 0.25
NOISE_FLOOR = 1e-3
CLASS_CHANNEL_GAIN = 0.5  # identity channel is weaker than the event indicator


@dataclass
class EventScript:
    """Ground truth for one clip: category plus sorted event onset times."""

    category: str
    event_times: list[float]
    duration_s: float = 8.0

    def __post_init__(self):
        if not 1 <= len(self.event_times) <= 8:
            raise ValueError("scripts carry between 1 and 8 events")
        times = sorted(float(t) for t in self.event_times)
        if times != list(self.event_times):
            raise ValueError("event times must be sorted")
        if times[0] < 0 or times[-1] >= self.duration_s:
            raise ValueError("event times must lie in [0, duration)")
        gaps = np.diff(times)
        if len(gaps) and gaps.min() < MIN_EVENT_GAP_S:
            raise ValueError(f"event gap below {MIN_EVENT_GAP_S}s")


@dataclass
class CorpusSpec:
    n_clips: int
    classes: tuple[str, ...] = DEFAULT_CLASSES
    sample_rate: int = 16000
    band_limit_hz: float | None = None
    seed: int = 0
    duration_s: float = 8.0
    fps: int = 8
    video_dim: int = 512
    source: str = "av"  # "av" clips carry video features, "sfx" audio+text only
    quality_tag: str | None = None
    max_events: int = 8
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.band_limit_hz is not None and self.band_limit_hz >= self.sample_rate / 2:
            raise ValueError("band limit must stay below Nyquist")
        if self.quality_tag is None:
            self.quality_tag = "low" if self.source == "av" else "high"

    @classmethod
    def av(cls, n_clips: int, **kw) -> "CorpusSpec":
        """Band-limited audio-visual corpus (limit = sample_rate / 3)."""
        spec = cls(n_clips=n_clips, source="av", **kw)
        if spec.band_limit_hz is None:
            spec.band_limit_hz = spec.sample_rate / 3
        return spec

    @classmethod
    def sfx(cls, n_clips: int, **kw) -> "CorpusSpec":
        """Full-bandwidth audio-text corpus, no video."""
        kw.setdefault("band_limit_hz", None)
        return cls(n_clips=n_clips, source="sfx", **kw)


def _class_rng(category: str, salt: str = "") -> np.random.Generator:
    import hashlib

    digest = hashlib.sha256(f"{category}:{salt}".encode()).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))


def _air_component(category: str, fs: int, n: int, env: np.ndarray) -> np.ndarray:
    """Fixed high-band noise (0.34..0.47 fs) giving every class full-band
    energy, so band-limiting moves the measured rolloff."""
    rng = _class_rng(category, "air")
    noise = rng.standard_normal(n)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    spec[(freqs < 0.34 * fs) | (freqs > 0.47 * fs)] = 0.0
    air = np.fft.irfft(spec, n=n) * env
    return air / (np.sqrt((air**2).sum()) + 1e-12)


_TEMPLATE_CACHE: dict[tuple[str, int], np.ndarray] = {}


def _event_waveform(category: str, fs: int) -> np.ndarray:
    """Fixed per-class event template (deterministic phases), so every
    occurrence of a class is the same waveform up to amplitude. Spectra
    are disjoint across classes and all classes carry high-band energy."""
    key = (category, fs)
    if key in _TEMPLATE_CACHE:
        return _TEMPLATE_CACHE[key]

    if category == "click":
        n = int(0.02 * fs)
        env = np.exp(-np.arange(n) / (0.004 * fs))
        x = _class_rng(category).standard_normal(n) * env
        x *= 0.6 / (np.abs(x).max() + 1e-9)
    else:
        n = int(0.15 * fs)
        t = np.arange(n) / fs
        if category == "chirp":
            # downward sweep kept below any band limit so the attack is
            # always audible; the air component supplies full-band energy
            f_hi, f_lo = 0.30 * fs, 300.0
            phase = 2 * np.pi * (f_hi * t + 0.5 * (f_lo - f_hi) * t**2 / t[-1])
            env = np.exp(-t / 0.06)
            body = np.sin(phase) * env
            body /= np.sqrt((body**2).sum()) + 1e-12
            x = body + 0.75 * _air_component(category, fs, n, env)
            x *= 0.5 / (np.abs(x).max() + 1e-9)
        else:
            if category == "tone-a":
                f0, tau = 330.0, 0.045
            elif category == "tone-b":
                f0, tau = 950.0, 0.055
            else:
                raise ValueError(f"unknown category {category!r}")
            env = np.exp(-t / tau)
            rng = _class_rng(category)
            body = np.zeros(n)
            k = 1
            while k * f0 < 0.30 * fs:
                body += np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) / np.sqrt(k)
                k += 1
            body *= env
            body /= np.sqrt((body**2).sum()) + 1e-12
            x = body + 0.75 * _air_component(category, fs, n, env)
            x *= 0.5 / (np.abs(x).max() + 1e-9)

    template = x.astype(np.float32)
    _TEMPLATE_CACHE[key] = template
    return template


def _band_limit(x: np.ndarray, fs: int, limit_hz: float) -> np.ndarray:
    """Brick-wall low-pass via rFFT bin zeroing; exactly measurable."""
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), d=1.0 / fs)
    spec[freqs > limit_hz] = 0.0
    return np.fft.irfft(spec, n=len(x)).astype(np.float32)


def synth_clip(
    script: EventScript, spec: CorpusSpec, seed: int = 0
) -> tuple[Waveform, VideoClip, Caption]:
    """Render a script into paired audio, video features, and a caption.

    Audio places the category's event waveform at each onset over a quiet
    noise floor, band-limited when the spec asks for it. Video features
    carry a triangular event-indicator bump spanning frames
    floor(t*fps) +- 1 on channel 0 and the class identity one-hot on
    channels 1..K.
    """
    fs = spec.sample_rate
    rng = np.random.Generator(np.random.PCG64(seed))
    n = int(round(script.duration_s * fs))
    audio = rng.standard_normal(n).astype(np.float32) * NOISE_FLOOR
    template = _event_waveform(script.category, fs)
    for t_ev in script.event_times:
        ev = template * rng.uniform(0.85, 1.0)
        start = int(np.floor(t_ev * fs))
        stop = min(start + len(ev), n)
        audio[start:stop] += ev[: stop - start]
    if spec.band_limit_hz is not None:
        audio = _band_limit(audio, fs, spec.band_limit_hz)
    audio = np.clip(audio, -1.0, 1.0)

    t_v = int(round(script.duration_s * spec.fps))
    frames = np.zeros((t_v, spec.video_dim), dtype=np.float32)
    event_frames = [int(np.floor(t_ev * spec.fps)) for t_ev in script.event_times]
    if len(set(event_frames)) != len(event_frames):
        raise ValueError("events collide on a video frame; regenerate the script")
    for f in event_frames:
        for df, amp in ((-1, 0.5), (0, 1.0), (1, 0.5)):
            if 0 <= f + df < t_v:
                frames[f + df, 0] = max(frames[f + df, 0], amp)
    class_idx = spec.classes.index(script.category)
    frames[:, 1 + class_idx] = CLASS_CHANNEL_GAIN

    caption = Caption(body=script.category, quality_tag=spec.quality_tag)
    wave = Waveform(samples=audio, sample_rate=fs)
    clip = VideoClip(frames=frames, fps=spec.fps, duration_s=script.duration_s)
    return wave, clip, caption


def sample_script(
    category: str, spec: CorpusSpec, rng: np.random.Generator
) -> EventScript:
    """Draw a valid script; resamples until gap and frame constraints hold.

    Onset times sit on the video-frame grid (1/fps), so a visual event
    marker pins its audio onset exactly; at the default 8 fps / 40 Hz the
    grid also aligns onsets to latent-frame boundaries.
    """
    grid = 1.0 / spec.fps
    lo = int(np.ceil(0.2 / grid))
    hi = int(np.floor((spec.duration_s - 0.4) / grid))
    for _ in range(1000):
        n_events = int(rng.integers(1, spec.max_events + 1))
        slots = np.sort(rng.choice(np.arange(lo, hi + 1), size=n_events, replace=False))
        times = slots * grid
        if len(times) > 1 and np.diff(times).min() < MIN_EVENT_GAP_S:
            continue
        frames = np.floor(times * spec.fps).astype(int)
        if len(np.unique(frames)) != len(frames):
            continue
        return EventScript(
            category=category,
            event_times=[float(t) for t in times],
            duration_s=spec.duration_s,
        )
    raise RuntimeError("could not draw a valid event script")


def build_corpus(spec: CorpusSpec, out_dir: str | Path) -> Path:
    """Generate a corpus on disk; returns the manifest path.

    Classes are stratified round-robin so counts are exact, every clip is
    reproducible from its recorded synthesis seed, and a deterministic 25%
    subset is flagged high-correspondence for the finetune stage.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(spec.seed)
    records = []
    for i in range(spec.n_clips):
        category = spec.classes[i % len(spec.classes)]
        child = root.spawn(1)[0]
        clip_seed = int(child.generate_state(1)[0])
        rng = np.random.Generator(np.random.PCG64(clip_seed))
        script = sample_script(category, spec, rng)
        wave, clip, caption = synth_clip(script, spec, seed=clip_seed)

        clip_id = f"{spec.source}-{i:04d}"
        wav_rel = f"wav/{clip_id}.wav"
        write_wav(out_dir / wav_rel, wave, encoding="float32")
        feat_rel = None
        if spec.source == "av":
            feat_rel = f"feat/{clip_id}.npy"
            save_features(out_dir / feat_rel, clip.frames)

        records.append(
            ClipRecord(
                clip_id=clip_id,
                wav_path=wav_rel,
                feat_path=feat_rel,
                category=category,
                quality_tag=caption.quality_tag,
                source=spec.source,
                sample_rate=spec.sample_rate,
                duration_s=spec.duration_s,
                event_times=script.event_times,
                fps=spec.fps if spec.source == "av" else None,
                synthesis_seed=clip_seed,
                high_correspondence=(i % 4 == 0),
            )
        )
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(manifest_path, records)
    return manifest_path
