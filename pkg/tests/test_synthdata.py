import json

import numpy as np
import pytest

from foleylab.data import read_manifest
from foleylab.evalsuite import detect_onsets
from foleylab.synthdata import (
    CorpusSpec,
    EventScript,
    build_corpus,
    sample_script,
    synth_clip,
)


def test_event_script_validation():
    EventScript("tone-a", [1.0, 4.0], 8.0)
    with pytest.raises(ValueError):
        EventScript("tone-a", [], 8.0)  # zero events disallowed
    with pytest.raises(ValueError):
        EventScript("tone-a", [4.0, 1.0], 8.0)  # unsorted
    with pytest.raises(ValueError):
        EventScript("tone-a", [1.0, 1.1], 8.0)  # gap below minimum
    with pytest.raises(ValueError):
        EventScript("tone-a", [1.0, 8.0], 8.0)  # at duration


def test_video_indicator_frames(tiny_av_spec):
    script = EventScript("tone-a", [1.0, 4.0], 8.0)
    _, clip, _ = synth_clip(script, tiny_av_spec, seed=0)
    indicator = clip.frames[:, 0]
    assert indicator[8] == 1.0 and indicator[32] == 1.0
    assert indicator[7] == 0.5 and indicator[9] == 0.5
    background = np.delete(np.arange(64), [7, 8, 9, 31, 32, 33])
    assert np.all(indicator[background] == 0.0)


def test_event_rows_differ_from_background(tiny_av_spec):
    script = EventScript("click", [4.0], 8.0)
    _, clip, _ = synth_clip(script, tiny_av_spec, seed=0)
    event_frame = 32
    bg = clip.frames[10]
    for row in (event_frame - 1, event_frame, event_frame + 1):
        assert np.linalg.norm(clip.frames[row] - bg) > 0


def test_band_limit_energy(tiny_av_spec):
    script = EventScript("click", [1.0, 3.0, 5.0], 8.0)
    wave, _, _ = synth_clip(script, tiny_av_spec, seed=1)
    spec = np.abs(np.fft.rfft(wave.samples)) ** 2
    freqs = np.fft.rfftfreq(len(wave.samples), 1.0 / wave.sample_rate)
    above = spec[freqs > tiny_av_spec.band_limit_hz].sum()
    assert above <= 0.01 * spec.sum()


def test_sfx_clip_keeps_high_band():
    spec = CorpusSpec.sfx(1, sample_rate=8000)
    script = EventScript("click", [1.0, 3.0], 8.0)
    wave, _, _ = synth_clip(script, spec, seed=1)
    power = np.abs(np.fft.rfft(wave.samples)) ** 2
    freqs = np.fft.rfftfreq(len(wave.samples), 1.0 / 8000)
    assert power[freqs > 8000 / 3].sum() > 0.05 * power.sum()


def test_synth_clip_deterministic(tiny_av_spec):
    script = EventScript("tone-b", [2.0, 5.0], 8.0)
    w1, c1, _ = synth_clip(script, tiny_av_spec, seed=9)
    w2, c2, _ = synth_clip(script, tiny_av_spec, seed=9)
    assert np.array_equal(w1.samples, w2.samples)
    assert np.array_equal(c1.frames, c2.frames)


def test_caption_carries_corpus_tag(tiny_av_spec):
    script = EventScript("tone-a", [1.0], 8.0)
    _, _, cap = synth_clip(script, tiny_av_spec, seed=0)
    assert cap.render() == "tone-a, low quality"
    _, _, cap = synth_clip(script, CorpusSpec.sfx(1, sample_rate=8000), seed=0)
    assert cap.render() == "tone-a, high quality"


def test_sample_script_constraints(tiny_av_spec):
    rng = np.random.Generator(np.random.PCG64(0))
    for _ in range(50):
        s = sample_script("chirp", tiny_av_spec, rng)
        assert 1 <= len(s.event_times) <= 8
        frames = [int(np.floor(t * tiny_av_spec.fps)) for t in s.event_times]
        assert len(set(frames)) == len(frames)
        if len(s.event_times) > 1:
            assert min(np.diff(s.event_times)) >= 0.25


def test_build_corpus_deterministic_and_stratified(tmp_path):
    spec = CorpusSpec.av(16, sample_rate=8000, seed=3)
    m1 = build_corpus(spec, tmp_path / "a")
    m2 = build_corpus(spec, tmp_path / "b")
    assert m1.read_bytes() == m2.read_bytes()
    records = read_manifest(m1)
    assert len(records) == 16
    counts = {}
    for r in records:
        counts[r.category] = counts.get(r.category, 0) + 1
    assert all(v == 4 for v in counts.values())
    assert sum(r.high_correspondence for r in records) == 4
    assert all(r.duration_s == 8.0 for r in records)
    assert all((tmp_path / "a" / r.wav_path).exists() for r in records)
    assert all((tmp_path / "a" / r.feat_path).exists() for r in records)


def test_manifest_is_json_lines(tmp_path):
    spec = CorpusSpec.sfx(4, sample_rate=8000, seed=0)
    path = build_corpus(spec, tmp_path)
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        assert rec["source"] == "sfx"
        assert rec["feat_path"] is None
        assert rec["quality_tag"] == "high"


def test_audio_video_onset_consistency(tiny_clips):
    """Detected onsets on clean audio match script times within one latent frame."""
    for script, wave, _, _ in tiny_clips:
        detected = detect_onsets(wave)
        assert len(detected) == len(script.event_times)
        for d, t in zip(detected, script.event_times):
            assert abs(d - t) <= 1.0 / 40


def test_class_separability_linear_oracle(tiny_av_spec):
    from sklearn.linear_model import LogisticRegression

    rng = np.random.Generator(np.random.PCG64(2))
    feats, labels = [], []
    for i in range(40):
        cat = tiny_av_spec.classes[i % 4]
        script = sample_script(cat, tiny_av_spec, rng)
        wave, _, _ = synth_clip(script, tiny_av_spec, seed=700 + i)
        mag = np.abs(np.fft.rfft(wave.samples)) ** 2
        edges = np.linspace(0, len(mag) - 1, 33).astype(int)
        feats.append(np.log(np.add.reduceat(mag, edges[:-1]) + 1e-12))
        labels.append(cat)
    clf = LogisticRegression(max_iter=2000).fit(feats[:32], labels[:32])
    assert clf.score(feats[32:], labels[32:]) >= 0.99
