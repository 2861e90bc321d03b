import numpy as np
import pytest

from foleylab.synthdata import CorpusSpec, sample_script, synth_clip


@pytest.fixture(scope="session")
def tiny_av_spec():
    return CorpusSpec.av(8, sample_rate=8000)


@pytest.fixture(scope="session")
def tiny_clips(tiny_av_spec):
    """A few rendered AV clips: list of (script, waveform, video, caption)."""
    rng = np.random.Generator(np.random.PCG64(11))
    out = []
    for i in range(8):
        cat = tiny_av_spec.classes[i % 4]
        script = sample_script(cat, tiny_av_spec, rng)
        wave, clip, caption = synth_clip(script, tiny_av_spec, seed=50 + i)
        out.append((script, wave, clip, caption))
    return out
