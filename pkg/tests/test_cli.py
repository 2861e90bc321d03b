import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from foleylab.cli import main
from foleylab.codec import Codec, CodecConfig, train_codec
from foleylab.audio import read_wav
from foleylab.data import read_manifest
from foleylab.denoiser import DenoiserConfig
from foleylab.synthdata import CorpusSpec, build_corpus
from foleylab.training import OptimSpec, train

TINY_DEN = dict(
    layers=1, hidden_dim=32, heads=2, ffn_dim=48,
    audio_proj_dim=16, video_proj_dim=16,
    latent_dim=16, text_dim=24, video_dim=24, max_len=512,
)


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    """Corpora + tiny trained codec and denoiser + base config paths."""
    root = tmp_path_factory.mktemp("cli")
    av_manifest = build_corpus(
        CorpusSpec.av(8, sample_rate=8000, seed=1, video_dim=24, duration_s=4.0),
        root / "av",
    )
    sfx_manifest = build_corpus(
        CorpusSpec.sfx(8, sample_rate=8000, seed=2, duration_s=4.0), root / "sfx"
    )
    waves = [read_wav(root / "av" / r.wav_path) for r in read_manifest(av_manifest)]
    codec_cfg = CodecConfig.for_rates(
        8000, latent_dim=16, channels=(8, 12, 16, 16), stem_channels=4
    )
    codec, _ = train_codec(waves, codec_cfg, steps=30, seed=0, batch_size=2, crop_s=0.3)
    codec_path = root / "codec.pt"
    codec.save(codec_path)
    ckpt = train(
        stage="pretrain",
        av_manifest=av_manifest,
        sfx_manifest=sfx_manifest,
        codec=codec,
        out_dir=root / "run",
        denoiser_cfg=DenoiserConfig(**TINY_DEN),
        optim=OptimSpec(lr=1e-3, warmup_steps=1, total_steps=3, batch_size=2),
        seed=0,
        steps=3,
    )
    return {
        "root": root,
        "av_manifest": av_manifest,
        "sfx_manifest": sfx_manifest,
        "codec": codec_path,
        "checkpoint": ckpt,
    }


def _write_config(path: Path, payload: dict) -> str:
    path.write_text(yaml.safe_dump(payload))
    return str(path)


def test_synth_corpus_command(tmp_path):
    cfg = _write_config(
        tmp_path / "c.yaml",
        {
            "corpus": {
                "av": {
                    "n_clips": 4, "sample_rate": 8000, "video_dim": 8,
                    "duration_s": 4.0, "seed": 5, "out": "data/av",
                }
            }
        },
    )
    assert main(["synth-corpus", "--config", cfg]) == 0
    records = read_manifest(tmp_path / "data/av/manifest.jsonl")
    assert len(records) == 4


def test_synth_corpus_rejects_unknown_key(tmp_path):
    cfg = _write_config(
        tmp_path / "c.yaml",
        {"corpus": {"av": {"n_clips": 4, "out": "x", "bogus_key": 1}}},
    )
    assert main(["synth-corpus", "--config", cfg]) == 2


def test_train_codec_command(tmp_path, env):
    cfg = _write_config(
        tmp_path / "c.yaml",
        {
            "codec": {
                "sample_rate": 8000, "latent_dim": 16,
                "channels": [8, 12, 16, 16], "stem_channels": 4,
                "strides": [5, 5, 4, 2],
                "steps": 3, "batch_size": 2, "crop_s": 0.3,
                "manifests": [str(env["av_manifest"])],
                "out": "codec_out.pt",
            }
        },
    )
    assert main(["train-codec", "--config", cfg]) == 0
    assert Codec.load(tmp_path / "codec_out.pt").cfg.latent_dim == 16


def _generate_config(tmp_path, env, name="g.yaml", **overrides):
    records = read_manifest(env["av_manifest"])
    section = {
        "checkpoint": str(env["checkpoint"]),
        "codec_checkpoint": str(env["codec"]),
        "manifest": str(env["av_manifest"]),
        "mode": "v2a",
        "gamma": 2.0,
        "steps": 3,
        "out_dir": str(tmp_path / "gen"),
        "requests": [{"clip_id": r.clip_id, "seed": i} for i, r in enumerate(records[:4])],
    }
    section.update(overrides)
    return _write_config(tmp_path / name, {"generate": section})


def test_generate_writes_wavs_and_provenance(tmp_path, env):
    cfg = _generate_config(tmp_path, env)
    assert main(["generate", "--config", cfg]) == 0
    out = tmp_path / "gen"
    wavs = sorted(out.glob("*.wav"))
    assert len(wavs) == 4
    w = read_wav(wavs[0])
    assert w.sample_rate == 8000
    assert len(w.samples) == 4 * 8000
    prov = json.loads((out / "provenance.json").read_text())
    assert {"checkpoint_sha256", "codec_sha256", "requests"} <= set(prov)
    assert (out / f"{prov['requests'][0]['id']}.latents.npy").exists()


def test_generate_deterministic_bytes(tmp_path, env):
    (tmp_path / "a").mkdir(exist_ok=True)
    (tmp_path / "b").mkdir(exist_ok=True)
    cfg1 = _generate_config(tmp_path / "a", env, out_dir=str(tmp_path / "a/gen"))
    cfg2 = _generate_config(tmp_path / "b", env, out_dir=str(tmp_path / "b/gen"))
    assert main(["generate", "--config", cfg1]) == 0
    assert main(["generate", "--config", cfg2]) == 0
    for wav_a in sorted((tmp_path / "a/gen").glob("*.wav")):
        wav_b = tmp_path / "b/gen" / wav_a.name
        assert wav_a.read_bytes() == wav_b.read_bytes()


def test_generate_extension_mode(tmp_path, env):
    records = read_manifest(env["av_manifest"])
    rec = records[0]
    cfg = _generate_config(
        tmp_path, env, mode="extend",
        requests=[
            {
                "clip_id": rec.clip_id,
                "condition_wav": str(env["av_manifest"].parent / rec.wav_path),
                "condition_seconds": 1.0,
                "seed": 3,
            }
        ],
    )
    assert main(["generate", "--config", cfg]) == 0
    latents = np.load(tmp_path / "gen" / f"{rec.clip_id}.latents.npy")
    assert latents.shape == (160, 16)


def test_generate_invalid_mode_is_usage_error(tmp_path, env):
    cfg = _generate_config(tmp_path, env, mode="nonsense")
    assert main(["generate", "--config", cfg]) == 2


def test_generate_missing_checkpoint_fails(tmp_path, env):
    cfg = _generate_config(tmp_path, env, checkpoint=str(tmp_path / "nope.pt"))
    assert main(["generate", "--config", cfg]) == 1


def test_eval_clean_corpus_against_itself(tmp_path):
    manifest = build_corpus(
        CorpusSpec.av(16, sample_rate=8000, seed=9, video_dim=8, duration_s=4.0),
        tmp_path / "corpus",
    )
    gen_dir = tmp_path / "generated"
    gen_dir.mkdir()
    for rec in read_manifest(manifest):
        data = (tmp_path / "corpus" / rec.wav_path).read_bytes()
        (gen_dir / f"{rec.clip_id}.wav").write_bytes(data)
    cfg = _write_config(
        tmp_path / "e.yaml",
        {"eval": {"manifest": str(manifest), "generated_dir": str(gen_dir), "out": str(tmp_path / "report")}},
    )
    assert main(["eval", "--config", cfg]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["frechet_distance"] <= 1e-6
    assert report["kld"] <= 1e-9
    assert report["onset_f1"] == 1.0
    assert (tmp_path / "report.txt").exists()


def test_eval_missing_wav_listed(tmp_path):
    manifest = build_corpus(
        CorpusSpec.av(4, sample_rate=8000, seed=3, video_dim=8, duration_s=4.0),
        tmp_path / "corpus",
    )
    gen_dir = tmp_path / "generated"
    gen_dir.mkdir()
    cfg = _write_config(
        tmp_path / "e.yaml",
        {"eval": {"manifest": str(manifest), "generated_dir": str(gen_dir)}},
    )
    assert main(["eval", "--config", cfg]) == 1


def test_sweep_runs_and_writes_table(tmp_path, env):
    records = read_manifest(env["av_manifest"])
    cfg = _write_config(
        tmp_path / "s.yaml",
        {
            "sweep": {
                "checkpoint": str(env["checkpoint"]),
                "codec_checkpoint": str(env["codec"]),
                "manifest": str(env["av_manifest"]),
                "mode": "v2a",
                "steps": 3,
                "gammas": [0.0, 3.0],
                "out_dir": str(tmp_path / "sweep"),
                "requests": [{"clip_id": r.clip_id, "seed": i} for i, r in enumerate(records[:4])],
            }
        },
    )
    assert main(["sweep", "--config", cfg]) == 0
    rows = json.loads((tmp_path / "sweep/table.json").read_text())
    assert [r["gamma"] for r in rows] == [0.0, 3.0]
    for row in rows:
        assert "error" not in row
        assert np.isfinite(row["onset_f1"])
        assert np.isfinite(row["rolloff_hz"])
    assert (tmp_path / "sweep/table.txt").exists()


def test_sweep_empty_gammas_is_usage_error(tmp_path, env):
    cfg = _write_config(
        tmp_path / "s.yaml",
        {
            "sweep": {
                "checkpoint": str(env["checkpoint"]),
                "codec_checkpoint": str(env["codec"]),
                "manifest": str(env["av_manifest"]),
                "gammas": [],
                "out_dir": str(tmp_path / "sweep"),
            }
        },
    )
    assert main(["sweep", "--config", cfg]) == 2


def test_missing_config_file_is_usage_error():
    assert main(["generate", "--config", "/nonexistent/x.yaml"]) == 2


def test_config_unknown_section_key_rejected(tmp_path, env):
    cfg = _generate_config(tmp_path, env)
    payload = yaml.safe_load(Path(cfg).read_text())
    payload["generate"]["mystery"] = 1
    cfg2 = _write_config(tmp_path / "bad.yaml", payload)
    assert main(["generate", "--config", cfg2]) == 2
