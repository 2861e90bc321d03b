"""Command-line surface: corpus synthesis, codec and diffusion training,
generation under the guidance modes, guidance-scale sweeps, and evaluation.

Every command reads a YAML or JSON config file (section per command, with
flag overrides for common knobs), validates it strictly (unknown keys are
rejected), and funnels all randomness through one named seed. Relative
paths resolve against FOLEYLAB_DATA_ROOT when set, else against the
config file's directory. Exit codes: 0 ok, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .audio import Waveform, read_wav, write_wav
from .codec import Codec, CodecConfig, train_codec
from .data import load_features, read_manifest
from .denoiser import DenoiserConfig
from .diffusion import ConditionBundle, GuidanceSpec, NoiseSchedule, sample_many
from .encoders import Caption, HashTextEncoder, VideoFeatures, align_video_features
from .evalsuite import SpectrumClassifier, evaluate_set
from .synthdata import CorpusSpec, build_corpus
from .training import MaskPolicy, MixPolicy, OptimSpec, load_denoiser, train


class ConfigError(Exception):
    pass


def _load_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    cfg = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a mapping")
    return cfg


def _check_keys(section: str, d: dict, allowed: set[str], required: set[str] = frozenset()):
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    missing = required - set(d)
    if missing:
        raise ConfigError(f"missing keys in '{section}': {sorted(missing)}")


def _data_root(config_path: str) -> Path:
    env = os.environ.get("FOLEYLAB_DATA_ROOT")
    return Path(env) if env else Path(config_path).resolve().parent


def _resolve(root: Path, p: str | None) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else root / p


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ------------------------------------------------------------- synth-corpus

_CORPUS_KEYS = {
    "n_clips", "classes", "sample_rate", "band_limit_hz", "seed", "duration_s",
    "fps", "video_dim", "source", "quality_tag", "max_events", "out",
}


def cmd_synth_corpus(args) -> int:
    cfg = _load_config(args.config)
    root = _data_root(args.config)
    section = cfg.get("corpus")
    if not isinstance(section, dict):
        raise ConfigError("config needs a 'corpus' section")
    for name, sub in section.items():
        _check_keys(f"corpus.{name}", sub, _CORPUS_KEYS, {"n_clips", "out"})
        sub = dict(sub)
        out = _resolve(root, sub.pop("out"))
        if args.seed is not None:
            sub["seed"] = args.seed
        if "classes" in sub:
            sub["classes"] = tuple(sub["classes"])
        source = sub.pop("source", "av")
        spec = CorpusSpec.av(**sub) if source == "av" else CorpusSpec.sfx(**sub)
        manifest = build_corpus(spec, out)
        print(f"{name}: wrote {spec.n_clips} clips, manifest {manifest}")
    return 0


# --------------------------------------------------------------- train-codec

_CODEC_KEYS = {
    "sample_rate", "latent_rate", "latent_dim", "strides", "channels",
    "stem_channels", "kl_weight", "steps", "batch_size", "lr", "crop_s",
    "waveform_weight", "manifests", "out", "seed",
}


def cmd_train_codec(args) -> int:
    cfg = _load_config(args.config)
    root = _data_root(args.config)
    section = cfg.get("codec")
    if not isinstance(section, dict):
        raise ConfigError("config needs a 'codec' section")
    _check_keys("codec", section, _CODEC_KEYS, {"manifests", "out"})
    section = dict(section)
    manifests = [_resolve(root, m) for m in section.pop("manifests")]
    out = _resolve(root, args.out or section.pop("out"))
    section.pop("out", None)
    seed = args.seed if args.seed is not None else section.pop("seed", 0)
    section.pop("seed", None)
    steps = args.steps or section.pop("steps", 6000)
    section.pop("steps", None)
    train_kw = {
        k: section.pop(k)
        for k in ("batch_size", "lr", "crop_s", "waveform_weight")
        if k in section
    }
    if "strides" in section:
        section["strides"] = tuple(section["strides"])
    if "channels" in section:
        section["channels"] = tuple(section["channels"])

    corpus, events = [], []
    for m in manifests:
        for rec in read_manifest(m):
            corpus.append(read_wav(m.parent / rec.wav_path))
            events.append(rec.event_times)
    codec_cfg = (
        CodecConfig(**section)
        if "strides" in section
        else CodecConfig.for_rates(**section)
    )
    codec, trace = train_codec(
        corpus, codec_cfg, steps=steps, seed=seed, event_times=events, **train_kw
    )
    codec.save(out)
    print(f"codec saved to {out}; final loss {trace[-1]['loss']:.4f}")
    return 0


# --------------------------------------------------------------------- train

_TRAIN_KEYS = {
    "av_manifest", "sfx_manifest", "codec_checkpoint", "out_dir", "steps",
    "batch_size", "lr", "warmup_steps", "total_steps", "finetune_steps",
    "ema_decay", "weight_decay", "denoiser", "mix", "mask", "seed",
    "checkpoint_every", "eval_every", "pretrain_checkpoint",
}
_DENOISER_KEYS = {
    "layers", "hidden_dim", "heads", "ffn_dim", "audio_proj_dim",
    "video_proj_dim", "latent_dim", "text_dim", "video_dim", "max_len",
    "positional_encoding",
}
_MIX_KEYS = {"p_av_dataset", "p_sfx_dataset", "p_av_full", "sfx_probs"}
_MASK_KEYS = {"p_mask", "max_span_s"}


def _train_stage(args, stage: str) -> int:
    cfg = _load_config(args.config)
    root = _data_root(args.config)
    section = cfg.get("train")
    if not isinstance(section, dict):
        raise ConfigError("config needs a 'train' section")
    _check_keys("train", section, _TRAIN_KEYS, {"codec_checkpoint", "out_dir"})
    den = dict(section.get("denoiser", {}))
    _check_keys("train.denoiser", den, _DENOISER_KEYS)
    mix = dict(section.get("mix", {}))
    _check_keys("train.mix", mix, _MIX_KEYS)
    maskp = dict(section.get("mask", {}))
    _check_keys("train.mask", maskp, _MASK_KEYS)

    codec = Codec.load(_resolve(root, args.checkpoint or section["codec_checkpoint"]))
    optim_kw = {
        k: section[k]
        for k in ("lr", "warmup_steps", "total_steps", "finetune_steps",
                  "ema_decay", "weight_decay", "batch_size")
        if k in section
    }
    out_dir = _resolve(root, args.out or section["out_dir"])
    seed = args.seed if args.seed is not None else section.get("seed", 0)
    pre = section.get("pretrain_checkpoint")
    if stage == "finetune" and pre is None:
        raise ConfigError("finetune needs train.pretrain_checkpoint")

    final = train(
        stage=stage,
        av_manifest=_resolve(root, section.get("av_manifest")),
        sfx_manifest=_resolve(root, section.get("sfx_manifest")),
        codec=codec,
        out_dir=out_dir,
        denoiser_cfg=DenoiserConfig(**den) if den else None,
        mix=MixPolicy(**mix) if mix else None,
        mask_policy=MaskPolicy(**maskp) if maskp else None,
        optim=OptimSpec(**optim_kw) if optim_kw else None,
        seed=seed,
        steps=args.steps or section.get("steps"),
        pretrain_checkpoint=_resolve(root, pre),
        checkpoint_every=section.get("checkpoint_every"),
        eval_every=section.get("eval_every", 500),
    )
    print(f"{stage} finished; checkpoint {final}")
    return 0


def cmd_train(args) -> int:
    return _train_stage(args, "pretrain")


def cmd_finetune(args) -> int:
    return _train_stage(args, "finetune")


# ------------------------------------------------------------------ generate

_GENERATE_KEYS = {
    "checkpoint", "codec_checkpoint", "out_dir", "mode", "gamma", "steps",
    "seed", "use_ema", "requests", "manifest", "use_null_negative",
}
_REQUEST_KEYS = {
    "id", "caption", "tag", "neg_caption", "neg_tag", "gamma", "seed",
    "video_features", "fps", "condition_wav", "condition_seconds",
    "num_frames", "clip_id",
}

MODE_MAP = {
    "v2a": "text_negative",
    "text": "text_negative",
    "extend": "extension",
    "quality": "quality",
}


def _build_requests(section: dict, root: Path, manifest_records) -> list[dict]:
    requests = []
    for i, req in enumerate(section.get("requests", [])):
        _check_keys(f"generate.requests[{i}]", req, _REQUEST_KEYS)
        req = dict(req)
        if "clip_id" in req and manifest_records is not None:
            rec = next(
                (r for r in manifest_records if r.clip_id == req["clip_id"]), None
            )
            if rec is None:
                raise ConfigError(f"clip_id {req['clip_id']} not in manifest")
            req.setdefault("caption", rec.category)
            req.setdefault("tag", rec.quality_tag)
            req.setdefault("fps", rec.fps)
            if rec.feat_path is not None:
                req.setdefault("video_features", str(root / rec.feat_path))
            req.setdefault("id", rec.clip_id)
            req["_record"] = rec
        req.setdefault("id", f"gen-{i:04d}")
        requests.append(req)
    if not requests:
        raise ConfigError("generate needs at least one request")
    return requests


def _request_to_sample(req, mode, section, codec, denoiser_cfg, root, args):
    gamma = req.get("gamma", args.gamma if args.gamma is not None else section.get("gamma", 3.0))
    pos = None
    if req.get("caption") or req.get("tag"):
        pos = Caption(body=req.get("caption", ""), quality_tag=req.get("tag", "none"))
    neg = None
    if req.get("neg_caption") or req.get("neg_tag"):
        neg = Caption(body=req.get("neg_caption", ""), quality_tag=req.get("neg_tag", "none"))
    spec = GuidanceSpec(
        mode=mode, gamma=float(gamma), pos_caption=pos, neg_caption=neg,
        use_null_negative=bool(section.get("use_null_negative", False)),
    )

    latent_rate = codec.cfg.latent_rate
    video = None
    num_frames = req.get("num_frames")
    if req.get("video_features"):
        feats = load_features(_resolve(root, req["video_features"]))
        fps = req.get("fps", 8)
        if latent_rate % fps != 0:
            raise ConfigError(f"fps {fps} does not divide latent rate {latent_rate}")
        target = feats.shape[0] * (latent_rate // fps)
        video = align_video_features(VideoFeatures(feats=feats, fps=fps), target)
        num_frames = target
    if num_frames is None:
        raise ConfigError(f"request {req['id']} needs video_features or num_frames")

    cond_latents = cond_mask = None
    if mode == "extension":
        if not req.get("condition_wav"):
            raise ConfigError(f"extension request {req['id']} needs condition_wav")
        cond_wave = read_wav(_resolve(root, req["condition_wav"]))
        cond_s = float(req.get("condition_seconds", cond_wave.duration_s))
        n_cond = int(round(cond_s * latent_rate))
        n_samp = int(round(cond_s * codec.cfg.sample_rate))
        gen = torch.Generator().manual_seed(int(req.get("seed", 0)))
        z_c = codec.encode(
            Waveform(cond_wave.samples[:n_samp], cond_wave.sample_rate), generator=gen
        )
        cond_latents = type(z_c)(frames=z_c.frames[:n_cond], latent_rate=latent_rate)
        cond_mask = np.zeros(num_frames, dtype=bool)
        cond_mask[:n_cond] = True

    bundle = ConditionBundle(
        text=None, video=video, cond_latents=cond_latents, cond_mask=cond_mask
    )
    return spec, bundle, int(req.get("seed", section.get("seed", 0))), num_frames


def _run_generation(section, root, args, out_dir: Path) -> list[dict]:
    ckpt_path = _resolve(root, args.checkpoint or section.get("checkpoint"))
    codec_path = _resolve(root, section.get("codec_checkpoint"))
    for p, what in ((ckpt_path, "denoiser checkpoint"), (codec_path, "codec checkpoint")):
        if p is None or not Path(p).exists():
            raise FileNotFoundError(f"missing {what}: {p}")
    denoiser, blob = load_denoiser(ckpt_path, use_ema=section.get("use_ema", True))
    codec = Codec.load(codec_path)
    sched = NoiseSchedule.cosine(blob["schedule"]["num_steps"])
    text_encoder = HashTextEncoder(dim=denoiser.cfg.text_dim)

    mode_name = args.mode or section.get("mode", "v2a")
    if mode_name not in MODE_MAP:
        raise ConfigError(f"invalid mode {mode_name!r}; choose from {sorted(MODE_MAP)}")
    mode = MODE_MAP[mode_name]
    steps = int(args.steps or section.get("steps", 100))

    manifest_records = None
    manifest_dir = root
    if section.get("manifest"):
        manifest_path = _resolve(root, section["manifest"])
        manifest_records = read_manifest(manifest_path)
        manifest_dir = manifest_path.parent
    requests = _build_requests(section, manifest_dir, manifest_records)

    specs, bundles, seeds, frames = [], [], [], []
    for req in requests:
        spec, bundle, seed, num_frames = _request_to_sample(
            req, mode, section, codec, denoiser.cfg, root, args
        )
        specs.append(spec)
        bundles.append(bundle)
        seeds.append(seed)
        frames.append(num_frames)
    if len(set(frames)) != 1:
        raise ConfigError("all requests in one run must share num_frames")

    latents = sample_many(
        specs, bundles, denoiser, sched, steps=steps, seeds=seeds,
        text_encoder=text_encoder, latent_rate=codec.cfg.latent_rate,
        num_frames=frames[0],
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for req, z, spec, seed in zip(requests, latents, specs, seeds):
        wav = codec.decode(z)
        wav_path = out_dir / f"{req['id']}.wav"
        write_wav(wav_path, wav)
        np.save(out_dir / f"{req['id']}.latents.npy", z.frames)
        pos, neg = spec.resolved_captions()
        results.append(
            {
                "id": req["id"],
                "output": str(wav_path),
                "mode": mode_name,
                "gamma": spec.gamma,
                "steps": steps,
                "seed": seed,
                "caption": pos.render() if pos else None,
                "neg_caption": neg.render() if neg else None,
            }
        )
    provenance = {
        "checkpoint_sha256": _sha256(Path(ckpt_path)),
        "codec_sha256": _sha256(Path(codec_path)),
        "requests": results,
    }
    with open(out_dir / "provenance.json", "w") as f:
        json.dump(provenance, f, indent=2, sort_keys=True)
    return results


def cmd_generate(args) -> int:
    cfg = _load_config(args.config)
    root = _data_root(args.config)
    section = cfg.get("generate")
    if not isinstance(section, dict):
        raise ConfigError("config needs a 'generate' section")
    _check_keys("generate", section, _GENERATE_KEYS)
    out_dir = _resolve(root, args.out or section.get("out_dir", "generated"))
    results = _run_generation(section, root, args, out_dir)
    print(f"wrote {len(results)} clips to {out_dir}")
    return 0


# ---------------------------------------------------------------------- eval

_EVAL_KEYS = {"manifest", "generated_dir", "out", "seed", "classifier_manifests"}


def _train_eval_classifier(manifest_paths: list[Path], seed: int) -> SpectrumClassifier:
    waves, labels, classes = [], [], []
    for mp in manifest_paths:
        for rec in read_manifest(mp):
            waves.append(read_wav(mp.parent / rec.wav_path))
            labels.append(rec.category)
            if rec.category not in classes:
                classes.append(rec.category)
    clf = SpectrumClassifier(classes=sorted(classes), seed=seed)
    acc = clf.fit(waves, labels, seed=seed)
    if acc < 0.99:
        raise RuntimeError(f"eval classifier accuracy {acc:.3f} below 0.99")
    return clf


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    root = _data_root(args.config)
    section = cfg.get("eval")
    if not isinstance(section, dict):
        raise ConfigError("config needs an 'eval' section")
    _check_keys("eval", section, _EVAL_KEYS, {"manifest", "generated_dir"})
    manifest = _resolve(root, section["manifest"])
    gen_dir = _resolve(root, section["generated_dir"])
    records = read_manifest(manifest)
    seed = args.seed if args.seed is not None else section.get("seed", 0)

    missing = [
        str(gen_dir / f"{r.clip_id}.wav")
        for r in records
        if not (gen_dir / f"{r.clip_id}.wav").exists()
    ]
    if missing:
        print("missing generated files:", file=sys.stderr)
        for m in missing:
            print(f"  {m}", file=sys.stderr)
        return 1

    clf_manifests = [
        _resolve(root, m) for m in section.get("classifier_manifests", [section["manifest"]])
    ]
    classifier = _train_eval_classifier(clf_manifests, seed)
    generated = [read_wav(gen_dir / f"{r.clip_id}.wav") for r in records]
    reference = [read_wav(manifest.parent / r.wav_path) for r in records]
    report = evaluate_set(
        classifier, generated,
        [r.category for r in records], [r.event_times for r in records],
        reference=reference,
    )
    out = _resolve(root, args.out or section.get("out", gen_dir / "report"))
    Path(str(out) + ".json").write_text(json.dumps(report.as_dict(), indent=2))
    Path(str(out) + ".txt").write_text(report.table() + "\n")
    print(report.table())
    return 0


# --------------------------------------------------------------------- sweep

_SWEEP_KEYS = {"gammas", "out_dir"} | (_GENERATE_KEYS - {"gamma", "out_dir"}) | {"eval_manifest"}


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    root = _data_root(args.config)
    section = cfg.get("sweep")
    if not isinstance(section, dict):
        raise ConfigError("config needs a 'sweep' section")
    _check_keys("sweep", section, _SWEEP_KEYS)
    gammas = args.gamma_list or section.get("gammas")
    if not gammas:
        raise ConfigError("sweep needs a non-empty gamma list")
    gammas = [float(g) for g in gammas]
    if any(g < 0 for g in gammas):
        raise ConfigError("gamma values must be >= 0")

    out_root = _resolve(root, args.out or section.get("out_dir", "sweep"))
    eval_manifest = _resolve(root, section.get("eval_manifest") or section.get("manifest"))
    records = read_manifest(eval_manifest)
    classifier = _train_eval_classifier([eval_manifest], section.get("seed", 0))
    reference = [read_wav(eval_manifest.parent / r.wav_path) for r in records]

    rows, failed = [], False
    for gamma in gammas:
        try:
            sub = dict(section)
            sub.pop("gammas", None)
            sub.pop("eval_manifest", None)
            sub["gamma"] = gamma
            out_dir = out_root / f"gamma_{gamma:g}"
            results = _run_generation(sub, root, args, out_dir)
            by_id = {r.clip_id: r for r in records}
            gen, cats, events = [], [], []
            for res in results:
                rec = by_id.get(res["id"])
                if rec is None:
                    continue
                gen.append(read_wav(res["output"]))
                cats.append(rec.category)
                events.append(rec.event_times)
            report = evaluate_set(classifier, gen, cats, events, reference=reference)
            rows.append(
                {
                    "gamma": gamma,
                    "sync_offset_s": report.sync_mean_abs_offset,
                    "onset_f1": report.onset_f1,
                    "class_accuracy": report.class_accuracy,
                    "rolloff_hz": report.rolloff_mean_hz,
                    "frechet_distance": report.frechet_distance,
                    "kld": report.kld,
                }
            )
        except Exception as exc:  # keep sweeping, report per-row failure
            failed = True
            rows.append({"gamma": gamma, "error": f"{type(exc).__name__}: {exc}"})

    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "table.json").write_text(json.dumps(rows, indent=2))
    header = ["gamma", "sync_offset_s", "onset_f1", "class_accuracy", "rolloff_hz", "frechet_distance", "kld"]
    lines = ["  ".join(f"{h:>16}" for h in header)]
    for row in rows:
        if "error" in row:
            lines.append(f"{row['gamma']:>16g}  ERROR {row['error']}")
        else:
            lines.append("  ".join(f"{row[h]:>16.4f}" for h in header))
    (out_root / "table.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 1 if failed else 0


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foleylab")
    sub = parser.add_subparsers(dest="command", required=True)
    common = {
        "--config": dict(required=True, help="YAML/JSON config file"),
        "--seed": dict(type=int, default=None),
        "--out": dict(default=None),
        "--checkpoint": dict(default=None),
        "--steps": dict(type=int, default=None),
    }

    def add(name, fn, extra=()):
        p = sub.add_parser(name)
        for flag, kw in common.items():
            p.add_argument(flag, **kw)
        for flag, kw in extra:
            p.add_argument(flag, **kw)
        p.set_defaults(fn=fn)
        return p

    add("synth-corpus", cmd_synth_corpus)
    add("train-codec", cmd_train_codec)
    add("train", cmd_train)
    add("finetune", cmd_finetune)
    add(
        "generate", cmd_generate,
        extra=(
            ("--gamma", dict(type=float, default=None)),
            ("--mode", dict(default=None)),
        ),
    )
    add(
        "sweep", cmd_sweep,
        extra=(
            ("--gamma", dict(dest="gamma_list", type=float, nargs="+", default=None)),
            ("--mode", dict(default=None)),
        ),
    )
    add("eval", cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "gamma"):
        args.gamma = None
    if not hasattr(args, "mode"):
        args.mode = None
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
