"""Command-line entry point: ``avloc {synth,caption,train,eval,visualize,selftest}``.

Exit codes: 0 success, 2 validation error, 3 runtime failure. Progress and
run reports go to stderr as JSON lines.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import AVLocError, ValidationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

log = logging.getLogger("avloc")


def _emit(**record):
    print(json.dumps(record, sort_keys=True), file=sys.stderr, flush=True)


def _load_clips(cfg):
    from .dataio import generate_synthetic, load_manifest

    if "manifest" in cfg.data:
        path = Path(cfg.data["manifest"])
        if not path.exists():
            raise ValidationError(f"manifest not found: {path}")
        return load_manifest(path)
    spec = cfg.synthetic_spec()
    if spec is None:
        raise ValidationError("config data must name a manifest or a synthetic spec")
    return generate_synthetic(spec)


def _cache_path(cfg):
    return Path(cfg.caption_cache or Path(cfg.out_dir) / "captions.jsonl")


def _make_client(args_fixture, model_name="mllm"):
    from .guidance import FixtureClient, HTTPClient

    return FixtureClient() if args_fixture else HTTPClient(model=model_name)


# --- subcommands ---------------------------------------------------------------

def cmd_synth(args):
    from .dataio import SyntheticSpec, generate_synthetic, write_dataset

    spec = SyntheticSpec(seed=args.seed, n_clips=args.n_clips, duet=args.duet,
                         silent_distractor_prob=args.distractor_prob)
    manifest = write_dataset(generate_synthetic(spec), args.out)
    _emit(event="synth", manifest=str(manifest), n_clips=spec.n_clips)
    return EXIT_OK


def run_captions(clips, client, cache_path, retries=3):
    """Caption every clip through the cache; returns the run report dict."""
    from .guidance import CaptionCache, CaptionFailure, FixtureClient, get_or_generate

    cache = CaptionCache(cache_path)
    before = len(cache)
    flagged = []
    for clip in clips:
        try:
            get_or_generate(clip, client, cache, retries)
        except CaptionFailure as exc:
            flagged.append({"clip_id": exc.clip_id, "reason": exc.reason})
    is_fixture = isinstance(client, FixtureClient)
    return {
        "event": "caption",
        "cache": str(cache_path),
        "n_clips": len(clips),
        "new_entries": len(cache) - before,
        "cached_total": len(cache),
        "flagged": flagged,
        "mllm_calls": 0 if is_fixture else client.calls,
        "fixture_calls": client.calls if is_fixture else 0,
    }


def cmd_caption(args):
    from .guidance import ClientError
    from .train import load_config

    cfg = load_config(args.config)
    clips = _load_clips(cfg)
    client = _make_client(args.fixture, args.model)
    try:
        report = run_captions(clips, client, _cache_path(cfg), args.retries)
    except ClientError as exc:
        _emit(event="caption_aborted", reason=str(exc))
        return EXIT_RUNTIME
    _emit(**report)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "caption_report.json").write_text(json.dumps(report, indent=2))
    return EXIT_OK


def _captions_for(clips, cfg, require_all=True):
    from .guidance import CaptionCache

    cache = CaptionCache(_cache_path(cfg))
    models = {rec_key[2] for rec_key in cache._index}
    kept, caps, missing = [], [], []
    for clip in clips:
        hit = None
        for m in sorted(models):
            hit = cache.get(clip.clip_id, m)
            if hit is not None:
                break
        if hit is None:
            missing.append(clip.clip_id)
        else:
            kept.append(clip)
            caps.append(hit)
    if require_all and missing and not kept:
        raise ValidationError(f"caption cache has no entries for this dataset ({_cache_path(cfg)})")
    return kept, caps, missing


def run_training(cfg, clips=None, captions=None, log_path=None):
    """Train from a config; returns ``(model, history, data)``."""
    from .encoders import HashingTextEncoder
    from .train import prepare, train

    if clips is None:
        clips = _load_clips(cfg)
    if captions is None:
        clips, captions, missing = _captions_for(clips, cfg)
        if missing:
            _emit(event="train_excluded", n=len(missing), clip_ids=missing[:20])
    text = HashingTextEncoder(cfg.encoder.feature_channels, cfg.encoder.seed)
    data = prepare(clips, captions, text, cfg.torch_dtype)
    model, history = train(cfg, data, log_path=log_path)
    return model, history, data


def cmd_train(args):
    from .train import load_config, save_checkpoint

    cfg = load_config(args.config)
    if args.no_oca:
        cfg = replace(cfg, loss=replace(cfg.loss, lambda_1=0.0))
    if args.no_ori:
        cfg = replace(cfg, loss=replace(cfg.loss, lambda_2=0.0))
    if args.max_steps is not None:
        cfg = replace(cfg, max_steps=args.max_steps)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, history, _ = run_training(cfg, log_path=out / "train_log.jsonl")
    ckpt = save_checkpoint(out / "final.pt", model, getattr(model, "last_optimizer", None),
                           len(history), cfg)
    _emit(event="train_done", steps=len(history), checkpoint=str(ckpt),
          final_loss=history[-1].l_total if history else None)
    return EXIT_OK


def cmd_eval(args):
    from .train import evaluate, load_checkpoint, prepare

    model, cfg, _ = load_checkpoint(args.checkpoint)
    if args.config:
        from .train import load_config

        data_cfg = load_config(args.config)
    else:
        data_cfg = cfg
    clips = _load_clips(data_cfg)
    data = prepare(clips, dtype=cfg.torch_dtype)
    report = evaluate(model, data, args.mode, use_components=args.components)
    out = Path(args.out) if args.out else Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"metrics_{args.mode}.json").write_text(report.to_json())
    (out / f"per_sample_{args.mode}.csv").write_text(report.to_csv())
    print(report.to_table())
    return EXIT_OK


def cmd_visualize(args):
    import torch
    from PIL import Image

    from . import avmaps
    from .train import eval_heatmap, load_checkpoint, prepare

    model, cfg, _ = load_checkpoint(args.checkpoint)
    data_cfg = cfg
    if args.config:
        from .train import load_config

        data_cfg = load_config(args.config)
    clips = {c.clip_id: c for c in _load_clips(data_cfg)}
    wanted = args.clip_ids or list(clips)[:1]
    missing = [c for c in wanted if c not in clips]
    found = [clips[c] for c in wanted if c in clips]
    out = Path(args.out)
    written = []
    if found:
        data = prepare(found, dtype=cfg.torch_dtype)
        F_v, l_a = model(data.images, data.spectrograms)
        for j, clip in enumerate(found):
            H, W = clip.image.shape[1:]
            res = avmaps.iterative_identify(F_v[j].detach(), l_a[j].detach(), clip.K)
            maps = res.per_source_maps if clip.K > 1 else avmaps.cosine_map(
                F_v[j:j + 1].detach(), l_a[j:j + 1].detach())
            maps = [eval_heatmap(m) for m in maps]
            heat, side = avmaps.export_heatmaps(out, clip.clip_id, torch.stack(maps), (H, W))
            base = np.transpose(clip.image, (1, 2, 0))
            for k, p in enumerate(heat):
                h = np.asarray(Image.open(p), dtype=np.float32)[..., None] / 255.0
                red = np.zeros_like(base)
                red[..., 0] = 1.0
                overlay = (1 - 0.5 * h) * base + 0.5 * h * red
                op = out / f"{clip.clip_id}_src{k}_overlay.png"
                Image.fromarray(np.round(overlay * 255).astype(np.uint8)).save(op)
                written += [str(p), str(op)]
            written.append(str(side))
    _emit(event="visualize", written=len(written), missing=missing)
    return EXIT_RUNTIME if missing else EXIT_OK


def cmd_selftest(args):
    import pytest

    here = Path(__file__).resolve()
    candidates = [here.parents[2] / "tests", Path.cwd() / "tests"]
    tests = next((p for p in candidates if p.exists()), None)
    if tests is None:
        _emit(event="selftest", error="tests directory not found")
        return EXIT_RUNTIME
    argv = [str(tests), "-q", "-m", "not slow"]
    rc = pytest.main(argv)
    return EXIT_OK if rc == 0 else EXIT_RUNTIME


def build_parser():
    p = argparse.ArgumentParser(prog="avloc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic shapes-and-tones dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-clips", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--duet", action="store_true")
    s.add_argument("--distractor-prob", type=float, default=0.8)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("caption", help="generate and cache guidance captions")
    s.add_argument("--config", required=True)
    s.add_argument("--fixture", action="store_true", help="derive captions from ground truth")
    s.add_argument("--model", default="mllm", help="model name recorded in the cache")
    s.add_argument("--retries", type=int, default=3)
    s.set_defaults(func=cmd_caption)

    s = sub.add_parser("train", help="train encoders with the OCA and ORI losses")
    s.add_argument("--config", required=True)
    s.add_argument("--no-oca", action="store_true", help="ablation: lambda_1 = 0")
    s.add_argument("--no-ori", action="store_true", help="ablation: lambda_2 = 0")
    s.add_argument("--max-steps", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="compute localization metrics")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config", help="dataset config (defaults to the checkpoint's)")
    s.add_argument("--mode", choices=["single", "multi"], default="single")
    s.add_argument("--components", action="store_true",
                   help="multi mode: use per-source audio components when available")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("visualize", help="export heatmaps, overlays and sidecars")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("clip_ids", nargs="*")
    s.set_defaults(func=cmd_visualize)

    s = sub.add_parser("selftest", help="run the oracle test suites")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ValidationError as exc:
        _emit(event="error", kind="validation", message=str(exc))
        return EXIT_VALIDATION
    except (AVLocError, OSError, RuntimeError) as exc:
        _emit(event="error", kind="runtime", message=str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
