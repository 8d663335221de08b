import json

import pytest

from avloc import cli
from avloc.guidance import CaptionCache

TINY = {"feature_channels": 8, "width": 8}


def write_config(tmp_path, **overrides):
    cfg = {
        "data": {"synthetic": {"n_clips": 6, "seed": 2}},
        "encoder": TINY,
        "max_steps": 2,
        "batch_size": 3,
        "out_dir": str(tmp_path / "run"),
    }
    cfg.update(overrides)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def stderr_events(capsys):
    return [json.loads(x) for x in capsys.readouterr().err.splitlines() if x.startswith("{")]


def test_caption_fixture_is_idempotent(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert cli.main(["caption", "--config", str(cfg), "--fixture"]) == 0
    first = stderr_events(capsys)[-1]
    assert first["mllm_calls"] == 0 and first["new_entries"] == 6 and not first["flagged"]
    cache = tmp_path / "run" / "captions.jsonl"
    lines = cache.read_text().splitlines()
    assert cli.main(["caption", "--config", str(cfg), "--fixture"]) == 0
    second = stderr_events(capsys)[-1]
    assert second["new_entries"] == 0 and second["fixture_calls"] == 0
    assert cache.read_text().splitlines() == lines


def test_caption_without_endpoint_is_validation_error(tmp_path, monkeypatch):
    monkeypatch.delenv("AVLOC_MLLM_ENDPOINT", raising=False)
    assert cli.main(["caption", "--config", str(write_config(tmp_path))]) == 2


def test_caption_unreachable_endpoint_is_runtime_error(tmp_path, monkeypatch):
    monkeypatch.setenv("AVLOC_MLLM_ENDPOINT", "http://127.0.0.1:9/")
    cfg = write_config(tmp_path)
    # connection failures are retried then flagged per clip, not fatal
    assert cli.main(["caption", "--config", str(cfg), "--retries", "1"]) == 0
    report = json.loads((tmp_path / "run" / "caption_report.json").read_text())
    assert len(report["flagged"]) == 6


def test_train_eval_visualize_pipeline(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert cli.main(["caption", "--config", str(cfg), "--fixture"]) == 0
    assert cli.main(["train", "--config", str(cfg)]) == 0
    run = tmp_path / "run"
    log = [json.loads(x) for x in (run / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [1, 2]
    ckpt = run / "final.pt"
    assert ckpt.exists()

    assert cli.main(["eval", "--checkpoint", str(ckpt)]) == 0
    metrics = json.loads((run / "metrics_single.json").read_text())
    assert metrics["n_samples"] == 6
    assert (run / "per_sample_single.csv").exists()

    out = tmp_path / "vis"
    capsys.readouterr()
    assert cli.main(["visualize", "--checkpoint", str(ckpt), "--out", str(out), "syn2_00000"]) == 0
    assert (out / "syn2_00000_src0.png").exists()
    assert (out / "syn2_00000_src0_overlay.png").exists()
    assert json.loads((out / "syn2_00000.json").read_text())["K"] == 1
    assert cli.main(["visualize", "--checkpoint", str(ckpt), "--out", str(out), "nope"]) == 3


def test_train_ablation_flags(tmp_path):
    cfg = write_config(tmp_path)
    cli.main(["caption", "--config", str(cfg), "--fixture"])
    assert cli.main(["train", "--config", str(cfg), "--no-ori", "--max-steps", "1"]) == 0
    rec = json.loads((tmp_path / "run" / "train_log.jsonl").read_text().splitlines()[0])
    assert rec["l_ori"] == 0.0


def test_train_without_captions_fails_validation(tmp_path):
    assert cli.main(["train", "--config", str(write_config(tmp_path))]) == 2


def test_multi_eval_on_duets(tmp_path):
    cfg = write_config(tmp_path, data={"synthetic": {"n_clips": 4, "seed": 3, "duet": True}})
    assert cli.main(["caption", "--config", str(cfg), "--fixture"]) == 0
    entries = CaptionCache(tmp_path / "run" / "captions.jsonl")
    assert all(e["foreground"] and len(e["foreground"]) == 2 for e in entries._index.values())
    assert cli.main(["train", "--config", str(cfg), "--max-steps", "1"]) == 0
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "run" / "final.pt"), "--mode", "multi"]) == 0
    metrics = json.loads((tmp_path / "run" / "metrics_multi.json").read_text())
    assert metrics["mode"] == "multi" and "cap" in metrics


def test_synth_writes_manifest(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path / "ds"), "--n-clips", "3"]) == 0
    manifest = tmp_path / "ds" / "manifest.jsonl"
    assert len(manifest.read_text().splitlines()) == 3
    cfg = write_config(tmp_path, data={"manifest": str(manifest)})
    assert cli.main(["caption", "--config", str(cfg), "--fixture"]) == 0


def test_missing_manifest_and_bad_config(tmp_path):
    cfg = write_config(tmp_path, data={"manifest": str(tmp_path / "missing.jsonl")})
    assert cli.main(["caption", "--config", str(cfg), "--fixture"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": True}))
    assert cli.main(["train", "--config", str(bad)]) == 2


def test_parser_requires_subcommand():
    with pytest.raises(SystemExit):
        cli.main([])
