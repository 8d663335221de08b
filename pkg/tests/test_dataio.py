import numpy as np
import pytest
import torch
from PIL import Image

from avloc import dataio
from avloc.dataio import (
    AVClip,
    SyntheticSpec,
    fixture_captions,
    generate_synthetic,
    load_manifest,
    mix_duet,
    preprocess_audio,
    preprocess_image,
    write_dataset,
)
from avloc.errors import DimensionError, IngestionError, ValidationError

N = 48_000


def tone(freq, n=N):
    return 0.5 * np.sin(2 * np.pi * freq * np.arange(n) / 16_000)


def blank_clip(cid, boxes=(), audio=None):
    return AVClip(cid, np.zeros((3, 224, 224), np.float32),
                  tone(440) if audio is None else audio, ["circle"], list(boxes))


def test_image_resize_shape_and_constant():
    out = preprocess_image(np.full((448, 448, 3), 128, np.uint8))
    assert out.shape == (3, 224, 224)
    torch.testing.assert_close(out, torch.full_like(out, 128 / 255), atol=1e-6, rtol=0)


def test_image_checkerboard_mean_preserved():
    board = (np.indices((2, 2)).sum(0) % 2).astype(np.float64)
    board = np.repeat(board[..., None], 3, axis=2)
    up = preprocess_image(board, size=224).permute(1, 2, 0).numpy().astype(np.float64)
    down = preprocess_image(up, size=2)
    assert abs(down.double().mean().item() - board.mean()) < 1e-6


def test_image_normalization_constants():
    out = preprocess_image(np.full((224, 224, 3), 255, np.uint8), normalize=True)
    expected = (1 - np.array(dataio.IMAGE_MEAN)) / np.array(dataio.IMAGE_STD)
    np.testing.assert_allclose(out[:, 0, 0].numpy(), expected, rtol=1e-6)


def test_normalize_image_batched_and_shape_checked():
    x = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    out = dataio.normalize_image(x)
    torch.testing.assert_close(out[1], dataio.normalize_image(x[1]))
    torch.testing.assert_close(out[0, 2] * dataio.IMAGE_STD[2] + dataio.IMAGE_MEAN[2], x[0, 2])
    with pytest.raises(DimensionError):
        dataio.normalize_image(torch.rand(2, 4, 4, 4))


def test_image_corrupt_file(tmp_path):
    p = tmp_path / "bad.png"
    p.write_bytes(b"not an image")
    with pytest.raises(IngestionError) as info:
        preprocess_image(p, clip_id="clip7")
    assert info.value.clip_id == "clip7"


def test_audio_silence_is_log_floor():
    spec = preprocess_audio(np.zeros(N))
    torch.testing.assert_close(spec, torch.full_like(spec, np.log(1e-5)))


def test_audio_tone_dominant_bin():
    spec = preprocess_audio(tone(440))[0]
    # interior frames: ignore the reflect-padded edges
    bins = spec[:, 5:-5].argmax(dim=0)
    assert torch.all(bins == round(440 / (16_000 / 512)))


def test_audio_fixed_shape_and_loop_pad():
    full = preprocess_audio(tone(660))
    short = preprocess_audio(tone(660, n=16_000))
    assert full.shape == short.shape == (1, 257, 301)


def test_audio_resamples():
    spec = preprocess_audio(0.5 * np.sin(2 * np.pi * 440 * np.arange(3 * 8000) / 8000), sr=8000)
    assert spec.shape == (1, 257, 301)
    assert int(spec[0, :, 150].argmax()) == round(440 / (16_000 / 512))


def test_audio_errors():
    with pytest.raises(ValidationError):
        preprocess_audio(np.array([]))
    with pytest.raises(ValidationError):
        preprocess_audio(np.array([0.0, np.inf]))


def test_duet_shape_boxes_and_labels():
    a = blank_clip("a", [("circle", 0, 0, 20, 20)])
    b = blank_clip("b", [("circle", 10, 10, 50, 50)], tone(660))
    d = mix_duet(a, b)
    assert d.image.shape == (3, 224, 448) and d.K == 2
    assert d.gt_boxes[1] == ("circle", 234, 10, 274, 50)
    assert d.class_labels == ["circle", "circle"]
    assert np.abs(d.audio).max() == pytest.approx(1.0)


def test_duet_with_silence_matches_single():
    a = blank_clip("a")
    silent = blank_clip("s", audio=np.zeros(N))
    d = mix_duet(a, silent)
    ref = (a.audio / np.abs(a.audio).max()).astype(np.float32)
    torch.testing.assert_close(preprocess_audio(d.audio), preprocess_audio(ref), atol=1e-5, rtol=0)


def test_duet_audio_commutative():
    a, b = blank_clip("a", audio=tone(440)), blank_clip("b", audio=tone(990))
    torch.testing.assert_close(preprocess_audio(mix_duet(a, b).audio),
                               preprocess_audio(mix_duet(b, a).audio), atol=1e-6, rtol=0)


def test_duet_rejects_non_single():
    d = mix_duet(blank_clip("a"), blank_clip("b"))
    with pytest.raises(ValidationError):
        mix_duet(d, blank_clip("c"))


def test_clip_validation():
    with pytest.raises(ValidationError):
        AVClip("x", np.zeros((3, 100, 100)), tone(440), ["circle"])
    with pytest.raises(ValidationError):
        blank_clip("x", [("circle", 200, 0, 230, 10)])


def test_synthetic_deterministic():
    spec = SyntheticSpec(seed=9, n_clips=5)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.audio.tobytes() == y.audio.tobytes()
        assert x.gt_boxes == y.gt_boxes


def test_synthetic_no_distractor_single_shape():
    for clip in generate_synthetic(SyntheticSpec(seed=1, n_clips=10, silent_distractor_prob=0)):
        assert len(clip.objects) == 1 and clip.objects[0]["sounding"]
        # background pixels are dim grey; only the shape is bright
        bright = clip.image.max(axis=0) > 0.6
        x0, y0, x1, y1 = clip.gt_boxes[0][1:]
        assert bright[y0:y1, x0:x1].sum() == bright.sum() > 0


def test_synthetic_gt_box_and_audio_class():
    for clip in generate_synthetic(SyntheticSpec(seed=2, n_clips=8)):
        cls, x0, y0, x1, y1 = clip.gt_boxes[0]
        assert clip.class_labels == [cls]
        assert 0 <= x0 < x1 <= 224 and 0 <= y0 < y1 <= 224
        spec = preprocess_audio(clip.audio)[0]
        assert int(spec[:, 150].argmax()) == round(dataio.DEFAULT_TONES[cls] / (16_000 / 512))
        assert np.isfinite(clip.image).all() and np.isfinite(clip.audio).all()


def test_synthetic_duet_boxes_disjoint():
    for clip in generate_synthetic(SyntheticSpec(seed=3, n_clips=6, duet=True)):
        assert len(clip.gt_boxes) == 2 and clip.K == 2
        (_, ax0, _, ax1, _), (_, bx0, _, bx1, _) = clip.gt_boxes
        assert ax1 <= 224 <= bx0
        assert len(clip.components) == 2


def test_synthetic_class_balance():
    clips = generate_synthetic(SyntheticSpec(seed=0, n_clips=600, silent_distractor_prob=0))
    counts = {c: sum(cl.class_labels[0] == c for cl in clips) for c in ("circle", "square", "triangle")}
    # binomial(600, 1/3): sd ~ 11.5; allow 4 sd
    for n in counts.values():
        assert abs(n - 200) < 46


def test_synthetic_spec_validation():
    with pytest.raises(ValidationError):
        SyntheticSpec(tone_map={"circle": 440.0, "square": 440.0, "triangle": 990.0})
    with pytest.raises(ValidationError):
        SyntheticSpec(silent_distractor_prob=1.5)


def test_fixture_captions_from_ground_truth():
    clip = blank_clip("x")
    clip.objects = [{"cls": "circle", "box": [0, 0, 10, 10], "sounding": True},
                    {"cls": "square", "box": [50, 50, 60, 60], "sounding": False}]
    assert fixture_captions(clip) == (["an image of a sounding circle"], "an image of a silent square")
    clip.objects = clip.objects[:1]
    assert fixture_captions(clip)[1] == "an image of an empty background"


def test_manifest_round_trip(tmp_path, duet_clips):
    clips = generate_synthetic(SyntheticSpec(seed=5, n_clips=3)) + duet_clips[:1]
    manifest = write_dataset(clips, tmp_path)
    loaded = load_manifest(manifest)
    assert [c.clip_id for c in loaded] == [c.clip_id for c in clips]
    for x, y in zip(clips, loaded):
        np.testing.assert_allclose(x.image, y.image, atol=1e-6)
        np.testing.assert_allclose(x.audio, y.audio, atol=1e-6)
        assert [tuple(b) for b in x.gt_boxes] == [tuple(b) for b in y.gt_boxes]
        assert x.K == y.K
    assert Image.open(tmp_path / "images" / f"{clips[-1].clip_id}.png").size == (448, 224)
