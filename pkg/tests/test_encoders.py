import numpy as np
import pytest
import torch
import torch.nn.functional as F

from avloc.dataio import normalize_image, preprocess_audio
from avloc.encoders import (
    AVEncoders,
    EncoderConfig,
    HashingTextEncoder,
    ReferenceEmbeddings,
    encode_audio,
    encode_text,
    encode_visual,
)
from avloc.errors import DimensionError, ValidationError


def test_visual_shape_contract():
    cfg = EncoderConfig(feature_channels=16, spatial_downsample=32)
    out = encode_visual(torch.rand(2, 3, 224, 224), cfg)
    assert out.data.shape == (2, 7, 7, 16)
    assert out.spatial_size == (7, 7) and out.channels == 16


def test_visual_duet_width():
    out = encode_visual(torch.rand(1, 3, 224, 448), EncoderConfig())
    assert out.spatial_size == (7, 14)


def test_visual_zero_image_gives_zero_features():
    out = encode_visual(torch.zeros(1, 3, 64, 64), EncoderConfig())
    assert torch.all(out.data == 0)


def test_visual_seeded_determinism():
    cfg = EncoderConfig(seed=7)
    x = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    a = encode_visual(x, cfg).data
    b = encode_visual(x, cfg).data
    assert a.detach().numpy().tobytes() == b.detach().numpy().tobytes()
    c = encode_visual(x, EncoderConfig(seed=8)).data
    assert not torch.equal(a, c)


def test_model_construction_does_not_touch_global_rng():
    torch.manual_seed(0)
    before = torch.rand(1)
    torch.manual_seed(0)
    AVEncoders(EncoderConfig(seed=3))
    assert torch.equal(torch.rand(1), before)


def test_visual_errors():
    with pytest.raises(DimensionError):
        encode_visual(torch.rand(3, 64, 64), EncoderConfig())
    with pytest.raises(DimensionError):
        encode_visual(torch.rand(1, 3, 60, 64), EncoderConfig())
    bad = torch.rand(1, 3, 64, 64)
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValidationError):
        encode_visual(bad, EncoderConfig())


def test_channel_normalization_separates_dimmed_shapes():
    # the bias-free backbone is positively homogeneous, so a uniformly dimmed
    # patch has proportional features; centring the input breaks that
    bright = torch.full((1, 3, 64, 64), 0.8, dtype=torch.float64)
    dim = 0.45 * bright
    cfg = EncoderConfig()
    raw = [encode_visual(x, cfg).data[0, 0, 0] for x in (bright, dim)]
    assert F.cosine_similarity(*raw, dim=0).item() == pytest.approx(1.0)
    normed = [encode_visual(normalize_image(x), cfg).data[0, 0, 0] for x in (bright, dim)]
    assert F.cosine_similarity(*normed, dim=0).item() < 0.99


def test_non_power_of_two_downsample():
    out = encode_visual(torch.rand(1, 3, 48, 48), EncoderConfig(spatial_downsample=24))
    assert out.spatial_size == (2, 2)


def test_audio_shape_and_errors():
    cfg = EncoderConfig(feature_channels=16)
    assert encode_audio(torch.rand(1, 1, 128, 96), cfg).data.shape == (1, 16)
    with pytest.raises(ValidationError):
        encode_audio(torch.rand(1, 2, 128, 96), cfg)
    with pytest.raises(DimensionError):
        encode_audio(torch.rand(1, 128, 96), cfg)


def test_audio_zero_spectrogram_gives_zero_embedding():
    assert torch.all(encode_audio(torch.zeros(1, 1, 64, 48), EncoderConfig()).data == 0)


def test_audio_distinct_tones_distinct_embeddings():
    t = np.arange(48_000) / 16_000
    specs = torch.stack([preprocess_audio(np.sin(2 * np.pi * f * t)) for f in (440.0, 880.0)])
    emb = encode_audio(specs, EncoderConfig()).data
    assert F.cosine_similarity(emb[0], emb[1], dim=0) < 1


def test_audio_head_sees_pitch():
    # a shift-invariant pooling would give every pure tone the same band profile
    t = np.arange(48_000) / 16_000
    specs = torch.stack([preprocess_audio(np.sin(2 * np.pi * f * t)) for f in (300.0, 5000.0)])
    audio = AVEncoders(EncoderConfig()).audio
    with torch.no_grad():
        bands = F.adaptive_avg_pool2d(audio.body(specs).mean(dim=3, keepdim=True),
                                      (audio.FREQ_BANDS, 1)).mean(dim=1).flatten(1)
    shape = bands - bands.mean(dim=1, keepdim=True)
    assert (shape[0] - shape[1]).norm() > 0.3 * shape[0].norm()


def test_config_validation():
    with pytest.raises(ValidationError):
        EncoderConfig(backbone_kind="resnet")
    with pytest.raises(ValidationError):
        AVEncoders(EncoderConfig(backbone_kind="external"))


def test_external_backbones_are_used():
    vis, aud = torch.nn.Identity(), torch.nn.Identity()
    model = AVEncoders(EncoderConfig(backbone_kind="external"), visual=vis, audio=aud)
    x = torch.rand(1, 2, 2, 4)
    assert model(x, x)[0] is x


def test_text_identity_and_order_invariance():
    enc = HashingTextEncoder(16, 0)
    a, b = enc(["a b", "b a"])
    torch.testing.assert_close(a, b)
    x = encode_text(["an image of a playing violin"] * 2, EncoderConfig())
    assert F.cosine_similarity(x[0], x[1], dim=0).item() == pytest.approx(1.0)


def test_text_distinct_captions():
    x = encode_text(["an image of a playing violin", "an image of a silent violin"], EncoderConfig())
    assert F.cosine_similarity(x[0], x[1], dim=0) < 1
    torch.testing.assert_close(x.norm(dim=-1), torch.ones(2, dtype=torch.float64))


def test_text_empty_caption_rejected():
    with pytest.raises(ValidationError):
        encode_text([""], EncoderConfig())


def test_reference_embeddings_validation():
    with pytest.raises(DimensionError):
        ReferenceEmbeddings(torch.rand(2, 4), torch.rand(2, 4))
    with pytest.raises(DimensionError):
        ReferenceEmbeddings(torch.rand(2, 1, 4), torch.rand(3, 4))
    assert ReferenceEmbeddings(torch.rand(2, 3, 4), torch.rand(2, 4)).K == 3
