"""Feature extractors for the visual, audio and text streams.

The toy backbones are small bias-free conv stacks, fully determined by
``EncoderConfig.seed``. Real backbones plug in as any ``nn.Module`` with the
same input/output contract (``backbone_kind="external"``).
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, ValidationError

BACKBONE_KINDS = ("toy_conv", "external")

# caption boilerplate shared by every "an image of ..." sentence
TEXT_STOPWORDS = frozenset({"a", "an", "the", "of", "image", "and", "in", "with"})


@dataclass(frozen=True)
class EncoderConfig:
    backbone_kind: str = "toy_conv"
    feature_channels: int = 16
    spatial_downsample: int = 32
    seed: int = 0
    width: int = 32

    def __post_init__(self):
        if self.backbone_kind not in BACKBONE_KINDS:
            raise ValidationError(f"backbone_kind must be one of {BACKBONE_KINDS}")
        if self.feature_channels < 2:
            raise ValidationError("feature_channels must be >= 2")
        if self.spatial_downsample < 1:
            raise ValidationError("spatial_downsample must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class VisualFeatureMap:
    """Visual features laid out channel-last, ``(B, w, h, c)``."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.dim() != 4:
            raise DimensionError(f"visual map must be (B, w, h, c), got {tuple(self.data.shape)}")
        if self.data.shape[-1] < 2:
            raise ValidationError("visual map needs at least 2 channels")

    @property
    def spatial_size(self):
        return tuple(self.data.shape[1:3])

    @property
    def channels(self):
        return self.data.shape[-1]


@dataclass
class AudioEmbedding:
    data: torch.Tensor

    def __post_init__(self):
        if self.data.dim() != 2:
            raise DimensionError(f"audio embedding must be (B, c), got {tuple(self.data.shape)}")


@dataclass
class ReferenceEmbeddings:
    """Caption-derived anchors: ``foreground`` (B, K, c), ``background`` (B, c)."""

    foreground: torch.Tensor
    background: torch.Tensor

    def __post_init__(self):
        if self.foreground.dim() != 3 or self.background.dim() != 2:
            raise DimensionError("expected foreground (B, K, c) and background (B, c)")
        if self.foreground.shape[1] < 1:
            raise ValidationError("need at least one foreground reference (K >= 1)")
        if (self.foreground.shape[0], self.foreground.shape[2]) != tuple(self.background.shape):
            raise DimensionError("foreground and background batch/channel dims disagree")

    @property
    def K(self):
        return self.foreground.shape[1]


def _factor_two(d):
    k = 0
    while d % 2 == 0 and k < 3:
        d //= 2
        k += 1
    return k, d


class ToyVisualBackbone(nn.Module):
    """Strided conv blocks, then average pooling for any remaining factor."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        n_stride, self.pool = _factor_two(cfg.spatial_downsample)
        chans = [3] + [cfg.width] * max(n_stride, 1)
        layers = []
        for i in range(len(chans) - 1):
            stride = 2 if i < n_stride else 1
            layers += [nn.Conv2d(chans[i], chans[i + 1], 3, stride=stride, padding=1, bias=False),
                       nn.ReLU()]
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(cfg.width, cfg.feature_channels, 1, bias=False)

    def forward(self, x):
        x = self.body(x)
        if self.pool > 1:
            x = F.avg_pool2d(x, self.pool)
        return self.head(x).permute(0, 2, 3, 1)


class ToyAudioBackbone(nn.Module):
    """Conv stack over the spectrogram, averaged over time only.

    Frequency is kept as ``FREQ_BANDS`` coarse bands before the head: a conv
    stack is shift invariant, so pooling frequency away as well would make
    pure tones of different pitch indistinguishable.
    """

    FREQ_BANDS = 8

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        w = cfg.width
        self.body = nn.Sequential(
            nn.Conv2d(1, w, 7, stride=2, padding=3, bias=False), nn.ReLU(),
            nn.Conv2d(w, w, 3, stride=2, padding=1, bias=False), nn.ReLU(),
            nn.Conv2d(w, w, 3, stride=2, padding=1, bias=False), nn.ReLU(),
        )
        self.head = nn.Linear(w * self.FREQ_BANDS, cfg.feature_channels, bias=False)

    def forward(self, x):
        x = self.body(x).mean(dim=3, keepdim=True)
        x = F.adaptive_avg_pool2d(x, (self.FREQ_BANDS, 1))
        return self.head(x.flatten(1))


class AVEncoders(nn.Module):
    """Visual and audio backbones built together from one seed."""

    def __init__(self, cfg: EncoderConfig, visual: nn.Module | None = None,
                 audio: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg
        if cfg.backbone_kind == "external":
            if visual is None or audio is None:
                raise ValidationError("external backbones must be passed in explicitly")
            self.visual, self.audio = visual, audio
        else:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(cfg.seed)
                self.visual = ToyVisualBackbone(cfg)
                self.audio = ToyAudioBackbone(cfg)

    def forward(self, images, spectrograms):
        return self.visual(images), self.audio(spectrograms)


def _check_finite(x, what):
    if not torch.isfinite(x).all():
        raise ValidationError(f"{what} contains non-finite values")


def encode_visual(images, cfg: EncoderConfig, model: nn.Module | None = None) -> VisualFeatureMap:
    """Run the visual backbone on ``(B, 3, H, W)`` images in [0, 1]."""
    images = torch.as_tensor(images)
    if images.dim() != 4 or images.shape[1] != 3:
        raise DimensionError(f"images must be (B, 3, H, W), got {tuple(images.shape)}")
    d = cfg.spatial_downsample
    if images.shape[2] % d or images.shape[3] % d:
        raise DimensionError(f"H, W must be divisible by spatial_downsample={d}")
    _check_finite(images, "images")
    if model is None:
        model = AVEncoders(cfg).visual
    model = model.to(images.dtype)
    return VisualFeatureMap(model(images))


def encode_audio(spectrograms, cfg: EncoderConfig, model: nn.Module | None = None) -> AudioEmbedding:
    """Embed ``(B, 1, F, T)`` spectrograms into ``(B, c)`` vectors."""
    spectrograms = torch.as_tensor(spectrograms)
    if spectrograms.dim() != 4:
        raise DimensionError(f"spectrograms must be (B, 1, F, T), got {tuple(spectrograms.shape)}")
    if spectrograms.shape[1] != 1:
        raise ValidationError(f"expected 1 input channel, got {spectrograms.shape[1]}")
    _check_finite(spectrograms, "spectrograms")
    if model is None:
        model = AVEncoders(cfg).audio
    model = model.to(spectrograms.dtype)
    return AudioEmbedding(model(spectrograms))


def _tokens(caption):
    words = [w.strip(".,;:!?\"'()[]") for w in caption.lower().split()]
    words = [w for w in words if w]
    content = [w for w in words if w not in TEXT_STOPWORDS]
    return content or words


def _token_vector(token, seed, dim):
    digest = hashlib.sha256(f"{seed}:{token}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.standard_normal(dim)


class HashingTextEncoder:
    """Offline stand-in for a sentence encoder.

    Bag of words: each lowercase token maps to a seeded Gaussian vector,
    vectors are summed and L2-normalised. Word order does not matter.
    """

    def __init__(self, dim=16, seed=0):
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def _vec(self, token):
        if token not in self._cache:
            self._cache[token] = _token_vector(token, self.seed, self.dim)
        return self._cache[token]

    def __call__(self, captions):
        rows = []
        for cap in captions:
            if not isinstance(cap, str) or not cap.strip():
                raise ValidationError("captions must be non-empty strings")
            v = sum(self._vec(t) for t in _tokens(cap))
            rows.append(v / np.linalg.norm(v))
        return torch.as_tensor(np.stack(rows))


def encode_text(captions, cfg: EncoderConfig, encoder=None) -> torch.Tensor:
    """One unit-norm ``c``-dim row per caption (float64)."""
    if isinstance(captions, str):
        captions = [captions]
    if encoder is None:
        encoder = HashingTextEncoder(cfg.feature_channels, cfg.seed)
    out = torch.as_tensor(encoder(list(captions)), dtype=torch.float64)
    return F.normalize(out, dim=-1)
