"""Clip containers, preprocessing, duet mixing and the synthetic shapes-and-tones corpus."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import DimensionError, IngestionError, ValidationError

SAMPLE_RATE = 16_000
CLIP_SECONDS = 3.0
IMAGE_SIZE = 224
N_FFT = 512
HOP = 160
LOG_FLOOR = 1e-5
# Clips store frames in [0, 1]; these statistics are applied at the model
# input. Centring matters for the bias-free toy backbone: without it a dimmed
# copy of a shape has features that are an exact multiple of the original.
IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)

SHAPE_COLORS = {
    "circle": (0.95, 0.25, 0.2),
    "square": (0.2, 0.85, 0.3),
    "triangle": (0.25, 0.4, 0.95),
}
DEFAULT_TONES = {"circle": 440.0, "square": 660.0, "triangle": 990.0}
SILENT_BRIGHTNESS = 0.45


@dataclass
class AVClip:
    clip_id: str
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    audio: np.ndarray  # mono waveform at 16 kHz, or a (1, F, T) log spectrogram
    class_labels: list
    gt_boxes: list = field(default_factory=list)  # [(class, x0, y0, x1, y1)], exclusive ends
    K: int = 1
    components: list | None = None  # per-source waveforms when known (duets)
    objects: list = field(default_factory=list)  # [{"cls", "box", "sounding"}] for synthetic clips

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValidationError(f"{self.clip_id}: image must be (3, H, W)")
        H, W = self.image.shape[1:]
        if (H, W) not in ((IMAGE_SIZE, IMAGE_SIZE), (IMAGE_SIZE, 2 * IMAGE_SIZE)):
            raise ValidationError(f"{self.clip_id}: unsupported image size {H}x{W}")
        for box in self.gt_boxes:
            _, x0, y0, x1, y1 = box
            if not (0 <= x0 < x1 <= W and 0 <= y0 < y1 <= H):
                raise ValidationError(f"{self.clip_id}: box {box} outside {W}x{H} image")

    @property
    def is_spectrogram(self):
        return np.asarray(self.audio).ndim == 3


def preprocess_image(raw_frame, size=IMAGE_SIZE, normalize=False, clip_id="?"):
    """Resize a frame to ``size x size`` and return a float ``(3, size, size)`` tensor.

    ``raw_frame`` may be a path, a PIL image or an ``(H, W, 3)`` array
    (uint8, or float in [0, 1]). Bilinear resizing with antialiasing;
    values in [0, 1]; ``normalize=True`` additionally applies the
    ImageNet channel statistics in ``IMAGE_MEAN`` / ``IMAGE_STD``.
    """
    from PIL import Image, UnidentifiedImageError

    try:
        if isinstance(raw_frame, (str, Path)):
            with Image.open(raw_frame) as im:
                raw_frame = np.asarray(im.convert("RGB"))
        elif isinstance(raw_frame, Image.Image):
            raw_frame = np.asarray(raw_frame.convert("RGB"))
    except (OSError, UnidentifiedImageError) as exc:
        raise IngestionError(clip_id, f"cannot decode image: {exc}") from exc
    arr = np.asarray(raw_frame)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise IngestionError(clip_id, f"expected (H, W, 3) frame, got {arr.shape}")
    x = torch.as_tensor(arr.astype(np.float64))
    if arr.dtype == np.uint8:
        x = x / 255.0
    x = x.permute(2, 0, 1)[None]
    if x.shape[-2:] != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False,
                          antialias=True)
    x = x[0].clamp(0.0, 1.0)
    if normalize:
        x = normalize_image(x)
    return x.float()


def normalize_image(images):
    """Per-channel ``(x - IMAGE_MEAN) / IMAGE_STD`` over ``(..., 3, H, W)`` tensors."""
    images = torch.as_tensor(images)
    if images.dim() < 3 or images.shape[-3] != 3:
        raise DimensionError(f"expected (..., 3, H, W) images, got {tuple(images.shape)}")
    mean = torch.tensor(IMAGE_MEAN, dtype=images.dtype)[:, None, None]
    std = torch.tensor(IMAGE_STD, dtype=images.dtype)[:, None, None]
    return (images - mean) / std


def fit_length(waveform, n_samples=int(SAMPLE_RATE * CLIP_SECONDS)):
    """Loop-pad short clips and truncate long ones to exactly ``n_samples``."""
    w = np.asarray(waveform, dtype=np.float64)
    if w.size == 0:
        raise ValidationError("empty audio")
    if w.size < n_samples:
        w = np.tile(w, int(np.ceil(n_samples / w.size)))
    return w[:n_samples]


def preprocess_audio(waveform, sr=SAMPLE_RATE):
    """Log-magnitude STFT of a mono clip, shape ``(1, 257, 301)``.

    Resamples to 16 kHz, fits to 3 s, then Hann-windowed STFT with
    ``n_fft=512``, ``hop=160`` (centred) and ``log(|X| + 1e-5)``.
    """
    w = np.asarray(waveform, dtype=np.float64)
    if w.size == 0:
        raise ValidationError("empty audio")
    if not np.all(np.isfinite(w)):
        raise ValidationError("audio contains non-finite samples")
    if w.ndim > 1:
        w = w.mean(axis=-1)
    if sr != SAMPLE_RATE:
        g = np.gcd(int(sr), SAMPLE_RATE)
        w = resample_poly(w, SAMPLE_RATE // g, int(sr) // g)
    w = torch.as_tensor(fit_length(w))
    spec = torch.stft(w, N_FFT, hop_length=HOP, window=torch.hann_window(N_FFT, dtype=w.dtype),
                      center=True, return_complex=True)
    return torch.log(spec.abs() + LOG_FLOOR)[None].float()


def _peak_normalize(w):
    peak = np.abs(w).max()
    return w / peak if peak > 0 else w


def mix_duet(clip_a: AVClip, clip_b: AVClip) -> AVClip:
    """Side-by-side duet: ``a`` on the left, ``b`` on the right, waveforms summed."""
    for c in (clip_a, clip_b):
        if c.image.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise ValidationError(f"{c.clip_id}: duet inputs must be single 224x224 clips")
        if c.is_spectrogram:
            raise ValidationError(f"{c.clip_id}: duet mixing needs raw waveforms")
    wa, wb = fit_length(clip_a.audio), fit_length(clip_b.audio)
    image = np.concatenate([clip_a.image, clip_b.image], axis=2)
    boxes = list(clip_a.gt_boxes) + [
        (cls, x0 + IMAGE_SIZE, y0, x1 + IMAGE_SIZE, y1) for cls, x0, y0, x1, y1 in clip_b.gt_boxes
    ]
    objects = list(clip_a.objects) + [
        {**o, "box": [o["box"][0] + IMAGE_SIZE, o["box"][1], o["box"][2] + IMAGE_SIZE, o["box"][3]]}
        for o in clip_b.objects
    ]
    return AVClip(
        clip_id=f"{clip_a.clip_id}+{clip_b.clip_id}",
        image=image,
        audio=_peak_normalize(wa + wb).astype(np.float32),
        class_labels=list(clip_a.class_labels) + list(clip_b.class_labels),
        gt_boxes=boxes,
        K=2,
        components=[wa.astype(np.float32), wb.astype(np.float32)],
        objects=objects,
    )


@dataclass
class SyntheticSpec:
    seed: int = 0
    n_clips: int = 100
    shape_classes: tuple = ("circle", "square", "triangle")
    tone_map: dict = field(default_factory=lambda: dict(DEFAULT_TONES))
    silent_distractor_prob: float = 0.8
    duet: bool = False
    class_weights: tuple | None = None
    same_shape_prob: float = 0.5
    size_range: tuple = (56, 84)
    noise_level: float = 0.02

    def __post_init__(self):
        freqs = [self.tone_map[c] for c in self.shape_classes]
        if len(set(freqs)) != len(freqs):
            raise ValidationError("tone frequencies must be distinct")
        for p in (self.silent_distractor_prob, self.same_shape_prob):
            if not 0.0 <= p <= 1.0:
                raise ValidationError("probabilities must lie in [0, 1]")
        if self.class_weights is not None and len(self.class_weights) != len(self.shape_classes):
            raise ValidationError("class_weights must match shape_classes")


def shape_mask(kind, x0, y0, s, H=IMAGE_SIZE, W=IMAGE_SIZE):
    """Boolean ``(H, W)`` raster of a shape inscribed in the square ``[x0, x0+s) x [y0, y0+s)``."""
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    u, v = (xx - x0) / s, (yy - y0) / s
    inside = (u >= 0) & (u < 1) & (v >= 0) & (v < 1)
    if kind == "square":
        return inside
    if kind == "circle":
        return inside & ((u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25)
    if kind == "triangle":
        # apex at the top centre, base along the bottom edge
        return inside & (np.abs(u - 0.5) <= v / 2)
    raise ValidationError(f"unknown shape {kind!r}")


def _tone(freq, rng, n=int(SAMPLE_RATE * CLIP_SECONDS)):
    t = np.arange(n) / SAMPLE_RATE
    phase = rng.uniform(0, 2 * np.pi)
    return 0.5 * np.sin(2 * np.pi * freq * t + phase)


def _overlaps(box, others, gap=4):
    x0, y0, x1, y1 = box
    return any(x0 < b[2] + gap and b[0] < x1 + gap and y0 < b[3] + gap and b[1] < y1 + gap
               for b in others)


def _synthetic_single(spec: SyntheticSpec, rng, clip_id):
    H = W = IMAGE_SIZE
    classes = list(spec.shape_classes)
    p = None if spec.class_weights is None else np.asarray(spec.class_weights) / np.sum(spec.class_weights)
    cls = classes[rng.choice(len(classes), p=p)]
    image = np.full((3, H, W), 0.25) + spec.noise_level * rng.standard_normal((3, H, W))
    objects = []
    n_distractors = 1 if rng.random() < spec.silent_distractor_prob else 0
    kinds = [(cls, True)]
    for _ in range(n_distractors):
        if rng.random() < spec.same_shape_prob or len(classes) == 1:
            kinds.append((cls, False))
        else:
            kinds.append((classes[rng.choice([i for i, c in enumerate(classes) if c != cls])], False))
    boxes = []
    for kind, sounding in kinds:
        for _ in range(200):
            s = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
            x0 = int(rng.integers(0, W - s + 1))
            y0 = int(rng.integers(0, H - s + 1))
            box = [x0, y0, x0 + s, y0 + s]
            if not _overlaps(box, boxes):
                break
        else:
            raise RuntimeError("could not place shapes without overlap")
        boxes.append(box)
        m = shape_mask(kind, x0, y0, s)
        color = np.asarray(SHAPE_COLORS.get(kind, (0.8, 0.8, 0.8)))
        if not sounding:
            color = color * SILENT_BRIGHTNESS
        image[:, m] = color[:, None]
        objects.append({"cls": kind, "box": box, "sounding": sounding})
    # quantise to 8 bit so PNG round trips are exact
    image = np.round(np.clip(image, 0.0, 1.0) * 255) / 255
    audio = _tone(spec.tone_map[cls], rng) + 0.01 * rng.standard_normal(int(SAMPLE_RATE * CLIP_SECONDS))
    return AVClip(clip_id, image.astype(np.float32), audio.astype(np.float32), [cls],
                  [(cls, *boxes[0])], 1, None, objects)


def generate_synthetic(spec: SyntheticSpec) -> list[AVClip]:
    """Deterministic shapes-and-tones clips.

    Each single clip has one bright "sounding" shape whose class tone is the
    audio, plus (with ``silent_distractor_prob``) one dim silent shape; the
    distractor reuses the sounding shape's class with ``same_shape_prob``.
    Duet clips put two independently drawn single clips side by side.
    """
    clips = []
    for i in range(spec.n_clips):
        rng = np.random.default_rng([spec.seed, i])
        if spec.duet:
            a = _synthetic_single(spec, rng, f"syn{spec.seed}_{i:05d}a")
            b = _synthetic_single(spec, rng, f"syn{spec.seed}_{i:05d}b")
            clip = mix_duet(a, b)
            clip.clip_id = f"syn{spec.seed}_{i:05d}"
        else:
            clip = _synthetic_single(spec, rng, f"syn{spec.seed}_{i:05d}")
        clips.append(clip)
    return clips


def fixture_captions(clip: AVClip):
    """Captions implied by a synthetic clip's ground truth: ``(foreground list, background)``."""
    fg = [f"an image of a sounding {o['cls']}" for o in clip.objects if o["sounding"]]
    silent = [f"a silent {o['cls']}" for o in clip.objects if not o["sounding"]]
    if not fg:
        fg = [f"an image of a sounding {c}" for c in clip.class_labels]
    if not silent:
        bg = "an image of an empty background"
    elif len(silent) == 1:
        bg = f"an image of {silent[0]}"
    else:
        bg = "an image of " + ", ".join(silent[:-1]) + ", and " + silent[-1]
    return fg, bg


# --- manifest I/O -------------------------------------------------------------

def write_dataset(clips, out_dir):
    """Write PNG images, float WAVs and ``manifest.jsonl``; returns the manifest path."""
    from PIL import Image

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with manifest.open("w", encoding="utf-8") as fh:
        for c in clips:
            img_path = Path("images") / f"{c.clip_id}.png"
            arr = np.round(np.transpose(c.image, (1, 2, 0)) * 255).astype(np.uint8)
            Image.fromarray(arr).save(out_dir / img_path)
            aud_path = Path("audio") / f"{c.clip_id}.wav"
            wavfile.write(out_dir / aud_path, SAMPLE_RATE, np.asarray(c.audio, dtype=np.float32))
            rec = {"clip_id": c.clip_id, "image_path": str(img_path), "audio_path": str(aud_path),
                   "class_labels": list(c.class_labels),
                   "gt_boxes": [list(b) for b in c.gt_boxes], "K": c.K, "objects": c.objects}
            if c.components:
                comp_paths = []
                for k, w in enumerate(c.components):
                    p = Path("audio") / f"{c.clip_id}_c{k}.wav"
                    wavfile.write(out_dir / p, SAMPLE_RATE, np.asarray(w, dtype=np.float32))
                    comp_paths.append(str(p))
                rec["component_paths"] = comp_paths
            fh.write(json.dumps(rec) + "\n")
    return manifest


def _read_wav(path, clip_id):
    try:
        sr, w = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise IngestionError(clip_id, f"cannot read audio: {exc}") from exc
    if w.dtype.kind == "i":
        w = w / np.iinfo(w.dtype).max
    if w.ndim > 1:
        w = w.mean(axis=1)
    if sr != SAMPLE_RATE:
        g = np.gcd(int(sr), SAMPLE_RATE)
        w = resample_poly(w, SAMPLE_RATE // g, int(sr) // g)
    return np.asarray(w, dtype=np.float32)


def _read_image(path, clip_id):
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, UnidentifiedImageError) as exc:
        raise IngestionError(clip_id, f"cannot decode image: {exc}") from exc
    if arr.shape[:2] in ((IMAGE_SIZE, IMAGE_SIZE), (IMAGE_SIZE, 2 * IMAGE_SIZE)):
        return np.transpose(arr, (2, 0, 1)).astype(np.float32) / 255.0
    return preprocess_image(arr, clip_id=clip_id).numpy()


def load_manifest(path):
    """Read a ``manifest.jsonl`` back into clips (paths relative to the manifest)."""
    path = Path(path)
    root = path.parent
    clips = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            cid = rec["clip_id"]
            img = _read_image(root / rec["image_path"], cid)
            audio = _read_wav(root / rec["audio_path"], cid)
            comps = [_read_wav(root / p, cid) for p in rec.get("component_paths", [])] or None
            clips.append(AVClip(cid, img, audio, rec["class_labels"],
                                [tuple(b) for b in rec.get("gt_boxes", [])], rec.get("K", 1),
                                comps, rec.get("objects", [])))
    return clips
