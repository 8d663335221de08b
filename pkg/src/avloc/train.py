"""Training loop, checkpoints and heatmap inference."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import avmaps
from .dataio import SyntheticSpec, normalize_image, preprocess_audio
from .encoders import AVEncoders, EncoderConfig, ReferenceEmbeddings
from .errors import AVLocError, ValidationError
from .evalkit import HeatmapPrediction, evaluate_multi, evaluate_single
from .guidance import to_reference_embeddings
from .losses import LossConfig, compute_losses
from .ot import SinkhornConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not self.lr > 0:
            raise ValidationError("lr must be > 0")


@dataclass
class RunConfig:
    """Everything a run needs; serialisable to/from JSON.

    ``data`` is either ``{"manifest": path}`` or ``{"synthetic": {...}}``
    with :class:`SyntheticSpec` fields.
    """

    data: dict = field(default_factory=lambda: {"synthetic": {}})
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 16
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    out_dir: str = "runs/default"
    caption_cache: str | None = None
    checkpoint_every: int = 0
    log_every: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self):
        d = asdict(self)
        d["optimizer"]["betas"] = list(self.optimizer.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        nested = {"encoder": EncoderConfig, "loss": LossConfig, "sinkhorn": SinkhornConfig,
                  "optimizer": OptimizerConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        return cls(**d)

    def synthetic_spec(self):
        if "synthetic" not in self.data:
            return None
        spec = dict(self.data["synthetic"])
        spec.setdefault("seed", self.seed)
        return SyntheticSpec(**spec)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return RunConfig.from_dict(json.load(fh))


class TrainingError(AVLocError):
    pass


@dataclass
class PreparedData:
    clips: list
    images: torch.Tensor
    spectrograms: torch.Tensor
    refs: ReferenceEmbeddings | None = None

    def __len__(self):
        return len(self.clips)


def prepare(clips, captions=None, text_encoder=None, dtype=torch.float32):
    """Stack model inputs and embed captions if given (aligned with ``clips``).

    Images are channel-normalised here; ``clip.image`` itself stays in [0, 1].
    """
    images = normalize_image(torch.as_tensor(np.stack([c.image for c in clips]), dtype=dtype))
    specs = torch.stack([torch.as_tensor(c.audio) if c.is_spectrogram else preprocess_audio(c.audio)
                         for c in clips]).to(dtype)
    refs = None
    if captions is not None:
        refs = to_reference_embeddings(captions, text_encoder, dtype=dtype)
    return PreparedData(list(clips), images, specs, refs)


def build_model(enc_cfg: EncoderConfig, dtype=torch.float32):
    return AVEncoders(enc_cfg).to(dtype)


def save_checkpoint(path, model, optimizer, step, cfg: RunConfig, metrics=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "encoder_cfg": cfg.encoder.to_dict(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "metrics": metrics or {},
    }, path)
    return path


def load_checkpoint(path):
    """Returns ``(model, RunConfig, payload)``."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {payload.get('format_version')}")
    cfg = RunConfig.from_dict(payload["config"])
    model = build_model(cfg.encoder, cfg.torch_dtype)
    model.load_state_dict(payload["model"])
    return model, cfg, payload


def _smoothed(values, window=20):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    k = min(window, v.size)
    return np.convolve(v, np.ones(k) / k, mode="valid")


def train(cfg: RunConfig, data: PreparedData, model=None, log_path=None, on_step=None):
    """Adam on ``l_total``; returns ``(model, history)``.

    Batches are drawn by a seeded permutation per epoch. Each step appends
    one JSON line ``{step, l_frg, l_bkg, l_oca, l_ori, l_total, fn_count}``
    to ``log_path``. A non-finite loss aborts with a dump naming the batch.
    """
    if data.refs is None:
        raise ValidationError("training needs caption reference embeddings")
    dtype = cfg.torch_dtype
    torch.manual_seed(cfg.seed)
    if model is None:
        model = build_model(cfg.encoder, dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.optimizer.lr, betas=cfg.optimizer.betas)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(data)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = max(n // bs, 1)
    total_steps = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * steps_per_epoch
    out_dir = Path(cfg.out_dir)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    history = []
    step = 0
    try:
        while step < total_steps:
            perm = torch.randperm(n, generator=gen)
            for b in range(steps_per_epoch):
                if step >= total_steps:
                    break
                idx = perm[b * bs:(b + 1) * bs]
                F_v, l_a = model(data.images[idx], data.spectrograms[idx])
                if not (torch.isfinite(F_v).all() and torch.isfinite(l_a).all()):
                    _dump_failure(out_dir, step, idx, data, "non-finite encoder output")
                    raise TrainingError(f"step {step}: non-finite encoder output")
                refs = ReferenceEmbeddings(data.refs.foreground[idx], data.refs.background[idx])
                try:
                    loss, report = compute_losses(F_v, l_a, refs, cfg.loss, cfg.sinkhorn)
                except FloatingPointError as exc:
                    _dump_failure(out_dir, step, idx, data, str(exc))
                    raise TrainingError(f"step {step}: {exc}") from exc
                if not math.isfinite(report.l_total):
                    _dump_failure(out_dir, step, idx, data, "non-finite loss")
                    raise TrainingError(f"step {step}: non-finite loss")
                opt.zero_grad()
                if loss.requires_grad:
                    loss.backward()
                    opt.step()
                step += 1
                history.append(report)
                if log_fh and step % cfg.log_every == 0:
                    log_fh.write(report.to_json(step) + "\n")
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(out_dir / f"step{step:06d}.pt", model, opt, step, cfg)
                if on_step is not None:
                    on_step(step, report)
    finally:
        if log_fh:
            log_fh.close()
    model.last_optimizer = opt
    return model, history


def _dump_failure(out_dir, step, idx, data, reason):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump = {"step": step, "reason": reason,
            "clip_ids": [data.clips[int(i)].clip_id for i in idx]}
    (out_dir / "nan_dump.json").write_text(json.dumps(dump, indent=2))


# --- inference -----------------------------------------------------------------

def eval_heatmap(sim, claimed=None):
    """Min-max normalise a similarity map to [0, 1]; ``claimed`` cells go to 0."""
    m = torch.as_tensor(sim, dtype=torch.float64).clone()
    if claimed is not None and claimed.any() and not claimed.all():
        m[claimed] = m[~claimed].min()
    lo, hi = m.min(), m.max()
    if hi - lo <= 0:
        return torch.zeros_like(m)
    return (m - lo) / (hi - lo)


def center_prior(shape, sigma_frac=0.2):
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    s = sigma_frac * min(H, W)
    return np.exp(-(((xx - W / 2) ** 2) + ((yy - H / 2) ** 2)) / (2 * s * s))


@torch.no_grad()
def predict(model, data: PreparedData, mode="single", use_components=False, batch_size=32):
    """Heatmap predictions at image resolution for every clip.

    ``single``: one map per clip, the audio similarity map. ``multi``:
    ``iterative_identify`` with the mixed embedding (default) or per-source
    component embeddings; without components, sources are assigned to
    ground-truth classes greedily by overlap with the identified region.
    Returns ``(predictions, flagged_count)``.
    """
    model.eval()
    preds, flagged = [], 0
    dtype = next(model.parameters()).dtype
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        F_v, l_a = model(data.images[sl].to(dtype), data.spectrograms[sl].to(dtype))
        for j, clip in enumerate(data.clips[sl]):
            H, W = clip.image.shape[1:]
            if mode == "single":
                sim = avmaps.cosine_map(F_v[j:j + 1], l_a[j:j + 1])[0]
                up = avmaps.upsample(eval_heatmap(sim)[None], (H, W)).numpy()
                preds.append(HeatmapPrediction(up, [clip.class_labels[0]]))
                continue
            K = clip.K
            if use_components and clip.components:
                comp_specs = torch.stack([preprocess_audio(w) for w in clip.components]).to(dtype)
                comps = list(model.audio(comp_specs))
                res = avmaps.iterative_identify(F_v[j], comps, K)
            else:
                res = avmaps.iterative_identify(F_v[j], l_a[j], K)
            claimed = torch.zeros_like(res.binarized_masks[0])
            maps = []
            for k in range(K):
                maps.append(eval_heatmap(res.per_source_maps[k], claimed))
                claimed = claimed | res.binarized_masks[k]
            up = avmaps.upsample(torch.stack(maps), (H, W)).numpy()
            gt_classes = [b[0] for b in clip.gt_boxes]
            if len(gt_classes) != K:
                flagged += 1
            if use_components and clip.components:
                classes = list(clip.class_labels[:K])
            else:
                classes = _assign_classes(up, clip.gt_boxes, K)
            preds.append(HeatmapPrediction(up, classes))
    model.train()
    return preds, flagged


def _assign_classes(maps, gt_boxes, K):
    from .evalkit import binarize, box_mask, mask_iou

    shape = maps.shape[1:]
    remaining = list(gt_boxes)
    classes = []
    for k in range(K):
        if not remaining:
            classes.append(None)
            continue
        binary = binarize(maps[k])
        best = max(range(len(remaining)),
                   key=lambda i: mask_iou(binary, box_mask(remaining[i], shape)))
        classes.append(remaining.pop(best)[0])
    return classes


def evaluate(model, data: PreparedData, mode="single", use_components=False):
    preds, flagged = predict(model, data, mode, use_components)
    boxes = [c.gt_boxes for c in data.clips]
    ids = [c.clip_id for c in data.clips]
    if mode == "single":
        return evaluate_single(preds, boxes, ids)
    return evaluate_multi(preds, boxes, ids, flagged=flagged)


def mean_pairwise_iou(predictions):
    """Mean IoU between the binarised maps of source pairs, over multi-source predictions."""
    from .evalkit import binarize, mask_iou

    vals = []
    for p in predictions:
        masks = [binarize(m) for m in p.per_source]
        for a in range(len(masks)):
            for b in range(a + 1, len(masks)):
                vals.append(mask_iou(masks[a], masks[b]))
    return float(np.mean(vals)) if vals else 0.0


def smoothed_loss(history, window=20):
    return _smoothed([r.l_total for r in history], window)


__all__ = [
    "OptimizerConfig", "PreparedData", "RunConfig", "TrainingError",
    "build_model", "center_prior", "eval_heatmap", "evaluate", "load_checkpoint", "load_config",
    "mean_pairwise_iou", "predict", "prepare", "save_checkpoint", "smoothed_loss", "train",
]
