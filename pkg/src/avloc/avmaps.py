"""Similarity maps, soft foreground/background masks and multi-source identification."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .encoders import AudioEmbedding, ReferenceEmbeddings, VisualFeatureMap
from .errors import DimensionError, ValidationError

NORM_FLOOR = 1e-8
ALPHA_P = 0.65
ALPHA_N = 0.4
OMEGA = 0.03
ID_THRESHOLD = 0.5


def _t(x):
    if isinstance(x, (VisualFeatureMap, AudioEmbedding)):
        return x.data
    return torch.as_tensor(x)


@dataclass
class MaskPair:
    foreground: torch.Tensor
    background: torch.Tensor
    alpha_p: float = ALPHA_P
    alpha_n: float = ALPHA_N
    omega: float = OMEGA


@dataclass
class PooledFeatures:
    foreground: torch.Tensor
    background: torch.Tensor


@dataclass
class ReferenceAssociatedMaps:
    data: torch.Tensor  # (B, K+1, w, h); last slice is the background reference

    @property
    def flattened(self):
        """Row-major view ``(B, K+1, w*h)``: index ``i*h + j`` is cell ``(i, j)``."""
        B, K1, w, h = self.data.shape
        return self.data.reshape(B, K1, w * h)


@dataclass
class LocalizationResult:
    per_source_maps: torch.Tensor  # (K, w, h)
    binarized_masks: torch.Tensor  # (K, w, h) bool
    threshold: float = ID_THRESHOLD


def cosine_map(F_v, l_a, *, return_flag=False):
    """Cosine similarity of every spatial cell of ``F_v`` with ``l_a``.

    ``F_v`` is ``(B, w, h, c)``; ``l_a`` is ``(B, c)`` or ``(B, K, c)`` (then
    the result is ``(B, K, w, h)``). Norms are floored at 1e-8, so zero
    vectors give similarity 0; a ``RuntimeWarning`` is emitted when that
    happens (and ``flag`` is set if ``return_flag``).
    """
    fv, la = _t(F_v), _t(l_a)
    if fv.dim() != 4:
        raise DimensionError(f"F_v must be (B, w, h, c), got {tuple(fv.shape)}")
    if la.shape[0] != fv.shape[0] or la.shape[-1] != fv.shape[-1]:
        raise DimensionError(f"batch/channel mismatch: F_v {tuple(fv.shape)} vs {tuple(la.shape)}")
    fv_norm = fv.norm(dim=-1)
    la_norm = la.norm(dim=-1)
    flag = bool((fv_norm < NORM_FLOOR).any() or (la_norm < NORM_FLOOR).any())
    if flag:
        warnings.warn("zero-norm vector in cosine_map; similarity set to 0", RuntimeWarning)
    fv_unit = fv / fv_norm.clamp_min(NORM_FLOOR).unsqueeze(-1)
    la_unit = la / la_norm.clamp_min(NORM_FLOOR).unsqueeze(-1)
    if la.dim() == 2:
        out = torch.einsum("bwhc,bc->bwh", fv_unit, la_unit)
    else:
        out = torch.einsum("bwhc,bkc->bkwh", fv_unit, la_unit)
    return (out, flag) if return_flag else out


def masks(S_a, alpha_p=ALPHA_P, alpha_n=ALPHA_N, omega=OMEGA):
    """Soft foreground / background masks from a similarity map."""
    if not omega > 0:
        raise ValidationError(f"omega must be > 0, got {omega}")
    S_a = torch.as_tensor(S_a)
    fg = torch.sigmoid((S_a - alpha_p) / omega)
    bg = 1.0 - torch.sigmoid((S_a - alpha_n) / omega)
    return MaskPair(fg, bg, alpha_p, alpha_n, omega)


def pool(F_v, mask_pair: MaskPair):
    """Mask-weighted global average pooling (mean over all cells, not the mask support)."""
    fv = _t(F_v)
    if fv.shape[:3] != mask_pair.foreground.shape:
        raise DimensionError(f"mask {tuple(mask_pair.foreground.shape)} does not match "
                             f"F_v spatial dims {tuple(fv.shape[:3])}")
    fg = (fv * mask_pair.foreground.unsqueeze(-1)).mean(dim=(1, 2))
    bg = (fv * mask_pair.background.unsqueeze(-1)).mean(dim=(1, 2))
    return PooledFeatures(fg, bg)


def reference_maps(F_v, refs: ReferenceEmbeddings):
    """Similarity map for each foreground reference, then the background one."""
    if refs.K < 1:
        raise ValidationError("need K >= 1 foreground references")
    stacked = torch.cat([refs.foreground, refs.background.unsqueeze(1)], dim=1)
    fv = _t(F_v)
    return ReferenceAssociatedMaps(cosine_map(fv, stacked.to(fv.dtype)))


def iterative_identify(F_v, l_a, K, *, alpha_p=ALPHA_P, omega=OMEGA, threshold=ID_THRESHOLD):
    """Localise ``K`` sources one at a time for a single clip.

    ``F_v`` is ``(w, h, c)`` or ``(1, w, h, c)``. ``l_a`` is either one mixed
    embedding ``(c,)`` reused at every iteration, or a list of ``K``
    per-source embeddings. At iteration ``k`` the cosine map has every cell
    already claimed by earlier sources forced to -1; the region is where the
    sigmoid foreground mask reaches ``threshold``. If no free cell passes,
    the best free cell alone forms the region (when no free cell is left,
    the global argmax is used).
    """
    if K < 1:
        raise ValidationError("K must be >= 1")
    fv = _t(F_v)
    if fv.dim() == 4:
        fv = fv[0]
    if isinstance(l_a, (list, tuple)):
        if len(l_a) != K:
            raise ValidationError(f"got {len(l_a)} audio components for K={K}")
        comps = [_t(a).reshape(-1) for a in l_a]
    else:
        comps = [_t(l_a).reshape(-1)] * K
    claimed = torch.zeros(fv.shape[:2], dtype=torch.bool)
    maps, regions = [], []
    for k in range(K):
        sim = cosine_map(fv[None], comps[k][None].to(fv.dtype))[0]
        sim = sim.masked_fill(claimed, -1.0)
        region = masks(sim, alpha_p=alpha_p, omega=omega).foreground >= threshold
        region &= ~claimed
        if not region.any():
            free = sim.masked_fill(claimed, -float("inf")) if not claimed.all() else sim
            idx = int(torch.argmax(free))
            region = torch.zeros_like(claimed)
            region.view(-1)[idx] = True
        maps.append(sim)
        regions.append(region)
        claimed = claimed | region
    return LocalizationResult(torch.stack(maps), torch.stack(regions), threshold)


def upsample(maps, size):
    """Bilinear resize of ``(K, w, h)`` maps to ``size = (H, W)``."""
    m = torch.as_tensor(maps, dtype=torch.float64)
    return F.interpolate(m[None], size=size, mode="bilinear", align_corners=False)[0]


def mask_bbox(mask):
    """Tight ``[x0, y0, x1, y1]`` (exclusive ends) box of a boolean ``(H, W)`` mask, or None."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return [int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1]


def export_heatmaps(out_dir, clip_id, maps, image_size, threshold=0.5):
    """Write one grayscale PNG per source plus a JSON sidecar.

    ``maps`` are per-source maps ``(K, w, h)``; each is bilinearly upsampled
    to ``image_size = (H, W)``, clipped to [0, 1] and saved as 8-bit. The
    sidecar lists the bounding box of each source's map binarised at
    ``threshold * max``.
    """
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    up = upsample(maps, image_size).clamp(0.0, 1.0).numpy()
    paths, boxes = [], []
    for k, m in enumerate(up):
        p = out_dir / f"{clip_id}_src{k}.png"
        Image.fromarray(np.round(m * 255).astype(np.uint8), mode="L").save(p)
        paths.append(p)
        boxes.append(mask_bbox(m >= threshold * m.max()) if m.max() > 0 else None)
    sidecar = {"clip_id": clip_id, "K": len(up), "threshold": threshold, "boxes": boxes}
    side = out_dir / f"{clip_id}.json"
    side.write_text(json.dumps(sidecar, indent=2))
    return paths, side
