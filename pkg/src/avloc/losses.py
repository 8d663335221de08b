"""Training objectives: object-aware contrastive alignment (OCA), object region
isolation (ORI) and their weighted sum."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from . import avmaps
from .encoders import ReferenceEmbeddings
from .errors import NumericalError, ValidationError
from .ot import SinkhornConfig, build_cost, entropic_ot, grid_coords, normalize_to_simplex

TAU = 0.7
LAMBDA_OCA = 1.0
LAMBDA_ORI = 0.1


@dataclass(frozen=True)
class OCAConfig:
    tau: float = TAU
    temperature: float = 1.0

    def __post_init__(self):
        # tau = -1 is allowed to switch soft negatives off entirely
        if not -1.0 <= self.tau <= 1.0:
            raise ValidationError(f"tau must lie in [-1, 1], got {self.tau}")
        if not self.temperature > 0:
            raise ValidationError("temperature must be > 0")


@dataclass
class LossReport:
    l_frg: float
    l_bkg: float
    l_oca: float
    l_ori: float
    l_total: float
    false_negative_count: int
    pairwise_ot_terms: list = field(default_factory=list)

    def to_json(self, step):
        return json.dumps({"step": step, "l_frg": self.l_frg, "l_bkg": self.l_bkg,
                           "l_oca": self.l_oca, "l_ori": self.l_ori,
                           "l_total": self.l_total, "fn_count": self.false_negative_count})


def _sim(a, b):
    # row-wise cosine similarity with the same norm floor as the maps
    return (F.normalize(a, dim=-1, eps=avmaps.NORM_FLOOR)
            * F.normalize(b, dim=-1, eps=avmaps.NORM_FLOOR)).sum(-1)


def pooled_reference(refs: ReferenceEmbeddings):
    """Mean of the K foreground references, renormalised to unit length."""
    return F.normalize(refs.foreground.mean(dim=1), dim=-1)


def soft_negative_mask(l_r_p, tau):
    """``mask[i, j]`` is 1 where clip ``j`` may act as a soft negative for clip ``i``.

    Off-diagonal pairs whose pooled references are more similar than ``tau``
    are treated as false negatives and dropped.
    """
    unit = F.normalize(l_r_p, dim=-1)
    ref_sim = unit @ unit.T
    B = ref_sim.shape[0]
    off_diag = ~torch.eye(B, dtype=torch.bool, device=ref_sim.device)
    return (ref_sim <= tau) & off_diag, (ref_sim > tau) & off_diag


def oca_frg(l_v_p, l_v_n, l_r_p, cfg: OCAConfig = OCAConfig(), *, return_fn_count=False):
    """Foreground alignment with hard (background) and in-batch soft negatives.

    With ``return_fn_count`` also returns the number of reference pairs
    flagged as false negatives; each such pair drops one soft-negative term
    from both of its anchors.
    """
    t = cfg.temperature
    l_r_p = l_r_p.to(l_v_p.dtype)
    pos = _sim(l_v_p, l_r_p) / t
    hard = _sim(l_v_n, l_r_p) / t
    # cross[i, j] = Sim(l_v^p_j, l_r^p_i)
    cross = F.normalize(l_r_p, dim=-1) @ F.normalize(l_v_p, dim=-1, eps=avmaps.NORM_FLOOR).T / t
    keep, excluded = soft_negative_mask(l_r_p, cfg.tau)
    neg_inf = torch.finfo(cross.dtype).min
    soft = torch.where(keep, cross, torch.full_like(cross, neg_inf))
    # -log(p / (p + n_hard + n_soft)) as a log-sum-exp over all terms
    logits = torch.cat([pos[:, None], hard[:, None], soft], dim=1)
    loss = (torch.logsumexp(logits, dim=1) - pos).mean()
    if return_fn_count:
        # the mask is symmetric: count each near-duplicate pair once
        return loss, int(torch.triu(excluded, diagonal=1).sum())
    return loss


def oca_bkg(l_v_n, l_v_p, bg_ref, temperature=1.0):
    """Background alignment: background feature toward the background caption,
    foreground feature away from it."""
    bg_ref = bg_ref.to(l_v_n.dtype)
    pos = _sim(l_v_n, bg_ref) / temperature
    hard = _sim(l_v_p, bg_ref) / temperature
    return (torch.logaddexp(pos, hard) - pos).mean()


def oca(frg, bkg):
    return (frg + bkg) / 2


def ori_pair_terms(F_v, refs: ReferenceEmbeddings, sinkhorn_cfg: SinkhornConfig | None = None,
                   beta=1.0, backend=None):
    """Entropic OT cost for every ordered slice pair ``(n, m)``, ``n != m``.

    Each term transports the normalised map of reference ``n`` onto the
    normalised complement of map ``m``. Returns a ``(B, K+1, K+1)`` tensor
    with zeros on the diagonal.
    """
    cfg = sinkhorn_cfg or SinkhornConfig()
    S = avmaps.reference_maps(F_v, refs)
    flat = S.flattened
    B, K1, n = flat.shape
    w, h = S.data.shape[2:]
    coords = grid_coords(w, h)
    src_idx, dst_idx = zip(*[(a, b) for a in range(K1) for b in range(K1) if a != b])
    src = flat[:, list(src_idx)]
    dst = 1.0 - flat[:, list(dst_idx)]
    # intensities enter the cost clamped to the same [0, 1] range as the masses
    a, b = src.clamp(0.0, 1.0), dst.clamp(0.0, 1.0)
    C = build_cost(a, b, coords, beta).data
    P = normalize_to_simplex(src)
    Q = normalize_to_simplex(dst)
    npair = len(src_idx)
    try:
        vals = entropic_ot(P.reshape(B * npair, n), Q.reshape(B * npair, n),
                           C.reshape(B * npair, n, n), cfg, backend)
    except NumericalError as exc:
        raise NumericalError(f"ORI Sinkhorn failed (batch of {B}, {npair} pairs): {exc}") from exc
    vals = vals.reshape(B, npair)
    bad = ~torch.isfinite(vals)
    if bad.any():
        b_i, p_i = (int(x) for x in torch.nonzero(bad)[0])
        raise NumericalError(f"non-finite ORI term at batch {b_i}, pair "
                             f"({src_idx[p_i]}, {dst_idx[p_i]})")
    out = vals.new_zeros(B, K1, K1)
    out[:, list(src_idx), list(dst_idx)] = vals
    return out


def ori(F_v, refs: ReferenceEmbeddings, sinkhorn_cfg: SinkhornConfig | None = None,
        beta=1.0, backend=None):
    """Region isolation loss: summed over the batch and all ordered slice pairs."""
    return ori_pair_terms(F_v, refs, sinkhorn_cfg, beta, backend).sum()


def total(l_oca, l_ori, lambda_1=LAMBDA_OCA, lambda_2=LAMBDA_ORI):
    return lambda_1 * l_oca + lambda_2 * l_ori


@dataclass(frozen=True)
class LossConfig:
    tau: float = TAU
    lambda_1: float = LAMBDA_OCA
    lambda_2: float = LAMBDA_ORI
    alpha_p: float = avmaps.ALPHA_P
    alpha_n: float = avmaps.ALPHA_N
    omega: float = avmaps.OMEGA
    beta: float = 1.0
    temperature: float = 1.0

    def to_dict(self):
        return asdict(self)


def compute_losses(F_v, l_a, refs: ReferenceEmbeddings, cfg: LossConfig = LossConfig(),
                   sinkhorn_cfg: SinkhornConfig | None = None, backend=None):
    """Full forward pass from features to ``l_total``.

    Returns ``(l_total tensor, LossReport)``. Reference embeddings are
    detached: caption guidance is a fixed target. ORI is skipped (zero)
    when ``lambda_2 == 0``.
    """
    refs = ReferenceEmbeddings(refs.foreground.detach().to(F_v.dtype),
                               refs.background.detach().to(F_v.dtype))
    S_a = avmaps.cosine_map(F_v, l_a)
    mp = avmaps.masks(S_a, cfg.alpha_p, cfg.alpha_n, cfg.omega)
    pooled = avmaps.pool(F_v, mp)
    l_r_p = pooled_reference(refs)
    oca_cfg = OCAConfig(cfg.tau, cfg.temperature)
    frg, fn_count = oca_frg(pooled.foreground, pooled.background, l_r_p, oca_cfg,
                            return_fn_count=True)
    bkg = oca_bkg(pooled.background, pooled.foreground, refs.background, cfg.temperature)
    l_oca = oca(frg, bkg)
    if cfg.lambda_2 != 0:
        terms = ori_pair_terms(F_v, refs, sinkhorn_cfg, cfg.beta, backend)
        l_ori = terms.sum()
        pair_mean = terms.detach().mean(0).cpu().numpy().tolist()
    else:
        l_ori = F_v.new_zeros(())
        pair_mean = []
    l_total = total(l_oca, l_ori, cfg.lambda_1, cfg.lambda_2)
    if not torch.isfinite(l_total):
        raise NumericalError("non-finite total loss")
    report = LossReport(frg.item(), bkg.item(), l_oca.item(), l_ori.item(), l_total.item(),
                        fn_count, pair_mean)
    return l_total, report


def baseline_contrastive(l_v_p, l_a, temperature=0.07):
    """Plain audio-visual InfoNCE over the batch, kept for ablation comparisons."""
    logits = F.normalize(l_v_p, dim=-1) @ F.normalize(l_a, dim=-1).T / temperature
    target = torch.arange(logits.shape[0], device=logits.device)
    return F.cross_entropy(logits, target)


__all__ = [
    "LossConfig", "LossReport", "OCAConfig", "baseline_contrastive", "compute_losses",
    "oca", "oca_bkg", "oca_frg", "ori", "ori_pair_terms", "pooled_reference",
    "soft_negative_mask", "total",
]
