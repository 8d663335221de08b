"""Entropy-regularised optimal transport over flattened 2-D maps.

The regularised problem is

    min_gamma <gamma, C> + eps * KL(gamma | P x Q)   s.t.  gamma in Pi(P, Q)

solved by log-domain Sinkhorn on the dual potentials ``(f, g)``. Two
values come out of a solve:

* ``distance``: the transport cost ``<gamma*, C>`` of the regularised plan,
  an upper bound on the exact EMD within ``eps * log(n)``;
* ``objective``: the regularised optimum ``<f, P> + <g, Q>``, whose gradient
  is available in closed form from the converged potentials
  (``dP = f``, ``dQ = g``, ``dC = gamma``). :func:`entropic_ot` exposes it as
  a differentiable torch op without unrolling the iterations.
"""

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import DimensionError, NumericalError, ValidationError
from . import _fallback
from .backend import get_kernel

ETA = 1e-6


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.05
    max_iter: int = 100
    tol: float = 1e-6
    log_domain: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValidationError(f"epsilon must be > 0, got {self.epsilon}")
        if self.max_iter < 1:
            raise ValidationError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.tol < 0:
            raise ValidationError(f"tol must be >= 0, got {self.tol}")


@dataclass
class Distribution:
    mass: np.ndarray
    support_coords: np.ndarray | None = None

    def __post_init__(self):
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if self.mass.ndim != 1:
            raise DimensionError("Distribution mass must be a vector")
        if np.any(self.mass < 0) or abs(self.mass.sum() - 1.0) > 1e-9:
            raise ValidationError("mass must be non-negative and sum to 1")
        if self.support_coords is not None:
            self.support_coords = np.asarray(self.support_coords, dtype=np.float64)
            if self.support_coords.shape != (self.mass.size, 2):
                raise DimensionError("support_coords must have shape (n, 2)")

    @classmethod
    def from_map(cls, values, grid_shape=None, eta=ETA):
        """Normalise a flattened map; attach row-major grid coords if ``grid_shape`` given."""
        mass = normalize_to_simplex(np.asarray(values, dtype=np.float64), eta)
        coords = grid_coords(*grid_shape) if grid_shape is not None else None
        return cls(mass, coords)


@dataclass
class CostMatrix:
    data: np.ndarray | torch.Tensor
    beta_intensity: float = 1.0


@dataclass
class TransportPlan:
    plan: np.ndarray
    marginal_err: np.ndarray | float
    f: np.ndarray
    g: np.ndarray
    n_iter: np.ndarray | int
    converged: np.ndarray | bool
    objective: np.ndarray | float


def grid_coords(w, h):
    """Row-major (i-major, then j) integer coordinates of a ``w x h`` grid."""
    ii, jj = np.meshgrid(np.arange(w), np.arange(h), indexing="ij")
    return np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.float64)


def normalize_to_simplex(values, eta=ETA):
    """Clamp to [0, 1], add ``eta`` and rescale the last axis to sum to one.

    Works on numpy arrays and torch tensors (differentiable). An all-zero
    map becomes uniform.
    """
    if isinstance(values, torch.Tensor):
        if not torch.isfinite(values).all():
            raise ValidationError("map contains non-finite values")
        v = values.clamp(0.0, 1.0) + eta
        return v / v.sum(dim=-1, keepdim=True)
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValidationError("map contains non-finite values")
    v = np.clip(values, 0.0, 1.0) + eta
    return v / v.sum(axis=-1, keepdims=True)


def build_cost(map_a, map_b, coords, beta=1.0):
    """Ground cost mixing spatial distance and intensity difference.

    ``C[i, j] = |x_i - x_j| / diag + beta * |map_a[i] - map_b[j]|`` where
    ``diag`` is the diagonal of the bounding box of ``coords``. Maps may carry
    leading batch dims; torch inputs stay differentiable.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if n == 0:
        raise ValidationError("cost matrix needs at least one support point")
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DimensionError(f"coords must be (n, 2), got {coords.shape}")
    span = coords.max(axis=0) - coords.min(axis=0)
    diag = float(np.hypot(*span)) or 1.0
    spatial = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1) / diag

    if isinstance(map_a, torch.Tensor) or isinstance(map_b, torch.Tensor):
        a = torch.as_tensor(map_a)
        b = torch.as_tensor(map_b, dtype=a.dtype)
        if a.shape[-1] != n or b.shape[-1] != n:
            raise DimensionError("map lengths must match the number of coords")
        spatial_t = torch.as_tensor(spatial, dtype=a.dtype)
        data = spatial_t + beta * (a[..., :, None] - b[..., None, :]).abs()
    else:
        a = np.asarray(map_a, dtype=np.float64)
        b = np.asarray(map_b, dtype=np.float64)
        if a.shape[-1] != n or b.shape[-1] != n:
            raise DimensionError("map lengths must match the number of coords")
        data = spatial + beta * np.abs(a[..., :, None] - b[..., None, :])
    return CostMatrix(data, beta)


def _as_batch(x):
    if isinstance(x, Distribution):
        x = x.mass
    elif isinstance(x, CostMatrix):
        x = x.data
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _solve(P, Q, C, cfg, backend=None):
    """Run the solver on batched float64 arrays ``(m, n)``, ``(m, n)``, ``(m, n, n)``."""
    if P.shape != Q.shape or C.shape != P.shape + (P.shape[-1],):
        raise DimensionError(f"shape mismatch: P {P.shape}, Q {Q.shape}, C {C.shape}")
    with np.errstate(divide="ignore"):
        logP, logQ = np.log(P), np.log(Q)
    if cfg.log_domain:
        kernel = get_kernel(backend)
        f, g, n_iter, err = kernel(
            np.ascontiguousarray(logP),
            np.ascontiguousarray(logQ),
            np.ascontiguousarray(C),
            float(cfg.epsilon),
            int(cfg.max_iter),
            float(cfg.tol),
        )
    else:
        out = [_fallback.sinkhorn_scaling(p, q, c, cfg.epsilon, cfg.max_iter, cfg.tol)
               for p, q, c in zip(P, Q, C)]
        f = np.stack([o[0] for o in out])
        g = np.stack([o[1] for o in out])
        n_iter = np.array([o[2] for o in out])
        err = np.array([o[3] for o in out])
    if not (np.all(np.isfinite(err)) and np.all(np.isfinite(f[P > 0])) and np.all(np.isfinite(g[Q > 0]))):
        raise NumericalError("Sinkhorn scaling produced non-finite values")
    with np.errstate(invalid="ignore"):
        logplan = logP[:, :, None] + logQ[:, None, :] + (f[:, :, None] + g[:, None, :] - C) / cfg.epsilon
    plan = np.exp(logplan)
    plan[~np.isfinite(plan)] = 0.0
    return f, g, plan, n_iter, err


def sinkhorn(P, Q, C, cfg=None, backend=None):
    """Entropic OT between ``P`` and ``Q`` under ground cost ``C``.

    Accepts single problems (vectors plus an ``(n, n)`` cost) or batches with
    one leading axis. Never raises on non-convergence: inspect
    ``plan.converged`` / ``plan.marginal_err``.

    Returns
    -------
    distance : float or ndarray
        ``<gamma*, C>`` per problem.
    plan : TransportPlan
    """
    cfg = cfg or SinkhornConfig()
    P, Q, C = _as_batch(P), _as_batch(Q), _as_batch(C)
    single = P.ndim == 1
    if single:
        P, Q, C = P[None], Q[None], C[None]
    f, g, plan, n_iter, err = _solve(P, Q, C, cfg, backend)
    distance = np.einsum("kij,kij->k", plan, C)
    objective = np.where(P > 0, f * P, 0.0).sum(1) + np.where(Q > 0, g * Q, 0.0).sum(1)
    tp = TransportPlan(plan, err, f, g, n_iter, err <= cfg.tol, objective)
    if single:
        tp = TransportPlan(plan[0], float(err[0]), f[0], g[0], int(n_iter[0]),
                           bool(err[0] <= cfg.tol), float(objective[0]))
        return float(distance[0]), tp
    return distance, tp


class _EntropicOT(torch.autograd.Function):
    @staticmethod
    def forward(ctx, P, Q, C, cfg, backend):
        f, g, plan, n_iter, err = _solve(_as_batch(P), _as_batch(Q), _as_batch(C), cfg, backend)
        value = (f * _as_batch(P)).sum(1) + (g * _as_batch(Q)).sum(1)
        opts = dict(dtype=P.dtype, device=P.device)
        ctx.save_for_backward(torch.as_tensor(f, **opts), torch.as_tensor(g, **opts),
                              torch.as_tensor(plan, **opts))
        ctx.marginal_err = err
        return torch.as_tensor(value, **opts)

    @staticmethod
    def backward(ctx, grad_out):
        f, g, plan = ctx.saved_tensors
        return (grad_out[:, None] * f, grad_out[:, None] * g,
                grad_out[:, None, None] * plan, None, None)


def entropic_ot(P, Q, C, cfg=None, backend=None):
    """Differentiable regularised OT objective for batches of problems.

    ``P``, ``Q``: tensors ``(m, n)`` on the simplex (strictly positive);
    ``C``: ``(m, n, n)``. Returns a ``(m,)`` tensor. Gradients use the
    converged potentials, so they are exact up to the marginal error of
    the solve.
    """
    cfg = cfg or SinkhornConfig()
    if P.dim() != 2 or P.shape != Q.shape or C.shape != P.shape + (P.shape[-1],):
        raise DimensionError(f"expected (m,n),(m,n),(m,n,n); got {tuple(P.shape)}, "
                             f"{tuple(Q.shape)}, {tuple(C.shape)}")
    return _EntropicOT.apply(P, Q, C, cfg, backend)
