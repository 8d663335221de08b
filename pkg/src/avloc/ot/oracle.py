"""Exact small-instance EMD, used as a test oracle for the Sinkhorn engine."""

import numpy as np
from scipy.optimize import linprog

from ..errors import DimensionError, ValidationError
from .sinkhorn import CostMatrix, Distribution

MAX_ORACLE_SIZE = 12


def exact_emd_oracle(P, Q, C):
    """Exact optimal transport cost by linear programming.

    Solves ``min <gamma, C>`` over couplings of ``P`` and ``Q``. Limited to
    ``n <= 12`` bins.
    """
    P = np.asarray(P.mass if isinstance(P, Distribution) else P, dtype=np.float64)
    Q = np.asarray(Q.mass if isinstance(Q, Distribution) else Q, dtype=np.float64)
    C = np.asarray(C.data if isinstance(C, CostMatrix) else C, dtype=np.float64)
    n = P.size
    if n > MAX_ORACLE_SIZE:
        raise ValidationError(f"exact oracle limited to n <= {MAX_ORACLE_SIZE}, got {n}")
    if Q.size != n or C.shape != (n, n):
        raise DimensionError("P, Q and C sizes disagree")
    # row-sum and column-sum constraints on the flattened plan
    A_eq = np.vstack([np.kron(np.eye(n), np.ones(n)), np.kron(np.ones(n), np.eye(n))])
    b_eq = np.concatenate([P, Q])
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise ValidationError(f"transport LP failed: {res.message}")
    return float(res.fun)
