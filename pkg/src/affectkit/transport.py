"""Entropy-regularised optimal transport between regions and stimulus texts.

Sinkhorn solves ``min_P <W, P> - eps * H(P)`` over plans with marginals
``(a, b)`` by alternately rescaling the rows and columns of ``K = exp(-W/eps)``.
When ``K`` underflows the solver switches to log-domain potentials.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import diffcore as dc
from .contrastive import symmetric_cross_entropy
from .diffcore import Tensor

LOG_DOMAIN_THRESHOLD = 1e-300
MAX_BRUTE_FORCE = 8


class TransportError(ValueError):
    pass


@dataclass
class CostMatrix:
    values: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        r, c = self.values.shape
        if self.a.shape != (r,) or self.b.shape != (c,):
            raise TransportError(f"marginals {self.a.shape}, {self.b.shape} do not fit cost {self.values.shape}")
        if np.any(self.a < 0) or np.any(self.b < 0):
            raise TransportError("marginals must be non-negative")
        if abs(self.a.sum() - 1.0) > 1e-12 or abs(self.b.sum() - 1.0) > 1e-12:
            raise TransportError("marginals must each sum to 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def uniform(cls, W) -> "CostMatrix":
        W = np.asarray(W, dtype=np.float64)
        r, c = W.shape
        return cls(W, np.full(r, 1.0 / r), np.full(c, 1.0 / c))


@dataclass
class TransportPlan:
    values: np.ndarray
    epsilon: float
    iterations: int
    converged: bool
    violation: float
    log_domain: bool = False
    history: list[float] = field(default_factory=list, repr=False)
    # final column scaling; pass back as ``init`` to warm-start a nearby problem
    scaling: np.ndarray | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def cost(self, W) -> float:
        return float(np.sum(np.asarray(W) * self.values))

    def entropy(self) -> float:
        p = self.values[self.values > 0]
        return float(-np.sum(p * np.log(p)))

    def to_dict(self) -> dict:
        return {
            "shape": list(self.values.shape),
            "epsilon": self.epsilon,
            "iterations": self.iterations,
            "converged": self.converged,
            "violation": self.violation,
            "log_domain": self.log_domain,
            "values": self.values.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def cost_from_similarity(S) -> CostMatrix:
    """``W = 1 - S`` with uniform marginals over rows and columns."""
    S = np.asarray(S.value if isinstance(S, Tensor) else S, dtype=np.float64)
    if S.ndim != 2:
        raise TransportError(f"similarity must be a matrix, got shape {S.shape}")
    return CostMatrix.uniform(1.0 - S)


def _violation(P_rows, P_cols, a, b) -> float:
    return float(max(np.max(np.abs(P_rows - a)), np.max(np.abs(P_cols - b))))


def sinkhorn(
    cost: CostMatrix,
    epsilon: float = 0.05,
    max_iters: int = 1000,
    tol: float = 1e-9,
    log_domain: bool | None = None,
    init: np.ndarray | None = None,
) -> TransportPlan:
    """Entropic transport plan for ``cost``.

    ``log_domain=None`` picks the stabilised solver automatically when
    ``min(exp(-W/eps)) < 1e-300``; ``False`` forces the plain scaling and
    raises if the kernel underflows. ``init`` is a starting column scaling,
    typically ``plan.scaling`` from a previous solve on a similar cost.
    """
    if not epsilon > 0:
        raise TransportError(f"epsilon must be positive, got {epsilon}")
    W, a, b = cost.values, cost.a, cost.b
    K = np.exp(-W / epsilon)
    if log_domain is None:
        log_domain = bool(K.min() < LOG_DOMAIN_THRESHOLD)
    if init is not None:
        init = np.asarray(init, dtype=np.float64)
        if init.shape != b.shape or not np.all(init > 0) or not np.all(np.isfinite(init)):
            init = None
    if log_domain:
        return _sinkhorn_log(W, a, b, epsilon, max_iters, tol, init)

    if np.any(K.sum(axis=1) == 0) or np.any(K.sum(axis=0) == 0):
        raise TransportError(
            f"exp(-W/eps) underflows to an all-zero row or column at eps={epsilon}; use log_domain=True"
        )
    v = np.ones_like(b) if init is None else init.copy()
    Kv = K @ v
    history = []
    violation = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        u = a / Kv
        Ktu = u @ K
        v = b / Ktu
        Kv = K @ v
        # columns match b up to roundoff after the v-update; rows carry the error
        violation = _violation(u * Kv, v * Ktu, a, b)
        history.append(violation)
        if violation < tol:
            break
    P = u[:, None] * K * v[None, :]
    return TransportPlan(P, epsilon, it, violation < tol, violation, False, history, v)


def _sinkhorn_log(W, a, b, epsilon, max_iters, tol, init=None) -> TransportPlan:
    with np.errstate(divide="ignore"):
        log_a, log_b = np.log(a), np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b) if init is None else epsilon * np.log(init)
    history = []
    violation = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        f = epsilon * (log_a - logsumexp((g[None, :] - W) / epsilon, axis=1))
        g = epsilon * (log_b - logsumexp((f[:, None] - W) / epsilon, axis=0))
        P = np.exp((f[:, None] + g[None, :] - W) / epsilon)
        violation = _violation(P.sum(axis=1), P.sum(axis=0), a, b)
        history.append(violation)
        if violation < tol:
            break
    P = np.exp((f[:, None] + g[None, :] - W) / epsilon)
    with np.errstate(over="ignore"):
        v = np.exp(g / epsilon)
    return TransportPlan(P, epsilon, it, violation < tol, violation, True, history, v)


def brute_force_assignment(cost) -> tuple[tuple[int, ...], float]:
    """Exhaustive optimal assignment for a square cost with ``n <= 8``.

    Returns the permutation (``perm[i]`` is row ``i``'s column) and its mean
    cost ``sum_i W[i, perm[i]] / n``. Ties keep the lexicographically first
    permutation.
    """
    W = np.asarray(cost.values if isinstance(cost, CostMatrix) else cost, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise TransportError(f"brute_force_assignment needs a square cost, got {W.shape}")
    n = W.shape[0]
    if n > MAX_BRUTE_FORCE:
        raise TransportError(f"brute_force_assignment is limited to n <= {MAX_BRUTE_FORCE}, got {n}")
    rows = np.arange(n)
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(n)):
        c = W[rows, perm].sum()
        if c < best_cost:
            best, best_cost = perm, c
    return tuple(int(p) for p in best), float(best_cost / n)


def ot_loss(plan, S: Tensor, scale: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """Symmetric cross-entropy on logits ``scale * (plan * S)`` with diagonal targets.

    The plan is a constant: no gradient flows back through Sinkhorn.
    ``mask`` optionally restricts both softmaxes (used for per-image transport).
    """
    P = np.asarray(plan.values if isinstance(plan, TransportPlan) else plan, dtype=np.float64)
    if not isinstance(S, Tensor):
        S = dc.Graph().const(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise TransportError(f"ot_loss needs a square similarity matrix, got {S.shape}")
    if P.shape != S.shape:
        raise TransportError(f"plan shape {P.shape} does not match similarity shape {S.shape}")
    return symmetric_cross_entropy(dc.mul(S, P * scale), mask)
