"""Self-supervised objectives over two batches of projected views.

All losses are built from taped ops, so they differentiate through the
encoder. Coefficient defaults follow each method's original publication;
only the SimCLR temperature default (0.5) is specific to this simulator's
experimental protocol.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import ops
from .engine.tensor import Tensor
from .errors import ConfigError, ContractError, DegenerateBatchError, DimensionError

METHODS = ("simclr", "simsiam", "barlow", "vicreg", "tico")
NON_CONTRASTIVE = ("simsiam", "barlow", "vicreg", "tico")

BARLOW_EPS = 1e-9
VICREG_STD_EPS = 1e-4


@dataclass(frozen=True)
class SslConfig:
    method: str = "barlow"
    temperature: float = 0.5
    barlow_lambda: float = 5e-3
    vicreg_inv: float = 25.0
    vicreg_var: float = 25.0
    vicreg_cov: float = 1.0
    vicreg_gamma: float = 1.0
    tico_beta: float = 0.9
    tico_rho: float = 8.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown SSL method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.vicreg_gamma <= 0:
            raise ConfigError("vicreg_gamma must be positive")
        if not 0 <= self.tico_beta <= 1:
            raise ConfigError("tico_beta must lie in [0, 1]")


@dataclass
class FeatureMemory:
    """Exponential average of embedding second moments (TiCo)."""

    matrix: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @classmethod
    def zeros(cls, dim: int) -> "FeatureMemory":
        return cls(np.zeros((dim, dim)))


def _pair(z1: Tensor, z2: Tensor, name: str, min_rows: int = 2) -> tuple[int, int]:
    if z1.ndim != 2 or z1.shape != z2.shape:
        raise DimensionError(f"{name}: views must be matrices of equal shape, got {z1.shape} and {z2.shape}")
    n, d = z1.shape
    if n < min_rows:
        raise DegenerateBatchError(f"{name} needs at least {min_rows} rows, got {n}")
    return n, d


def info_nce(z1: Tensor, z2: Tensor, temperature: float = 0.5) -> Tensor:
    """NT-Xent over the 2N stacked, l2-normalized embeddings."""
    n, _ = _pair(z1, z2, "info_nce")
    z = ops.l2_normalize_rows(ops.concat([z1, z2]))
    partner = ops.l2_normalize_rows(ops.concat([z2, z1]))
    inv_t = 1.0 / temperature
    sim = ops.scale(ops.matmul(z, ops.transpose(z)), inv_t)
    # cosine <= 1 so subtracting 1/t bounds every exponent by 0
    not_self = 1.0 - np.eye(2 * n)
    expd = ops.mul(ops.exp(ops.sub(sim, inv_t)), not_self)
    log_denom = ops.log(ops.sum(expd, axis=1))
    pos = ops.sub(ops.scale(ops.sum(ops.mul(z, partner), axis=1), inv_t), inv_t)
    return ops.mean(ops.sub(log_denom, pos))


def _neg_cosine(p: Tensor, z: Tensor) -> Tensor:
    pn, zn = ops.l2_normalize_rows(p), ops.l2_normalize_rows(z)
    return ops.scale(ops.mean(ops.sum(ops.mul(pn, zn), axis=1)), -1.0)


def simsiam_loss(p1: Tensor, p2: Tensor, z1: Tensor, z2: Tensor) -> Tensor:
    """Symmetrized negative cosine between predictions and stop-gradient targets.

    ``z1`` and ``z2`` must already be detached; pass ``z.detach()``.
    """
    _pair(p1, p2, "simsiam", min_rows=1)
    _pair(z1, z2, "simsiam", min_rows=1)
    if z1.is_taped or z2.is_taped or z1.requires_grad or z2.requires_grad:
        raise ContractError("simsiam targets must be detached from the tape (use z.detach())")
    return ops.add(ops.scale(_neg_cosine(p1, z2), 0.5), ops.scale(_neg_cosine(p2, z1), 0.5))


def _standardize(z: Tensor) -> Tensor:
    centered = ops.sub(z, ops.mean(z, axis=0, keepdims=True))
    std = ops.sqrt(ops.add(ops.mean(ops.square(centered), axis=0, keepdims=True), BARLOW_EPS))
    return ops.div(centered, std)


def barlow_loss(z1: Tensor, z2: Tensor, lambd: float = 5e-3) -> Tensor:
    n, d = _pair(z1, z2, "barlow")
    c = ops.scale(ops.matmul(ops.transpose(_standardize(z1)), _standardize(z2)), 1.0 / n)
    eye = np.eye(d)
    on_diag = ops.sum(ops.square(ops.mul(ops.sub(c, eye), eye)))
    off_diag = ops.sum(ops.square(ops.mul(c, 1.0 - eye)))
    return ops.add(on_diag, ops.scale(off_diag, lambd))


def _variance_term(z: Tensor, gamma: float) -> Tensor:
    std = ops.sqrt(ops.add(ops.var(z, axis=0, ddof=1), VICREG_STD_EPS))
    return ops.mean(ops.relu(ops.sub(gamma, std)))


def _covariance_term(z: Tensor) -> Tensor:
    n, d = z.shape
    centered = ops.sub(z, ops.mean(z, axis=0, keepdims=True))
    cov = ops.scale(ops.matmul(ops.transpose(centered), centered), 1.0 / (n - 1))
    return ops.scale(ops.sum(ops.square(ops.mul(cov, 1.0 - np.eye(d)))), 1.0 / d)


def vicreg_loss(
    z1: Tensor,
    z2: Tensor,
    inv_weight: float = 25.0,
    var_weight: float = 25.0,
    cov_weight: float = 1.0,
    gamma: float = 1.0,
) -> Tensor:
    _pair(z1, z2, "vicreg")
    invariance = ops.mean(ops.square(ops.sub(z1, z2)))
    variance = ops.add(_variance_term(z1, gamma), _variance_term(z2, gamma))
    covariance = ops.add(_covariance_term(z1), _covariance_term(z2))
    return ops.add(ops.add(ops.scale(invariance, inv_weight), ops.scale(variance, var_weight)),
                   ops.scale(covariance, cov_weight))


def tico_loss(
    z1: Tensor,
    z2: Tensor,
    memory: FeatureMemory,
    beta: float = 0.9,
    rho: float = 8.0,
) -> tuple[Tensor, FeatureMemory]:
    """Alignment plus a penalty against directions already held in memory.

    The memory is updated first from the detached ``z1`` and then used as a
    constant in the penalty. Rows of both views must be unit-norm.
    """
    n, d = _pair(z1, z2, "tico", min_rows=1)
    for z in (z1, z2):
        norms = np.linalg.norm(z.data, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ContractError("tico expects l2-normalized rows")
    mem = memory.matrix if memory.matrix.size else np.zeros((d, d))
    if mem.shape != (d, d):
        raise DimensionError(f"feature memory is {mem.shape}, embeddings have dim {d}")
    zd = z1.data
    updated = beta * mem + (1.0 - beta) * (zd.T @ zd) / n
    align = ops.scale(ops.mean(ops.sum(ops.mul(z1, z2), axis=1)), -1.0)
    penalty = ops.scale(ops.mean(ops.sum(ops.mul(ops.matmul(z1, Tensor(updated)), z1), axis=1)), rho)
    return ops.add(align, penalty), FeatureMemory(updated)
