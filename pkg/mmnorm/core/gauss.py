"""
Diagonal-Gaussian algebra on tape tensors

Every function works row-wise on a batch: a DiagGaussian holds n x d mean
and log-variance matrices, one posterior per subject row.
"""
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mmnorm.core import numkit as nk
from mmnorm.core.numkit import Tape, Tensor
from mmnorm.utils.errors import ContractError, DimensionError

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
LOG_2PI = math.log(2.0 * math.pi)
WEIGHT_TOLERANCE = 1e-12


@dataclass(frozen=True)
class DiagGaussian:
    """Factorized Gaussian N(mu, diag(exp(logvar))), one row per subject"""
    mu: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise DimensionError("mu and logvar differ in shape", mu=self.mu.shape, logvar=self.logvar.shape)

    @property
    def rows(self) -> int:
        return self.mu.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    @classmethod
    def constant(cls, tape: Tape, mu, logvar) -> "DiagGaussian":
        return cls(tape.constant(mu), tape.constant(logvar))

    @classmethod
    def standard(cls, tape: Tape, rows: int, dim: int) -> "DiagGaussian":
        """The prior N(0, I)"""
        return cls.constant(tape, np.zeros((rows, dim)), np.zeros((rows, dim)))


def clamp_logvar(logvar: Tensor) -> Tensor:
    return nk.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)


def kl_to_std_normal(q: DiagGaussian) -> Tensor:
    """Closed-form KL(q || N(0, I)) per row, as an n x 1 column"""
    terms = nk.exp(q.logvar) + nk.square(q.mu) - 1.0 - q.logvar
    return nk.scale(nk.sum(terms, axis=1), 0.5)


def reparam_sample(q: DiagGaussian, eps) -> Tensor:
    """mu + exp(logvar / 2) * eps, differentiable in mu and logvar"""
    tape = q.mu.tape
    eps = eps if isinstance(eps, Tensor) else tape.constant(eps)
    if eps.shape != q.mu.shape:
        raise DimensionError("noise shape differs from the posterior", eps=eps.shape, mu=q.mu.shape)
    return q.mu + nk.exp(nk.scale(q.logvar, 0.5)) * eps


def log_density(q: DiagGaussian, z: Tensor) -> Tensor:
    """log q(z) per row, n x 1"""
    resid = nk.square(z - q.mu) * nk.exp(nk.neg(q.logvar))
    return nk.scale(nk.sum(resid + q.logvar + LOG_2PI, axis=1), -0.5)


def log_std_normal(z: Tensor) -> Tensor:
    return nk.scale(nk.sum(nk.square(z) + LOG_2PI, axis=1), -0.5)


def product_of_experts(experts: Sequence[DiagGaussian], include_prior: bool = True) -> DiagGaussian:
    """
    Closed-form product of Gaussian experts

    Precision T = sum_i T_i (+1 for the N(0, I) prior expert); the mean is the
    precision-weighted average of the expert means.
    """
    if not experts:
        raise ContractError("product_of_experts needs at least one expert", include_prior=include_prior)
    dims = {q.mu.shape for q in experts}
    if len(dims) != 1:
        raise DimensionError("experts differ in shape", shapes=sorted(dims))
    if len(experts) == 1 and not include_prior:
        return experts[0]

    precisions = [nk.exp(nk.neg(q.logvar)) for q in experts]
    total = precisions[0]
    weighted = experts[0].mu * precisions[0]
    for q, t in zip(experts[1:], precisions[1:]):
        total = total + t
        weighted = weighted + q.mu * t
    if include_prior:
        # prior mean is zero, so it only adds unit precision
        total = total + 1.0
    return DiagGaussian(mu=weighted / total, logvar=nk.neg(nk.log(total)))


def _check_weights(weights: np.ndarray, count: int) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (count,):
        raise ContractError("one weight per component is required", weights=weights.shape, components=count)
    if (weights < 0).any() or abs(weights.sum() - 1.0) > WEIGHT_TOLERANCE:
        raise ContractError("mixture weights must be nonnegative and sum to 1", total=float(weights.sum()))
    return weights


def stratified_indices(rows: int, weights: np.ndarray, offset: float = 0.5) -> np.ndarray:
    """
    Deterministic component assignment for a batch

    Equal weights cycle through components row by row; unequal weights use
    systematic allocation so each component receives about w_k * rows rows.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if np.allclose(weights, weights[0]):
        return np.arange(rows) % len(weights)
    positions = (np.arange(rows) + offset) / rows
    return np.minimum(np.searchsorted(np.cumsum(weights), positions, side="right"), len(weights) - 1)


def mixture_sample(
    components: Sequence[DiagGaussian],
    weights: np.ndarray,
    eps_index: np.ndarray,
    eps,
) -> Tensor:
    """
    Reparameterized draw from a mixture: row i samples component eps_index[i]

    Args:
        components: K posteriors of identical shape n x d
        weights: K nonnegative weights summing to 1 (checked only)
        eps_index: length-n component selector
        eps: n x d standard-normal noise
    """
    if not components:
        raise ContractError("mixture needs at least one component")
    _check_weights(weights, len(components))
    if len(components) == 1:
        return reparam_sample(components[0], eps)

    eps_index = np.asarray(eps_index)
    rows, dim = components[0].mu.shape
    if eps_index.shape != (rows,):
        raise DimensionError("one selector per row is required", selector=eps_index.shape, rows=rows)
    draw = None
    for k, q in enumerate(components):
        mask = np.repeat((eps_index == k).astype(np.float64)[:, None], dim, axis=1)
        part = reparam_sample(q, eps) * mask
        draw = part if draw is None else draw + part
    return draw


def mixture_log_density(components: Sequence[DiagGaussian], weights: np.ndarray, z: Tensor) -> Tensor:
    """log sum_k w_k q_k(z) per row via log-sum-exp"""
    log_w = np.log(np.asarray(weights, dtype=np.float64))[None, :]
    stacked = nk.concat_cols([log_density(q, z) for q in components])
    return nk.logsumexp(stacked + log_w, axis=1)


def mixture_kl_to_std_normal(
    components: Sequence[DiagGaussian],
    weights: np.ndarray,
    eps: np.ndarray,
) -> Tensor:
    """
    Monte Carlo KL(mixture || N(0, I)) per row, n x 1

    For every draw and every component k a reparameterized z_k ~ q_k is taken
    with the shared noise eps[draw]; the estimate is
    mean_draws sum_k w_k [log mix(z_k) - log p(z_k)].

    Args:
        eps: array of shape (n_mc, n, d)
    """
    if not components:
        raise ContractError("mixture needs at least one component")
    weights = _check_weights(weights, len(components))
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim != 3 or eps.shape[0] < 1 or eps.shape[1:] != components[0].mu.shape:
        raise DimensionError(
            "noise must have shape (n_mc, rows, dim)", eps=eps.shape, mu=components[0].mu.shape
        )

    n_mc = eps.shape[0]
    total = None
    for draw in range(n_mc):
        for k, q in enumerate(components):
            z = reparam_sample(q, eps[draw])
            gap = mixture_log_density(components, weights, z) - log_std_normal(z)
            term = nk.scale(gap, weights[k] / n_mc)
            total = term if total is None else total + term
    return total
