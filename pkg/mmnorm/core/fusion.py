"""
Joint posterior from unimodal posteriors: PoE, MoE and mixture of PoE subsets
"""
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Optional, Sequence, Tuple

import numpy as np

from mmnorm.core import gauss
from mmnorm.core import numkit as nk
from mmnorm.core.gauss import DiagGaussian
from mmnorm.core.numkit import Tensor
from mmnorm.utils.errors import ContractError, DimensionError

Subset = Tuple[int, ...]


class FusionMethod(str, Enum):
    POE = "poe"
    MOE = "moe"
    MOPOE = "mopoe"


def enumerate_subsets(n_modalities: int) -> Tuple[Subset, ...]:
    """Non-empty subsets of modality indices in binary-counter order"""
    return tuple(
        tuple(i for i in range(n_modalities) if mask >> i & 1)
        for mask in range(1, 2 ** n_modalities)
    )


@dataclass(frozen=True)
class FusionSpec:
    """
    Aggregation scheme

    `subsets` overrides the list derived from `method`; it exists so a mixture
    of PoE can be restricted to any explicit family of subsets.
    """
    method: FusionMethod = FusionMethod.MOPOE
    include_prior_in_subsets: bool = True
    subsets: Optional[Tuple[Subset, ...]] = None

    def subset_list(self, n_modalities: int) -> Tuple[Subset, ...]:
        if n_modalities < 1:
            raise ContractError("fusion needs at least one modality")
        if self.subsets is not None:
            subsets = tuple(tuple(s) for s in self.subsets)
            if not subsets or any(not s for s in subsets):
                raise ContractError("explicit subsets must be non-empty", subsets=subsets)
            if any(i < 0 or i >= n_modalities for s in subsets for i in s):
                raise ContractError("subset refers to an unknown modality", subsets=subsets)
            return subsets
        if self.method is FusionMethod.POE:
            return (tuple(range(n_modalities)),)
        if self.method is FusionMethod.MOE:
            return tuple((i,) for i in range(n_modalities))
        return enumerate_subsets(n_modalities)

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "include_prior_in_subsets": self.include_prior_in_subsets,
            "subsets": None if self.subsets is None else [list(s) for s in self.subsets],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FusionSpec":
        subsets = data.get("subsets")
        return cls(
            method=FusionMethod(data["method"]),
            include_prior_in_subsets=bool(data["include_prior_in_subsets"]),
            subsets=None if subsets is None else tuple(tuple(s) for s in subsets),
        )


@dataclass(frozen=True)
class MixturePosterior:
    """Uniformly weighted mixture of PoE components"""
    components: Tuple[DiagGaussian, ...]
    weights: np.ndarray
    subsets: Tuple[Subset, ...]

    @property
    def rows(self) -> int:
        return self.components[0].rows

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def sample(self, eps, eps_index: Optional[np.ndarray] = None) -> Tensor:
        """Stratified reparameterized sample, one component per row"""
        if eps_index is None:
            eps_index = gauss.stratified_indices(self.rows, self.weights)
        return gauss.mixture_sample(self.components, self.weights, eps_index, eps)

    def kl_to_prior(self, eps: np.ndarray) -> Tensor:
        """Per-row KL to N(0, I): closed form for one component, Monte Carlo otherwise"""
        if len(self.components) == 1:
            return gauss.kl_to_std_normal(self.components[0])
        return gauss.mixture_kl_to_std_normal(self.components, self.weights, eps)


def uniform_weights(count: int) -> np.ndarray:
    return np.full(count, float(Fraction(1, count)))


def fuse(unimodal: Sequence[DiagGaussian], spec: FusionSpec) -> MixturePosterior:
    """
    One PoE component per subset of spec.subset_list, uniform weights

    Args:
        unimodal: one posterior per modality, all n x d
        spec: aggregation scheme
    """
    if not unimodal:
        raise ContractError("fuse needs at least one modality posterior")
    shapes = {q.mu.shape for q in unimodal}
    if len(shapes) != 1:
        raise DimensionError("modality posteriors differ in shape", shapes=sorted(shapes))

    subsets = spec.subset_list(len(unimodal))
    components = tuple(
        gauss.product_of_experts([unimodal[i] for i in subset], spec.include_prior_in_subsets)
        for subset in subsets
    )
    return MixturePosterior(components=components, weights=uniform_weights(len(subsets)), subsets=subsets)


def joint_posterior_mean(mix: MixturePosterior) -> Tensor:
    """sum_k w_k mu_k"""
    total = None
    for q, w in zip(mix.components, mix.weights):
        part = nk.scale(q.mu, w)
        total = part if total is None else total + part
    return total
