"""
Reconstruction and KL terms composed into the introspective encoder and
decoder losses

Both losses are minimized. The encoder loss

    s * (b_rec * Lr(X) + b_kl * KL(X)) + mean_b 0.5 * exp(-2s * (b_rec * Lr_b + b_neg * KL_b))

pushes generated samples away (its derivative in every generated term is
<= 0); the decoder loss

    s * b_rec * Lr(X) + s * (b_kl * mean_b KL_b + gamma_r * b_rec * mean_b Lr_b)

pulls them back. b runs over the generated branches (reconstructions and
prior samples); with one branch these reduce to the single-sample forms.
"""
from dataclasses import dataclass
from typing import Sequence, Tuple

from mmnorm.core import numkit as nk
from mmnorm.core.numkit import Tensor
from mmnorm.models.schemas import LossHyper
from mmnorm.utils.errors import ContractError, DimensionError


@dataclass(frozen=True)
class TermBundle:
    """Scalar (1x1) loss terms for real data and for each generated branch"""
    recon_real: Tensor
    kl_real: Tensor
    recon_fake: Tuple[Tensor, ...] = ()
    kl_fake: Tuple[Tensor, ...] = ()

    def __post_init__(self):
        if len(self.recon_fake) != len(self.kl_fake):
            raise ContractError(
                "one KL per generated reconstruction term is required",
                recon=len(self.recon_fake), kl=len(self.kl_fake),
            )


def recon_error(x: Sequence[Tensor], x_hat: Sequence[Tensor], reduction: str = "mean") -> Tensor:
    """
    Reconstruction error summed over modalities, averaged over subjects

    reduction="mean" averages squared errors over each modality's features;
    reduction="sum" sums them per subject.
    """
    if len(x) != len(x_hat) or not x:
        raise ContractError("one reconstruction per modality is required", x=len(x), x_hat=len(x_hat))
    if reduction not in ("mean", "sum"):
        raise ContractError("reduction must be 'mean' or 'sum'", reduction=reduction)
    total = None
    for target, recon in zip(x, x_hat):
        if target.shape != recon.shape:
            raise DimensionError("reconstruction shape mismatch", target=target.shape, recon=recon.shape)
        sq = nk.square(target - recon)
        term = nk.mean(sq) if reduction == "mean" else nk.scale(nk.sum(sq), 1.0 / sq.shape[0])
        total = term if total is None else total + term
    return total


def _require_scale(h: LossHyper) -> float:
    if h.s is None:
        raise ContractError("loss scale s is unresolved; call LossHyper.resolved first")
    return h.s


def _branch_mean(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return nk.scale(total, 1.0 / len(terms))


def elbo_loss(terms: TermBundle, h: LossHyper) -> Tensor:
    """s * (b_rec * Lr(X) + b_kl * KL(X)), the plain multimodal VAE loss"""
    s = _require_scale(h)
    return nk.scale(nk.scale(terms.recon_real, h.beta_rec) + nk.scale(terms.kl_real, h.beta_kl), s)


def encoder_loss(terms: TermBundle, h: LossHyper) -> Tensor:
    if not terms.recon_fake:
        raise ContractError("encoder loss needs at least one generated branch")
    s = _require_scale(h)
    real = elbo_loss(terms, h)
    exp_terms = []
    for recon, kl in zip(terms.recon_fake, terms.kl_fake):
        fake = nk.scale(recon, h.beta_rec) + nk.scale(kl, h.beta_neg)
        # analytically <= 0 because the terms are nonnegative; clamp guards fp noise
        exponent = nk.clamp(nk.scale(fake, -2.0 * s), hi=0.0)
        exp_terms.append(nk.scale(nk.exp(exponent), 0.5))
    return real + _branch_mean(exp_terms)


def decoder_loss(terms: TermBundle, h: LossHyper) -> Tensor:
    if not terms.recon_fake:
        raise ContractError("decoder loss needs at least one generated branch")
    s = _require_scale(h)
    real = nk.scale(terms.recon_real, s * h.beta_rec)
    kl_fake = nk.scale(_branch_mean(terms.kl_fake), h.beta_kl)
    recon_fake = nk.scale(_branch_mean(terms.recon_fake), h.gamma_r * h.beta_rec)
    return real + nk.scale(kl_fake + recon_fake, s)
