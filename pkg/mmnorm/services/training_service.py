"""
Training Service
Alternating encoder/decoder updates of the multimodal introspective VAE

Per minibatch:
    1. encoder step: encode every modality, fuse, sample Z; decode Z and a
       prior draw Z_f; re-encode both generated batches (stop-gradient inputs),
       build the encoder loss and update encoder parameters only
    2. decoder step: decode the same Z and Z_f, re-encode them through frozen
       encoders, re-decode stop-gradient latents, build the decoder loss and
       update decoder parameters only
"""
import itertools
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from mmnorm.config import settings
from mmnorm.core import net
from mmnorm.core import numkit as nk
from mmnorm.core.fusion import FusionMethod, MixturePosterior, fuse
from mmnorm.core.net import Checkpoint, NetworkLayout
from mmnorm.core.numkit import Adam, Tape, Tensor
from mmnorm.core.objective import TermBundle, decoder_loss, elbo_loss, encoder_loss, recon_error
from mmnorm.models.schemas import EpochRecord, FusionConfig, TrainConfig
from mmnorm.services.dataset_service import MultimodalBatch, StandardizationStats, standardize
from mmnorm.utils.errors import ContractError, NumericError
from mmnorm.utils.io import PathLike, atomic_write_text

logger = logging.getLogger(__name__)

# Monte Carlo draws for the mixture KL inside a training step
TRAIN_MC_SAMPLES = 1


@dataclass(frozen=True)
class StepNoise:
    """All standard-normal noise consumed by one minibatch step"""
    z: np.ndarray
    prior: np.ndarray
    z_rec: np.ndarray
    z_fake: np.ndarray
    kl: np.ndarray
    kl_rec: np.ndarray
    kl_fake: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, rows: int, dim: int, n_mc: int = TRAIN_MC_SAMPLES) -> "StepNoise":
        return cls(
            z=rng.standard_normal((rows, dim)),
            prior=rng.standard_normal((rows, dim)),
            z_rec=rng.standard_normal((rows, dim)),
            z_fake=rng.standard_normal((rows, dim)),
            kl=rng.standard_normal((n_mc, rows, dim)),
            kl_rec=rng.standard_normal((n_mc, rows, dim)),
            kl_fake=rng.standard_normal((n_mc, rows, dim)),
        )


@dataclass(frozen=True)
class StepTerms:
    encoder_loss: float
    decoder_loss: float
    recon_real: float
    kl_real: float


@dataclass(frozen=True)
class EncoderPass:
    """Encoder-step loss and gradients plus the values the decoder step reuses"""
    loss: float
    recon_real: float
    kl_real: float
    grads: Dict[str, np.ndarray]
    z: np.ndarray
    generated: Tuple[Tuple[np.ndarray, ...], Tuple[np.ndarray, ...]]


@dataclass
class TrainLog:
    """One EpochRecord per completed epoch"""
    records: List[EpochRecord] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(record.model_dump_json() + "\n" for record in self.records)

    def write(self, path: PathLike) -> Path:
        return atomic_write_text(path, self.to_jsonl())

    @classmethod
    def read(cls, path: PathLike) -> "TrainLog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([EpochRecord.model_validate_json(line) for line in lines if line.strip()])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: TrainLog


def layout_for(batch: MultimodalBatch, cfg: TrainConfig) -> NetworkLayout:
    """Network shapes implied by a dataset and a training config"""
    return NetworkLayout(
        latent_dim=cfg.latent_dim,
        modality_widths=tuple((m, x.shape[1]) for m, x in batch.features.items()),
        covariate_width=batch.covariates.shape[1],
        encoder_hidden=tuple(cfg.encoder_hidden),
        decoder_hidden=tuple(cfg.decoder_hidden),
        encoder_covariates=cfg.encoder_covariates,
        decoder_covariates=cfg.decoder_covariates,
        activation=cfg.activation,
    )


class Trainer:
    """Holds parameters and the two optimizer groups of one training run"""

    def __init__(self, layout: NetworkLayout, cfg: TrainConfig, params: Optional[Mapping[str, np.ndarray]] = None):
        self.layout = layout
        self.cfg = cfg
        self.fusion = cfg.fusion.to_spec()
        self.hyper = cfg.loss.resolved(layout.total_features)
        self.params: Dict[str, np.ndarray] = dict(params) if params is not None else net.init_params(layout, cfg.seed)
        missing = set(layout.param_shapes()) - set(self.params)
        if missing:
            raise ContractError("parameters missing for layout", names=sorted(missing))
        # separate stream from weight init so both stay reproducible
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.encoder_opt = self._optimizer(layout.encoder_names())
        self.decoder_opt = self._optimizer(layout.decoder_names())
        self.last_terms: Optional[StepTerms] = None

    def _optimizer(self, names: Sequence[str]) -> Adam:
        return Adam(
            {n: self.params[n] for n in names},
            lr=self.cfg.learning_rate,
            beta1=self.cfg.adam_beta1,
            beta2=self.cfg.adam_beta2,
            eps=self.cfg.adam_eps,
        )

    # Forward pieces
    def _encode(self, usable: Mapping[str, Tensor], xs: Sequence[Tensor], c: Tensor) -> MixturePosterior:
        unimodal = [net.encode(usable, self.layout, m, x, c) for m, x in zip(self.layout.modalities, xs)]
        return fuse(unimodal, self.fusion)

    def _decode(self, usable: Mapping[str, Tensor], z: Tensor, c: Tensor) -> List[Tensor]:
        return [net.decode(usable, self.layout, m, z, c) for m in self.layout.modalities]

    def _recon(self, xs: Sequence[Tensor], x_hat: Sequence[Tensor]) -> Tensor:
        return recon_error(xs, x_hat, reduction=self.cfg.recon_reduction)

    @property
    def introspective(self) -> bool:
        return self.cfg.objective == "sivae"

    # Encoder step
    def encoder_pass(
        self,
        xs: Sequence[np.ndarray],
        c: np.ndarray,
        noise: StepNoise,
        generated: Optional[Tuple[Sequence[np.ndarray], Sequence[np.ndarray]]] = None,
    ) -> EncoderPass:
        """
        Encoder loss and its gradients for every parameter

        Args:
            generated: (reconstructions, prior samples) fed to the re-encoding
                branches instead of the ones decoded in this pass; used to
                evaluate the loss with the generated batches held fixed
        """
        tape = Tape()
        leaves, usable = net.bind_params(tape, self.params, frozen=self.layout.decoder_names())
        xs_t = [tape.constant(x) for x in xs]
        c_t = tape.constant(c)

        mix = self._encode(usable, xs_t, c_t)
        z = mix.sample(noise.z)
        kl_real = nk.mean(mix.kl_to_prior(noise.kl))
        x_rec = self._decode(usable, z, c_t)
        recon_real = self._recon(xs_t, x_rec)
        x_fake = self._decode(usable, tape.constant(noise.prior), c_t)

        if self.introspective:
            if generated is None:
                rec_in = [nk.stop_gradient(x) for x in x_rec]
                fake_in = [nk.stop_gradient(x) for x in x_fake]
            else:
                rec_in = [tape.constant(x) for x in generated[0]]
                fake_in = [tape.constant(x) for x in generated[1]]
            recon_rec, kl_rec = self._encoder_branch(usable, rec_in, c_t, noise.z_rec, noise.kl_rec)
            recon_fake, kl_fake = self._encoder_branch(usable, fake_in, c_t, noise.z_fake, noise.kl_fake)
            terms = TermBundle(recon_real, kl_real, (recon_rec, recon_fake), (kl_rec, kl_fake))
            loss = encoder_loss(terms, self.hyper)
        else:
            loss = elbo_loss(TermBundle(recon_real, kl_real), self.hyper)

        names = list(leaves)
        grads = tape.backward(loss, [leaves[n] for n in names])
        return EncoderPass(
            loss=loss.item(),
            recon_real=recon_real.item(),
            kl_real=kl_real.item(),
            grads=dict(zip(names, grads)),
            z=z.numpy(),
            generated=(tuple(x.numpy() for x in x_rec), tuple(x.numpy() for x in x_fake)),
        )

    def _encoder_branch(self, usable, gen: Sequence[Tensor], c: Tensor, eps, kl_eps) -> Tuple[Tensor, Tensor]:
        mix = self._encode(usable, gen, c)
        x_again = self._decode(usable, mix.sample(eps), c)
        return self._recon(gen, x_again), nk.mean(mix.kl_to_prior(kl_eps))

    # Decoder step
    def decoder_pass(
        self,
        xs: Sequence[np.ndarray],
        c: np.ndarray,
        noise: StepNoise,
        z: np.ndarray,
        kl_real: float,
    ) -> Tuple[float, Dict[str, np.ndarray]]:
        """
        Decoder loss and its gradients for every parameter

        Encoder parameters enter through stop_gradient, so their gradients
        are exactly zero.
        """
        tape = Tape()
        leaves, usable = net.bind_params(tape, self.params, frozen=self.layout.encoder_names())
        xs_t = [tape.constant(x) for x in xs]
        c_t = tape.constant(c)

        x_rec = self._decode(usable, tape.constant(z), c_t)
        recon_real = self._recon(xs_t, x_rec)
        kl_const = tape.constant([[kl_real]])

        if self.introspective:
            x_fake = self._decode(usable, tape.constant(noise.prior), c_t)
            recon_rec, kl_rec = self._decoder_branch(usable, x_rec, c_t, noise.z_rec, noise.kl_rec)
            recon_fake, kl_fake = self._decoder_branch(usable, x_fake, c_t, noise.z_fake, noise.kl_fake)
            terms = TermBundle(recon_real, kl_const, (recon_rec, recon_fake), (kl_rec, kl_fake))
            loss = decoder_loss(terms, self.hyper)
        else:
            loss = elbo_loss(TermBundle(recon_real, kl_const), self.hyper)

        names = list(leaves)
        grads = tape.backward(loss, [leaves[n] for n in names])
        return loss.item(), dict(zip(names, grads))

    def _decoder_branch(self, usable, gen: Sequence[Tensor], c: Tensor, eps, kl_eps) -> Tuple[Tensor, Tensor]:
        mix = self._encode(usable, gen, c)
        z_again = nk.stop_gradient(mix.sample(eps))
        x_again = self._decode(usable, z_again, c)
        targets = [nk.stop_gradient(x) for x in gen]
        return self._recon(targets, x_again), nk.mean(mix.kl_to_prior(kl_eps))

    # Updates
    def update_encoder(self, xs, c, noise: StepNoise) -> EncoderPass:
        result = self.encoder_pass(xs, c, noise)
        self.params = self.encoder_opt.step(self.params, result.grads)
        return result

    def update_decoder(self, xs, c, noise: StepNoise, z: np.ndarray, kl_real: float) -> float:
        loss, grads = self.decoder_pass(xs, c, noise, z, kl_real)
        self.params = self.decoder_opt.step(self.params, grads)
        return loss

    def step(self, xs: Sequence[np.ndarray], c: np.ndarray, noise: Optional[StepNoise] = None) -> StepTerms:
        """One encoder update followed by one decoder update"""
        if noise is None:
            noise = StepNoise.draw(self.rng, xs[0].shape[0], self.layout.latent_dim)
        enc = self.update_encoder(xs, c, noise)
        # decoder loss stays NaN until the decoder step of this batch succeeds
        self.last_terms = StepTerms(enc.loss, float("nan"), enc.recon_real, enc.kl_real)
        dec_loss = self.update_decoder(xs, c, noise, enc.z, enc.kl_real)
        self.last_terms = replace(self.last_terms, decoder_loss=dec_loss)
        return self.last_terms

    def fit(self, batch: MultimodalBatch, epochs: Optional[int] = None) -> TrainLog:
        """
        Train on an already standardized batch

        Each epoch visits subjects in a fresh seeded permutation; the last
        short minibatch is kept.
        """
        epochs = self.cfg.epochs if epochs is None else epochs
        if epochs < 1:
            raise ContractError("epochs must be at least 1", epochs=epochs)
        xs = [batch.features[m] for m in self.layout.modalities]
        c = batch.covariates
        n = batch.n_subjects
        log = TrainLog()
        for epoch in range(1, epochs + 1):
            started = time.perf_counter()
            order = self.rng.permutation(n)
            totals = np.zeros(4)
            n_batches = 0
            for b, lo in enumerate(range(0, n, self.cfg.batch_size)):
                idx = order[lo: lo + self.cfg.batch_size]
                try:
                    terms = self.step([x[idx] for x in xs], c[idx])
                except NumericError as exc:
                    logger.error("Training diverged at epoch %d, batch %d: %s", epoch, b, exc)
                    raise NumericError(
                        "training diverged", epoch=epoch, batch=b, cause=str(exc),
                        last_terms=asdict(self.last_terms) if self.last_terms is not None else None,
                        last_epoch=log.records[-1].model_dump() if log.records else None,
                    ) from exc
                totals += (terms.encoder_loss, terms.decoder_loss, terms.recon_real, terms.kl_real)
                n_batches += 1
            means = totals / n_batches
            record = EpochRecord(
                epoch=epoch,
                encoder_loss=means[0],
                decoder_loss=means[1],
                recon_real=means[2],
                kl_real=means[3],
                wall_time=time.perf_counter() - started,
            )
            log.records.append(record)
            logger.debug("epoch %d: %s", epoch, record.model_dump())
        if log.records:
            last = log.records[-1]
            logger.info(
                "Trained %d epochs: recon %.6g -> %.6g, kl %.6g",
                epochs, log.records[0].recon_real, last.recon_real, last.kl_real,
            )
        return log

    def checkpoint(self, stats: Optional[StandardizationStats] = None) -> Checkpoint:
        return Checkpoint(
            layout=self.layout,
            fusion=self.fusion,
            loss=self.hyper,
            params=dict(self.params),
            standardization=stats.to_checkpoint() if stats is not None else {},
            train_config=self.cfg.model_dump(mode="json"),
        )


def train(
    batch: MultimodalBatch,
    cfg: TrainConfig,
    stats: Optional[StandardizationStats] = None,
    reference_tag: Optional[str] = None,
) -> TrainResult:
    """
    Train on the reference cohort of a raw dataset

    Standardization statistics are fitted on the reference rows unless given;
    only reference rows are used for training.
    """
    stats = stats or StandardizationStats.fit(batch, reference_tag)
    reference = standardize(batch.select_cohorts([reference_tag or settings.REFERENCE_TAG]), stats)
    if reference.n_subjects == 0:
        raise ContractError("no reference subjects to train on")
    trainer = Trainer(layout_for(reference, cfg), cfg)
    logger.info(
        "Training %s/%s: %d subjects, latent dim %d, %d epochs",
        cfg.objective, cfg.fusion.method.value, reference.n_subjects, cfg.latent_dim, cfg.epochs,
    )
    log = trainer.fit(reference)
    return TrainResult(checkpoint=trainer.checkpoint(stats), log=log)


def grid_points(
    cfg: TrainConfig,
    latent_dims: Optional[Sequence[int]] = None,
    fusion_methods: Optional[Sequence[FusionMethod]] = None,
) -> List[TrainConfig]:
    """Configs of a grid run; point i trains with seed cfg.seed + i"""
    methods = list(fusion_methods) if fusion_methods else [cfg.fusion.method]
    dims = list(latent_dims) if latent_dims else [cfg.latent_dim]
    points = []
    for i, (method, dim) in enumerate(itertools.product(methods, dims)):
        fusion = FusionConfig(method=FusionMethod(method), include_prior_in_subsets=cfg.fusion.include_prior_in_subsets)
        points.append(cfg.model_copy(update={"latent_dim": dim, "fusion": fusion, "seed": cfg.seed + i}))
    return points


def grid_train(
    batch: MultimodalBatch,
    cfg: TrainConfig,
    latent_dims: Optional[Sequence[int]] = None,
    fusion_methods: Optional[Sequence[FusionMethod]] = None,
) -> List[TrainResult]:
    """One training run per (fusion method, latent dim) pair"""
    stats = StandardizationStats.fit(batch)
    return [train(batch, point, stats) for point in grid_points(cfg, latent_dims, fusion_methods)]
