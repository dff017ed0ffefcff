"""
Alternating encoder/decoder training
"""
import numpy as np
import pytest

from mmnorm.core import net
from mmnorm.core.fusion import FusionMethod
from mmnorm.models.schemas import FusionConfig, LossHyper, SynthSpec, TrainConfig
from mmnorm.services.dataset_service import MultimodalBatch, StandardizationStats, simulate, standardize
from mmnorm.services.training_service import (
    StepNoise,
    TrainLog,
    Trainer,
    grid_points,
    grid_train,
    layout_for,
    train,
)
from mmnorm.utils.errors import ContractError, NumericError
from tests.conftest import numeric_grad

METHODS = ["poe", "moe", "mopoe"]


def _small_batch(rows=6, seed=0):
    rng = np.random.default_rng(seed)
    return MultimodalBatch(
        subject_ids=tuple(f"S{i}" for i in range(rows)),
        features={"A": rng.normal(size=(rows, 2)), "B": rng.normal(size=(rows, 2))},
        covariates=np.eye(3)[np.arange(rows) % 3],
        cohorts=("reference",) * rows,
    )


def _config(method="mopoe", **overrides):
    base = dict(
        latent_dim=2,
        encoder_hidden=(3,),
        decoder_hidden=(3,),
        activation="tanh",
        learning_rate=1e-3,
        batch_size=6,
        epochs=1,
        fusion=FusionConfig(method=FusionMethod(method)),
    )
    base.update(overrides)
    return TrainConfig(**base)


def _inputs(batch):
    return [batch.features[m] for m in ("A", "B")], batch.covariates


def _trainer(method="mopoe", **overrides):
    batch = _small_batch()
    cfg = _config(method, **overrides)
    trainer = Trainer(layout_for(batch, cfg), cfg)
    # nonzero biases so every parameter shapes the loss
    rng = np.random.default_rng(9)
    trainer.params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in trainer.params.items()}
    return trainer, batch


@pytest.mark.parametrize("method", METHODS)
def test_encoder_loss_gradient_matches_finite_differences(method):
    trainer, batch = _trainer(method)
    xs, c = _inputs(batch)
    noise = StepNoise.draw(np.random.default_rng(1), 6, 2)
    base = trainer.encoder_pass(xs, c, noise)
    params = dict(trainer.params)

    for name in trainer.layout.encoder_names():
        def loss_at(value, name=name):
            trainer.params = {**params, name: value}
            return trainer.encoder_pass(xs, c, noise, generated=base.generated).loss

        expected = numeric_grad(loss_at, params[name])
        trainer.params = params
        np.testing.assert_allclose(base.grads[name], expected, rtol=1e-5, atol=1e-8, err_msg=name)


@pytest.mark.parametrize("method", METHODS)
def test_decoder_loss_gradient_matches_finite_differences(method):
    # gamma_r = 0 drops the re-decoded branch, whose latents carry no gradient
    trainer, batch = _trainer(method, loss=LossHyper(gamma_r=0.0))
    xs, c = _inputs(batch)
    noise = StepNoise.draw(np.random.default_rng(2), 6, 2)
    enc = trainer.encoder_pass(xs, c, noise)
    _, grads = trainer.decoder_pass(xs, c, noise, enc.z, enc.kl_real)
    params = dict(trainer.params)

    for name in trainer.layout.decoder_names():
        def loss_at(value, name=name):
            trainer.params = {**params, name: value}
            return trainer.decoder_pass(xs, c, noise, enc.z, enc.kl_real)[0]

        expected = numeric_grad(loss_at, params[name])
        trainer.params = params
        np.testing.assert_allclose(grads[name], expected, rtol=1e-5, atol=1e-8, err_msg=name)


@pytest.mark.parametrize("method", METHODS)
def test_updates_touch_only_their_own_parameter_set(method):
    trainer, batch = _trainer(method)
    xs, c = _inputs(batch)
    enc_names, dec_names = trainer.layout.encoder_names(), trainer.layout.decoder_names()
    for _ in range(50):
        noise = StepNoise.draw(trainer.rng, 6, 2)

        before = dict(trainer.params)
        enc = trainer.update_encoder(xs, c, noise)
        assert all(np.array_equal(trainer.params[n], before[n]) for n in dec_names)
        assert any(not np.array_equal(trainer.params[n], before[n]) for n in enc_names)
        assert all(not enc.grads[n].any() for n in dec_names)

        _, grads = trainer.decoder_pass(xs, c, noise, enc.z, enc.kl_real)
        assert all(not grads[n].any() for n in enc_names)

        before = dict(trainer.params)
        trainer.update_decoder(xs, c, noise, enc.z, enc.kl_real)
        assert all(np.array_equal(trainer.params[n], before[n]) for n in enc_names)
        assert any(not np.array_equal(trainer.params[n], before[n]) for n in dec_names)


def test_zero_learning_rate_leaves_parameters_unchanged():
    batch = _small_batch()
    cfg = _config(learning_rate=0.0)
    trainer = Trainer(layout_for(batch, cfg), cfg)
    initial = dict(trainer.params)
    log = trainer.fit(batch, epochs=1)
    assert len(log.records) == 1
    assert all(np.array_equal(trainer.params[n], initial[n]) for n in initial)


def test_vae_objective_trains():
    trainer, batch = _trainer(objective="vae")
    log = trainer.fit(batch, epochs=2)
    assert [r.epoch for r in log.records] == [1, 2]
    assert all(np.isfinite(r.encoder_loss) and np.isfinite(r.decoder_loss) for r in log.records)


def test_last_short_batch_is_kept():
    batch = _small_batch(rows=7)
    cfg = _config(batch_size=3)
    trainer = Trainer(layout_for(batch, cfg), cfg)
    calls = []
    original = trainer.step

    def counting_step(xs, c, noise=None):
        calls.append(xs[0].shape[0])
        return original(xs, c, noise)

    trainer.step = counting_step
    trainer.fit(batch, epochs=1)
    assert sorted(calls) == [1, 3, 3]


def test_default_reconstruction_term_is_summed_modality_mse():
    trainer, batch = _trainer()
    assert trainer.cfg.recon_reduction == "mean"
    xs, c = _inputs(batch)
    result = trainer.encoder_pass(xs, c, StepNoise.draw(np.random.default_rng(2), 6, 2))
    x_rec = result.generated[0]
    expected = sum(np.mean((x - x_hat) ** 2) for x, x_hat in zip(xs, x_rec))
    assert result.recon_real == pytest.approx(expected, rel=1e-12)


def test_summed_reconstruction_is_opt_in():
    trainer, batch = _trainer(recon_reduction="sum")
    xs, c = _inputs(batch)
    result = trainer.encoder_pass(xs, c, StepNoise.draw(np.random.default_rng(2), 6, 2))
    expected = sum(((x - x_hat) ** 2).sum() / x.shape[0] for x, x_hat in zip(xs, result.generated[0]))
    assert result.recon_real == pytest.approx(expected, rel=1e-12)


def test_divergence_reports_the_last_step_terms():
    trainer, batch = _trainer(batch_size=3)

    def exploding_decoder(*args, **kwargs):
        raise NumericError("non-finite value in exp")

    trainer.update_decoder = exploding_decoder
    with pytest.raises(NumericError) as info:
        trainer.fit(batch, epochs=2)
    context = info.value.context
    assert context["epoch"] == 1
    assert context["batch"] == 0
    assert context["last_epoch"] is None
    terms = context["last_terms"]
    assert np.isfinite(terms["encoder_loss"]) and np.isfinite(terms["recon_real"])
    assert np.isnan(terms["decoder_loss"])
    assert info.value.exit_code == 4


def test_explicit_zero_epochs_is_rejected():
    trainer, batch = _trainer()
    with pytest.raises(ContractError):
        trainer.fit(batch, epochs=0)
    assert len(trainer.fit(batch).records) == trainer.cfg.epochs


def test_training_is_reproducible(tmp_path, tiny_dataset, tiny_config):
    batch, _ = tiny_dataset
    first = train(batch, tiny_config)
    second = train(batch, tiny_config)
    a = net.save_checkpoint(tmp_path / "a.ckpt", first.checkpoint).read_bytes()
    b = net.save_checkpoint(tmp_path / "b.ckpt", second.checkpoint).read_bytes()
    assert a == b
    assert [r.recon_real for r in first.log.records] == [r.recon_real for r in second.log.records]


def test_train_uses_reference_rows_only(tiny_dataset, tiny_config):
    batch, _ = tiny_dataset
    result = train(batch, tiny_config)
    stats = StandardizationStats.fit(batch)
    for m, (mean, sd) in result.checkpoint.standardization.items():
        np.testing.assert_array_equal(np.ravel(mean), stats.mean[m])
        np.testing.assert_array_equal(np.ravel(sd), stats.sd[m])
    assert result.checkpoint.train_config["latent_dim"] == tiny_config.latent_dim


def test_train_log_round_trip(tmp_path, tiny_dataset, tiny_config):
    batch, _ = tiny_dataset
    log = train(batch, tiny_config).log
    path = log.write(tmp_path / "train.jsonl")
    assert TrainLog.read(path).records == log.records


def test_grid_points_and_grid_train(tiny_dataset, tiny_config):
    points = grid_points(tiny_config, [2, 3], [FusionMethod.POE, FusionMethod.MOE])
    assert [(p.fusion.method.value, p.latent_dim, p.seed) for p in points] == [
        ("poe", 2, 0), ("poe", 3, 1), ("moe", 2, 2), ("moe", 3, 3),
    ]
    batch, _ = tiny_dataset
    results = grid_train(batch, tiny_config, [2, 3], [FusionMethod.POE, FusionMethod.MOE])
    assert [r.checkpoint.layout.latent_dim for r in results] == [2, 3, 2, 3]
    assert [r.checkpoint.fusion.method for r in results] == [
        FusionMethod.POE, FusionMethod.POE, FusionMethod.MOE, FusionMethod.MOE,
    ]


def test_grid_of_one_equals_plain_training(tiny_dataset, tiny_config):
    batch, _ = tiny_dataset
    (single,) = grid_train(batch, tiny_config)
    plain = train(batch, tiny_config)
    assert all(np.array_equal(single.checkpoint.params[n], plain.checkpoint.params[n]) for n in plain.checkpoint.params)


def test_reconstruction_error_descends(tiny_dataset):
    batch, _ = tiny_dataset
    cfg = TrainConfig(
        epochs=40, batch_size=16, learning_rate=3e-3, latent_dim=3,
        encoder_hidden=(16,), decoder_hidden=(16,), activation="tanh",
    )
    recon = [r.recon_real for r in train(batch, cfg).log.records]
    assert np.median(recon[-4:]) < np.median(recon[:4])


@pytest.mark.slow
def test_default_cohort_reconstruction_halves():
    batch, _ = simulate(SynthSpec())
    cfg = TrainConfig(epochs=200, learning_rate=1e-3)
    assert cfg.loss.resolved(batch.total_features).s == pytest.approx(1 / 180)
    log = train(batch, cfg).log
    assert log.records[-1].recon_real < 0.5 * log.records[0].recon_real


def test_standardized_reference_feeds_trainer(tiny_dataset, tiny_config):
    batch, _ = tiny_dataset
    stats = StandardizationStats.fit(batch)
    reference = standardize(batch.select_cohorts(["reference"]), stats)
    layout = layout_for(reference, tiny_config)
    assert layout.modalities == ["MRI", "PET"]
    assert layout.covariate_width == batch.covariates.shape[1]


def test_default_config_fits_runtime_budget():
    # two timed epochs at full size, projected to the configured epoch count
    batch, _ = simulate(SynthSpec())
    cfg = TrainConfig()
    reference = standardize(batch.select_cohorts(["reference"]), StandardizationStats.fit(batch))
    trainer = Trainer(layout_for(reference, cfg), cfg)
    log = trainer.fit(reference, epochs=2)
    assert cfg.learning_rate == 1e-5 and cfg.epochs == 500
    assert log.records[-1].wall_time * cfg.epochs < 300.0
