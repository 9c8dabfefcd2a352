import copy
import math

import numpy as np
import pytest

from vqpurify import tensor as T
from vqpurify.data import LabeledImageSet, gen_synthetic
from vqpurify.errors import ConfigError, DataError, NumericalError
from vqpurify.tensor import Tape, Tensor
from vqpurify.train import (ClassifierConfig, PurifierTrainer, TrainConfig, TrainLog, adversarial_value,
                            gan_losses, rec_loss, total_gen_loss, train_classifier, train_purifier)
from vqpurify.vq import vq_loss


def tiny_config(**kw):
    base = dict(batch_size=16, epochs=1, codebook_K=8, latent_dim=4, width=4, n_res_blocks=2,
                learning_rate=1e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small_set():
    return gen_synthetic(4, 10, seed=0)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def test_rec_loss_values():
    x = Tensor(np.ones((2, 3, 4, 4)))
    assert rec_loss(x, x).item() == 0.0
    assert rec_loss(x, Tensor(np.zeros((2, 3, 4, 4)))).item() == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    a = rng.random((2, 3, 4, 4))
    e = rng.random((2, 3, 4, 4)) - 0.5
    base = rec_loss(Tensor(a, dtype=np.float64), Tensor(a + e, dtype=np.float64)).item()
    scaled = rec_loss(Tensor(a, dtype=np.float64), Tensor(a + 3 * e, dtype=np.float64)).item()
    assert scaled == pytest.approx(9 * base, rel=1e-12)


def test_gan_losses_at_confusion():
    zeros = Tensor(np.zeros((2, 1, 4, 4)), dtype=np.float64)
    disc, gen = gan_losses(zeros, zeros)
    assert disc.item() == pytest.approx(2 * math.log(2), abs=1e-12)
    assert gen.item() == pytest.approx(math.log(2), abs=1e-12)
    assert adversarial_value(zeros.data, zeros.data) == pytest.approx(-2 * math.log(2), abs=1e-6)


def test_gan_losses_perfect_discriminator_and_floor():
    real = Tensor(np.full((1, 1, 2, 2), 40.0), dtype=np.float64)
    fake = Tensor(np.full((1, 1, 2, 2), -40.0), dtype=np.float64)
    disc, gen = gan_losses(real, fake)
    assert disc.item() < 1e-12
    assert gen.item() == pytest.approx(-math.log(1e-7))   # floored


def test_gen_loss_monotone_and_disc_nonnegative():
    rng = np.random.default_rng(1)
    prev = np.inf
    for v in np.linspace(-5, 5, 21):
        real = Tensor(rng.standard_normal((2, 1, 3, 3)))
        disc, gen = gan_losses(real, Tensor(np.full((2, 1, 3, 3), v)))
        assert disc.item() >= 0
        assert gen.item() < prev
        prev = gen.item()


def test_total_gen_loss():
    assert total_gen_loss(0.5, 0.2, 1.0, 0.1) == pytest.approx(0.8, abs=1e-7)
    assert total_gen_loss(0.0, 0.0, 0.0, 0.1) == 0.0
    assert total_gen_loss(0.5, 0.2, 7.0, 0.0) == pytest.approx(0.7)
    base = total_gen_loss(1.0, 2.0, 3.0, 0.3)
    for i, coef in enumerate((1.0, 1.0, 0.3)):
        parts = [1.0, 2.0, 3.0]
        parts[i] += 1.0
        assert total_gen_loss(*parts, 0.3) - base == pytest.approx(coef)
    with pytest.raises(ConfigError):
        total_gen_loss(1, 1, 1, -0.1)


# ---------------------------------------------------------------------------
# update mechanics
# ---------------------------------------------------------------------------

def snapshot(params):
    return [p.data.copy() for p in params]


def test_generator_step_leaves_discriminator_untouched(small_set):
    tr = PurifierTrainer(tiny_config())
    d_before, g_before = snapshot(tr.d_params), snapshot(tr.g_params)
    sn_before = copy.deepcopy(tr.D.named_buffers())
    tr.generator_step(Tensor(small_set.images[:8]))
    assert all(np.array_equal(a, p.data) for a, p in zip(d_before, tr.d_params))
    assert all(np.array_equal(v, tr.D.named_buffers()[k]) for k, v in sn_before.items())
    assert any(not np.array_equal(a, p.data) for a, p in zip(g_before, tr.g_params))
    assert all(p.grad is None for p in tr.d_params)


def test_discriminator_step_leaves_generator_untouched(small_set):
    tr = PurifierTrainer(tiny_config())
    x = Tensor(small_set.images[:8])
    x_hat = tr.G(x).data
    g_before, d_before = snapshot(tr.g_params), snapshot(tr.d_params)
    tr.discriminator_step(x, x_hat)
    assert all(np.array_equal(a, p.data) for a, p in zip(g_before, tr.g_params))
    assert any(not np.array_equal(a, p.data) for a, p in zip(d_before, tr.d_params))


def test_lambda_zero_matches_plain_vqvae_gradients(small_set):
    cfg = tiny_config(lambda_gan=0.0, beta=0.25)
    tr = PurifierTrainer(cfg)
    x = Tensor(small_set.images[:8])
    with Tape() as tape:
        loss = tr.generator_loss(x)[0]
    tape.backward(loss)
    ours = [p.grad.copy() for p in tr.g_params]
    for p in tr.g_params:
        p.grad = None

    # independent composition: encoder -> quantize -> straight-through -> decoder
    from vqpurify.vq import quantize, straight_through
    with Tape() as tape:
        z = T.permute(tr.G.encoder(x), (0, 2, 3, 1))
        res = quantize(z, tr.G.codebook)
        x_hat = tr.G.decoder(T.permute(straight_through(res), (0, 3, 1, 2)))
        plain = T.mse(x_hat, x) + vq_loss(res, 0.25)
    tape.backward(plain)
    for a, p in zip(ours, tr.g_params):
        assert a.tobytes() == p.grad.tobytes()


def test_disc_loss_drops_when_discriminator_trains_alone(small_set):
    tr = PurifierTrainer(tiny_config(learning_rate=5e-3))
    x = Tensor(small_set.images[:16])
    fake = np.clip(small_set.images[:16] * 0 + 0.5, 0, 1)
    first = tr.discriminator_step(x, fake)
    for _ in range(30):
        last = tr.discriminator_step(x, fake)
    assert last < first


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def test_purifier_smoke_256(tmp_path):
    ds = gen_synthetic(26, 10, seed=2).subset(np.arange(256))
    G, D, log = train_purifier(ds, tiny_config(batch_size=64), tmp_path / "log.csv")
    assert len(log.records) == 1
    r = log.records[0]
    assert all(math.isfinite(v) for v in (r.l_rec, r.l_vq, r.l_gan_gen, r.l_disc))
    assert 1 <= r.distinct_codes <= 8
    assert 1 <= log.final_distinct_codes <= 8
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == ",".join(TrainLog.COLUMNS)
    assert len(lines) == 2


def test_purifier_ignores_labels(small_set):
    shuffled = LabeledImageSet(small_set.images, small_set.labels[::-1].copy())
    a = train_purifier(small_set, tiny_config())[0]
    b = train_purifier(shuffled, tiny_config())[0]
    for k, v in a.state_dict().items():
        assert v.tobytes() == b.state_dict()[k].tobytes()


def test_purifier_deterministic(small_set):
    a = train_purifier(small_set, tiny_config())[0].state_dict()
    b = train_purifier(small_set, tiny_config())[0].state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_warmup_epochs_skip_adversarial_terms(small_set):
    tr = PurifierTrainer(tiny_config(epochs=2, gan_warmup_epochs=1))
    d_before = snapshot(tr.d_params)
    warm = train_purifier(small_set, tiny_config(epochs=1), trainer=PurifierTrainer(tiny_config(lambda_gan=0.0)))
    log = train_purifier(small_set, tr.config, trainer=tr)[2]
    first, second = log.records
    assert first.l_gan_gen == 0.0 and first.l_disc == 0.0
    assert second.l_gan_gen > 0 and second.l_disc > 0
    assert any(not np.array_equal(a, p.data) for a, p in zip(d_before, tr.d_params))
    assert first.l_rec == warm[2].records[0].l_rec
    with pytest.raises(ConfigError):
        tiny_config(gan_warmup_epochs=-1).validate()


def test_purifier_nan_reports_batch(small_set):
    tr = PurifierTrainer(tiny_config(batch_size=8))
    tr.G.decoder.conv_out.bias.data[...] = np.nan
    with pytest.raises(NumericalError) as info:
        train_purifier(small_set, tr.config, trainer=tr)
    assert info.value.batch == 0 and info.value.epoch == 0


def test_purifier_rejects_empty():
    empty = LabeledImageSet(np.zeros((0, 3, 32, 32)), np.zeros(0, dtype=int))
    with pytest.raises(DataError):
        train_purifier(empty, tiny_config())


def test_heldout_reconstruction_improves_majority():
    train = gen_synthetic(12, 10, seed=3)
    probe = gen_synthetic(3, 10, seed=4).images
    wins = 0
    for seed in range(3):
        cfg = tiny_config(seed=seed, epochs=3, batch_size=16, learning_rate=2e-3)
        tr = PurifierTrainer(cfg)
        before = float(np.mean((tr.G.reconstruct(probe) - probe) ** 2))
        G = train_purifier(train, cfg, trainer=tr)[0]
        after = float(np.mean((G.reconstruct(probe) - probe) ** 2))
        wins += after < before
    assert wins >= 2


def test_classifier_zero_epochs_unchanged(small_set):
    from vqpurify.nets import build_classifier
    cfg = ClassifierConfig(epochs=0, width=4, depth=2, seed=1)
    fresh = build_classifier(cfg.spec(10), 1)
    model = train_classifier(small_set, None, cfg)
    for k, v in fresh.state_dict().items():
        assert v.tobytes() == model.state_dict()[k].tobytes()


def test_classifier_learns_and_uses_purifier(small_set):
    two = gen_synthetic(10, 2, seed=5)
    cfg = ClassifierConfig(epochs=30, width=8, depth=2, learning_rate=3e-3, batch_size=10)
    plain = train_classifier(two, None, cfg)
    assert np.mean(plain.predict(two.images) == two.labels) >= 0.8

    class Recorder:
        seen = None

        def reconstruct(self, images):
            Recorder.seen = images
            return np.full_like(images, 0.5)

    blind = train_classifier(small_set, Recorder(), cfg)
    assert Recorder.seen is small_set.images
    # every training input was replaced, so the model sees a single constant image
    preds = blind.predict(np.full_like(small_set.images[:3], 0.5))
    assert len(set(preds.tolist())) == 1


def test_scheduled_lr():
    from vqpurify.train import scheduled_lr
    assert scheduled_lr(1e-3, "constant", 50, 100) == 1e-3
    assert scheduled_lr(1e-3, "cosine", 0, 100) == 1e-3
    assert scheduled_lr(1e-3, "cosine", 50, 100) == pytest.approx(5e-4)
    assert scheduled_lr(1e-3, "cosine", 100, 100) == pytest.approx(0.0, abs=1e-18)
    with pytest.raises(ConfigError):
        scheduled_lr(1e-3, "step", 0, 10)


def test_classifier_label_range(small_set):
    bad = copy.copy(small_set)
    bad.labels = small_set.labels.copy()
    bad.labels[0] = 12
    with pytest.raises(DataError):
        train_classifier(bad, None, ClassifierConfig(epochs=1, width=4, depth=2))
