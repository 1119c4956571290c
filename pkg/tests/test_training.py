import csv

import numpy as np
import pytest

from reconnet.datapipe import PatchDataset
from reconnet.models import ReconNetSpec, build_discriminator, build_encoder, build_reconnet
from reconnet.sensing import gen_gaussian_orthonormal, sense
from reconnet.training import (
    BatchSampler,
    GanConfig,
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    euclidean_gradients,
    finetune_fc,
    generator_gradients,
    lr_grid_search,
    mean_loss,
    select_by_validation,
    sgd_step,
    train_adversarial,
    train_autoencoder,
    train_euclidean,
    write_history_csv,
)
from reconnet.tensor import Prng

from _util import identity_reconnet


def smooth_patches(n, seed):
    """Low-frequency random blocks in [0, 1]."""
    rng = Prng(seed)
    yy, xx = np.mgrid[0:33, 0:33] / 32.0
    a = rng.uniform((n, 4))
    p = 0.5 + 0.25 * (a[:, :1, None] * np.sin(3 * xx + 6 * a[:, 1:2, None])
                      + a[:, 2:3, None] * np.cos(2 * yy + 6 * a[:, 3:4, None]))
    return PatchDataset(p, ["synthetic"] * n, np.zeros((n, 2)), np.zeros(n))


@pytest.fixture(scope="module")
def data():
    return smooth_patches(24, 0)


@pytest.fixture(scope="module")
def phi():
    return gen_gaussian_orthonormal(mr=0.01, seed=0)


def small_net(phi, seed=1, units=1):
    return build_reconnet(ReconNetSpec(0.01, units), Prng(seed), init="phit", phi=phi)


class TestOptimizers:
    def test_sgd_momentum_by_hand(self):
        p = {"w": np.array([1.0, 2.0])}
        g = {"w": np.array([0.5, -1.0])}
        state = OptimizerState()
        sgd_step(p, g, state, lr=0.1, momentum=0.9)
        np.testing.assert_allclose(p["w"], [0.95, 2.1])
        sgd_step(p, g, state, lr=0.1, momentum=0.9)
        # v = 0.9 * (-0.05, 0.1) - 0.1 * (0.5, -1)
        np.testing.assert_allclose(p["w"], [0.95 - 0.095, 2.1 + 0.19])

    def test_adam_first_step_is_lr_times_sign(self):
        p = {"w": np.array([1.0, -1.0, 0.0])}
        g = {"w": np.array([3.0, -0.01, 0.0])}
        adam_step(p, g, OptimizerState(), lr=0.01)
        np.testing.assert_allclose(p["w"], [0.99, -0.99, 0.0], atol=1e-8)

    def test_adam_matches_reference_formula(self):
        rng = Prng(0)
        w = rng.normal(5)
        p, state = {"w": w.copy()}, OptimizerState()
        m = v = np.zeros(5)
        for t in range(1, 4):
            g = rng.normal(5)
            adam_step(p, {"w": g}, state, lr=1e-3)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 1e-3 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p["w"], w, rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimizerState(), 0.1)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(optimizer="rmsprop")
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            GanConfig(g_steps_per_d=0)


class TestSampler:
    def test_epoch_covers_every_index_once(self):
        s = BatchSampler(10, 5, Prng(0))
        seen = np.concatenate([next(s), next(s)])
        assert sorted(seen.tolist()) == list(range(10))

    def test_reshuffles_between_epochs_and_caps_batch(self):
        s = BatchSampler(6, 100, Prng(1))
        a, b = next(s), next(s)
        assert len(a) == 6 and sorted(a) == sorted(b)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            BatchSampler(0, 4, Prng(0))


class TestEuclidean:
    def test_bitwise_reproducible(self, data, phi):
        cfg = TrainConfig(batch_size=4, iterations=5, learning_rate=1e-3, optimizer="adam", seed=3)
        a, ha = train_euclidean(small_net(phi), data, phi, cfg)
        b, hb = train_euclidean(small_net(phi), data, phi, cfg)
        assert np.array_equal(ha, hb)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_full_batch_small_lr_is_non_increasing(self, data, phi):
        cfg = TrainConfig(batch_size=len(data), iterations=10, learning_rate=1e-6, momentum=0.0)
        _, hist = train_euclidean(small_net(phi), data, phi, cfg)
        assert len(hist) == 10
        assert np.all(np.diff(hist) <= 1e-9)

    def test_trainable_subset_leaves_others(self, data, phi):
        net = small_net(phi)
        before = net.copy_params()
        cfg = TrainConfig(batch_size=4, iterations=3, learning_rate=1e-3, optimizer="adam")
        train_euclidean(net, data, phi, cfg, trainable=["conv3.b"])
        changed = [k for k in before if not np.array_equal(before[k], net.params[k])]
        assert changed == ["conv3.b"]

    def test_divergence_raises_with_iteration(self, data, phi):
        net = small_net(phi)
        net.params["conv3.b"][...] = np.nan
        with pytest.raises(TrainingDiverged) as info:
            train_euclidean(net, data, phi, TrainConfig(batch_size=4, iterations=3))
        assert info.value.iteration == 0

    def test_callback_sees_every_iteration(self, data, phi):
        seen = []
        cfg = TrainConfig(batch_size=4, iterations=4, learning_rate=1e-4)
        train_euclidean(small_net(phi), data, phi, cfg, callback=lambda it, loss, m: seen.append(it))
        assert seen == [0, 1, 2, 3]

    def test_measurement_mismatch(self, data):
        with pytest.raises(ValueError):
            train_euclidean(small_net(gen_gaussian_orthonormal(mr=0.01, seed=0)), data,
                            gen_gaussian_orthonormal(mr=0.04, seed=0), TrainConfig())


class TestAdversarial:
    def test_zero_adversarial_weight_matches_euclidean_bitwise(self, data, phi):
        x = data.blocks()[:4]
        y = sense(phi, x)
        a, b = small_net(phi), small_net(phi)
        d = build_discriminator(Prng(2))
        euclidean_gradients(a, y, x)
        generator_gradients(b, d, y, x, GanConfig(lambda_adv=0.0))
        for k in a.grads:
            assert np.array_equal(a.grads[k], b.grads[k])
        # and so does one Adam update built on them
        sa, sb = OptimizerState(), OptimizerState()
        adam_step(a.params, a.grads, sa, 1e-3)
        adam_step(b.params, b.grads, sb, 1e-3)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_adversarial_term_changes_gradient(self, data, phi):
        x = data.blocks()[:4]
        y = sense(phi, x)
        a, b = small_net(phi), small_net(phi)
        d = build_discriminator(Prng(2))
        euclidean_gradients(a, y, x)
        generator_gradients(b, d, y, x, GanConfig(lambda_adv=1.0))
        assert not np.array_equal(a.grads["fc.W"], b.grads["fc.W"])
        assert not any(g.any() for g in d.grads.values())

    @pytest.mark.parametrize("ratio", [1, 2, 3])
    def test_update_accounting(self, data, phi, ratio):
        cfg = GanConfig(iterations=3, batch_size=4, g_steps_per_d=ratio)
        _, _, hist = train_adversarial(small_net(phi), build_discriminator(Prng(2)), data, phi, cfg)
        assert (hist.g_updates, hist.d_updates) == (3 * ratio, 3)
        assert len(hist.g_loss) == 3 * ratio and len(hist.d_real) == 3

    def test_learned_phi_variant_updates_encoder(self, data, phi):
        enc = build_encoder(phi.m, Prng(0), init_phi=phi)
        before = enc.params["enc.W"].copy()
        cfg = GanConfig(iterations=2, batch_size=4)
        train_adversarial(small_net(phi), build_discriminator(Prng(2)), data, None, cfg, encoder=enc)
        assert not np.array_equal(before, enc.params["enc.W"])


def test_autoencoder_learns_phi(data, phi):
    enc = build_encoder(phi.m, Prng(0), init_phi=phi)
    cfg = TrainConfig(batch_size=4, iterations=3, learning_rate=1e-3, optimizer="adam")
    learned, dec, hist = train_autoencoder(enc, small_net(phi), data, cfg)
    assert learned.kind == "learned" and learned.m == phi.m
    assert not np.array_equal(learned.phi, phi.phi)
    assert len(hist) == 3
    with pytest.raises(ValueError):
        train_autoencoder(build_encoder(5, Prng(0)), small_net(phi), data, cfg)


class TestFinetune:
    def test_convs_bitwise_frozen_and_fc_retrained(self, data, phi):
        base = small_net(phi)
        new_phi = gen_gaussian_orthonormal(mr=0.04, seed=9)
        cfg = TrainConfig(batch_size=4, learning_rate=1e-3, optimizer="adam")
        tuned = finetune_fc(base, new_phi, data, cfg, iterations=3)
        assert tuned.params["fc.W"].shape == (1089, 43)
        for k in base.params:
            if k.startswith("conv"):
                assert np.array_equal(tuned.params[k], base.params[k])
        assert all(not layer.frozen for layer in tuned.conv_layers())

    def test_base_untouched(self, data, phi):
        base = small_net(phi)
        before = base.copy_params()
        finetune_fc(base, phi, data, TrainConfig(batch_size=4), iterations=2)
        assert all(np.array_equal(before[k], base.params[k]) for k in before)

    def test_circulant_base_rejected(self, data, phi):
        base = build_reconnet(ReconNetSpec(0.01, 1, "circulant", 2), Prng(0))
        with pytest.raises(ValueError):
            finetune_fc(base, phi, data, TrainConfig())


class TestSelection:
    def test_exact_model_beats_random(self, data):
        exact, eye = identity_reconnet()
        rand = build_reconnet(ReconNetSpec(1.0, 1), Prng(3))
        assert mean_loss(exact, sense(eye, data.blocks()), data.blocks()) == 0.0
        assert select_by_validation([rand, exact], data, eye) is exact

    def test_lower_loss_wins(self, data, phi):
        good, bad = small_net(phi, 1), small_net(phi, 2)
        bad.params["conv3.b"][...] = 5.0
        assert select_by_validation([bad, good], data, phi) is good

    def test_single_and_ties(self, data, phi):
        a = small_net(phi)
        assert select_by_validation([a], data, phi) is a
        b = small_net(phi)
        assert select_by_validation([a, b], data, phi) is a
        with pytest.raises(ValueError):
            select_by_validation([], data, phi)

    def test_grid_search_keeps_best_validation(self, data, phi):
        cfg = TrainConfig(batch_size=4, iterations=2, optimizer="adam")
        val = smooth_patches(6, 1)
        lr, model, losses = lr_grid_search(lambda: small_net(phi), data, val, phi, cfg)
        assert set(losses) == {1e-2, 1e-3, 1e-4}
        assert losses[lr] == min(losses.values())
        xv = val.blocks()
        assert mean_loss(model, sense(phi, xv), xv) == losses[lr]


def test_history_csv(tmp_path):
    write_history_csv(tmp_path / "h.csv", [3.0, 2.5])
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows == [["iteration", "loss"], ["0", "3.0"], ["1", "2.5"]]
    write_history_csv(tmp_path / "g.csv", [1.0, 2.0], d_loss=[0.7], g_adv=[0.1])
    rows = list(csv.reader(open(tmp_path / "g.csv")))
    assert rows[0] == ["iteration", "loss", "d_loss", "g_adv_loss"]
    assert rows[2] == ["1", "2.0", "", ""]
