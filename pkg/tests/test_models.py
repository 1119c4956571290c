import numpy as np
import pytest

from reconnet.models import (
    CheckpointError,
    ReconNetSpec,
    build_discriminator,
    build_encoder,
    build_reconnet,
    discriminator_sizes,
    first_layer_reduction,
    load_checkpoint,
    load_matrix,
    param_count,
    read_container,
    save_checkpoint,
    save_matrix,
    write_container,
)
from reconnet.sensing import gen_gaussian_orthonormal, quantize_matrix
from reconnet.tensor import Prng


def test_conv_names_and_shapes():
    net = build_reconnet(ReconNetSpec(0.25), Prng(0))
    convs = net.conv_layers()
    assert [c.name for c in convs] == [f"conv{i}" for i in range(1, 7)]
    assert [c.params[c.kk].shape for c in convs[:3]] == [(11, 11, 1, 64), (1, 1, 64, 32), (7, 7, 32, 1)]


def test_forward_shapes_single_and_batch():
    net = build_reconnet(ReconNetSpec(0.04, 1), Prng(0))
    y = Prng(1).normal((3, 43))
    out = net.forward(y)
    assert out.shape == (3, 33, 33)
    np.testing.assert_allclose(net.forward(y[1]), out[1], atol=1e-12)
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 44)))


def test_outputs_are_relu_rectified():
    net = build_reconnet(ReconNetSpec(0.04, 1), Prng(0), std=0.3)
    assert net.forward(Prng(2).normal((4, 43))).min() >= 0.0


def test_phit_initialization():
    phi = gen_gaussian_orthonormal(mr=0.04, seed=1)
    net = build_reconnet(ReconNetSpec(0.04), Prng(0), init="phit", phi=phi)
    np.testing.assert_array_equal(net.params["fc.W"], phi.phi.T)
    assert not net.params["fc.b"].any()
    with pytest.raises(ValueError):
        build_reconnet(ReconNetSpec(0.25), Prng(0), init="phit", phi=phi)


def test_build_is_seeded():
    a = build_reconnet(ReconNetSpec(0.04), Prng(3))
    b = build_reconnet(ReconNetSpec(0.04), Prng(3))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_spec_validation():
    with pytest.raises(ValueError):
        ReconNetSpec(0.25, n_units=0)
    with pytest.raises(ValueError):
        ReconNetSpec(0.25, first_stage="fc", gamma=3)
    with pytest.raises(ValueError):
        ReconNetSpec(0.25, first_stage="lstm")


def test_parameter_counts():
    net = build_reconnet(ReconNetSpec(0.10), Prng(0))
    assert param_count(net, include_bias=False, stage="convs") == 22720
    assert param_count(net, include_bias=False, stage="first") == 118701
    circ = build_reconnet(ReconNetSpec(0.25, 2, "circulant", 13), Prng(0))
    assert param_count(circ, include_bias=False, stage="first") == 14157


def test_circulant_model_runs():
    net = build_reconnet(ReconNetSpec(0.04, 1, "circulant", 2), Prng(0))
    assert net.forward(Prng(1).normal((2, 43))).shape == (2, 33, 33)


@pytest.mark.parametrize("mr,gamma,expected", [
    (0.25, 1, 99.63), (0.25, 13, 95.22), (0.10, 1, 99.08), (0.10, 5, 95.41),
    (0.04, 1, 97.67), (0.04, 2, 95.34), (0.01, 1, 90.00),
])
def test_reduction_percentages(mr, gamma, expected):
    assert abs(first_layer_reduction(mr, gamma) - expected) < 0.01


class TestDiscriminator:
    def test_sizes(self):
        assert discriminator_sizes() == [33, 15, 6, 2]

    def test_output_is_probability_per_block(self):
        d = build_discriminator(Prng(0))
        p = d.forward(Prng(1).uniform((5, 33, 33)))
        assert p.shape == (5,) and np.all((p > 0) & (p < 1))
        assert np.ndim(d.forward(np.zeros((33, 33)))) == 0

    def test_eval_mode_is_deterministic(self):
        d = build_discriminator(Prng(0))
        x = Prng(1).uniform((3, 33, 33))
        np.testing.assert_array_equal(d.forward(x), d.forward(x))

    def test_input_gradient_shape(self):
        d = build_discriminator(Prng(0))
        d.forward(Prng(1).uniform((2, 33, 33)), train=True)
        assert d.backward(np.ones(2)).shape == (2, 33, 33)


class TestEncoder:
    def test_bias_free_and_exports_learned_phi(self):
        enc = build_encoder(43, Prng(0))
        assert list(enc.params) == ["enc.W"]
        phi = enc.export_phi(0.04)
        assert phi.kind == "learned" and phi.phi.shape == (43, 1089)
        assert not enc.forward(np.zeros((2, 33, 33))).any()

    def test_initial_phi_copy(self):
        phi = gen_gaussian_orthonormal(mr=0.04, seed=0)
        enc = build_encoder(43, Prng(0), init_phi=phi)
        x = Prng(1).uniform((2, 33, 33))
        np.testing.assert_allclose(enc.forward(x), x.reshape(2, -1) @ phi.phi.T)
        with pytest.raises(ValueError):
            build_encoder(42, Prng(0), init_phi=phi)


class TestCheckpoints:
    def test_round_trip_is_exact(self, tmp_path):
        phi = quantize_matrix(gen_gaussian_orthonormal(mr=0.04, seed=2), 8)
        net = build_reconnet(ReconNetSpec(0.04, 1), Prng(0))
        save_checkpoint(net, tmp_path / "m.rcn", phi, {"variant": "euc"})
        ck = load_checkpoint(tmp_path / "m.rcn")
        assert all(np.array_equal(ck.model.params[k], net.params[k]) for k in net.params)
        assert np.array_equal(ck.phi.phi, phi.phi)
        assert (ck.phi.kind, ck.phi.bits, ck.phi.source_kind, ck.phi.seed) == ("quantized", 8, "gaussian-orthonormal", 2)
        assert ck.metadata["variant"] == "euc"

    def test_circulant_round_trip(self, tmp_path):
        net = build_reconnet(ReconNetSpec(0.04, 1, "circulant", 2), Prng(0))
        save_checkpoint(net, tmp_path / "c.rcn")
        ck = load_checkpoint(tmp_path / "c.rcn")
        s = ck.model.spec
        assert ck.phi is None and (s.first_stage, s.gamma, s.measurements) == ("circulant", 2, 43)

    def test_saving_twice_gives_identical_bytes(self, tmp_path):
        net = build_reconnet(ReconNetSpec(0.04, 1), Prng(0))
        save_checkpoint(net, tmp_path / "a")
        save_checkpoint(net, tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_truncation_and_corruption(self, tmp_path):
        net = build_reconnet(ReconNetSpec(0.04, 1), Prng(0))
        path = tmp_path / "m.rcn"
        save_checkpoint(net, path)
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
        path.write_bytes(b"XXXX" + data[4:])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
        path.write_bytes(data + b"\0")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_and_unknown_tensors(self, tmp_path):
        net = build_reconnet(ReconNetSpec(0.04, 1), Prng(0))
        save_checkpoint(net, tmp_path / "m")
        meta, tensors = read_container(tmp_path / "m")
        del tensors["conv3.k"]
        write_container(tmp_path / "missing", meta, tensors)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "missing")
        tensors["conv3.k"] = net.params["conv3.k"]
        tensors["extra.k"] = np.zeros(2)
        write_container(tmp_path / "extra", meta, tensors)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "extra")

    def test_matrix_round_trip(self, tmp_path):
        phi = gen_gaussian_orthonormal(mr=0.01, seed=4)
        save_matrix(phi, tmp_path / "phi")
        back = load_matrix(tmp_path / "phi")
        assert np.array_equal(back.phi, phi.phi) and back.mr == phi.mr and back.seed == 4


def test_zero_parameters_give_zero_output():
    net = build_reconnet(ReconNetSpec(0.01, 2), Prng(0), std=0.0)
    y = Prng(1).normal((2, 10))
    assert not net.forward(y).any()
    for m in (272, 109, 43, 10):
        net = build_reconnet(ReconNetSpec(m / 1089, 1, m=m), Prng(0))
        assert net.forward(np.zeros(m)).shape == (33, 33)


def test_zero_logit_discriminator_outputs_half():
    d = build_discriminator(Prng(0))
    d.params["d_fc.W"][...] = 0.0
    assert np.all(d.forward(Prng(1).uniform((3, 33, 33))) == 0.5)


def test_encoder_superposition_and_export():
    enc = build_encoder(10, Prng(0))
    rng = Prng(1)
    a, b = rng.uniform((33, 33)), rng.uniform((33, 33))
    np.testing.assert_allclose(enc.forward(2 * a - b), 2 * enc.forward(a) - enc.forward(b), atol=1e-12)
    from reconnet.sensing import sense

    assert np.array_equal(sense(enc.export_phi(), a), enc.forward(a))
    with pytest.raises(ValueError):
        build_encoder(0, Prng(0))


def test_phit_checkpoint_restores_transpose(tmp_path):
    phi = gen_gaussian_orthonormal(mr=0.10, seed=3)
    net = build_reconnet(ReconNetSpec(0.10, 2), Prng(0), init="phit", phi=phi)
    save_checkpoint(net, tmp_path / "m")
    ck = load_checkpoint(tmp_path / "m")
    assert np.array_equal(ck.model.params["fc.W"], phi.phi.T)
    assert float(ck.metadata["mr"]) == 0.10


def test_circulant_first_conv_takes_gamma_channels():
    net = build_reconnet(ReconNetSpec(0.10, 2, "circulant", 5), Prng(0))
    assert net.params["conv1.k"].shape == (11, 11, 5, 64)
