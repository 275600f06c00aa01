import math
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from smoothent.dnn import (
    LabeledDataset,
    Layer,
    NoisyNetwork,
    forward_batch,
    forward_pre_noise,
    load_dataset_csv,
    load_network,
    mi_input,
    mi_input_risk_bound,
    mi_label,
    network_from_text,
    network_to_text,
    sample_conditional,
    sample_unconditional,
    save_network,
    spiral_dataset,
)
from smoothent.entropy import McBudget, gaussian_entropy_analytic, plugin_entropy
from smoothent.rng import derive_seed

FIXTURES = Path(__file__).parent / "fixtures"


def identity_net(d=1, depth=1, sigma=0.2):
    return NoisyNetwork(tuple(Layer(np.eye(d), np.zeros(d)) for _ in range(depth)), sigma)


def binary_mi_quadrature(atoms, sigma):
    """I(X; X + Z) for X uniform on ``atoms`` in one dimension."""
    atoms = np.asarray(atoms, dtype=float)

    def q(z):
        return np.mean(norm.pdf(z, atoms, sigma))

    def integrand(z):
        v = q(z)
        return -v * math.log(v) if v > 0 else 0.0

    lo, hi = atoms.min() - 12 * sigma, atoms.max() + 12 * sigma
    pts = sorted(set(atoms.tolist()))
    h = integrate.quad(integrand, lo, hi, points=pts, limit=400, epsabs=1e-11)[0]
    return h - gaussian_entropy_analytic(1, sigma)


def clustered(centers, per, labels=None, seed=0):
    x = np.repeat(np.asarray(centers, dtype=float), per)
    y = labels if labels is not None else np.repeat(np.arange(len(centers)), per)
    order = np.random.default_rng(seed).permutation(x.size)
    return LabeledDataset(x[order].reshape(-1, 1), tuple(np.asarray(y)[order].tolist()))


class TestNetworkTypes:
    def test_layer_shape_mismatch(self):
        with pytest.raises(ValueError):
            Layer(np.eye(2), np.zeros(3))

    def test_unknown_activation(self):
        with pytest.raises(ValueError, match="activation"):
            Layer(np.eye(2), np.zeros(2), "softplus")

    def test_chain_mismatch(self):
        with pytest.raises(ValueError, match="layer 1"):
            NoisyNetwork((Layer(np.eye(2), np.zeros(2)), Layer(np.eye(3), np.zeros(3))), 0.1)

    def test_sigma_positive(self):
        with pytest.raises(ValueError):
            identity_net(sigma=0.0)

    def test_labels_validated(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((3, 1)), (0, 1))
        with pytest.raises(ValueError, match="label set"):
            LabeledDataset(np.zeros((2, 1)), (0, 5), (0, 1))


class TestForward:
    def test_identity_first_layer_is_input(self):
        x = np.array([0.3, -1.7, 2.0])
        np.testing.assert_array_equal(forward_pre_noise(identity_net(3), x, 1, seed=4), x)

    def test_tanh_range(self):
        rng = np.random.default_rng(0)
        net = NoisyNetwork((Layer(rng.normal(size=(2, 6)) * 5, rng.normal(size=6), "tanh"),
                            Layer(rng.normal(size=(6, 4)) * 5, rng.normal(size=4), "tanh")), 3.0)
        out = forward_batch(net, rng.normal(size=(200, 2)) * 10, 2, seed=1)
        assert np.all(np.abs(out) <= 1.0)

    def test_seeds_differ_deeper(self):
        net = identity_net(2, depth=2)
        a = forward_pre_noise(net, [1.0, 2.0], 2, seed=0)
        b = forward_pre_noise(net, [1.0, 2.0], 2, seed=1)
        assert not np.array_equal(a, b)

    def test_noise_scale(self):
        net = identity_net(1, depth=2, sigma=0.5)
        out = forward_batch(net, np.zeros((20_000, 1)), 2, seed=3)
        assert np.std(out) == pytest.approx(0.5, rel=0.03)
        assert abs(np.mean(out)) < 0.02

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="features"):
            forward_pre_noise(identity_net(2), [1.0, 2.0, 3.0], 1, seed=0)

    @pytest.mark.parametrize("layer", [0, 3])
    def test_layer_range(self, layer):
        with pytest.raises(ValueError, match="layer"):
            forward_pre_noise(identity_net(1, depth=2), [0.0], layer, seed=0)

    def test_workers_do_not_change_output(self):
        net = identity_net(2, depth=3)
        x = np.random.default_rng(0).normal(size=(5000, 2))
        np.testing.assert_array_equal(forward_batch(net, x, 3, 9, workers=1), forward_batch(net, x, 3, 9, workers=4))


class TestSampling:
    def test_unconditional_shape_and_determinism(self):
        data = spiral_dataset(20)
        net = load_network(FIXTURES / "spiral_net.txt")
        a = sample_unconditional(net, data, 2, seed=5)
        b = sample_unconditional(net, data, 2, seed=5)
        assert a.rows.shape == (60, net.width(2))
        np.testing.assert_array_equal(a.rows, b.rows)

    def test_unconditional_layer_one_identity(self):
        data = LabeledDataset(np.arange(10.0).reshape(5, 2), (0, 1, 0, 1, 0))
        np.testing.assert_array_equal(sample_unconditional(identity_net(2), data, 1, seed=0).rows, data.features)

    def test_conditional_is_noisy_input(self):
        net = identity_net(1, depth=2, sigma=0.3)
        s = sample_conditional(net, [2.0], 2, 4000, seed=1)
        assert s.rows.shape == (4000, 1)
        assert np.var(s.rows) > 0
        assert np.mean(s.rows) == pytest.approx(2.0, abs=0.03)
        assert np.std(s.rows) == pytest.approx(0.3, rel=0.05)

    def test_conditional_needs_layer_two(self):
        with pytest.raises(ValueError, match="layer >= 2"):
            sample_conditional(identity_net(1, depth=2), [0.0], 1, 10, seed=0)


class TestMiInput:
    def test_well_separated_binary(self):
        data = clustered([-5.0, 5.0], 250)
        rep = mi_input(identity_net(1, sigma=0.2), data, 1, McBudget(50), seed=0)
        assert binary_mi_quadrature([-5, 5], 0.2) == pytest.approx(math.log(2), abs=1e-9)
        assert rep.value == pytest.approx(math.log(2), abs=0.05)

    def test_nearly_independent(self):
        a = 0.2 / 100
        data = clustered([-a, a], 250)
        rep = mi_input(identity_net(1, sigma=0.2), data, 1, McBudget(50), seed=0)
        assert binary_mi_quadrature([-a, a], 0.2) < 1e-4
        assert rep.value < 0.02

    def test_layer_one_subtracts_exact_noise_entropy(self):
        data = clustered([-5.0, 5.0], 50)
        net = identity_net(1, sigma=0.2)
        rep = mi_input(net, data, 1, McBudget(20), seed=0)
        h = plugin_entropy(sample_unconditional(net, data, 1, derive_seed(0, "uncond")), 0.2, McBudget(20), derive_seed(0, "h"))
        assert rep.value == h.value - gaussian_entropy_analytic(1, 0.2)
        assert rep.std_error == h.std_error

    def test_constant_input(self):
        data = LabeledDataset(np.full((60, 2), 0.7), (0,) * 60)
        net = identity_net(2, depth=2, sigma=0.5)
        rep = mi_input(net, data, 2, McBudget(20), seed=1, n_cond=60)
        assert abs(rep.value) <= max(3 * rep.std_error, 0.05)
        rep1 = mi_input(net, data, 1, McBudget(20), seed=1)
        assert abs(rep1.value) <= 3 * rep1.std_error + 1e-12

    def test_data_processing_and_nonnegativity(self):
        data = clustered([-1.0, 1.0], 40)
        net = identity_net(1, depth=2, sigma=0.5)
        i1 = mi_input(net, data, 1, McBudget(50), seed=2)
        i2 = mi_input(net, data, 2, McBudget(50), seed=2, n_cond=80)
        assert i2.value <= i1.value + 4 * math.hypot(i1.std_error, i2.std_error)
        for rep in (i1, i2):
            assert rep.value >= -3 * rep.std_error


class TestMiLabel:
    def test_sign_label(self):
        data = clustered([-5.0, 5.0], 250)
        rep = mi_label(identity_net(1, sigma=0.2), data, 1, McBudget(50), seed=0)
        assert rep.value == pytest.approx(math.log(2), abs=0.05)

    def test_three_clusters(self):
        data = clustered([0.0, 10.0, 20.0], 100)
        rep = mi_label(identity_net(1, sigma=0.2), data, 1, McBudget(50), seed=0)
        assert binary_mi_quadrature([0, 10, 20], 0.2) == pytest.approx(math.log(3), abs=1e-9)
        assert rep.value == pytest.approx(math.log(3), abs=0.05)

    def test_single_label(self):
        data = clustered([-5.0, 5.0], 100, labels=np.zeros(200, dtype=int))
        rep = mi_label(identity_net(1, sigma=0.2), data, 1, McBudget(50), seed=0)
        assert abs(rep.value) <= 3 * rep.std_error + 1e-12

    def test_empty_class(self):
        data = LabeledDataset(np.zeros((4, 1)), (0, 0, 1, 1), (0, 1, 2))
        with pytest.raises(ValueError, match="2"):
            mi_label(identity_net(), data, 1, McBudget(5), seed=0)


class TestRiskBound:
    def test_values(self):
        assert mi_input_risk_bound(0.0, 1, 1.0, 100) == pytest.approx(math.log(2) / 40, rel=1e-12)
        assert mi_input_risk_bound(0.0, 1, 1.0, 100) == pytest.approx(0.01733, abs=1e-5)
        assert mi_input_risk_bound(0.1, 1, 1.0, 100) == pytest.approx(0.2 + math.log(2) / 40, rel=1e-12)

    def test_large_sigma(self):
        assert mi_input_risk_bound(0.3, 4, 1e6, 10) == pytest.approx(0.6, rel=1e-9)

    def test_domain(self):
        with pytest.raises(ValueError):
            mi_input_risk_bound(-0.1, 1, 1.0, 10)


class TestFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        net = NoisyNetwork((Layer(rng.normal(size=(2, 3)), rng.normal(size=3), "tanh"),
                            Layer(rng.normal(size=(3, 2)), rng.normal(size=2), "relu")), 0.37)
        save_network(net, tmp_path / "n.txt")
        back = load_network(tmp_path / "n.txt")
        assert back.noise_sigma == 0.37
        for a, b in zip(net.layers, back.layers):
            np.testing.assert_array_equal(a.weight, b.weight)
            np.testing.assert_array_equal(a.bias, b.bias)
            assert a.activation == b.activation
        assert network_to_text(back) == network_to_text(net)

    def test_sigma_override_and_missing(self):
        text = "layer 1 1 identity\n2.0\n0.5\n"
        assert network_from_text(text, noise_sigma=0.1).noise_sigma == 0.1
        with pytest.raises(ValueError, match="noise level"):
            network_from_text(text)

    def test_truncated_file(self):
        with pytest.raises(ValueError, match="needs"):
            network_from_text("sigma 0.1\nlayer 2 2 tanh\n1 2 3\n")

    def test_fixture_network(self):
        net = load_network(FIXTURES / "spiral_net.txt")
        assert [lyr.d_out for lyr in net.layers] == [4, 4, 5]
        assert net.layers[0].d_in == 2
        assert all(lyr.activation == "tanh" for lyr in net.layers)

    def test_dataset_csv(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x1,x2,label\n# comment\n0.5,1.0,a\n-1,2,b\n")
        data = load_dataset_csv(p)
        assert data.features.shape == (2, 2)
        assert data.labels == ("a", "b")

    def test_spiral(self):
        data = spiral_dataset(50, 3, seed=2)
        assert data.n == 150
        assert data.label_set == (0, 1, 2)
        assert np.all(np.linalg.norm(data.features, axis=1) <= 1.0 + 1e-12)
