"""
Tests for the 3D-CNN engine: layers, loss, SGD, gradient checking and model files.
"""
import math

import numpy as np
import pytest

from core import net3d
from core.errors import FormatError, InvalidArgumentError, InvalidStateError, NonFiniteError
from models.network_models import Activation, ConvLayer, NetworkGrads, Padding


def zero_grads(params):
    return NetworkGrads(
        conv=[ConvLayer(np.zeros_like(c.kernels), np.zeros_like(c.biases)) for c in params.conv],
        fc_weights=np.zeros_like(params.fc_weights),
        fc_biases=np.zeros_like(params.fc_biases),
    )


def naive_conv(x, kernels, biases):
    """Same-padded stride-1 cross-correlation by explicit loops."""
    batch, d, r, c, _ = x.shape
    filters, k1, k2, k3, _ = kernels.shape
    pads = [((k - 1) // 2, k - 1 - (k - 1) // 2) for k in (k1, k2, k3)]
    xp = np.pad(x, [(0, 0)] + pads + [(0, 0)])
    out = np.zeros((batch, d, r, c, filters))
    for s in range(batch):
        for f in range(filters):
            for u in range(d):
                for v in range(r):
                    for w in range(c):
                        window = xp[s, u:u + k1, v:v + k2, w:w + k3, :]
                        out[s, u, v, w, f] = np.sum(window * kernels[f]) + biases[f]
    return out


@pytest.fixture
def tiny_net():
    return net3d.build_network(2, 3, 2, seed=0, activation=Activation.TANH)


class TestConstruction:

    def test_fc_input_size(self):
        params = net3d.build_network(5, 7, 9, seed=0)
        assert params.flat_size == 5 * 7 * 7 * 35
        assert params.flat_size == 8575

    def test_parameter_count(self):
        assert net3d.count_parameters(net3d.build_network(5, 7, 9, seed=0)) == 30620 + 9 * 8575 + 9

    def test_seeded_initialisation(self):
        a = net3d.build_network(3, 3, 2, seed=4)
        b = net3d.build_network(3, 3, 2, seed=4)
        c = net3d.build_network(3, 3, 2, seed=5)
        assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.groups(), b.groups()))
        assert not np.array_equal(a.conv[0].kernels, c.conv[0].kernels)

    def test_zero_biases_and_zero_input(self):
        params = net3d.build_network(3, 5, 4, seed=1)
        assert all(not layer.biases.any() for layer in params.conv)
        logits, _ = net3d.forward(params, np.zeros((3, 5, 5, 1)))
        assert np.array_equal(logits, np.zeros(4))

    @pytest.mark.parametrize("depth, p, classes", [(1, 7, 3), (5, 4, 3), (5, 1, 3), (5, 7, 1)])
    def test_rejects_bad_topology(self, depth, p, classes):
        with pytest.raises(InvalidArgumentError):
            net3d.build_network(depth, p, classes, seed=0)

    def test_valid_padding_dimensions(self):
        assert net3d.output_shape(12, 7, Padding.VALID) == (1, 3, 3)
        params = net3d.build_network(12, 7, 3, seed=0, padding=Padding.VALID)
        assert params.flat_size == 9 * 35
        logits, _ = net3d.forward(params, np.ones((12, 7, 7, 1)))
        assert logits.shape == (3,)

    def test_valid_padding_too_shallow(self):
        with pytest.raises(InvalidArgumentError):
            net3d.build_network(5, 7, 3, seed=0, padding="valid")


class TestLayers:

    def test_matches_naive_convolution(self, rng):
        x = rng.normal(size=(2, 3, 4, 4, 2))
        kernels = rng.normal(size=(3, 3, 3, 3, 2))
        biases = rng.normal(size=3)
        out, _ = net3d.conv3d_forward(x, kernels, biases, Padding.SAME)
        assert np.allclose(out, naive_conv(x, kernels, biases), rtol=1e-12, atol=1e-12)

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 3, 5, 5, 1))
        kernels = np.zeros((1, 3, 3, 3, 1))
        kernels[0, 1, 1, 1, 0] = 1.0
        out, _ = net3d.conv3d_forward(x, kernels, np.zeros(1), Padding.SAME)
        assert np.array_equal(out, x)

    def test_even_kernel_pads_after(self, rng):
        x = rng.normal(size=(1, 4, 1, 1, 1))
        kernels = np.zeros((1, 2, 1, 1, 1))
        kernels[0, 1, 0, 0, 0] = 1.0
        out, _ = net3d.conv3d_forward(x, kernels, np.zeros(1), Padding.SAME)
        assert np.array_equal(out[0, :3, 0, 0, 0], x[0, 1:, 0, 0, 0])
        assert out[0, 3, 0, 0, 0] == 0.0

    def test_backward_is_adjoint(self, rng):
        x = rng.normal(size=(2, 3, 4, 4, 2))
        kernels = rng.normal(size=(3, 3, 1, 1, 2))
        out, xp = net3d.conv3d_forward(x, kernels, np.zeros(3), Padding.SAME)
        dout = rng.normal(size=out.shape)
        dx, dk, db = net3d.conv3d_backward(xp, kernels, dout, Padding.SAME)
        assert dx.shape == x.shape
        assert np.sum(out * dout) == pytest.approx(np.sum(x * dx), rel=1e-10)
        assert np.array_equal(db, dout.sum(axis=(0, 1, 2, 3)))
        assert dk.shape == kernels.shape

    def test_batch_matches_single(self, rng):
        params = net3d.build_network(3, 3, 4, seed=2)
        inputs = rng.normal(size=(4, 3, 3, 3, 1))
        batch_logits, _ = net3d.forward(params, inputs)
        for i in range(4):
            single, _ = net3d.forward(params, inputs[i])
            assert np.allclose(batch_logits[i], single, rtol=1e-12, atol=1e-12)

    def test_zero_upstream_gradient(self, tiny_net, rng):
        _, cache = net3d.forward(tiny_net, rng.normal(size=(2, 3, 3, 1)))
        grads = net3d.backward(tiny_net, cache, np.zeros(2))
        assert all(not g.any() for _, g in grads.groups())
        assert not grads.d_input.any()

    def test_input_shape_checked(self, tiny_net):
        with pytest.raises(InvalidArgumentError):
            net3d.forward(tiny_net, np.zeros((3, 3, 3, 1)))


class TestLoss:

    def test_softmax_identities(self, rng):
        x = rng.normal(size=5)
        p = net3d.softmax(x)
        assert p.sum() == pytest.approx(1.0)
        assert np.allclose(net3d.softmax(x + 100.0), p)
        assert np.all(p > 0)

    def test_softmax_reference_values(self):
        expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219]
        assert np.allclose(net3d.softmax(np.array([1.0, 2.0, 3.0])), expected, rtol=0, atol=1e-15)

    def test_softmax_sums_to_one_at_scale(self, rng):
        logits = rng.normal(size=(10_000, 5)) * rng.choice([1.0, 1e3], size=(10_000, 1))
        p = net3d.softmax(logits)
        assert np.all(np.isfinite(p))
        assert np.max(np.abs(p.sum(axis=1) - 1.0)) <= 1e-12

    def test_softmax_large_logits(self):
        p = net3d.softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(p))
        assert p[0] == 1.0

    def test_uniform_loss(self):
        assert net3d.loss(net3d.softmax(np.zeros(4)), 2) == pytest.approx(math.log(4), abs=1e-12)

    def test_loss_floor(self):
        net3d.reset_floor_hits()
        value = net3d.loss(net3d.softmax(np.array([0.0, -1000.0])), 1)
        assert value == pytest.approx(-math.log(net3d.LOSS_FLOOR))
        assert net3d.floor_hits() == 1
        net3d.reset_floor_hits()
        assert net3d.floor_hits() == 0

    def test_loss_grad_matches_finite_differences(self, rng):
        z = rng.normal(size=4)
        analytic = net3d.loss_grad(net3d.softmax(z), 1)
        eps = 1e-6
        for i in range(4):
            up, down = z.copy(), z.copy()
            up[i] += eps
            down[i] -= eps
            numeric = (net3d.loss(net3d.softmax(up), 1) - net3d.loss(net3d.softmax(down), 1)) / (2 * eps)
            assert numeric == pytest.approx(analytic[i], abs=1e-8)

    def test_label_range(self):
        with pytest.raises(InvalidArgumentError):
            net3d.loss(np.array([0.5, 0.5]), 2)

    def test_batch_loss(self, rng):
        probs = net3d.softmax(rng.normal(size=(3, 4)))
        labels = np.array([0, 3, 1])
        value, dlogits = net3d.batch_loss(probs, labels)
        assert value == pytest.approx(np.mean([net3d.loss(p, y) for p, y in zip(probs, labels)]))
        assert np.allclose(dlogits[1], net3d.loss_grad(probs[1], 3) / 3)


class TestUpdates:

    def test_stale_cache(self, tiny_net, rng):
        x = rng.normal(size=(2, 3, 3, 1))
        logits, cache = net3d.forward(tiny_net, x)
        net3d.sgd_step(tiny_net, zero_grads(tiny_net), 0.1)
        with pytest.raises(InvalidStateError):
            net3d.backward(tiny_net, cache, logits)

    def test_cache_of_other_params(self, tiny_net, rng):
        logits, cache = net3d.forward(tiny_net, rng.normal(size=(2, 3, 3, 1)))
        with pytest.raises(InvalidStateError):
            net3d.backward(tiny_net.copy(), cache, logits)

    def test_zero_learning_rate(self, tiny_net, rng):
        before = tiny_net.copy()
        logits, cache = net3d.forward(tiny_net, rng.normal(size=(2, 3, 3, 1)))
        grads = net3d.backward(tiny_net, cache, net3d.loss_grad(net3d.softmax(logits), 0))
        net3d.sgd_step(tiny_net, grads, 0.0)
        assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(tiny_net.groups(), before.groups()))
        assert tiny_net.version == 1

    def test_step_moves_against_gradient(self, tiny_net):
        grads = zero_grads(tiny_net)
        grads.fc_biases[:] = [1.0, -2.0]
        net3d.sgd_step(tiny_net, grads, 0.5)
        assert np.array_equal(tiny_net.fc_biases, [-0.5, 1.0])

    def test_non_finite_gradient(self, tiny_net):
        grads = zero_grads(tiny_net)
        grads.fc_biases[0] = np.nan
        with pytest.raises(NonFiniteError) as exc:
            net3d.sgd_step(tiny_net, grads, 0.1)
        assert exc.value.group == "fc.biases"
        assert tiny_net.version == 0

    def test_clip_gradients(self, tiny_net):
        grads = zero_grads(tiny_net)
        grads.fc_biases[:] = [3.0, 0.0]
        extra = np.array([4.0])
        norm = net3d.clip_gradients(grads, 1.0, extra=[extra])
        assert norm == pytest.approx(5.0)
        assert grads.fc_biases[0] == pytest.approx(0.6)
        assert extra[0] == pytest.approx(0.8)

    def test_clip_leaves_small_gradients(self, tiny_net):
        grads = zero_grads(tiny_net)
        grads.fc_biases[:] = [0.3, 0.4]
        net3d.clip_gradients(grads, 1.0)
        assert np.array_equal(grads.fc_biases, [0.3, 0.4])


class TestGradientCheck:

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_sampled_check_passes(self, seed):
        rng = np.random.default_rng(seed)
        params = net3d.build_network(2, 3, 2, seed=seed, activation=Activation.TANH)
        report = net3d.grad_check(params, rng.normal(size=(2, 3, 3, 1)), seed % 2, sample=8, seed=seed)
        assert report.passed, report.failures
        assert report.max_rel_error <= 1e-4

    def test_relu_check_mostly_agrees(self, rng):
        params = net3d.build_network(2, 3, 2, seed=3)
        report = net3d.grad_check(params, rng.normal(size=(2, 3, 3, 1)), 1, sample=8, seed=3)
        assert len(report.failures) <= 0.05 * report.checked

    def test_check_leaves_params_unchanged(self, tiny_net, rng):
        before = tiny_net.copy()
        net3d.grad_check(tiny_net, rng.normal(size=(2, 3, 3, 1)), 0, sample=3)
        assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(tiny_net.groups(), before.groups()))

    def test_detects_injected_fault(self, tiny_net, rng):
        x = rng.normal(size=(2, 3, 3, 1))
        logits, cache = net3d.forward(tiny_net, x)
        grads = net3d.backward(tiny_net, cache, net3d.loss_grad(net3d.softmax(logits), 0))
        worst = np.argmax(np.abs(grads.fc_biases))
        grads.fc_biases[worst] *= 2.0
        report = net3d.grad_check(tiny_net, x, 0, analytic=grads, sample=4)
        assert not report.passed
        assert report.group == "fc.biases"
        assert report.index == (int(worst),)

    def test_halving_eps_does_not_grow_error(self, tiny_net, rng):
        x = rng.normal(size=(2, 3, 3, 1))
        err = net3d.grad_check(tiny_net, x, 1, eps=1e-5, sample=6, seed=7).max_rel_error
        err_half = net3d.grad_check(tiny_net, x, 1, eps=5e-6, sample=6, seed=7).max_rel_error
        assert err_half <= 4 * err + 1e-6

    def test_exhaustive_check_needs_sampling(self, tiny_net, rng):
        assert net3d.count_parameters(tiny_net) > net3d.GRAD_CHECK_LIMIT
        with pytest.raises(InvalidArgumentError):
            net3d.grad_check(tiny_net, rng.normal(size=(2, 3, 3, 1)), 0)

    @pytest.mark.slow
    def test_full_check(self, tiny_net, rng):
        report = net3d.grad_check(tiny_net, rng.normal(size=(2, 3, 3, 1)), 0,
                                  sample=net3d.count_parameters(tiny_net))
        assert report.checked == net3d.count_parameters(tiny_net)
        assert report.passed


class TestModelFiles:

    def test_round_trip(self, tmp_path, rng):
        params = net3d.build_network(3, 3, 3, seed=6)
        path = tmp_path / "m.net.json"
        net3d.save_network(params, path)
        loaded = net3d.load_network(path)
        x = rng.normal(size=(3, 3, 3, 1))
        assert np.array_equal(net3d.forward(params, x)[0], net3d.forward(loaded, x)[0])
        assert loaded.topology() == params.topology()

    def test_shape_mismatch(self, tmp_path):
        data = net3d.network_to_dict(net3d.build_network(3, 3, 3, seed=0))
        data["fc"]["biases"] = [0.0, 0.0]
        with pytest.raises(FormatError):
            net3d.network_from_dict(data)

    def test_bad_topology(self):
        data = net3d.network_to_dict(net3d.build_network(3, 3, 3, seed=0))
        data["topology"]["p"] = 4
        with pytest.raises(FormatError):
            net3d.network_from_dict(data)

    def test_missing_layers(self):
        data = net3d.network_to_dict(net3d.build_network(3, 3, 3, seed=0))
        del data["layers"]
        with pytest.raises(FormatError) as exc:
            net3d.network_from_dict(data)
        assert exc.value.field == "layers"

    def test_not_json(self, tmp_path):
        path = tmp_path / "m.net.json"
        path.write_text("{")
        with pytest.raises(FormatError):
            net3d.load_network(path)
