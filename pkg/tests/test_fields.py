import numpy as np
import pytest
import torch

from silsdf.fields import (
    MAGIC,
    CheckpointError,
    FieldNet,
    Tape,
    backward,
    eval_rgb,
    eval_sdf,
    grad_sdf,
    load_checkpoint,
    param_count,
    positional_encode,
    pretrain_sphere,
    save_checkpoint,
    step_cell,
)

from conftest import tiny_net
from oracles import central_differences, lstm_step_reference


class TestPositionalEncoding:
    def test_zero(self):
        enc = positional_encode(np.zeros(3), 6)
        assert enc.shape == (39,)
        expected = np.tile([0.0] + [1.0, 0.0] * 6, 3)
        np.testing.assert_array_equal(enc, expected)

    def test_layout(self):
        x = np.array([0.3, -0.7, 1.1])
        enc = positional_encode(x, 3)
        for c in range(3):
            block = enc[c * 7 : (c + 1) * 7]
            assert block[0] == x[c]
            for k in range(3):
                assert block[1 + 2 * k] == pytest.approx(np.cos(2**k * x[c]))
                assert block[2 + 2 * k] == pytest.approx(np.sin(2**k * x[c]))

    def test_torch_matches_numpy(self):
        x = np.random.default_rng(0).uniform(-1, 1, (10, 3))
        np.testing.assert_allclose(positional_encode(torch.tensor(x), 6).numpy(), positional_encode(x, 6))

    def test_level_zero(self):
        np.testing.assert_array_equal(positional_encode([1.0, 2.0, 3.0], 0), [1.0, 2.0, 3.0])


class TestArchitecture:
    @pytest.mark.parametrize("kw", [{}, {"width": 16, "enc_levels": 2, "hidden": 8}, {"depth": 2}])
    def test_param_count(self, kw):
        net = FieldNet(**kw)
        assert sum(p.numel() for p in net.parameters()) == param_count(**kw)

    def test_param_count_matches_checkpoint_size(self, tmp_path):
        net = FieldNet()
        save_checkpoint(net, tmp_path / "c.bin")
        raw = (tmp_path / "c.bin").read_bytes()
        hlen = int.from_bytes(raw[8:12], "little")
        assert len(raw) - 12 - hlen == 4 * param_count()

    def test_forget_bias(self):
        net = FieldNet(hidden=32)
        bias = (net.cell.bias_ih + net.cell.bias_hh).detach()
        np.testing.assert_array_equal(bias[32:64].numpy(), 1.0)

    def test_seeded_init_reproducible(self):
        a, b = FieldNet(seed=3), FieldNet(seed=3)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        assert not torch.equal(FieldNet(seed=4).layers[0].weight, a.layers[0].weight)

    def test_seed_does_not_touch_global_rng(self):
        torch.manual_seed(0)
        ref = torch.rand(3)
        torch.manual_seed(0)
        FieldNet(seed=5)
        np.testing.assert_array_equal(torch.rand(3).numpy(), ref.numpy())


class TestEvaluation:
    def test_shapes_and_range(self):
        net = FieldNet()
        x = np.random.default_rng(0).uniform(-1, 1, (64, 3))
        assert eval_sdf(net, x).shape == (64,)
        rgb = eval_rgb(net, x)
        assert rgb.shape == (64, 3)
        assert np.all((rgb >= 0) & (rgb <= 1))

    def test_bit_identical_repeat(self):
        net = FieldNet()
        x = np.random.default_rng(1).uniform(-1, 1, (32, 3))
        np.testing.assert_array_equal(eval_sdf(net, x), eval_sdf(net, x))

    def test_features_are_shared(self):
        net = tiny_net()
        x = torch.rand(5, 3, dtype=torch.float64)
        feat = net.features(x)
        np.testing.assert_array_equal(net.sdf_from_features(feat).detach(), net.sdf(x).detach())
        np.testing.assert_array_equal(net.rgb_from_features(feat).detach(), net.rgb(x).detach())

    def test_lipschitz_empirical(self):
        net = FieldNet()
        rng = np.random.default_rng(2)
        x = rng.uniform(-1, 1, (100_000, 3))
        y = x + rng.normal(size=x.shape) * 3e-4
        y = x + (y - x) * np.minimum(1.0, 1e-3 / np.linalg.norm(y - x, axis=-1, keepdims=True))
        ratio = np.abs(eval_sdf(net.double(), x) - eval_sdf(net, y)) / np.linalg.norm(x - y, axis=-1)
        assert np.isfinite(ratio).all()
        # a continuous field: local slopes stay bounded and comparable to the bulk
        assert ratio.max() < 50 * np.median(ratio) + 1.0


class TestGradSdf:
    def test_matches_finite_differences(self):
        net = tiny_net(seed=1)
        rng = np.random.default_rng(3)
        x = torch.tensor(rng.uniform(-1, 1, (100, 3)))
        g = grad_sdf(net, x).numpy()
        h = 1e-4
        fd = np.zeros_like(g)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            fd[:, k] = (eval_sdf(net, x.numpy() + e) - eval_sdf(net, x.numpy() - e)) / (2 * h)
        err = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-7)
        # kinks of ReLU may fall inside a stencil; demand agreement on nearly all points
        assert np.mean(np.all(err < 1e-4, axis=-1)) >= 0.97

    def test_create_graph(self):
        net = tiny_net()
        x = torch.rand(4, 3, dtype=torch.float64)
        g = grad_sdf(net, x, create_graph=True)
        assert g.requires_grad


class TestStepCell:
    def test_matches_scalar_reference(self):
        net = tiny_net(seed=2)
        feat = torch.rand(1, 16, dtype=torch.float64)
        state = net.zero_state(1)
        state.hidden.uniform_(-0.5, 0.5)
        state.cell.uniform_(-0.5, 0.5)
        new, dz = step_cell(net, state, feat)
        c = net.cell
        h_ref, c_ref = lstm_step_reference(
            feat[0].tolist(),
            state.hidden[0].tolist(),
            state.cell[0].tolist(),
            c.weight_ih.tolist(),
            c.weight_hh.tolist(),
            c.bias_ih.tolist(),
            c.bias_hh.tolist(),
        )
        np.testing.assert_allclose(new.hidden[0].detach().numpy(), h_ref, rtol=1e-12)
        np.testing.assert_allclose(new.cell[0].detach().numpy(), c_ref, rtol=1e-12)
        w, b = net.step_head.weight[0].detach().numpy(), net.step_head.bias.item()
        assert dz.item() == pytest.approx(abs(np.dot(w, h_ref) + b), rel=1e-12)

    def test_step_non_negative(self):
        net = FieldNet()
        _, dz = net.step(net.zero_state(256), net.features(torch.rand(256, 3) * 2 - 1))
        assert torch.all(dz >= 0)


class TestTape:
    def test_backward_matches_finite_differences(self):
        net = tiny_net(seed=3)
        x = torch.rand(6, 3, dtype=torch.float64) * 2 - 1

        def loss():
            return (net.sdf(x) ** 2).sum() + net.rgb(x).sum()

        tape = Tape()
        tape.record(loss())
        grads = backward(tape, net)
        params = {n: p for n, p in net.named_parameters() if not n.startswith(("cell", "step_head"))}
        fd = central_differences(loss, params)
        for n in params:
            np.testing.assert_allclose(grads[n].numpy(), fd[n].numpy(), rtol=1e-4, atol=1e-7)
        # parameters the loss does not use get exact zeros
        assert torch.count_nonzero(grads["cell.weight_ih"]) == 0

    def test_backward_without_record(self):
        with pytest.raises(RuntimeError):
            backward(Tape(), tiny_net())

    def test_record_rejects_vector(self):
        with pytest.raises(ValueError):
            Tape().record(torch.zeros(3))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = tiny_net(seed=4)
        save_checkpoint(net, tmp_path / "c.bin")
        back = load_checkpoint(tmp_path / "c.bin")
        assert back.arch() == net.arch()
        assert back.dtype == torch.float64
        for (n, p), (_, q) in zip(net.state_dict().items(), back.state_dict().items()):
            assert torch.equal(p, q), n
        assert (tmp_path / "c.bin").read_bytes()[:8] == MAGIC

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.bin").write_bytes(b"NOTACKPT" + bytes(8))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.bin")

    def test_truncated(self, tmp_path):
        save_checkpoint(FieldNet(), tmp_path / "c.bin")
        raw = (tmp_path / "c.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(raw[:-4])
        with pytest.raises(CheckpointError, match="parameter bytes"):
            load_checkpoint(tmp_path / "t.bin")


class TestPretrain:
    def test_rejects_bad_radius(self):
        with pytest.raises(ValueError):
            pretrain_sphere(tiny_net(), radius=0.0)

    def test_short_run_deterministic(self):
        a = pretrain_sphere(tiny_net(), iters=20, points=500, seed=1)
        b = pretrain_sphere(tiny_net(), iters=20, points=500, seed=1)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_divergence_reported(self):
        net = tiny_net()
        with pytest.raises(FloatingPointError):
            pretrain_sphere(net, iters=3, points=100, lr=float("inf"))

    def test_mse(self, pretrained):
        assert pretrained.pretrain_mse < 1e-3

    def test_center_value(self, pretrained):
        v = eval_sdf(pretrained, [[0.0, 0.0, 0.0]])[0]
        assert -0.52 <= v <= -0.48

    def test_surface_value(self, pretrained):
        assert abs(eval_sdf(pretrained, [[0.5, 0.0, 0.0]])[0]) < 0.02

    def test_gradient_direction(self, pretrained):
        g = grad_sdf(pretrained, torch.tensor([[0.3, 0.0, 0.0]])).numpy()[0]
        np.testing.assert_allclose(g, [1.0, 0.0, 0.0], atol=0.05)


class TestInit:
    def test_encoding_column_scale(self):
        from silsdf.fields import encoding_column_scale

        s = encoding_column_scale(2).numpy()
        np.testing.assert_array_equal(s, [1, 1, 1, 0.5, 0.5] * 3)

    def test_high_levels_start_small(self):
        net = FieldNet(seed=0)
        w = net.layers[0].weight.detach().abs()
        # raw-coordinate columns versus the level-5 sine columns
        assert float(w[:, 0].max()) > 8 * float(w[:, 12].max())
