import math

import numpy as np
import pytest
import torch

from anatgraph import numerics as nx

from oracles import conv3d_loops, gradcheck, matmul_loops


def rand(rng, *shape, lo=-1.0, hi=1.0):
    return torch.tensor(rng.uniform(lo, hi, size=shape), dtype=torch.float32)


class TestMatmul:
    def test_identity(self):
        a = nx.tensor([[1, 2], [3, 4]])
        assert torch.equal(nx.matmul(torch.eye(2), a), a)

    def test_annihilator(self):
        assert torch.equal(nx.matmul(torch.eye(2), torch.zeros(2, 2)), torch.zeros(2, 2))

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        got = nx.matmul(nx.tensor(a), nx.tensor(b)).numpy()
        np.testing.assert_allclose(got, matmul_loops(a.astype(np.float32), b.astype(np.float32)), atol=1e-6)

    def test_shape_error(self):
        with pytest.raises(nx.ShapeError):
            nx.matmul(torch.zeros(2, 3), torch.zeros(2, 3))


class TestConv3d:
    def test_dirac_kernel_is_identity(self):
        x = torch.randn(1, 5, 6, 7)
        k = torch.zeros(1, 1, 3, 3, 3)
        k[0, 0, 1, 1, 1] = 1.0
        assert torch.equal(nx.conv3d(x, k), x)

    def test_all_ones_center_counts_27(self):
        out = nx.conv3d(torch.ones(1, 3, 3, 3), torch.ones(1, 1, 3, 3, 3))
        assert out[0, 1, 1, 1].item() == 27.0

    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_direct_loops(self, stride):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3, 3)).astype(np.float32)
        got = nx.conv3d(torch.from_numpy(x), torch.from_numpy(w), stride=stride).numpy()
        np.testing.assert_allclose(got, conv3d_loops(x, w, stride), atol=1e-5)

    def test_stride2_ladder(self):
        sizes = [32]
        while sizes[-1] > 1:
            sizes.append(nx.conv_output_size(sizes[-1], 2))
        assert sizes == [32, 16, 8, 4, 2, 1]
        x = torch.zeros(1, 1, 32, 32, 32)
        k = torch.zeros(1, 1, 3, 3, 3)
        for expected in sizes[1:]:
            x = nx.conv3d(x, k, stride=2)
            assert x.shape[-1] == expected

    def test_channel_mismatch(self):
        with pytest.raises(nx.ShapeError):
            nx.conv3d(torch.zeros(2, 4, 4, 4), torch.zeros(1, 3, 3, 3, 3))


class TestActivations:
    def test_elu(self):
        assert nx.elu(torch.tensor([0.0])).item() == 0.0
        assert nx.elu(torch.tensor([-50.0])).item() == pytest.approx(-1.0, abs=1e-12)

    def test_relu(self):
        assert nx.relu(torch.tensor([-3.0, 3.0])).tolist() == [0.0, 3.0]

    def test_sigmoid(self):
        assert nx.sigmoid(torch.tensor([0.0])).item() == 0.5

    def test_unknown(self):
        with pytest.raises(ValueError):
            nx.activation(torch.zeros(1), "tanh")


class TestBatchNorm:
    def test_constant_channel_gives_zero(self):
        x = torch.full((4, 2, 3), 7.0)
        out = nx.batch_norm(x, torch.ones(2), torch.zeros(2))
        assert torch.equal(out, torch.zeros_like(out))

    def test_zero_gamma_returns_beta(self):
        x = torch.randn(5, 3)
        beta = torch.tensor([0.5, -1.0, 2.0])
        out = nx.batch_norm(x, torch.zeros(3), beta)
        assert torch.equal(out, beta.expand(5, 3))

    def test_moments(self):
        torch.manual_seed(0)
        x = torch.randn(64, 3, 4) * 3 + 2
        out = nx.batch_norm(x, torch.ones(3), torch.zeros(3)).double()
        mean = out.mean(dim=(0, 2))
        var = out.var(dim=(0, 2), unbiased=False)
        # eps = 1e-5 shrinks the variance by about eps / var(x)
        assert mean.abs().max() < 1e-4
        assert (var - 1).abs().max() < 1e-4

    def test_running_stats_momentum(self):
        x = torch.tensor([[1.0], [3.0]])
        rm, rv = torch.zeros(1), torch.ones(1)
        nx.batch_norm(x, torch.ones(1), torch.zeros(1), rm, rv, training=True)
        assert rm.item() == pytest.approx(0.1 * 2.0)
        # unbiased batch variance is 2
        assert rv.item() == pytest.approx(0.9 + 0.1 * 2.0)

    def test_eval_uses_running_stats(self):
        x = torch.tensor([[2.0], [4.0]])
        out = nx.batch_norm(x, torch.ones(1), torch.zeros(1), torch.tensor([2.0]), torch.tensor([4.0]), training=False)
        np.testing.assert_allclose(out.numpy().ravel(), [0.0, 2.0 / math.sqrt(4.0 + 1e-5)], rtol=1e-6)

    def test_batch_of_one_rejected(self):
        with pytest.raises(ValueError):
            nx.batch_norm(torch.zeros(1, 2), torch.ones(2), torch.zeros(2))


class TestGrad:
    def test_sum(self):
        x = torch.randn(3, 2, requires_grad=True)
        (g,) = nx.grad(x.sum(), [x])
        assert torch.equal(g, torch.ones(3, 2))

    def test_half_squared_norm(self):
        x = torch.randn(5, requires_grad=True)
        (g,) = nx.grad((x * x).sum() / 2, [x])
        torch.testing.assert_close(g, x.detach())

    def test_unused_parameter_is_none_not_zero(self):
        x = torch.randn(3, requires_grad=True)
        y = torch.randn(3, requires_grad=True)
        z = torch.randn(3, requires_grad=True)
        grads = nx.grad((x * 0).sum(), {"x": x, "y": y})
        assert grads["y"] is None
        assert torch.equal(grads["x"], torch.zeros(3))
        assert nx.grad((x * z).sum(), {"frozen": torch.ones(3)})["frozen"] is None

    def test_non_scalar_rejected(self):
        x = torch.randn(3, requires_grad=True)
        with pytest.raises(nx.ShapeError):
            nx.grad(x * 2, [x])


class TestL2Normalize:
    def test_known(self):
        np.testing.assert_allclose(nx.l2_normalize(nx.tensor([3.0, 4.0])).numpy(), [0.6, 0.8], rtol=1e-7)

    def test_unit_fixed_point(self):
        u = nx.tensor([0.0, 1.0, 0.0])
        assert torch.equal(nx.l2_normalize(u), u)

    def test_random_unit_norm(self):
        x = torch.randn(128)
        out = nx.l2_normalize(x).double()
        assert abs(float(out @ out) - 1.0) < 1e-6

    def test_degenerate(self):
        with pytest.raises(nx.DegenerateInputError):
            nx.l2_normalize(torch.zeros(4))


class TestFiniteness:
    def test_nan_surfaces(self):
        with pytest.raises(nx.NonFiniteError):
            nx.matmul(nx.tensor([[float("nan")]]), nx.tensor([[1.0]]))

    def test_overflow_surfaces(self):
        with pytest.raises(nx.NonFiniteError):
            nx.matmul(nx.tensor([[3e38]]), nx.tensor([[10.0]]))

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        x, w = rand(rng, 2, 5, 5, 5), rand(rng, 3, 2, 3, 3, 3)
        assert torch.equal(nx.conv3d(x, w), nx.conv3d(x, w))


SEEDS = range(20)


def _sizes(rng, n, hi=6):
    return [int(v) for v in rng.integers(1, hi + 1, size=n)]


class TestGradientChecks:
    """Autograd (float32) against 64-bit central differences, eps = 1e-3."""

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matmul(self, seed):
        rng = np.random.default_rng(seed)
        m, k, n = _sizes(rng, 3)
        c = torch.tensor(rng.standard_normal((m, n)))
        err = gradcheck(lambda a, b: (nx.matmul(a, b) * c.to(a.dtype)).sum(), [rand(rng, m, k), rand(rng, k, n)])
        assert err < 1e-3

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv3d(self, seed):
        rng = np.random.default_rng(seed)
        cin, cout = _sizes(rng, 2, hi=2)
        d, h, w = _sizes(rng, 3, hi=4)
        stride = int(rng.integers(1, 3))
        x, k = rand(rng, cin, d, h, w), rand(rng, cout, cin, 3, 3, 3)
        probe = nx.conv3d(x, k, stride)
        c = torch.tensor(rng.standard_normal(probe.shape))
        err = gradcheck(lambda a, b: (nx.conv3d(a, b, stride) * c.to(a.dtype)).sum(), [x, k])
        assert err < 1e-3

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("kind", ["elu", "relu", "sigmoid"])
    def test_activations(self, seed, kind):
        rng = np.random.default_rng(seed)
        x = rand(rng, *_sizes(rng, 2))
        # keep ReLU inputs away from its kink
        x = torch.where(x.abs() < 0.05, x.sign() * 0.05 + (x == 0) * 0.05, x)
        c = torch.tensor(rng.standard_normal(x.shape))
        assert gradcheck(lambda a: (nx.activation(a, kind) * c.to(a.dtype)).sum(), [x]) < 1e-3

    @pytest.mark.parametrize("seed", SEEDS)
    def test_batch_norm(self, seed):
        rng = np.random.default_rng(seed)
        b, ch, s = int(rng.integers(2, 7)), *_sizes(rng, 2, hi=4)
        x = rand(rng, b, ch, s)
        gamma, beta = rand(rng, ch, lo=0.5, hi=1.5), rand(rng, ch)
        c = torch.tensor(rng.standard_normal(x.shape))
        err = gradcheck(lambda a, g, bt: (nx.batch_norm(a, g, bt) * c.to(a.dtype)).sum(), [x, gamma, beta])
        assert err < 1e-3

    @pytest.mark.parametrize("seed", SEEDS)
    def test_l2_normalize(self, seed):
        rng = np.random.default_rng(seed)
        x = rand(rng, *_sizes(rng, 1))
        x[0] = 1.0
        c = torch.tensor(rng.standard_normal(x.shape))
        assert gradcheck(lambda a: (nx.l2_normalize(a) * c.to(a.dtype)).sum(), [x]) < 1e-3
