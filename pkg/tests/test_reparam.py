import itertools

import numpy as np
import pytest

from oracles import avg_pool_loops, conv2d_loops
from sclm.glle import (
    Branch,
    BranchModel,
    FusedModel,
    build_topology,
    branch_forward,
    illumination_logits,
    pad_with_value,
)
from sclm.local_adapt import CurveParams
from sclm.reparam import (
    as_branch_model,
    avgpool_to_kernel,
    collapse,
    collapse_branch,
    dirac_kernel,
    fold_residual,
    fuse_bn,
    fuse_parallel,
    fuse_sequential,
    pad_to_3x3,
)
from sclm.tensor import BNParams, ConvKernel, avg_pool, batch_norm, conv2d
from sclm.verify import randomize_stats, trained_like


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def rk(rng, kh=3, kw=3):
    return ConvKernel(rng.normal(size=(3, 3, kh, kw)), rng.normal(size=3))


def rbn(rng):
    return BNParams(rng.normal(size=3), rng.uniform(0.5, 2, 3), rng.normal(size=3), rng.normal(size=3))


class TestFuseBN:
    def test_identity_bn(self, rng):
        k = rk(rng)
        f = fuse_bn(k, BNParams(np.zeros(3), np.ones(3), np.ones(3), np.zeros(3)))
        np.testing.assert_array_equal(f.weight, k.weight)
        np.testing.assert_array_equal(f.bias, k.bias)

    def test_gamma_equals_sigma(self, rng):
        k = ConvKernel(rng.normal(size=(3, 3, 3, 3)), np.zeros(3))
        s = rng.uniform(0.5, 2, 3)
        f = fuse_bn(k, BNParams(np.zeros(3), s, s, np.zeros(3)))
        np.testing.assert_allclose(f.weight, k.weight, rtol=1e-15)

    def test_pipeline_equivalence(self, rng):
        k, p = rk(rng), rbn(rng)
        x = rng.random((1, 3, 8, 8))
        np.testing.assert_allclose(batch_norm(conv2d(x, k, padding=1), p),
                                   conv2d(x, fuse_bn(k, p), padding=1), atol=1e-5)

    def test_rejects_zero_sigma(self, rng):
        with pytest.raises(ValueError):
            fuse_bn(rk(rng), BNParams(np.zeros(3), np.zeros(3), np.ones(3), np.zeros(3)))


class TestFuseSequential:
    def test_identity_first(self, rng):
        k3 = rk(rng)
        k1 = ConvKernel(np.eye(3)[:, :, None, None], np.zeros(3))
        f = fuse_sequential(k1, k3)
        np.testing.assert_array_equal(f.weight, k3.weight)
        np.testing.assert_array_equal(f.bias, k3.bias)

    def test_dirac_second(self, rng):
        k1 = rk(rng, 1, 1)
        f = fuse_sequential(k1, dirac_kernel(3))
        np.testing.assert_array_equal(f.weight[:, :, 1, 1], k1.weight[:, :, 0, 0])
        f.weight[:, :, 1, 1] = 0
        assert not f.weight.any()
        np.testing.assert_array_equal(f.bias, k1.bias)

    def test_two_stage_equivalence(self, rng):
        k1, k3 = rk(rng, 1, 1), rk(rng)
        x = rng.random((1, 3, 8, 8))
        t = conv2d(x, k1)
        two_stage = conv2d(pad_with_value(t, k1.bias, 1, 1), k3)
        np.testing.assert_allclose(two_stage, conv2d(x, fuse_sequential(k1, k3), padding=1), atol=1e-5)

    def test_interior_matches_plain_zero_padding(self, rng):
        # away from the border the bias-padding choice is irrelevant
        k1, k3 = rk(rng, 1, 1), rk(rng)
        x = rng.random((1, 3, 8, 8))
        plain = conv2d(conv2d(x, k1), k3, padding=1)
        merged = conv2d(x, fuse_sequential(k1, k3), padding=1)
        np.testing.assert_allclose(plain[..., 1:-1, 1:-1], merged[..., 1:-1, 1:-1], atol=1e-12)

    def test_channel_mismatch(self, rng):
        k1 = ConvKernel(rng.normal(size=(2, 3, 1, 1)), np.zeros(2))
        with pytest.raises(ValueError, match="channel"):
            fuse_sequential(k1, rk(rng))


class TestAvgPoolKernel:
    def test_values(self):
        k = avgpool_to_kernel(3, 3)
        for o in range(3):
            for i in range(3):
                expected = np.full((3, 3), 1 / 9) if o == i else np.zeros((3, 3))
                np.testing.assert_array_equal(k.weight[o, i], expected)
        assert not k.bias.any()

    def test_constant_input_interior(self):
        x = np.full((1, 3, 6, 6), 0.4)
        y = conv2d(x, avgpool_to_kernel(3, 3), padding=0)
        np.testing.assert_allclose(y, 0.4, rtol=1e-15)

    def test_matches_avg_pool(self, rng):
        x = rng.random((1, 3, 8, 8))
        y = conv2d(x, avgpool_to_kernel(3, 3), padding=1)
        np.testing.assert_allclose(y, avg_pool_loops(x, 3, 1, 1), atol=1e-6)
        np.testing.assert_allclose(y, avg_pool(x, 3, 1, 1), atol=1e-6)

    def test_strided(self, rng):
        x = rng.random((1, 3, 9, 9))
        np.testing.assert_allclose(conv2d(x, avgpool_to_kernel(3, 3), stride=2, padding=1),
                                   avg_pool_loops(x, 3, 2, 1), atol=1e-6)


class TestPadTo3x3:
    def test_1x1_center(self, rng):
        k = rk(rng, 1, 1)
        p = pad_to_3x3(k)
        np.testing.assert_array_equal(p.weight[:, :, 1, 1], k.weight[:, :, 0, 0])
        assert np.count_nonzero(p.weight) == np.count_nonzero(k.weight)

    def test_3x3_unchanged(self, rng):
        k = rk(rng)
        assert pad_to_3x3(k) is k

    @pytest.mark.parametrize("kh,kw", [(1, 3), (3, 1), (1, 1)])
    def test_forward_equivalent(self, rng, kh, kw):
        k = rk(rng, kh, kw)
        x = rng.random((1, 3, 8, 8))
        small = conv2d_loops(x, k.weight, k.bias, 1, (kh // 2, kw // 2))
        np.testing.assert_allclose(conv2d(x, pad_to_3x3(k), padding=1), small, atol=1e-6)


class TestFuseParallel:
    def test_single(self, rng):
        k = rk(rng)
        f = fuse_parallel([k])
        np.testing.assert_array_equal(f.weight, k.weight)

    def test_cancel(self, rng):
        k = rk(rng)
        f = fuse_parallel([k, ConvKernel(-k.weight, -k.bias)])
        assert not f.weight.any() and not f.bias.any()

    def test_four_branches(self, rng):
        ks = [rk(rng) for _ in range(4)]
        x = rng.random((1, 3, 8, 8))
        np.testing.assert_allclose(sum(conv2d(x, k, padding=1) for k in ks),
                                   conv2d(x, fuse_parallel(ks), padding=1), atol=1e-5)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            fuse_parallel([rk(rng), rk(rng, 1, 1)])


def test_fold_residual(rng):
    k = rk(rng)
    x = rng.random((1, 3, 8, 8))
    np.testing.assert_allclose(conv2d(x, fold_residual(k), padding=1), conv2d(x, k, padding=1) + x, atol=1e-12)


class TestCollapse:
    def test_param_count(self):
        for t in ("plain", "db", "ab", "td"):
            f = collapse(trained_like(t))
            assert f.num_params() == 87
            assert f.kernel.num_params == 84

    def test_plain_is_bn_then_residual(self, rng):
        m = trained_like("plain", seed=3)
        br = m.branches[0]
        expected = fold_residual(fuse_bn(br.stages[0], br.bn))
        f = collapse(m, dtype=np.float64)
        np.testing.assert_array_equal(f.kernel.weight, expected.weight)
        np.testing.assert_array_equal(f.kernel.bias, expected.bias)

    @pytest.mark.parametrize("topology", ["plain", "db", "ab", "td"])
    def test_forward_equivalence(self, topology, rng):
        m = trained_like(topology, seed=11)
        f32 = collapse(m)
        f64 = collapse(m, dtype=np.float64)
        for _ in range(16):
            x = rng.random((1, 3, 32, 32))
            ref = illumination_logits(x, m)
            assert np.abs(ref - illumination_logits(x, f64)).max() < 1e-10
            x32 = x.astype(np.float32)
            assert np.abs(illumination_logits(x32, m.astype(np.float32)) - illumination_logits(x32, f32)).max() < 1e-4

    @pytest.mark.parametrize("topology", ["db", "ab", "td"])
    def test_per_op_equivalence_many_inputs(self, topology, rng):
        # every branch on its own, against its fused kernel
        m = trained_like(topology, seed=5)
        for br in m.branches:
            k = collapse_branch(br)
            worst = 0.0
            for _ in range(100):
                x = rng.random((1, 3, 8, 8))
                worst = max(worst, np.abs(branch_forward(x, br) - conv2d(x, k, padding=1)).max())
            assert worst < 1e-10

    def test_order_insensitive(self):
        m = trained_like("db", seed=2)
        base = collapse(m, dtype=np.float64).kernel
        for perm in itertools.permutations(range(len(m.branches))):
            shuffled = BranchModel(m.topology, [m.branches[i] for i in perm])
            k = collapse(shuffled, dtype=np.float64).kernel
            np.testing.assert_allclose(k.weight, base.weight, atol=1e-7)
            np.testing.assert_allclose(k.bias, base.bias, atol=1e-7)

    def test_idempotent(self):
        f = collapse(trained_like("db", seed=4), dtype=np.float64)
        again = collapse(as_branch_model(f), f.curve, dtype=np.float64)
        np.testing.assert_allclose(again.kernel.weight, f.kernel.weight, atol=1e-7)
        np.testing.assert_allclose(again.kernel.bias, f.kernel.bias, atol=1e-7)

    def test_rejects_unpopulated_stats(self):
        m = build_topology("db")
        m.branches[1].bn.sigma[:] = 0.0
        with pytest.raises(ValueError, match="sigma"):
            collapse(m)

    def test_keeps_curve(self):
        c = CurveParams(0.1, 0.2, 0.3)
        assert collapse(trained_like("td"), c).curve == c

    def test_standalone_pool_branch(self, rng):
        bn = BNParams.identity(3)
        from sclm.glle import AvgPool
        br = Branch([AvgPool(3)], bn)
        randomize_stats(BranchModel("plain", [br]), rng)
        x = rng.random((1, 3, 8, 8))
        np.testing.assert_allclose(branch_forward(x, br), conv2d(x, collapse_branch(br), padding=1), atol=1e-12)

    def test_rejects_fused_input(self):
        with pytest.raises(TypeError):
            collapse(FusedModel(dirac_kernel(3), CurveParams.initial()))
