"""Finite-difference oracle for every layer and block kind.

Each check projects the block output onto a fixed random direction to get a
scalar, backpropagates analytically, and compares every parameter gradient
(and sampled input gradients) against central differences at h=1e-5.
"""

import numpy as np
import pytest

from fusenas import layers as L

H, W = 5, 4
RTOL = 1e-4
STEP = 1e-5


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def fd_check_block(block, x, rng, check_input=True):
    direction = rng.standard_normal(block.forward(x).shape)

    def scalar():
        return float((block.forward(x) * direction).sum())

    block.zero_grads()
    block.forward(x)
    dx = block.backward(direction)
    assert dx.shape == x.shape

    worst = 0.0
    for name, holder in block.param_items():
        for key, arr in holder.params.items():
            flat = arr.reshape(-1)
            gflat = holder.grads[key].reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + STEP
                up = scalar()
                flat[i] = old - STEP
                down = scalar()
                flat[i] = old
                numeric = (up - down) / (2 * STEP)
                worst = max(worst, relative_error(numeric, gflat[i]))
                assert relative_error(numeric, gflat[i]) < RTOL, \
                    f"{name}.{key}[{i}]: analytic {gflat[i]}, numeric {numeric}"

    if check_input:
        flat_x = x.reshape(-1)
        flat_dx = dx.reshape(-1)
        for i in rng.choice(flat_x.size, size=min(40, flat_x.size), replace=False):
            old = flat_x[i]
            flat_x[i] = old + STEP
            up = scalar()
            flat_x[i] = old - STEP
            down = scalar()
            flat_x[i] = old
            numeric = (up - down) / (2 * STEP)
            assert relative_error(numeric, flat_dx[i]) < RTOL, \
                f"input[{i}]: analytic {flat_dx[i]}, numeric {numeric}"
    return worst


def batch(rng, c, b=4):
    return rng.standard_normal((b, H, W, c))


class TestPrimitiveLayers:
    def test_dense(self):
        rng = np.random.default_rng(0)
        layer = L.Dense(6, 3, rng)

        class Wrap:
            def __init__(self, l):
                self.l = l

            def forward(self, x):
                return self.l.forward(x)

            def backward(self, dy):
                return self.l.backward(dy)

            def param_items(self):
                return [("dense", self.l)]

            def zero_grads(self):
                self.l.zero_grads()

        fd_check_block(Wrap(layer), rng.standard_normal((4, 6)), rng)

    def test_conv_1x1(self):
        rng = np.random.default_rng(1)
        block = L.OrdinaryConvBlock(2, 3, rng)
        block.conv = L.Conv2D(2, 3, rng, kernel=1)
        fd_check_block(block, batch(rng, 2), rng)

    def test_adaptive_pool_is_exact_on_divisible_grids(self):
        rng = np.random.default_rng(2)
        pool = L.AdaptiveAvgPool(6, 12)
        x = rng.standard_normal((2, 18, 12, 3))
        y = pool.forward(x)
        assert y.shape == (2, 6, 12, 3)
        assert np.allclose(y[:, 0, 0, :], x[:, 0:3, 0, :].mean(axis=1))
        # adjoint test: <pool(x), r> == <x, pool^T(r)>
        r = rng.standard_normal(y.shape)
        lhs = float((y * r).sum())
        rhs = float((x * pool.backward(r)).sum())
        assert np.isclose(lhs, rhs, rtol=1e-12)

    def test_global_avg_pool_adjoint(self):
        rng = np.random.default_rng(3)
        pool = L.GlobalAvgPool()
        x = rng.standard_normal((3, H, W, 2))
        y = pool.forward(x)
        r = rng.standard_normal(y.shape)
        assert np.isclose(float((y * r).sum()), float((x * pool.backward(r)).sum()))


class TestBlockGradients:
    def test_ordinary_conv(self):
        rng = np.random.default_rng(10)
        for _ in range(3):
            fd_check_block(L.OrdinaryConvBlock(2, 3, rng), batch(rng, 2), rng)

    def test_residual_conv_same_channels(self):
        rng = np.random.default_rng(11)
        block = L.ResidualConvBlock(3, 3, rng)
        assert block.shortcut is None
        fd_check_block(block, batch(rng, 3), rng)

    def test_residual_conv_projection_shortcut(self):
        rng = np.random.default_rng(12)
        block = L.ResidualConvBlock(2, 4, rng)
        assert block.shortcut is not None
        fd_check_block(block, batch(rng, 2), rng)

    def test_local_conv(self):
        rng = np.random.default_rng(13)
        fd_check_block(L.LocalConvBlock(H, W, 2, 3, rng), batch(rng, 2), rng)

    def test_local_residual_conv(self):
        rng = np.random.default_rng(14)
        fd_check_block(L.LocalResidualConvBlock(H, W, 2, 3, rng), batch(rng, 2), rng)
        fd_check_block(L.LocalResidualConvBlock(H, W, 3, 3, rng), batch(rng, 3), rng)

    def test_channel_attention(self):
        rng = np.random.default_rng(15)
        for _ in range(3):
            fd_check_block(L.ChannelAttentionBlock(6, 2, rng), batch(rng, 6), rng)

    def test_spatial_attention(self):
        rng = np.random.default_rng(16)
        for _ in range(3):
            fd_check_block(L.SpatialAttentionBlock(5, rng), batch(rng, 5), rng)


class TestBlockSemantics:
    def test_attention_preserves_shape_and_gates(self):
        rng = np.random.default_rng(20)
        x = batch(rng, 8)
        ca = L.ChannelAttentionBlock(8, 4, rng)
        y = ca.forward(x)
        assert y.shape == x.shape
        gate = ca._cache[7]
        assert ((gate > 0) & (gate < 1)).all()
        assert np.allclose(y, x * gate[:, None, None, :])

        sa = L.SpatialAttentionBlock(8, rng)
        y = sa.forward(x)
        assert y.shape == x.shape
        gate = sa._cache[1]
        assert ((gate > 0) & (gate < 1)).all()
        assert np.allclose(y, x * gate)

    def test_residual_zero_weights_is_identity(self):
        rng = np.random.default_rng(21)
        block = L.ResidualConvBlock(3, 3, rng)
        for key in block.conv1.params:
            block.conv1.params[key][:] = 0.0
        for key in block.conv2.params:
            block.conv2.params[key][:] = 0.0
        x = np.abs(batch(rng, 3)) + 0.1  # positive input passes the final relu
        assert np.allclose(block.forward(x), x)

    def test_local_residual_zero_weights_is_identity(self):
        rng = np.random.default_rng(22)
        block = L.LocalResidualConvBlock(H, W, 3, 3, rng)
        for layer in (block.local1, block.local2):
            for key in layer.params:
                layer.params[key][:] = 0.0
        x = np.abs(batch(rng, 3)) + 0.1
        assert np.allclose(block.forward(x), x)

    def test_channel_attention_tiny_bottleneck_floor(self):
        rng = np.random.default_rng(23)
        block = L.ChannelAttentionBlock(3, 16, rng)
        assert block.params["W1"].shape == (3, 1)
        fd_check_block(block, batch(rng, 3), rng)

    def test_softmax_rows(self):
        rng = np.random.default_rng(24)
        probs = L.softmax(rng.standard_normal((16, 7)) * 10)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        assert (probs > 0).all() and (probs < 1).all()

    def test_cross_entropy_matches_hand_value(self):
        probs = np.array([[0.5, 0.25, 0.25], [0.1, 0.8, 0.1]])
        labels = np.array([0, 1])
        expected = -(np.log(0.5) + np.log(0.8)) / 2
        assert np.isclose(L.cross_entropy(probs, labels), expected)

    def test_cross_entropy_grad_matches_fd(self):
        rng = np.random.default_rng(25)
        logits = rng.standard_normal((4, 5))
        labels = rng.integers(0, 5, 4)
        grad = L.cross_entropy_grad(L.softmax(logits), labels)
        for i in np.ndindex(logits.shape):
            old = logits[i]
            logits[i] = old + STEP
            up = L.cross_entropy(L.softmax(logits), labels)
            logits[i] = old - STEP
            down = L.cross_entropy(L.softmax(logits), labels)
            logits[i] = old
            assert relative_error((up - down) / (2 * STEP), grad[i]) < RTOL
