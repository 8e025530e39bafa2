"""Fusion: positional code, row-stochastic weights, algebraic properties."""

from __future__ import annotations

import numpy as np
import pytest

from tavla import tensor as T
from tavla.errors import ConfigError, ShapeError
from tavla.fusion import (
    TAU_MAX,
    TAU_MIN,
    FusionState,
    clamp_tau,
    fuse,
    sincos_pe_2d,
)
from tavla.testing import gradcheck


def unit_rows(r, *shape):
    x = r.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


class TestPositionalCode:
    def test_hand_computed_grid(self):
        # grid (2, 2), dim 8: quarter=2, freqs [1, 1e-2].
        pe = sincos_pe_2d((2, 2), 8)
        assert pe.shape == (4, 8)
        # patch 0 at (row 0, col 0): sin 0, cos 1 everywhere
        np.testing.assert_allclose(pe[0], [0, 1, 0, 1, 0, 1, 0, 1], atol=1e-7)
        # patch 3 at (row 1, col 1)
        want = [
            np.sin(1.0), np.cos(1.0), np.sin(1e-2), np.cos(1e-2),
            np.sin(1.0), np.cos(1.0), np.sin(1e-2), np.cos(1e-2),
        ]
        np.testing.assert_allclose(pe[3], want, atol=1e-7)
        # patch 1 at (row 0, col 1): row half is the zero angle
        np.testing.assert_allclose(pe[1][:4], [0, 1, 0, 1], atol=1e-7)
        np.testing.assert_allclose(pe[1][4:], want[4:], atol=1e-7)

    def test_rows_unique(self):
        pe = sincos_pe_2d((6, 6), 64)
        assert len(np.unique(pe.round(6), axis=0)) == 36

    def test_dim_divisibility(self):
        with pytest.raises(ConfigError):
            sincos_pe_2d((2, 2), 10)


class TestFuse:
    def setup_method(self):
        self.r = np.random.default_rng(0)
        self.state = FusionState.create((3, 3), 16)

    def test_weights_row_stochastic(self):
        t = T.Tensor(unit_rows(self.r, 5, 16))
        v = T.Tensor(unit_rows(self.r, 2, 9, 16))
        fused, w = fuse(t, v, self.state)
        assert fused.shape == (2, 5, 16) and w.shape == (2, 5, 9)
        np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)
        assert (w.data >= 0).all()

    def test_single_patch_identity(self):
        state = FusionState.create((1, 1), 16)
        t = T.Tensor(unit_rows(self.r, 4, 16))
        v = T.Tensor(unit_rows(self.r, 1, 1, 16))
        fused, w = fuse(t, v, state)
        np.testing.assert_allclose(w.data, 1.0, atol=1e-7)
        want = v.data[:, 0] + state.pe[0]
        for row in fused.data[0]:
            np.testing.assert_allclose(row, want[0], atol=1e-6)

    def test_permutation_equivariance(self):
        t = T.Tensor(unit_rows(self.r, 4, 16))
        v = unit_rows(self.r, 1, 9, 16)
        perm = self.r.permutation(9)
        fused_a, w_a = fuse(t, T.Tensor(v), self.state)
        fused_b, w_b = fuse(t, T.Tensor(v[:, perm]), self.state, pe=self.state.pe[perm])
        np.testing.assert_allclose(w_b.data, w_a.data[:, :, perm], atol=1e-6)
        np.testing.assert_allclose(fused_b.data, fused_a.data, atol=1e-6)

    def test_low_tau_sharpens(self):
        t = T.Tensor(unit_rows(self.r, 3, 16))
        v = T.Tensor(unit_rows(self.r, 1, 9, 16))
        sharp = FusionState.create((3, 3), 16, tau_init=0.011)
        soft = FusionState.create((3, 3), 16, tau_init=5.0)
        _, w_sharp = fuse(t, v, sharp)
        _, w_soft = fuse(t, v, soft)
        assert w_sharp.data.max() > w_soft.data.max()
        np.testing.assert_allclose(w_soft.data, 1.0 / 9.0, atol=0.05)

    def test_batched_text(self):
        t = T.Tensor(unit_rows(self.r, 2, 5, 16))
        v = T.Tensor(unit_rows(self.r, 2, 9, 16))
        fused, w = fuse(t, v, self.state)
        assert fused.shape == (2, 5, 16)
        # row 0 must match the unbatched computation
        f0, _ = fuse(T.Tensor(t.data[0]), T.Tensor(v.data[0:1]), self.state)
        np.testing.assert_allclose(fused.data[0], f0.data[0], atol=1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            fuse(T.Tensor(np.zeros((2, 8))), T.Tensor(np.zeros((1, 9, 16))), self.state)

    def test_gradients_flow_to_tau(self):
        state = FusionState.create((3, 3), 16)
        t = T.parameter(unit_rows(self.r, 4, 16), dtype=np.float64)
        v = T.parameter(unit_rows(self.r, 1, 9, 16), dtype=np.float64)
        state.tau.data = state.tau.data.astype(np.float64)

        def loss():
            fused, _ = fuse(t, v, state)
            return T.sum_(T.square(fused))

        gradcheck(loss, [t, v, state.tau])


class TestClamp:
    def test_clamps_both_sides(self):
        state = FusionState.create((2, 2), 8)
        state.tau.data[...] = 500.0
        clamp_tau(state)
        assert state.tau.item() == TAU_MAX
        state.tau.data[...] = 1e-5
        clamp_tau(state)
        assert state.tau.item() == np.float32(TAU_MIN)

    def test_interior_untouched(self):
        state = FusionState.create((2, 2), 8, tau_init=0.07)
        clamp_tau(state)
        assert abs(state.tau.item() - 0.07) < 1e-7
