"""Pose codec: orthonormality, round trips, degeneracy handling."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tavla import geometry as geo
from tavla.errors import DegeneracyError, ShapeError


def rotations(n, seed=0):
    r = np.random.default_rng(seed)
    return [geo.random_rotation(r) for _ in range(n)]


def assert_rotation(m, tol=1e-9):
    np.testing.assert_allclose(m @ m.T, np.eye(3), atol=tol)
    assert abs(np.linalg.det(m) - 1.0) < tol


class TestRotationCode:
    def test_identity_code(self):
        np.testing.assert_array_equal(
            geo.rot_to_6d(np.eye(3)), [1, 0, 0, 0, 1, 0]
        )

    def test_round_trip(self):
        for rot in rotations(1000, seed=1):
            back = geo.six_d_to_rot(geo.rot_to_6d(rot))
            assert np.abs(back - rot).max() < 1e-9

    def test_decode_is_rotation_for_generic_codes(self):
        r = np.random.default_rng(2)
        for _ in range(200):
            rot = geo.six_d_to_rot(r.standard_normal(6))
            assert_rotation(rot)

    def test_decode_invariant_to_row_scaling(self):
        # Gram-Schmidt ignores magnitude, so scaled codes decode identically.
        r = np.random.default_rng(3)
        code = r.standard_normal(6)
        a = geo.six_d_to_rot(code)
        scaled = code.copy()
        scaled[:3] *= 7.5
        scaled[3:] *= 0.2
        np.testing.assert_allclose(geo.six_d_to_rot(scaled), a, atol=1e-12)

    def test_zero_primary_row_raises(self):
        with pytest.raises(DegeneracyError):
            geo.six_d_to_rot(np.array([0, 0, 0, 0, 1, 0.0]))

    def test_parallel_rows_raise(self):
        with pytest.raises(DegeneracyError):
            geo.six_d_to_rot(np.array([1, 0, 0, 2, 0, 0.0]))

    def test_bad_shape(self):
        with pytest.raises(ShapeError):
            geo.rot_to_6d(np.eye(4))
        with pytest.raises(ShapeError):
            geo.six_d_to_rot(np.zeros(5))


class TestPose:
    def test_compose_inverse_is_identity(self):
        r = np.random.default_rng(4)
        for rot in rotations(50, seed=5):
            p = geo.Pose(rot, r.standard_normal(3))
            ident = p.compose(p.inverse())
            np.testing.assert_allclose(ident.rot, np.eye(3), atol=1e-12)
            np.testing.assert_allclose(ident.trans, 0.0, atol=1e-12)

    def test_matrix_round_trip(self):
        r = np.random.default_rng(6)
        p = geo.Pose(geo.random_rotation(r), r.standard_normal(3))
        q = geo.Pose.from_matrix(p.matrix())
        np.testing.assert_allclose(q.rot, p.rot)
        np.testing.assert_allclose(q.trans, p.trans)

    def test_compose_matches_matrix_product(self):
        r = np.random.default_rng(7)
        a = geo.Pose(geo.random_rotation(r), r.standard_normal(3))
        b = geo.Pose(geo.random_rotation(r), r.standard_normal(3))
        np.testing.assert_allclose(
            a.compose(b).matrix(), a.matrix() @ b.matrix(), atol=1e-12
        )

    def test_rot_z(self):
        assert_rotation(geo.rot_z(0.7), tol=1e-12)
        np.testing.assert_allclose(geo.rot_z(np.pi / 2) @ [1, 0, 0], [0, 1, 0], atol=1e-12)


class TestActionCodec:
    def test_reference_encodes_to_identity(self):
        r = np.random.default_rng(8)
        ref = geo.Pose(geo.random_rotation(r), r.standard_normal(3))
        chunk = geo.encode_action_chunk(ref, [ref], [0.25])
        np.testing.assert_allclose(chunk[0, :3], 0.0, atol=1e-12)
        np.testing.assert_allclose(chunk[0, 3:9], [1, 0, 0, 0, 1, 0], atol=1e-12)
        assert chunk[0, 9] == 0.25

    def test_encode_decode_round_trip(self):
        r = np.random.default_rng(9)
        for _ in range(200):
            ref = geo.Pose(geo.random_rotation(r), r.standard_normal(3))
            targets = [
                geo.Pose(geo.random_rotation(r), r.standard_normal(3))
                for _ in range(4)
            ]
            grips = list(r.uniform(0, 1, size=4))
            chunk = geo.encode_action_chunk(ref, targets, grips)
            assert chunk.shape == (4, geo.VEC_DIM)
            for row, target, g in zip(chunk, targets, grips):
                pose, gout = geo.decode_action(ref, row)
                assert np.abs(pose.rot - target.rot).max() < 1e-6
                assert np.abs(pose.trans - target.trans).max() < 1e-6
                assert abs(gout - g) < 1e-6

    def test_gripper_is_absolute_and_clipped(self):
        ref = geo.Pose.identity()
        vec = geo.pose_to_vec(ref, 1.7)
        assert vec[9] == 1.0
        _, g = geo.decode_action(ref, vec)
        assert g == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            geo.encode_action_chunk(geo.Pose.identity(), [geo.Pose.identity()], [])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_property(seed):
    r = np.random.default_rng(seed)
    rot = geo.random_rotation(r)
    assert np.abs(geo.six_d_to_rot(geo.rot_to_6d(rot)) - rot).max() < 1e-9
