"""
Tests the tape, backward and the finite-difference harness
"""

from __future__ import annotations

import numpy as np
import pytest

from srnet import autograd, nnops
from srnet.autograd import Tape, backward, finite_diff_check, register_op
from srnet.utils import AdjointNotFound, GraphError, ShapeError


@register_op("cube_without_adjoint")
def _cube_forward(x):
    return x**3, {}


def weighted_loss(tape, node, seed=0):
    weights = tape.constant(np.random.default_rng(seed).normal(size=tuple(node.shape)))
    return autograd.sum_all(autograd.mul(node, weights))


class TestBackward:
    def test_linear(self):
        tape = Tape()
        x_values = np.random.default_rng(0).normal(size=(1, 2, 3, 3))
        w = tape.parameter(np.ones((1, 2, 3, 3)), "w")
        loss = autograd.sum_all(autograd.mul(w, tape.constant(x_values)))
        grads = backward(tape, loss)
        assert np.array_equal(grads[w.id].data, x_values)

    def test_dead_relu(self):
        tape = Tape()
        w = tape.parameter(-np.ones((1, 1, 2, 2)) - np.arange(4).reshape(1, 1, 2, 2), "w")
        loss = autograd.sum_all(nnops.relu(w))
        assert (backward(tape, loss)[w.id].data == 0).all()

    def test_twice_is_bit_identical(self):
        tape = Tape()
        w = tape.parameter(np.random.default_rng(2).normal(size=(1, 3, 4, 4)), "w")
        loss = weighted_loss(tape, nnops.relu(autograd.mul(w, w)))
        first, second = backward(tape, loss), backward(tape, loss)
        assert np.array_equal(first[w.id].data, second[w.id].data)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        w_values = rng.normal(size=(1, 2, 3, 3))
        a, b = rng.normal(size=w_values.shape), rng.normal(size=w_values.shape)

        def grad_of(*constants):
            tape = Tape()
            w = tape.parameter(w_values, "w")
            outs = [autograd.mul(w, tape.constant(c)) for c in constants]
            total = outs[0] if len(outs) == 1 else autograd.add(*outs)
            return backward(tape, autograd.sum_all(total))[w.id].data

        assert np.allclose(grad_of(a, b), grad_of(a) + grad_of(b), rtol=0, atol=1e-12)

    def test_unused_parameter_gets_zeros(self):
        tape = Tape()
        used = tape.parameter(np.ones((1, 1, 1, 2)), "used")
        unused = tape.parameter(np.ones((1, 1, 2, 2)), "unused")
        grads = backward(tape, autograd.sum_all(used))
        assert grads[unused.id].shape == unused.shape
        assert (grads[unused.id].data == 0).all()

    def test_non_scalar_loss(self):
        tape = Tape()
        w = tape.parameter(np.ones((1, 1, 2, 2)), "w")
        with pytest.raises(ShapeError):
            backward(tape, autograd.scale(w, 2.0))

    def test_missing_adjoint_names_the_op(self):
        tape = Tape()
        w = tape.parameter(np.ones((1, 1, 2, 2)), "w")
        loss = autograd.sum_all(tape.apply("cube_without_adjoint", [w]))
        with pytest.raises(AdjointNotFound, match="cube_without_adjoint"):
            backward(tape, loss)

    def test_tape_unchanged(self):
        tape = Tape()
        w = tape.parameter(np.ones((1, 1, 2, 2)), "w")
        loss = autograd.sum_all(autograd.scale(w, 3.0))
        before = len(tape)
        backward(tape, loss)
        assert len(tape) == before
        assert all(node.grad is None for node in tape.nodes)


class TestTape:
    def test_parameter_groups(self):
        tape = Tape()
        w = tape.parameter(np.ones((1, 1, 1, 1)), "backbone.w")
        omega = tape.parameter(np.ones((1, 1, 1, 1)), "reasoning.w", "omega")
        theta = tape.parameter(np.ones((1, 1, 1, 1)), "classifier.w", "theta")
        assert tape.group_of(w.id) == "W"
        assert tape.group_of(omega.id) == "omega"
        assert tape.group_of(theta.id) == "theta"
        assert set(tape.parameters()) == {w.id, omega.id, theta.id}
        with pytest.raises(ValueError):
            tape.parameter(np.ones((1, 1, 1, 1)), "x", "gamma")

    def test_other_tape(self):
        first, second = Tape(), Tape()
        w = first.parameter(np.ones((1, 1, 1, 1)), "w")
        with pytest.raises(GraphError):
            autograd.add(w, second.constant(np.ones((1, 1, 1, 1))))

    def test_unknown_op(self):
        tape = Tape()
        with pytest.raises(GraphError):
            tape.apply("no_such_op", [tape.constant(np.ones((1, 1, 1, 1)))])

    def test_leaf_is_reserved(self):
        with pytest.raises(ValueError):
            register_op("leaf")

    def test_replay_matches_record(self):
        tape = Tape()
        w = tape.parameter(np.random.default_rng(5).normal(size=(1, 2, 2, 2)), "w")
        out = nnops.relu(autograd.mul(w, w))
        values, kinks = tape.replay()
        assert np.array_equal(values[out.id], out.data)
        assert out.id in kinks


class TestFiniteDiffCheck:
    def test_quadratic(self):
        tape = Tape()
        w = tape.parameter(np.random.default_rng(6).normal(size=(1, 1, 2, 3)), "w")
        loss = autograd.sum_all(autograd.mul(w, w))
        assert finite_diff_check(tape, loss, epsilon=1e-3) <= 1e-9

    def test_skips_kinks(self):
        tape = Tape()
        w = tape.parameter(np.array([1e-8, 0.5, -0.5, 2.0]).reshape(1, 1, 2, 2), "w")
        loss = weighted_loss(tape, nnops.relu(w))
        result = finite_diff_check(tape, loss, epsilon=1e-6, detailed=True)
        assert result.skipped_kinks == 1
        assert result.checked == 3
        assert result.max_rel_error <= 1e-4

    def test_sampled_coordinates(self):
        tape = Tape()
        w = tape.parameter(np.random.default_rng(7).normal(size=(1, 2, 4, 4)), "w")
        loss = weighted_loss(tape, autograd.mul(w, w))
        result = finite_diff_check(tape, loss, max_coords_per_param=5, seed=1, detailed=True)
        assert result.checked == 5
        assert result.max_rel_error <= 1e-4

    def test_epsilon_range(self):
        tape = Tape()
        w = tape.parameter(np.ones((1, 1, 1, 1)), "w")
        loss = autograd.sum_all(w)
        for epsilon in (1e-8, 1e-2):
            with pytest.raises(ValueError):
                finite_diff_check(tape, loss, epsilon)
