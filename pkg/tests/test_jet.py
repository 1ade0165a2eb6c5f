import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distba.jet import (
    EdgeEvaluator,
    JetShapeError,
    JetVector,
    analytic_edge_jacobians,
    evaluate_edges,
    jv_binary,
    jv_elementary,
    rotate_angle_axis,
)
from distba.partition import partition_edges
from distba.problem import BAProblem, DegenerateDepthError, residual, residuals, rotate, total_cost

from conftest import random_problem
from harness import column_errors, fd_jacobian_mp


def jet(values, grads):
    return JetVector(np.atleast_1d(np.asarray(values, float)), np.asarray(grads, float).reshape(-1, 1))


def random_edges(rng, n):
    """BAL-like edges: focal in pixels, points ~10 units in front of the camera."""
    cams = np.concatenate([rng.normal(0, 0.3, (n, 3)), rng.normal(0, 1, (n, 3)), rng.uniform(300, 900, (n, 1)),
                           rng.normal(0, 0.1, (n, 1)), rng.normal(0, 0.01, (n, 1))], axis=1)
    X = rng.normal(0, 1, (n, 3)) - np.array([0, 0, 10.0])
    pixels = rng.normal(0, 100, (n, 2))
    return BAProblem.from_arrays(cams, X, np.arange(n), np.arange(n), pixels)


def fd_jacobian(cam, X, pixel):
    """Central differences of the scalar oracle, h = 1e-7 * max(1, |p|)."""
    params = np.concatenate([cam, X])
    out = np.zeros((2, 12))
    for j in range(12):
        h = 1e-7 * max(1.0, abs(params[j]))
        hi, lo = params.copy(), params.copy()
        hi[j] += h
        lo[j] -= h
        out[:, j] = (residual(hi[:9], hi[9:], pixel) - residual(lo[:9], lo[9:], pixel)) / (2 * h)
    return out


def max_fd_error(problem, batch):
    """Largest error over edges, each relative to the max-norm of that edge's 2x12 Jacobian."""
    worst = 0.0
    for k, e in enumerate(batch.edge_ids):
        o = problem.observation(e)
        fd = fd_jacobian(problem.cameras[o.camera_id], problem.points[o.point_id], o.pixel)
        J = np.concatenate([batch.J_cam[k], batch.J_pt[k]], axis=1)
        worst = max(worst, np.max(np.abs(J - fd)) / np.max(np.abs(fd)))
    return worst


class TestOperators:
    def test_product_rule(self):
        a = JetVector(np.array([2.0]), np.array([[1.0], [0.0]]))
        b = JetVector(np.array([3.0]), np.array([[0.0], [1.0]]))
        c = jv_binary("*", a, b)
        assert c.values[0] == 6.0
        np.testing.assert_array_equal(c.grads[:, 0], [3.0, 2.0])

    def test_add_zero_scalar(self):
        a = JetVector(np.array([2.0, -1.0]), np.array([[1.0, 4.0]]))
        b = jv_binary("+", a, 0.0)
        np.testing.assert_array_equal(b.values, a.values)
        np.testing.assert_array_equal(b.grads, a.grads)

    def test_quotient_rule(self):
        a = JetVector(np.array([6.0]), np.array([[1.0], [0.0]]))
        b = JetVector(np.array([2.0]), np.array([[0.0], [1.0]]))
        c = jv_binary("/", a, b)
        assert c.values[0] == 3.0
        np.testing.assert_allclose(c.grads[:, 0], [0.5, -1.5])

    def test_sqrt(self):
        r = jv_elementary("sqrt", jet(4.0, [4.0]))
        assert r.values[0] == 2.0 and r.grads[0, 0] == 1.0

    def test_sqrt_zero_raises(self):
        with pytest.raises(ValueError, match="element 0"):
            jv_elementary("sqrt", jet(0.0, [1.0]))

    def test_divide_by_zero_reports_index(self):
        a = JetVector(np.ones(3), np.zeros((1, 3)))
        b = JetVector(np.array([1.0, 2.0, 0.0]), np.zeros((1, 3)))
        with pytest.raises(ZeroDivisionError, match="element 2"):
            a / b

    def test_shape_mismatch(self):
        with pytest.raises(JetShapeError):
            JetVector(np.ones(3), np.zeros((2, 3))) + JetVector(np.ones(4), np.zeros((2, 4)))
        with pytest.raises(JetShapeError):
            JetVector(np.ones(3), np.zeros((2, 3))) * JetVector(np.ones(3), np.zeros((1, 3)))

    def test_lane_is_contiguous_view(self):
        a = JetVector(np.ones(5), np.arange(15.0).reshape(3, 5))
        lane = a.lane(1)
        assert lane.flags.c_contiguous and np.shares_memory(lane, a.grads)
        np.testing.assert_array_equal(lane, [5, 6, 7, 8, 9])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6))
    def test_neg_involution(self, vals):
        a = JetVector(np.array(vals), np.arange(2 * len(vals), dtype=float).reshape(2, -1))
        b = -(-a)
        np.testing.assert_array_equal(b.values, a.values)
        np.testing.assert_array_equal(b.grads, a.grads)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), op=st.sampled_from(["+", "-", "*", "/"]))
    def test_seed_linearity(self, seed, op):
        """Seeding lanes e1, e2 separately and then combining equals seeding the combination."""
        rng = np.random.default_rng(seed)
        n = 4
        va, vb = rng.uniform(0.5, 2, n), rng.uniform(0.5, 2, n)
        sa, sb = rng.normal(size=(2, n)), rng.normal(size=(2, n))
        alpha, beta = rng.normal(size=2)
        two = jv_binary(op, JetVector(va, sa), JetVector(vb, sb))
        comb = jv_binary(op, JetVector(va, alpha * sa[:1] + beta * sa[1:]), JetVector(vb, alpha * sb[:1] + beta * sb[1:]))
        np.testing.assert_allclose(comb.grads[0], alpha * two.grads[0] + beta * two.grads[1], rtol=1e-12, atol=1e-12)
        for fn in ("sqrt", "neg", "sin", "cos"):
            two = jv_elementary(fn, JetVector(va, sa))
            comb = jv_elementary(fn, JetVector(va, alpha * sa[:1] + beta * sa[1:]))
            np.testing.assert_allclose(comb.grads[0], alpha * two.grads[0] + beta * two.grads[1], rtol=1e-12, atol=1e-12)


class TestRotation:
    def _jets(self, values, lane0=0, d=6):
        return [JetVector.variable(np.atleast_1d(v), lane0 + i, d) for i, v in enumerate(values)]

    def test_identity(self):
        out = rotate_angle_axis(self._jets([0.0, 0.0, 0.0]), self._jets([1.5, -2.0, 0.25], 3))
        np.testing.assert_array_equal([o.values[0] for o in out], [1.5, -2.0, 0.25])
        for o in out:
            assert np.all(np.isfinite(o.grads))

    def test_quarter_turn(self):
        out = rotate_angle_axis(self._jets([0.0, 0.0, math.pi / 2]), self._jets([1.0, 0.0, 0.0], 3))
        np.testing.assert_allclose([o.values[0] for o in out], [0.0, 1.0, 0.0], atol=1e-12)

    def test_matches_scalar_rotation(self, rng):
        for _ in range(20):
            w, x = rng.normal(size=3), rng.normal(size=3)
            out = rotate_angle_axis(self._jets(w), self._jets(x, 3))
            np.testing.assert_allclose([o.values[0] for o in out], rotate(w, x), rtol=1e-13, atol=1e-15)

    @pytest.mark.parametrize("scale", [1.0, 1e-3, 1e-7])
    def test_gradients_match_finite_differences(self, rng, scale):
        for _ in range(20):
            w, x = rng.normal(size=3) * scale, rng.normal(size=3)
            out = rotate_angle_axis(self._jets(w), self._jets(x, 3))
            J = np.stack([o.grads[:, 0] for o in out])
            p = np.concatenate([w, x])
            fd = np.zeros((3, 6))
            for j in range(6):
                h = 1e-7 * max(1.0, abs(p[j]))
                hi, lo = p.copy(), p.copy()
                hi[j] += h
                lo[j] -= h
                fd[:, j] = (rotate(hi[:3], hi[3:]) - rotate(lo[:3], lo[3:])) / (2 * h)
            assert np.max(np.abs(J - fd)) <= 1e-6 * max(1.0, np.max(np.abs(fd)))

    def test_small_angle_branch_continuous(self):
        x = self._jets([0.3, -0.2, 1.0], 3)
        below = rotate_angle_axis(self._jets([0.0, 0.0, 0.9e-6]), x)
        above = rotate_angle_axis(self._jets([0.0, 0.0, 1.1e-6]), x)
        for a, b in zip(below, above):
            assert abs(a.values[0] - b.values[0]) < 1e-6
            np.testing.assert_allclose(a.grads[:, 0], b.grads[:, 0], atol=1e-6)


class TestEdgeEvaluation:
    def test_residuals_match_oracle(self, rng):
        prob = random_edges(rng, 200)
        batch = evaluate_edges(prob, partition_edges(prob, 1)[0], prob.cameras, prob.points)
        ref = residuals(prob)
        assert np.max(np.abs(batch.residuals - ref) / np.maximum(np.abs(ref), 1e-300)) <= 1e-13 * 10
        for e in range(0, 200, 17):
            o = prob.observation(e)
            np.testing.assert_allclose(batch.residuals[e], residual(prob.camera(e), prob.point(e), o.pixel),
                                       rtol=1e-12)

    def test_zero_residual_configuration(self):
        cams = np.r_[0.1, -0.2, 0.05, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]
        X = np.array([[0.2, 0.1, -2.0], [-0.3, 0.4, -3.0]])
        blank = BAProblem.from_arrays(cams, X, [0, 0], [0, 1], np.zeros((2, 2)))
        pix = evaluate_edges(blank, partition_edges(blank, 1)[0], blank.cameras, blank.points).residuals
        prob = BAProblem.from_arrays(cams, X, [0, 0], [0, 1], pix)
        batch = evaluate_edges(prob, partition_edges(prob, 1)[0], prob.cameras, prob.points)
        np.testing.assert_array_equal(batch.residuals, 0.0)

    def test_jacobians_match_finite_differences(self, rng):
        prob = random_edges(rng, 100)
        batch = evaluate_edges(prob, partition_edges(prob, 1)[0], prob.cameras, prob.points)
        assert max_fd_error(prob, batch) < 1e-6

    def test_jacobian_columns_match_precise_differences(self, rng):
        prob = random_edges(rng, 60)
        batch = evaluate_edges(prob, partition_edges(prob, 1)[0], prob.cameras, prob.points)
        for e in range(60):
            o = prob.observation(e)
            fd = fd_jacobian_mp(prob.cameras[o.camera_id], prob.points[o.point_id], o.pixel)
            J = np.concatenate([batch.J_cam[e], batch.J_pt[e]], axis=1)
            assert np.max(column_errors(J, fd)) < 1e-10

    def test_analytic_matches_autodiff(self, rng):
        prob = random_edges(rng, 300)
        part = partition_edges(prob, 1)[0]
        auto = evaluate_edges(prob, part, prob.cameras, prob.points, mode="auto")
        res, jc, jp = (a.copy() for a in (auto.residuals, auto.J_cam, auto.J_pt))
        ana = evaluate_edges(prob, part, prob.cameras, prob.points, mode="analytic")
        for a, b in ((ana.J_cam, jc), (ana.J_pt, jp), (ana.residuals, res)):
            assert np.max(np.abs(a - b)) <= 1e-12 * np.max(np.abs(b))

    def test_analytic_small_angle(self):
        cams = np.array([[1e-9, 0.0, -2e-9, 0.1, 0.0, 0.2, 500.0, 0.0, 0.0]])
        X = np.array([[0.3, -0.1, -4.0]])
        res, jc, jp = analytic_edge_jacobians(cams, X, np.zeros((1, 2)))
        prob = BAProblem.from_arrays(cams, X, [0], [0], np.zeros((1, 2)))
        auto = evaluate_edges(prob, partition_edges(prob, 1)[0], prob.cameras, prob.points)
        np.testing.assert_allclose(jc, auto.J_cam, rtol=1e-9, atol=1e-9)

    def test_partition_independent_bitwise(self, rng):
        prob = random_problem(rng, 6, 30, obs_per_point=3)
        full = evaluate_edges(prob, partition_edges(prob, 1)[0], prob.cameras, prob.points)
        for K in (2, 3, 5):
            parts = [evaluate_edges(prob, p, prob.cameras, prob.points) for p in partition_edges(prob, K)]
            for attr in ("residuals", "J_cam", "J_pt"):
                np.testing.assert_array_equal(np.concatenate([getattr(b, attr) for b in parts]), getattr(full, attr))

    def test_degenerate_depth_reports_global_edge(self):
        cams = np.r_[np.zeros(6), 1.0, 0.0, 0.0]
        X = np.array([[0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        prob = BAProblem.from_arrays(cams, X, [0, 0, 0], [0, 0, 1], np.zeros((3, 2)))
        part = partition_edges(prob, 2)[1]
        with pytest.raises(DegenerateDepthError) as err:
            evaluate_edges(prob, part, prob.cameras, prob.points)
        assert err.value.edge == 2

    def test_cost_matches_problem(self, rng):
        prob = random_edges(rng, 50)
        ev = EdgeEvaluator(prob, partition_edges(prob, 1)[0])
        assert abs(ev.cost(prob.cameras, prob.points) - total_cost(prob)) <= 1e-10 * total_cost(prob)

    def test_buffers_reused(self, rng):
        prob = random_edges(rng, 20)
        ev = EdgeEvaluator(prob, partition_edges(prob, 1)[0])
        a = ev.evaluate(prob.cameras, prob.points)
        b = ev.evaluate(prob.cameras + 0.01, prob.points)
        assert a is b and ev.edges_evaluated == 40

    def test_fp32(self, rng):
        prob = random_edges(rng, 20)
        b32 = evaluate_edges(prob, partition_edges(prob, 1)[0], prob.cameras, prob.points, dtype=np.float32)
        b64 = evaluate_edges(prob, partition_edges(prob, 1)[0], prob.cameras, prob.points)
        assert b32.J_cam.dtype == np.float32
        assert np.max(np.abs(b32.J_cam - b64.J_cam)) <= 1e-6 * 1e4 * np.max(np.abs(b64.J_cam))
