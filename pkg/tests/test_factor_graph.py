import io

import numpy as np
import pytest

from limapper.errors import (
    DuplicateVariable,
    NotConverged,
    UnderConstrainedGraph,
    UnknownVariable,
)
from limapper.factor_graph import (
    FactorGraph,
    ImuFactor,
    Key,
    LmSettings,
    MatchingCostFactor,
    PriorFactor,
    RelativeStateFactor,
    frame_key,
    submap_key,
)
from limapper.geometry import (
    Se3Pose,
    SensorState,
    pose_apply,
    pose_compose,
    pose_inverse,
    pose_local,
    pose_retract,
    so3_exp,
    state_local,
    state_retract,
)
from limapper.imu import GRAVITY, ImuNoiseParams, ImuSample, preintegrate, propagate_state
from limapper.registration import build_voxelmap

from test_registration import box_room_frame, box_room_frame_plane_covs, make_frame

NOISE = ImuNoiseParams()


def random_state(rng, stamp=0.0):
    return SensorState(
        pose=Se3Pose(so3_exp(rng.uniform(-1, 1, 3)), rng.uniform(-3, 3, 3)),
        velocity=rng.uniform(-1, 1, 3),
        bias_accel=rng.uniform(-0.05, 0.05, 3),
        bias_gyro=rng.uniform(-0.05, 0.05, 3),
        stamp=stamp,
    )


class TestContainer:
    def test_add_and_read_back(self):
        g = FactorGraph()
        rng = np.random.default_rng(0)
        x = random_state(rng)
        g.add_variable(frame_key(0), x)
        assert g.values[frame_key(0)] is x

    def test_duplicate_key_rejected(self):
        g = FactorGraph()
        g.add_variable(frame_key(0), SensorState.zero())
        with pytest.raises(DuplicateVariable):
            g.add_variable(frame_key(0), SensorState.zero())

    def test_dangling_factor_rejected(self):
        g = FactorGraph()
        g.add_variable(frame_key(0), SensorState.zero())
        with pytest.raises(UnknownVariable):
            g.add_factor(PriorFactor(frame_key(1), SensorState.zero(), np.ones(15)))

    def test_parallel_factors_both_retained(self):
        g = FactorGraph()
        g.add_variable(frame_key(0), SensorState.zero())
        g.add_factor(PriorFactor(frame_key(0), SensorState.zero(), np.ones(15)))
        g.add_factor(PriorFactor(frame_key(0), SensorState.zero(), np.ones(15)))
        assert len(g.factors) == 2

    def test_unconstrained_variable_rejected(self):
        g = FactorGraph()
        g.add_variable(frame_key(0), SensorState.zero())
        g.add_variable(frame_key(1), SensorState.zero())
        g.add_factor(PriorFactor(frame_key(0), SensorState.zero(), np.ones(15)))
        with pytest.raises(UnderConstrainedGraph):
            g.optimize_lm()

    def test_unanchored_component_rejected(self):
        rng = np.random.default_rng(1)
        g = FactorGraph()
        g.add_variable(submap_key(0), Se3Pose.identity())
        g.add_variable(frame_key(0), SensorState.zero())
        g.add_factor(RelativeStateFactor(submap_key(0), frame_key(0),
                                         Se3Pose.identity(), np.zeros(3), np.zeros(6)))
        with pytest.raises(UnderConstrainedGraph):
            g.optimize_lm()

    def test_dump_lists_factors(self):
        g = FactorGraph()
        g.add_variable(frame_key(0), SensorState.zero())
        g.add_factor(PriorFactor(frame_key(0), SensorState.zero(), np.ones(15)))
        buf = io.StringIO()
        g.dump(buf)
        text = buf.getvalue()
        assert "variable frame-state:0" in text
        assert "kind=prior" in text


class TestOptimize:
    def test_prior_bowl_converges_exactly(self):
        rng = np.random.default_rng(2)
        target = random_state(rng)
        g = FactorGraph()
        g.add_variable(frame_key(0), state_retract(target, rng.uniform(-0.3, 0.3, 15)))
        g.add_factor(PriorFactor(frame_key(0), target, np.full(15, 100.0)))
        res = g.optimize_lm()
        assert res.final_cost < 1e-18
        assert np.linalg.norm(state_local(res.estimates[frame_key(0)], target)) < 1e-9

    def test_two_pose_registration_recovers_truth(self):
        rng = np.random.default_rng(3)
        cloud = box_room_frame_plane_covs(rng, n_per_wall=150)
        vmap = build_voxelmap(cloud, 0.5)
        true_rel = Se3Pose(so3_exp([0.02, -0.03, 0.3]), np.array([0.4, -0.2, 0.1]))
        # frame observed from the displaced pose: points in its own frame
        moved_pts = pose_apply(pose_inverse(true_rel), cloud.points)
        moved = make_frame(moved_pts, covs=cloud.covs)
        g = FactorGraph()
        g.add_variable(submap_key(0), Se3Pose.identity())
        perturb = np.concatenate([rng.normal(size=3) * (5 * np.pi / 180 / np.sqrt(3)),
                                  rng.normal(size=3) * (0.1 / np.sqrt(3))])
        g.add_variable(submap_key(1), pose_retract(true_rel, perturb))
        g.add_factor(PriorFactor(submap_key(0), Se3Pose.identity(), np.full(6, 1e6)))
        g.add_factor(MatchingCostFactor(submap_key(1), moved, vmap,
                                        key_target=submap_key(0)))
        res = g.optimize_lm()
        err = pose_local(res.estimates[submap_key(1)], true_rel)
        assert np.linalg.norm(err[3:]) < 1e-3
        assert np.linalg.norm(err[:3]) < 1e-3

    def test_pure_imu_chain_matches_propagation(self):
        rng = np.random.default_rng(4)
        rate = 200.0
        samples = []
        for k in range(81):
            t = k / rate
            samples.append(ImuSample(
                t, -GRAVITY + np.array([0.4 * np.sin(5 * t), 0.2, 0.0]),
                np.array([0.0, 0.0, 0.5])))
        state0 = SensorState.zero()
        # ground truth by dense propagation
        states = [state0]
        bounds = [0.0, 0.2, 0.4]
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            s = states[-1]
            seg = [x for x in samples if lo - 1e-9 <= x.stamp <= hi + 1e-9]
            for a, b in zip(seg[:-1], seg[1:]):
                s = propagate_state(s, a, b.stamp - a.stamp)
            states.append(s)

        g = FactorGraph()
        g.add_variable(frame_key(0), state0)
        g.add_factor(PriorFactor(frame_key(0), state0, np.full(15, 1e8)))
        for i, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
            pre = preintegrate(samples, lo, hi, np.zeros(6), NOISE)
            init = state_retract(states[i + 1], rng.uniform(-0.05, 0.05, 15))
            g.add_variable(frame_key(i + 1), init)
            g.add_factor(ImuFactor(frame_key(i), frame_key(i + 1), pre))
        res = g.optimize_lm()
        for i in (1, 2):
            err = state_local(res.estimates[frame_key(i)], states[i])
            assert np.linalg.norm(err[:9]) < 1e-6

    def test_monotone_cost_and_determinism(self):
        def build():
            rng = np.random.default_rng(5)
            target = random_state(rng)
            g = FactorGraph()
            g.add_variable(frame_key(0), state_retract(target, rng.uniform(-1, 1, 15)))
            g.add_factor(PriorFactor(frame_key(0), target, np.full(15, 10.0)))
            g.add_variable(frame_key(1), random_state(rng))
            g.add_factor(PriorFactor(frame_key(1), target, np.full(15, 5.0)))
            return g

        a = build().optimize_lm()
        b = build().optimize_lm()
        assert a.iterations == b.iterations
        assert a.final_cost == b.final_cost
        for k in a.estimates:
            assert np.array_equal(a.estimates[k].pose.translation,
                                  b.estimates[k].pose.translation)

    def test_warm_restart_same_fixed_point(self):
        rng = np.random.default_rng(6)
        target = random_state(rng)
        g = FactorGraph()
        g.add_variable(frame_key(0), state_retract(target, rng.uniform(-0.2, 0.2, 15)))
        g.add_factor(PriorFactor(frame_key(0), target, np.full(15, 100.0)))
        first = g.optimize_lm()
        res = g.warm_restart_optimize(first.estimates)
        assert res.iterations <= 2
        assert res.final_cost <= first.final_cost + 1e-15


class TestRelativeStateFactor:
    def test_zero_residual_when_consistent(self):
        rng = np.random.default_rng(7)
        origin = Se3Pose(so3_exp(rng.uniform(-1, 1, 3)), rng.uniform(-2, 2, 3))
        rel_pose = Se3Pose(so3_exp([0.1, 0.0, -0.2]), np.array([0.5, 0.1, 0.0]))
        rel_v = np.array([0.3, -0.1, 0.2])
        rel_b = np.array([0.01, 0.0, -0.01, 0.002, 0.001, 0.0])
        endpoint = SensorState(
            pose=pose_compose(origin, rel_pose),
            velocity=origin.rotation.apply(rel_v),
            bias_accel=rel_b[:3], bias_gyro=rel_b[3:], stamp=0.0)
        f = RelativeStateFactor(submap_key(0), frame_key(0), rel_pose, rel_v, rel_b)
        values = {submap_key(0): origin, frame_key(0): endpoint}
        assert f.cost(values) < 1e-16

    def test_gauge_equivariance(self):
        rng = np.random.default_rng(8)
        rel_pose = Se3Pose(so3_exp([0.1, 0.2, -0.1]), np.array([1.0, 0.0, 0.5]))
        rel_v = np.array([0.5, 0.2, -0.3])
        rel_b = np.zeros(6)
        f = RelativeStateFactor(submap_key(0), frame_key(0), rel_pose, rel_v, rel_b)
        origin = Se3Pose(so3_exp(rng.uniform(-1, 1, 3)), rng.uniform(-2, 2, 3))
        endpoint = SensorState(
            pose=pose_compose(origin, pose_retract(rel_pose, rng.uniform(-0.1, 0.1, 6))),
            velocity=origin.rotation.apply(rel_v + rng.uniform(-0.1, 0.1, 3)),
            bias_accel=np.zeros(3), bias_gyro=np.zeros(3), stamp=0.0)
        values = {submap_key(0): origin, frame_key(0): endpoint}
        c0 = f.cost(values)
        gpose = Se3Pose(so3_exp(rng.uniform(-2, 2, 3)), rng.uniform(-5, 5, 3))
        values2 = {
            submap_key(0): pose_compose(gpose, origin),
            frame_key(0): SensorState(
                pose=pose_compose(gpose, endpoint.pose),
                velocity=gpose.rotation.apply(endpoint.velocity),
                bias_accel=endpoint.bias_accel, bias_gyro=endpoint.bias_gyro,
                stamp=0.0),
        }
        assert f.cost(values2) == pytest.approx(c0, rel=1e-9)

    def test_velocity_sensitivity(self):
        rng = np.random.default_rng(9)
        origin = Se3Pose(so3_exp(rng.uniform(-1, 1, 3)), rng.uniform(-2, 2, 3))
        rel_pose = Se3Pose.identity()
        f = RelativeStateFactor(submap_key(0), frame_key(0), rel_pose,
                                np.zeros(3), np.zeros(6), sigma=1.0)
        endpoint = SensorState(pose=origin, velocity=np.zeros(3),
                               bias_accel=np.zeros(3), bias_gyro=np.zeros(3), stamp=0.0)
        delta = np.array([0.2, -0.1, 0.4])
        moved = SensorState(pose=origin, velocity=delta,
                            bias_accel=np.zeros(3), bias_gyro=np.zeros(3), stamp=0.0)
        values = {submap_key(0): origin, frame_key(0): endpoint}
        r0, _, _, _ = f._residual(values)
        values[frame_key(0)] = moved
        r1, _, _, _ = f._residual(values)
        assert np.allclose(r1[6:9] - r0[6:9],
                           origin.rotation.inverse().apply(delta), atol=1e-12)

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(10)
        worst = 0.0
        for _ in range(20):
            origin = Se3Pose(so3_exp(rng.uniform(-1, 1, 3)), rng.uniform(-2, 2, 3))
            rel_pose = Se3Pose(so3_exp(rng.uniform(-0.5, 0.5, 3)), rng.uniform(-1, 1, 3))
            f = RelativeStateFactor(submap_key(0), frame_key(0), rel_pose,
                                    rng.uniform(-1, 1, 3), rng.uniform(-0.05, 0.05, 6),
                                    sigma=1.0)
            endpoint = SensorState(
                pose=pose_compose(origin, pose_retract(rel_pose, rng.uniform(-0.2, 0.2, 6))),
                velocity=rng.uniform(-1, 1, 3),
                bias_accel=rng.uniform(-0.05, 0.05, 3),
                bias_gyro=rng.uniform(-0.05, 0.05, 3), stamp=0.0)
            values = {submap_key(0): origin, frame_key(0): endpoint}
            lin = f.linearize(values)
            # reconstruct raw jacobians from the returned blocks: g = 2 J^T L r
            r0, _, _, _ = f._residual(values)
            h = 1e-6
            fd_s = np.zeros((15, 6))
            for c in range(6):
                xi = np.zeros(6)
                xi[c] = h
                vp = dict(values)
                vp[submap_key(0)] = pose_retract(origin, xi)
                rp, _, _, _ = f._residual(vp)
                vm = dict(values)
                vm[submap_key(0)] = pose_retract(origin, -xi)
                rm, _, _, _ = f._residual(vm)
                fd_s[:, c] = (rp - rm) / (2 * h)
            fd_e = np.zeros((15, 15))
            for c in range(15):
                xi = np.zeros(15)
                xi[c] = h
                vp = dict(values)
                vp[frame_key(0)] = state_retract(endpoint, xi)
                rp, _, _, _ = f._residual(vp)
                vm = dict(values)
                vm[frame_key(0)] = state_retract(endpoint, -xi)
                rm, _, _, _ = f._residual(vm)
                fd_e[:, c] = (rp - rm) / (2 * h)
            g_s_expected = 2.0 * fd_s.T @ (f.information * r0)
            g_e_expected = 2.0 * fd_e.T @ (f.information * r0)
            scale = max(1.0, np.max(np.abs(g_s_expected)), np.max(np.abs(g_e_expected)))
            worst = max(worst,
                        np.max(np.abs(lin.g[0] - g_s_expected)) / scale,
                        np.max(np.abs(lin.g[1] - g_e_expected)) / scale)
        assert worst < 1e-5


class TestMarginalization:
    def _translation_chain(self):
        # rotations and biases pinned hard at identity/zero; the remaining
        # translation/velocity problem is exactly linear-Gaussian
        g = FactorGraph()
        rng = np.random.default_rng(11)
        pin = np.zeros(15)
        pin[0:3] = 1e12
        pin[9:15] = 1e12
        for i in range(3):
            s = SensorState(
                pose=Se3Pose(so3_exp(np.zeros(3)), rng.uniform(-1, 1, 3)),
                velocity=rng.uniform(-1, 1, 3),
                bias_accel=np.zeros(3), bias_gyro=np.zeros(3), stamp=float(i))
            g.add_variable(frame_key(i), s)
            g.add_factor(PriorFactor(frame_key(i), SensorState.zero(float(i)), pin))
        info = np.zeros(15)
        info[3:6] = 50.0
        info[6:9] = 20.0
        prior_target = SensorState(
            pose=Se3Pose(so3_exp(np.zeros(3)), np.array([1.0, 2.0, 3.0])),
            velocity=np.array([0.1, 0.0, -0.1]),
            bias_accel=np.zeros(3), bias_gyro=np.zeros(3), stamp=0.0)
        g.add_factor(PriorFactor(frame_key(0), prior_target, info))
        samples = [ImuSample(t, -GRAVITY, np.zeros(3)) for t in np.arange(0, 2.21, 0.005)]
        g.add_factor(ImuFactor(frame_key(0), frame_key(1),
                               preintegrate(samples, 0.0, 1.0, np.zeros(6), NOISE)))
        g.add_factor(ImuFactor(frame_key(1), frame_key(2),
                               preintegrate(samples, 1.0, 2.0, np.zeros(6), NOISE)))
        return g

    def test_linear_chain_marginalization_exact(self):
        full = self._translation_chain()
        full_res = full.optimize_lm()

        reduced = self._translation_chain()
        reduced.marginalize([frame_key(0)])
        red_res = reduced.optimize_lm()
        for i in (1, 2):
            err = state_local(red_res.estimates[frame_key(i)],
                              full_res.estimates[frame_key(i)])
            assert np.linalg.norm(err) < 1e-9

    def test_marginal_prior_information_psd(self):
        g = self._translation_chain()
        prior = g.marginalize([frame_key(0)])
        evals = np.linalg.eigvalsh(prior.hessian)
        assert evals.min() >= -1e-8 * max(1.0, evals.max())

    def test_unary_only_key_folds_to_constant(self):
        g = FactorGraph()
        g.add_variable(frame_key(0), SensorState.zero())
        g.add_variable(frame_key(1), SensorState.zero(1.0))
        g.add_factor(PriorFactor(frame_key(0), SensorState.zero(), np.full(15, 10.0)))
        target = state_retract(SensorState.zero(1.0), np.full(15, 0.1))
        g.add_factor(PriorFactor(frame_key(1), target, np.full(15, 10.0)))
        before = g.optimize_lm()
        prior = g.marginalize([frame_key(0)])
        assert prior.keys == ()
        after = g.optimize_lm()
        err = state_local(after.estimates[frame_key(1)], before.estimates[frame_key(1)])
        assert np.linalg.norm(err) < 1e-12

    def test_reoptimize_after_marginalizing_at_optimum(self):
        g = self._translation_chain()
        g.optimize_lm()
        snapshot = dict(g.values)
        g.marginalize([frame_key(0)])
        res = g.optimize_lm()
        assert res.iterations <= 2
        for i in (1, 2):
            err = state_local(res.estimates[frame_key(i)], snapshot[frame_key(i)])
            assert np.linalg.norm(err) < 1e-8

    def test_nonlinear_fixed_lag_consistency(self):
        # marginalizing at a converged estimate must not move the optimum
        rng = np.random.default_rng(12)
        g = FactorGraph()
        states = [random_state(rng, 0.0)]
        g.add_variable(frame_key(0), states[0])
        g.add_factor(PriorFactor(frame_key(0), states[0], np.full(15, 1e6)))
        samples = [ImuSample(t, -GRAVITY + [0.1, 0, 0], [0, 0, 0.2])
                   for t in np.arange(0, 1.01, 0.005)]
        pre = preintegrate(samples, 0.0, 1.0, np.zeros(6), NOISE)
        nxt = state_retract(states[0], rng.uniform(-0.1, 0.1, 15))
        g.add_variable(frame_key(1), nxt)
        g.add_factor(ImuFactor(frame_key(0), frame_key(1), pre))
        g.add_factor(PriorFactor(frame_key(1), nxt, np.r_[np.zeros(9), np.full(6, 100.0)]))
        first = g.optimize_lm()
        g.marginalize([frame_key(0)])
        second = g.optimize_lm()
        err = state_local(second.estimates[frame_key(1)], first.estimates[frame_key(1)])
        assert np.linalg.norm(err) < 1e-8
