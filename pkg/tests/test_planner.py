from __future__ import annotations

import numpy as np
import pytest

from residual_nmpc.dynamics import PlantConfig, State, f_norm
from residual_nmpc.errors import DomainError
from residual_nmpc.nmpc import NmpcConfig
from residual_nmpc.planner import (
    ReferenceTrajectory,
    RegenerationTracker,
    RunLog,
    WorldModel,
    closed_loop_run,
    generate_reference,
    maybe_regenerate,
    random_forest_world,
    straight_waypoints,
    visible_obstacles,
)
from residual_nmpc.planner.regenerate import STAGNATION_LIMIT

SQUARE = np.array([[0, 0, 2], [5, 0, 2], [5, 5, 2], [0, 5, 2], [0, 0.5, 2]], dtype=float)


class TestReference:
    def test_straight_line(self):
        ref = generate_reference(straight_waypoints([0, 0, 1], [9, 0, 1]), 50.0, 0.1)
        np.testing.assert_allclose(ref.x[:, 1:3], [[0.0, 1.0]] * len(ref), atol=1e-12)
        speeds = np.linalg.norm(ref.u[:, :3], axis=1)
        cruise = speeds[: len(ref) // 2]
        np.testing.assert_allclose(cruise, cruise[0], rtol=1e-9)
        assert np.all(np.diff(speeds) <= 1e-9)  # only ever brakes
        np.testing.assert_allclose(ref.u[:, 1:], 0.0, atol=1e-12)
        assert speeds[-1] == 0.0
        assert ref.x[-1, 0] == pytest.approx(9.0)

    def test_speed_cap(self):
        ref = generate_reference(SQUARE, 1.5, 0.1)
        assert np.max(np.linalg.norm(ref.u[:, :3], axis=1)) == pytest.approx(1.5, abs=1e-9)

    def test_corners_smooth(self):
        ref = generate_reference(SQUARE, 1.5, 0.1)
        v = ref.world_velocity()
        assert np.all(np.isfinite(v))
        assert np.max(np.linalg.norm(np.diff(v, axis=0), axis=1)) <= 1.5 * 0.1 * 5

    def test_consistent_with_kinematics(self):
        ref = generate_reference(SQUARE, 1.5, 0.1)
        step = np.array([ref.dt * f_norm(ref.x[k], ref.u[k])[:3] for k in range(len(ref) - 1)])
        actual = np.diff(ref.x[:, :3], axis=0)
        err = np.linalg.norm(step - actual, axis=1)
        assert np.all(err <= 0.1 * np.linalg.norm(actual, axis=1) + 1e-9)

    def test_uniform_grid(self):
        ref = generate_reference(SQUARE, 1.0, 0.1)
        np.testing.assert_allclose(np.diff(ref.t), 0.1)

    def test_errors(self):
        with pytest.raises(DomainError):
            generate_reference(SQUARE[:3], 1.0, 0.1)
        with pytest.raises(DomainError):
            generate_reference(np.vstack([SQUARE[:2], SQUARE[1:]]), 1.0, 0.1)

    def test_csv_roundtrip(self, tmp_path):
        ref = generate_reference(SQUARE, 1.0, 0.1)
        ref.to_csv(tmp_path / "r.csv")
        back = ReferenceTrajectory.from_csv(tmp_path / "r.csv")
        np.testing.assert_array_equal(back.x, ref.x)
        np.testing.assert_array_equal(back.u, ref.u)

    def test_slice_holds_end(self):
        ref = generate_reference(straight_waypoints([0, 0, 1], [3, 0, 1]), 1.0, 0.1)
        sl = ref.slice(len(ref) - 3, 15)
        np.testing.assert_array_equal(sl.x_ref[-1], ref.x[-1])
        np.testing.assert_array_equal(sl.u_ref[-1], 0.0)


class TestVisible:
    def test_empty(self):
        assert visible_obstacles(WorldModel(), [0, 0, 0]) == []

    def test_closed_ball(self):
        w = WorldModel(obstacles=[[5.0, 0, 0]], sensing_radius=5.0)
        assert len(visible_obstacles(w, [0, 0, 0])) == 1

    def test_distances(self):
        w = WorldModel(obstacles=[[2.0, 0, 0], [0, 4.0, 0], [0, 0, 6.0]], sensing_radius=5.0)
        got = visible_obstacles(w, [0, 0, 0])
        np.testing.assert_array_equal([o.center for o in got], [[2, 0, 0], [0, 4, 0]])


class TestRegenerate:
    ref = generate_reference(straight_waypoints([0, 0, 2], [12, 0, 2]), 1.5, 0.1)
    world = WorldModel(goal=[12, 0, 2])

    def test_below_threshold(self):
        out = maybe_regenerate(self.ref, State.from_array(self.ref.x[5]), 2.0, self.world)
        assert out is self.ref

    def test_new_reference_from_vehicle(self):
        x = State((4.0, 3.0, 2.0), 0.0)
        out = maybe_regenerate(self.ref, x, 2.0, self.world)
        assert out is not self.ref
        np.testing.assert_allclose(out.x[0, :3], x.p, atol=1e-12)
        np.testing.assert_allclose(out.goal, self.ref.goal, atol=1e-12)

    def test_detour_clears_obstacles(self):
        world = WorldModel(obstacles=[[7.0, 3.0, 2.0]], goal=[12, 0, 2])
        out = maybe_regenerate(self.ref, State((4.0, 3.0, 2.0), 0.0), 2.0, world, d_o=1.0, margin=1.0)
        assert world.clearance(out.x[:, :3]) >= 1.0

    def test_stagnation_flag(self):
        tracker = RegenerationTracker()
        x = State((4.0, 3.0, 2.0), 0.0)
        for _ in range(STAGNATION_LIMIT + 1):
            maybe_regenerate(self.ref, x, 2.0, self.world, tracker)
        assert tracker.stagnant == STAGNATION_LIMIT
        assert tracker.unreachable

    def test_progress_resets(self):
        tracker = RegenerationTracker()
        for k in range(8):
            maybe_regenerate(self.ref, State((float(k), 3.0, 2.0), 0.0), 2.0, self.world, tracker)
        assert not tracker.unreachable

    def test_bad_threshold(self):
        with pytest.raises(DomainError):
            maybe_regenerate(self.ref, State.from_array(self.ref.x[0]), 0.0, self.world)


class TestClosedLoop:
    cfg = NmpcConfig()

    def test_matched_tracking(self):
        ref = generate_reference(straight_waypoints([0, 0, 2], [10, 0, 2]), 1.5, 0.1)
        lg = closed_loop_run(self.cfg, WorldModel(goal=ref.goal), ref, PlantConfig.matched(), max_steps=200)
        assert lg.success
        assert lg.position_rmse() <= 0.01
        assert lg.regenerations == 0

    def test_drag_worse_than_matched(self):
        ref = generate_reference(straight_waypoints([0, 0, 2], [10, 0, 2]), 1.5, 0.1)
        w = WorldModel(goal=ref.goal)
        a = closed_loop_run(self.cfg, w, ref, PlantConfig.matched(), max_steps=200)
        b = closed_loop_run(self.cfg, w, ref, PlantConfig(), max_steps=200)
        assert b.position_rmse() > a.position_rmse()

    def test_blocking_obstacle(self):
        cfg = NmpcConfig(d_o=1.1, x_min=(-1e3, -1e3, 1.5, -1e3), x_max=(1e3, 1e3, 2.5, 1e3))
        ref = generate_reference(straight_waypoints([0, 0, 2], [10, 0, 2]), 1.5, 0.1)
        w = WorldModel(obstacles=[[5.0, 0.1, 2.0]], goal=ref.goal)
        lg = closed_loop_run(cfg, w, ref, PlantConfig(), max_steps=300)
        assert lg.success
        assert lg.min_clearance >= 1.0 - 1e-2
        assert np.linalg.norm(lg.xhat[-1, :3] - ref.goal) <= 0.3

    def test_log_invariants(self, tmp_path):
        world = random_forest_world(3)
        cfg = NmpcConfig(d_o=1.1, x_min=(-1e3, -1e3, 0.5, -1e3), x_max=(1e3, 1e3, 4.5, 1e3))
        ref = generate_reference(straight_waypoints(world.start, world.goal), 1.5, 0.1)
        lg = closed_loop_run(cfg, world, ref, PlantConfig(), max_steps=60)
        assert np.all(np.diff(lg.t) > 0)
        np.testing.assert_allclose(np.diff(lg.t), cfg.dt)
        assert np.all(lg.u <= cfg.u_hi) and np.all(lg.u >= cfg.u_lo)
        lg.to_csv(tmp_path / "run.csv")
        back = RunLog.from_csv(tmp_path / "run.csv")
        np.testing.assert_array_equal(back.xhat, lg.xhat)
        np.testing.assert_array_equal(back.regenerated, lg.regenerated)

    def test_deterministic(self):
        ref = generate_reference(SQUARE, 1.2, 0.1)
        w = WorldModel(obstacles=[[5.0, 2.5, 2.0]], goal=ref.goal)
        a = closed_loop_run(self.cfg, w, ref, PlantConfig(), max_steps=80)
        b = closed_loop_run(self.cfg, w, ref, PlantConfig(), max_steps=80)
        np.testing.assert_array_equal(a.xhat, b.xhat)
        np.testing.assert_array_equal(a.u, b.u)

    def test_dt_mismatch(self):
        ref = generate_reference(SQUARE, 1.0, 0.05)
        with pytest.raises(DomainError):
            closed_loop_run(self.cfg, WorldModel(goal=ref.goal), ref, PlantConfig())
