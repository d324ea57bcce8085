import numpy as np
import pytest

from safestab.envs import CarFollowEnv, UnicycleEnv, lookahead_point, make_env


@pytest.fixture
def uni():
    return UnicycleEnv(dt=0.1)


@pytest.fixture
def cars():
    return CarFollowEnv(dt=0.1)


class TestUnicycleStep:
    def test_straight_drive_with_drag(self, uni):
        x_next = uni.step(np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.0]))
        np.testing.assert_allclose(x_next, [0.09, 0.0, 0.0], atol=1e-15)

    def test_drag_vanishes_sideways(self, uni):
        # drag enters x1 as dt*cos(theta)*(-0.1 cos(theta)); zero at pi/2
        x = np.array([1.0, 2.0, np.pi / 2])
        x_next = uni.step(x, np.array([0.0, 0.0]))
        assert x_next[0] == pytest.approx(1.0, abs=1e-12)

    def test_reversed_heading(self, uni):
        # at theta=pi the drag is +0.1 along the body axis, so the net
        # forward speed is 0.1 and x1 decreases
        x_next = uni.step(np.array([1.0, 1.0, np.pi]), np.array([0.0, 1.0]))
        assert x_next[2] == pytest.approx(np.pi + 0.1)
        assert x_next[0] == pytest.approx(0.99)
        assert x_next[1] == pytest.approx(1.0)

    def test_determinism(self, uni, rng):
        x = rng.normal(size=3)
        u = np.array([0.5, -0.5])
        np.testing.assert_array_equal(uni.step(x, u), uni.step(x, u))

    def test_residual_decomposition(self, uni, rng):
        for _ in range(1000):
            x = rng.normal(size=3)
            u = rng.uniform(-1, 1, size=2)
            f, g = uni.nominal(x)
            true_step = uni.step(x, u)
            drag = np.array([-0.1 * np.cos(x[2]), 0.0])
            np.testing.assert_allclose(
                true_step - (f + g @ u), g @ drag, atol=1e-12)


class TestLookahead:
    def test_axis_aligned(self):
        np.testing.assert_allclose(
            lookahead_point(np.array([1.0, 2.0, 0.0]), 0.5), [1.5, 2.0])

    def test_zero_lookahead(self):
        np.testing.assert_allclose(
            lookahead_point(np.array([3.0, 4.0, 1.2]), 0.0), [3.0, 4.0])

    def test_quarter_turn(self):
        np.testing.assert_allclose(
            lookahead_point(np.array([0.0, 0.0, np.pi / 2]), 1.0),
            [0.0, 1.0], atol=1e-12)

    def test_negative_distance_rejected(self):
        with pytest.raises(ValueError):
            lookahead_point(np.zeros(3), -0.1)


class TestCarFollowStep:
    def test_car4_is_velocity_controlled(self, cars):
        x = cars.reset()
        x[6], x[7] = 0.0, 5.0
        x_next = cars.step(x, np.array([2.0]))
        assert x_next[6] == pytest.approx(0.2)
        assert x_next[7] == pytest.approx(2.0)

    def test_car2_braking_law(self, cars):
        x = cars.reset()
        x[0], x[2] = 10.0, 5.0  # gap 5 < 6.5 triggers braking
        x[3] = 3.0
        a = cars._accels(x)
        assert a[1] == pytest.approx(-cars.K_B * 5.0)

    def test_car5_coasts_when_far(self, cars):
        x = cars.reset()
        x[4], x[8] = 20.0, 0.0  # |p3 - p5| = 20 >= 13
        x[9] = 3.0
        a = cars._accels(x)
        assert a[4] == pytest.approx(0.0)

    def test_car4_velocity_equals_control_every_step(self, cars, rng):
        x = cars.reset()
        for _ in range(50):
            u = rng.uniform(0, 6, size=1)
            x = cars.step(x, u)
            assert x[7] == u[0]

    def test_residual_decomposition(self, cars, rng):
        for _ in range(1000):
            x = cars.reset()
            x[:10] += rng.normal(scale=2.0, size=10)
            x[10] = rng.uniform(0, 50)
            u = rng.uniform(0, 6, size=1)
            f, g = cars.nominal(x)
            residual = cars.step(x, u) - (f + g @ u)
            a = cars._accels(x)
            expected = np.zeros(11)
            for i in (0, 1, 2, 4):
                expected[2 * i + 1] = cars.D_I * a[i] * cars.dt
            np.testing.assert_allclose(residual, expected, atol=1e-10)


class TestFeedback:
    def test_unicycle_zero_reward(self, uni):
        x = np.array([0.0, 0.0, 0.0])
        # same lookahead distance before and after, v at the reference
        fb_reward = uni.reward(x, np.array([uni.v_ref, 0.0]), x)
        assert fb_reward == pytest.approx(0.0)

    def test_carfollow_bonus_at_desired_gap(self, cars):
        x = cars.reset()
        x_next = x.copy()
        x_next[4] = x_next[6] + 9.5
        fb = cars.feedback(x, np.array([cars.V_S]), x_next)
        assert fb.reward == pytest.approx(1.5)
        assert fb.cost == pytest.approx(0.0)

    def test_unicycle_violation_on_obstacle(self, uni):
        obs = uni.obstacles[0]
        th = 0.3
        x_next = np.array([obs[0] - uni.l_p * np.cos(th),
                           obs[1] - uni.l_p * np.sin(th), th])
        fb = uni.feedback(np.zeros(3), np.zeros(2), x_next)
        assert fb.barrier_values[0] == pytest.approx(-uni.delta**2 / 2)
        assert fb.violation

    def test_violation_flag_matches_min_barrier(self, uni, rng):
        for _ in range(200):
            x_next = rng.uniform(-1, 4, size=3)
            fb = uni.feedback(np.zeros(3), np.zeros(2), x_next)
            assert fb.violation == (fb.barrier_values.min() < 0.0)

    def test_cost_nonnegative_and_zero_at_target(self, uni, cars, rng):
        for _ in range(200):
            assert uni.cost(np.zeros(3), np.zeros(2),
                            rng.normal(size=3)) >= 0.0
        at_target = np.array([uni.destination[0] - uni.l_p,
                              uni.destination[1], 0.0])
        assert uni.cost(np.zeros(3), np.zeros(2), at_target) == pytest.approx(0.0)
        x = cars.reset()
        assert cars.cost(x, np.zeros(1), x) == pytest.approx(0.0)


class TestBarrierGradients:
    @pytest.mark.parametrize("env_name", ["unicycle", "carfollow"])
    def test_gradient_matches_finite_differences(self, env_name, rng):
        env = make_env(env_name)
        eps = 1e-6
        for _ in range(1000 // len(env.barriers)):
            x = rng.normal(scale=3.0, size=env.state_dim)
            for barrier in env.barriers:
                grad = barrier.grad(x)
                num = np.zeros_like(grad)
                for j in range(env.state_dim):
                    xp, xm = x.copy(), x.copy()
                    xp[j] += eps
                    xm[j] -= eps
                    num[j] = (barrier.fn(xp) - barrier.fn(xm)) / (2 * eps)
                scale = max(np.abs(num).max(), 1e-8)
                assert np.abs(grad - num).max() / scale <= 1e-5


class TestValidation:
    def test_bad_dimensions_rejected(self, uni, cars):
        with pytest.raises(ValueError):
            uni.step(np.zeros(4), np.zeros(2))
        with pytest.raises(ValueError):
            cars.step(cars.reset(), np.zeros(2))
        with pytest.raises(ValueError):
            uni.step(np.array([np.nan, 0.0, 0.0]), np.zeros(2))

    def test_unknown_env_name(self):
        with pytest.raises(ValueError):
            make_env("pendulum")

    def test_barrier_eta_range(self):
        from safestab.envs import Barrier
        with pytest.raises(ValueError):
            Barrier("bad", 1.5, lambda x: 0.0, lambda x: np.zeros(3))
