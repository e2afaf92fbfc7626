from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from logic.env import (
    OBSERVATION_DIM,
    TRACE_COLUMNS,
    ActuationMode,
    EpisodeFailure,
    EpisodeTrace,
    OptogeneticChemostatEnv,
    ReferenceTrajectory,
    ScenarioConfig,
    ScenarioError,
    boundary_tracking_cost,
    build_observation,
    continuous_tracking_cost,
    integrate_period_activation,
    rk4_integrate,
    sample_episode_randomization,
    simulate_period,
    stage_reward,
    time_embedding,
)
from logic.model import DomainError, ModelParams, PlantState
from logic.pwm import ForcingGrid, period_avg_activation

PARAMS = ModelParams()
NOMINAL = PlantState(3.0, 50.0, 1.0752e-4)
CFG = ScenarioConfig()


def _run(env, duties, seed=0):
    env.reset(seed=seed)
    rewards = []
    for D in duties:
        _, reward, terminated, truncated, _ = env.step(D)
        rewards.append(reward)
        assert not truncated
    return rewards, terminated


class TestScenarioConfig:
    def test_reference_defaults_are_equal_thirds(self):
        ref = ReferenceTrajectory()
        assert ref.setpoint_at(0.0) == 3.0
        assert ref.setpoint_at(7.99) == 3.0
        assert ref.setpoint_at(8.0) == 5.0
        assert ref.setpoint_at(16.0) == 7.0
        assert ref.setpoint_at(24.0) == 7.0

    @pytest.mark.parametrize("segments", [(), ((8.0, 3.0), (8.0, 5.0)), ((24.0, 0.0),)])
    def test_invalid_reference_rejected(self, segments):
        with pytest.raises(ScenarioError):
            ReferenceTrajectory(segments=segments)

    def test_reference_must_end_at_horizon(self):
        with pytest.raises(ScenarioError):
            ScenarioConfig(reference=ReferenceTrajectory(((8.0, 3.0), (20.0, 5.0))))

    def test_integrator_step_bounded_by_period(self):
        with pytest.raises(ScenarioError):
            ScenarioConfig(integrator_step=0.2)

    def test_negative_uncertainty_rejected(self):
        with pytest.raises(ScenarioError):
            ScenarioConfig(uncertainty_level=-0.01)

    def test_dict_round_trip(self):
        cfg = ScenarioConfig(actuation_mode="intensity", uncertainty_level=0.05, q_t=5.0)
        assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.actuation_mode is ActuationMode.INTENSITY


class TestRandomization:
    def test_zero_uncertainty_gives_nominal_values(self):
        rng = np.random.default_rng(0)
        x0, q_p_max = sample_episode_randomization(CFG, rng, PARAMS)
        assert x0 == NOMINAL
        assert q_p_max == PARAMS.q_p_max

    def test_sample_mean_matches_nominal(self):
        cfg = replace(CFG, uncertainty_level=0.05)
        rng = np.random.default_rng(1)
        n = 100_000
        b = np.array([sample_episode_randomization(cfg, rng, PARAMS)[0].b for _ in range(n)])
        assert abs(b.mean() - NOMINAL.b) <= 3 * 0.05 * NOMINAL.b / np.sqrt(n)
        assert b.std() == pytest.approx(0.05 * NOMINAL.b, rel=0.02)

    def test_draws_stay_positive_at_large_uncertainty(self):
        cfg = replace(CFG, uncertainty_level=1.0)
        rng = np.random.default_rng(2)
        for _ in range(1000):
            x0, q_p_max = sample_episode_randomization(cfg, rng, PARAMS)
            assert x0.b > 0 and x0.g > 0 and x0.p > 0
            assert q_p_max > 0

    def test_switches_keep_nominal_values(self):
        cfg = replace(CFG, uncertainty_level=0.05, randomize_initial=False)
        x0, q_p_max = sample_episode_randomization(cfg, np.random.default_rng(3), PARAMS)
        assert x0 == NOMINAL
        assert q_p_max != PARAMS.q_p_max


class TestIntegration:
    def test_rk4_lands_on_end_time(self):
        times = []
        y = rk4_integrate(lambda t, y: np.ones(1), np.zeros(1), 0.0, 0.25, 0.1, on_step=lambda t, y: times.append(t))
        assert len(times) == 3
        assert y[0] == pytest.approx(0.25, abs=1e-15)

    def test_rk4_exact_for_cubic(self):
        y = rk4_integrate(lambda t, y: np.array([3 * t ** 2]), np.zeros(1), 0.0, 2.0, 0.1)
        assert y[0] == pytest.approx(8.0, rel=1e-12)

    def test_rk4_reports_non_finite_state(self):
        with pytest.raises(EpisodeFailure) as info:
            rk4_integrate(lambda t, y: np.array([np.inf]), np.zeros(1), 0.0, 1.0, 0.1)
        assert info.value.time == pytest.approx(0.1)

    def test_washout_fixed_point_is_preserved(self):
        x = PlantState(0.0, PARAMS.g_in, 0.0)
        x_next, _ = simulate_period(x, 0.0, 0, CFG, PARAMS)
        assert x_next == x

    def test_full_duty_equals_constant_max_intensity(self):
        intensity = replace(CFG, actuation_mode=ActuationMode.INTENSITY)
        for k in (0, 5, 23):
            pwm_next, _ = simulate_period(NOMINAL, 1.0, k, CFG, PARAMS)
            const_next, _ = simulate_period(NOMINAL, PARAMS.I_max, k, intensity, PARAMS)
            assert pwm_next == const_next

    def test_simulation_is_markov_and_deterministic(self):
        env = OptogeneticChemostatEnv(CFG, PARAMS)
        duties = [0.3, 0.0, 1.0, 0.55, 0.12]
        _run(env, duties)
        records = env.trace.records
        x = NOMINAL
        for record, D in zip(records, duties):
            x_next, _ = simulate_period(x, D, record.k, CFG, PARAMS)
            assert x_next.as_array().tobytes() == record.state.as_array().tobytes()
            x = record.state

    def test_halving_the_step_changes_little(self):
        rng = np.random.default_rng(4)
        fine = replace(CFG, integrator_step=CFG.integrator_step / 2)
        cases = [(NOMINAL, 0.5), (NOMINAL, 1.0)]
        for _ in range(100):
            x = PlantState(rng.uniform(1.0, 8.0), rng.uniform(20.0, 200.0), rng.uniform(1e-5, 0.016))
            cases.append((x, rng.uniform(0.0, 1.0)))
        for x, D in cases:
            coarse_next, _ = simulate_period(x, D, 0, CFG, PARAMS, record=False)
            fine_next, _ = simulate_period(x, D, 0, fine, PARAMS, record=False)
            a, b = coarse_next.as_array(), fine_next.as_array()
            assert np.linalg.norm(a - b) <= 5e-4 * np.linalg.norm(b)

    def test_rk4_converges_with_fourth_order(self):
        def end_state(step):
            cfg = replace(CFG, integrator_step=step)
            return simulate_period(NOMINAL, 0.5, 0, cfg, PARAMS, record=False)[0].as_array()

        reference = end_state(0.01 / 16)
        errors = [np.linalg.norm(end_state(h) - reference) for h in (0.01, 0.005, 0.0025)]
        assert errors[0] / errors[1] > 6
        assert errors[1] / errors[2] > 6

    def test_period_average_matches_integrated_activation(self):
        rng = np.random.default_rng(5)
        for D in rng.uniform(0.0, 1.0, size=1000):
            integrated = integrate_period_activation(D, 0, CFG.grid, PARAMS, 0.01)
            assert integrated == pytest.approx(period_avg_activation(D, PARAMS), rel=1e-10, abs=1e-15)

    def test_biomass_washes_out_without_light(self):
        env = OptogeneticChemostatEnv(CFG, PARAMS, record_dense=False)
        _run(env, [0.0] * CFG.grid.n_T)
        b = [r.state.b for r in env.trace.records]
        assert all(later < earlier for earlier, later in zip(b, b[1:]))
        assert b[0] < NOMINAL.b

    def test_stiff_decay_hands_over_to_radau(self):
        times = []
        y = rk4_integrate(lambda t, y: -1000.0 * y, np.ones(1), 0.0, 0.05, 0.01,
                          on_step=lambda t, y: times.append(t), jac=lambda t, y: np.array([[-1000.0]]))
        assert y[0] == pytest.approx(np.exp(-50.0), abs=1e-9)
        np.testing.assert_allclose(times, [0.0, 0.01, 0.02, 0.03, 0.04], atol=1e-15)
        assert rk4_integrate(lambda t, y: -1000.0 * y, np.ones(1), 0.0, 0.05, 0.01)[0] > 1.0

    def test_step_leaving_the_orthant_is_redone_implicitly(self):
        def consume(t, y):
            return -50.0 * y / (y + 1e-4)

        assert rk4_integrate(consume, np.array([0.01]), 0.0, 0.1, 0.01)[0] < 0
        samples = []
        y = rk4_integrate(consume, np.array([0.01]), 0.0, 0.1, 0.01,
                          on_step=lambda t, y: samples.append(y[0]), nonnegative=True)
        assert 0.0 <= y[0] < 1e-6
        assert len(samples) == 10
        assert min(samples) >= 0.0

    def test_glucose_limited_period_completes(self):
        stressed = PlantState(10.0, 5.0, 0.016)
        x_next, samples = simulate_period(stressed, 1.0, 0, CFG, PARAMS)
        assert len(samples) == 100
        assert all(gs > 0 for _, _, gs, _, _ in samples)
        assert 0.0 < x_next.g < 1e-2
        assert x_next.b > stressed.b

    def test_full_on_episode_settles_on_glucose_limit(self):
        env = OptogeneticChemostatEnv(CFG, PARAMS)
        _, terminated = _run(env, [1.0] * CFG.grid.n_T)
        assert terminated
        g = np.array([row[2] for row in env.trace.dense])
        assert len(g) == 24 * 100 + 1
        assert g.min() > 0.0
        assert g[-1] < 1e-3
        assert env.trace.records[-1].state.b == pytest.approx(19.33, abs=0.05)

    @settings(max_examples=30)
    @given(
        st.floats(min_value=0.5, max_value=10.0),
        st.floats(min_value=1.0, max_value=200.0),
        st.floats(min_value=0.0, max_value=0.016),
        st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=2, max_size=2),
    )
    def test_state_stays_nonnegative_and_glucose_bounded(self, b, g, p, duties):
        x = PlantState(b, g, p)
        bound = max(g, PARAMS.g_in) + 1e-9
        for k, D in enumerate(duties):
            x, samples = simulate_period(x, D, k, CFG, PARAMS)
            for _, bs, gs, ps, _ in samples:
                assert bs >= 0 and gs >= 0 and ps >= 0
                assert gs <= bound
        assert x.g <= bound

    def test_out_of_range_action_rejected(self):
        with pytest.raises(DomainError):
            simulate_period(NOMINAL, 1.2, 0, CFG, PARAMS)
        intensity = replace(CFG, actuation_mode=ActuationMode.INTENSITY)
        with pytest.raises(DomainError):
            simulate_period(NOMINAL, 31.0, 0, intensity, PARAMS)


class TestReward:
    def test_perfect_tracking_costs_nothing(self):
        assert stage_reward(PlantState(3.0, 50.0, 0.0), 0, CFG) == 0

    def test_stage_reward_uses_setpoint_at_period_end(self):
        assert stage_reward(PlantState(4.0, 50.0, 0.0), 6, CFG) == -1.0
        assert stage_reward(PlantState(4.0, 50.0, 0.0), 7, CFG) == -1.0
        assert stage_reward(PlantState(5.0, 50.0, 0.0), 7, CFG) == 0

    def test_terminal_weight_applies_to_last_period(self):
        cfg = replace(CFG, q_t=10.0)
        assert stage_reward(PlantState(6.0, 50.0, 0.0), 23, cfg) == -10.0
        assert stage_reward(PlantState(6.0, 50.0, 0.0), 22, cfg) == -1.0

    def test_constant_biomass_return_matches_oracle(self):
        x = PlantState(3.0, 50.0, 0.0)
        total = sum(stage_reward(x, k, CFG) for k in range(CFG.grid.n_T))
        expected = 0.0
        for k in range(CFG.grid.n_T):
            t = (k + 1) * CFG.grid.T
            setpoint = 3.0 if t < 8 else 5.0 if t < 16 else 7.0
            expected -= (3.0 - setpoint) ** 2
        assert total == expected == -176.0

    def test_period_index_checked(self):
        with pytest.raises(ScenarioError):
            stage_reward(NOMINAL, 24, CFG)


class TestObservation:
    @pytest.mark.parametrize("k,expected", [(0, -1.0), (23, 1.0), (12, 2 * 12 / 23 - 1)])
    def test_time_embedding(self, k, expected):
        assert time_embedding(k, CFG.grid) == pytest.approx(expected, abs=1e-15)

    def test_single_period_embedding(self):
        assert time_embedding(0, ForcingGrid(n_T=1)) == -1.0

    def test_initial_observation_is_padded(self):
        z = build_observation([NOMINAL], [], 0, CFG.grid, PARAMS)
        assert z.shape == (OBSERVATION_DIM,)
        scaled = [0.3, 0.25, 0.10752]
        np.testing.assert_allclose(z[:3], scaled, rtol=1e-15)
        np.testing.assert_allclose(z[4:7], scaled, rtol=1e-15)
        assert z[3] == 0.0 and z[7] == 0.0
        assert z[8] == -1.0

    def test_observation_carries_two_past_duties(self):
        states = [NOMINAL, PlantState(3.5, 60.0, 2e-3), PlantState(4.0, 70.0, 5e-3)]
        z = build_observation(states, [0.2, 0.7], 2, CFG.grid, PARAMS)
        np.testing.assert_allclose(z[:3], [0.4, 0.35, 5.0], rtol=1e-15)
        assert z[3] == 0.7
        np.testing.assert_allclose(z[4:7], [0.35, 0.3, 2.0], rtol=1e-15)
        assert z[7] == 0.2


class TestEnvironment:
    def test_spaces(self):
        env = OptogeneticChemostatEnv(CFG, PARAMS)
        assert env.observation_space.shape == (OBSERVATION_DIM,)
        assert env.action_space.high[0] == 1.0
        intensity = OptogeneticChemostatEnv(replace(CFG, actuation_mode="intensity"), PARAMS)
        assert intensity.action_space.high[0] == PARAMS.I_max

    def test_reset_is_seeded(self):
        cfg = replace(CFG, uncertainty_level=0.05)
        env = OptogeneticChemostatEnv(cfg, PARAMS)
        obs1, info1 = env.reset(seed=42)
        obs2, info2 = env.reset(seed=42)
        assert np.array_equal(obs1, obs2)
        assert info1["state"] == info2["state"]
        assert env.episode_params.q_p_max == info2["q_p_max"]

    def test_episode_has_one_transition_per_period(self):
        env = OptogeneticChemostatEnv(CFG, PARAMS)
        rewards, terminated = _run(env, np.linspace(0.0, 0.3, CFG.grid.n_T))
        assert terminated
        assert len(env.trace.records) == CFG.grid.n_T
        assert env.trace.episode_return == pytest.approx(sum(rewards))

    def test_return_matches_boundary_cost_of_dense_trace(self):
        env = OptogeneticChemostatEnv(CFG, PARAMS)
        rng = np.random.default_rng(6)
        _run(env, rng.uniform(0.0, 0.3, size=CFG.grid.n_T))
        assert env.trace.episode_return == pytest.approx(-boundary_tracking_cost(env.trace, CFG), rel=1e-12)

    def test_trace_frame(self, tmp_path):
        env = OptogeneticChemostatEnv(CFG, PARAMS)
        _run(env, [0.2] * CFG.grid.n_T)
        frame = env.trace.to_frame()
        assert list(frame.columns) == TRACE_COLUMNS
        assert frame["action"].notna().sum() == CFG.grid.n_T
        assert frame["reward"].notna().sum() == CFG.grid.n_T
        assert frame["t"].iloc[0] == 0.0
        assert frame["t"].iloc[-1] == CFG.grid.t_f
        assert frame["t"].is_monotonic_increasing
        assert set(frame["I"]) == {0.0, PARAMS.I_max}
        path = tmp_path / "trace.csv"
        env.trace.write_csv(path)
        assert path.read_text().splitlines()[0] == ",".join(TRACE_COLUMNS)

    def test_step_after_termination_rejected(self):
        env = OptogeneticChemostatEnv(replace(CFG, grid=ForcingGrid(n_T=1),
                                              reference=ReferenceTrajectory(((1.0, 4.0),))), PARAMS)
        _, terminated = _run(env, [0.5])
        assert terminated
        with pytest.raises(ScenarioError):
            env.step(0.5)

    def test_step_before_reset_rejected(self):
        with pytest.raises(ScenarioError):
            OptogeneticChemostatEnv(CFG, PARAMS).step(0.5)

    def test_failed_period_closes_the_dense_trace(self, monkeypatch):
        def fail_second_period(x, action, k, cfg, params, record=True):
            if k == 1:
                raise EpisodeFailure("non-finite state during integration", 1.5)
            return simulate_period(x, action, k, cfg, params, record)

        monkeypatch.setattr("logic.env.simulate_period", fail_second_period)
        env = OptogeneticChemostatEnv(CFG, PARAMS)
        env.reset(seed=0)
        env.step(0.2)
        with pytest.raises(EpisodeFailure):
            env.step(0.2)
        trace = env.trace
        assert trace.failure_time == 1.5
        assert len(trace.records) == 1
        frame = trace.to_frame()
        assert len(frame) == 101
        last = frame.iloc[-1]
        assert last["t"] == 1.0
        assert last["b"] == trace.records[0].state.b
        assert last["reward"] == trace.records[0].reward
        assert frame["reward"].notna().sum() == 1
        with pytest.raises(ScenarioError):
            env.step(0.2)


class TestTrackingCosts:
    def test_continuous_cost_of_perfect_tracking(self):
        trace = EpisodeTrace(NOMINAL, PARAMS.q_p_max)
        for t in np.linspace(0.0, 24.0, 241):
            trace.dense.append((t, CFG.reference.setpoint_at(t), 50.0, 0.0, 0.0, min(int(t), 23)))
        assert continuous_tracking_cost(trace, CFG) == 0.0

    def test_continuous_cost_of_constant_biomass(self):
        trace = EpisodeTrace(NOMINAL, PARAMS.q_p_max)
        for t in np.linspace(0.0, 24.0, 241):
            trace.dense.append((t, 3.0, 50.0, 0.0, 0.0, min(int(t), 23)))
        # 32 + 128 over the segments, 0.8 from the two jumps, 16 terminal
        assert continuous_tracking_cost(trace, CFG) == pytest.approx(176.8, abs=1e-6)

    def test_costs_need_dense_samples(self):
        trace = EpisodeTrace(NOMINAL, PARAMS.q_p_max)
        with pytest.raises(ScenarioError):
            continuous_tracking_cost(trace, CFG)
        with pytest.raises(ScenarioError):
            boundary_tracking_cost(trace, CFG)
