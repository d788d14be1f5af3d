"""Query-agent contracts: reward algebra, gradients, replay, exploration, training."""

import numpy as np
import pytest

from stressaware.agent import (
    ACTION_NO_QUERY,
    ACTION_QUERY,
    AgentConfig,
    AgentState,
    DqnAgent,
    ReplayMemory,
    Transition,
    compute_reward,
    epsilon_greedy_action,
    hour_of,
    reward_components,
    state_from_observation,
    train_offline,
)
from stressaware.errors import (
    CompatibilityError,
    CorruptedModelError,
    NotReadyError,
    ParameterError,
)
from stressaware.network import Adam, QNetwork, soft_update


def random_state(rng):
    return AgentState(*rng.uniform(0.0, 1.0, size=4))


def flat_params(net):
    return np.concatenate([w.ravel() for w in net.weights]
                          + [b.ravel() for b in net.biases])


class TestStateConstruction:
    def test_uncertainty_peaks_on_boundary(self):
        rr = [0.5] * 24
        assert state_from_observation(0.5, rr, None, 0.0).uncertainty == 1.0

    def test_uncertainty_zero_at_full_confidence(self):
        rr = [0.5] * 24
        assert state_from_observation(1.0, rr, None, 0.0).uncertainty == 0.0
        assert state_from_observation(0.0, rr, None, 0.0).uncertainty == 0.0

    def test_time_since_query_normalization(self):
        rr = [0.5] * 24
        now = 10 * 3600.0
        state = state_from_observation(0.7, rr, now - 2 * 3600.0, now)
        assert state.time_since_query == pytest.approx(0.5)
        state = state_from_observation(0.7, rr, now - 9 * 3600.0, now)
        assert state.time_since_query == 1.0

    def test_hour_components(self):
        rr = list(np.linspace(0.1, 0.9, 24))
        now = 86400.0 * 3 + 14 * 3600.0 + 120.0
        state = state_from_observation(0.5, rr, None, now)
        assert state.response_rate == pytest.approx(rr[14])
        assert state.time_of_day == pytest.approx(hour_of(now) / 24.0)

    def test_component_range_enforced(self):
        with pytest.raises(ParameterError):
            AgentState(1.2, 0.5, 0.5, 0.5)


class TestReward:
    def test_sigmoid_midpoint(self):
        state = AgentState(0.5, 0.1, 0.9, 0.0)
        assert reward_components(state)[0] == pytest.approx(0.5)

    def test_neutral_state_rewards(self):
        state = AgentState(0.5, 0.5, 0.5, 0.3)
        assert compute_reward(state, ACTION_QUERY) == pytest.approx(1.5)
        assert compute_reward(state, ACTION_NO_QUERY) == pytest.approx(1.5)

    def test_max_uncertainty_component(self):
        state = AgentState(1.0, 0.5, 0.5, 0.0)
        r0 = reward_components(state)[0]
        assert r0 == pytest.approx(1.0 / (1.0 + np.exp(-10.0)), rel=1e-12)

    def test_complement_sums_to_three_exactly(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            state = random_state(rng)
            q = compute_reward(state, ACTION_QUERY)
            nq = compute_reward(state, ACTION_NO_QUERY)
            assert q + nq == 3.0
            assert 0.0 < q < 3.0

    def test_query_reward_monotone_in_each_component(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            base = rng.uniform(0.05, 0.95, size=4)
            bumped = base.copy()
            axis = int(rng.integers(0, 3))
            bumped[axis] += 0.04
            low = compute_reward(AgentState(*base), ACTION_QUERY)
            high = compute_reward(AgentState(*bumped), ACTION_QUERY)
            assert high > low

    def test_uncertainty_only_mode(self):
        state = AgentState(0.5, 0.9, 0.9, 0.0)
        q = compute_reward(state, ACTION_QUERY, mode="uncertainty_only")
        nq = compute_reward(state, ACTION_NO_QUERY, mode="uncertainty_only")
        assert q == pytest.approx(0.5)
        assert q + nq == 1.0


class TestQNetwork:
    def test_zero_network_outputs_zero(self):
        net = QNetwork(zero_init=True)
        out = net.forward(np.array([0.3, 0.4, 0.5, 0.6]))
        np.testing.assert_array_equal(out, [0.0, 0.0])

    def test_output_arity_two(self):
        net = QNetwork(rng=np.random.default_rng(2))
        assert net.forward(np.zeros(4)).shape == (2,)

    def test_deterministic_forward(self):
        a = QNetwork(rng=np.random.default_rng(3)).forward(np.full(4, 0.25))
        b = QNetwork(rng=np.random.default_rng(3)).forward(np.full(4, 0.25))
        assert a.tobytes() == b.tobytes()

    def test_nonfinite_weights_rejected(self):
        net = QNetwork(rng=np.random.default_rng(4))
        net.weights[1][0, 0] = np.nan
        with pytest.raises(CorruptedModelError):
            net.forward(np.zeros(4))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        net = QNetwork(l1=1e-2, l2=1e-2, rng=rng)
        X = rng.uniform(0, 1, size=(6, 4))
        actions = rng.integers(0, 2, size=6)
        targets = rng.uniform(0, 3, size=6)

        loss, _, w_grads, b_grads = net.loss_and_grads(X, actions, targets)
        analytic = np.concatenate([g.ravel() for g in w_grads]
                                  + [g.ravel() for g in b_grads])

        tensors = net.weights + net.biases
        h = 1e-6
        numeric = np.empty_like(analytic)
        pos = 0
        for tensor in tensors:
            flat = tensor.ravel()
            for j in range(flat.size):
                original = flat[j]
                flat[j] = original + h
                up = net.loss_and_grads(X, actions, targets)[0]
                flat[j] = original - h
                down = net.loss_and_grads(X, actions, targets)[0]
                flat[j] = original
                numeric[pos] = (up - down) / (2 * h)
                pos += 1
        scale = np.maximum(np.abs(numeric), 1.0)
        np.testing.assert_allclose(analytic / scale, numeric / scale, atol=1e-4)


class TestSoftUpdate:
    def test_tau_one_copies(self):
        a = QNetwork(rng=np.random.default_rng(5))
        b = QNetwork(rng=np.random.default_rng(6))
        soft_update(a, b, tau=1.0)
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)

    def test_tau_zero_freezes(self):
        a = QNetwork(rng=np.random.default_rng(7))
        b = QNetwork(rng=np.random.default_rng(8))
        before = [w.copy() for w in b.weights]
        soft_update(a, b, tau=0.0)
        for w, old in zip(b.weights, before):
            np.testing.assert_array_equal(w, old)

    def test_small_tau_interpolates(self):
        a = QNetwork(zero_init=True)
        b = QNetwork(zero_init=True)
        a.weights = [np.ones_like(w) for w in a.weights]
        soft_update(a, b, tau=0.01)
        for w in b.weights:
            np.testing.assert_allclose(w, 0.01)

    def test_architecture_mismatch_rejected(self):
        a = QNetwork(layer_sizes=(4, 5, 2))
        b = QNetwork(layer_sizes=(4, 6, 2))
        with pytest.raises(CompatibilityError):
            soft_update(a, b)


class TestEpsilonGreedy:
    def test_greedy_takes_argmax(self):
        net = QNetwork(zero_init=True)
        net.biases[-1] = np.array([0.2, 0.9])
        state = AgentState(0.5, 0.5, 0.5, 0.5)
        action = epsilon_greedy_action(net, state, 0.0, np.random.default_rng(0))
        assert action == ACTION_QUERY

    def test_tie_breaks_to_no_query(self):
        net = QNetwork(zero_init=True)
        net.biases[-1] = np.array([0.3, 0.3])
        state = AgentState(0.5, 0.5, 0.5, 0.5)
        action = epsilon_greedy_action(net, state, 0.0, np.random.default_rng(0))
        assert action == ACTION_NO_QUERY

    def test_full_exploration_is_uniform(self):
        net = QNetwork(zero_init=True)
        net.biases[-1] = np.array([5.0, 0.0])  # greedy would always pick 0
        state = AgentState(0.5, 0.5, 0.5, 0.5)
        rng = np.random.default_rng(42)
        draws = [epsilon_greedy_action(net, state, 1.0, rng) for _ in range(10_000)]
        assert np.mean(draws) == pytest.approx(0.5, abs=0.02)

    def test_mixture_law(self):
        net = QNetwork(zero_init=True)
        net.biases[-1] = np.array([0.0, 1.0])  # greedy = QUERY
        state = AgentState(0.5, 0.5, 0.5, 0.5)
        rng = np.random.default_rng(7)
        eps = 0.4
        draws = [epsilon_greedy_action(net, state, eps, rng) for _ in range(20_000)]
        # P(QUERY) = (1 - eps) + eps / 2
        expected = (1 - eps) + eps / 2
        assert np.mean(draws) == pytest.approx(expected, abs=0.02)


class TestReplayMemory:
    def test_fifo_eviction(self):
        memory = ReplayMemory(capacity=10)
        rng = np.random.default_rng(0)
        items = [Transition(random_state(rng), 0, float(i), random_state(rng))
                 for i in range(13)]
        for t in items:
            memory.append(t)
        assert len(memory) == 10
        kept = memory.snapshot()
        # The first 3 inserted are exactly the evicted ones.
        assert [t.reward for t in kept] == [float(i) for i in range(3, 13)]

    def test_sampling_uniform_over_contents(self):
        memory = ReplayMemory(capacity=100)
        rng = np.random.default_rng(1)
        for i in range(50):
            memory.append(Transition(random_state(rng), 0, float(i), random_state(rng)))
        sample = memory.sample(1000, np.random.default_rng(2))
        rewards = [t.reward for t in sample]
        assert min(rewards) >= 0 and max(rewards) < 50


class TestTraining:
    def _fill(self, agent, rng, n, reward=1.0, terminal=True):
        for _ in range(n):
            s = random_state(rng)
            agent.observe(Transition(s, ACTION_QUERY, reward, s, terminal=terminal))

    def test_not_ready_during_warmup(self):
        agent = DqnAgent(AgentConfig(warmup_steps=100, seed=0))
        self._fill(agent, np.random.default_rng(0), 50)
        with pytest.raises(NotReadyError):
            agent.train_step()

    def test_gamma_zero_fixed_point(self):
        config = AgentConfig(gamma=0.0, warmup_steps=1, l1=0.0, l2=0.0,
                             learning_rate=5e-3, batch_size=8, seed=1)
        agent = DqnAgent(config)
        state = AgentState(0.3, 0.6, 0.8, 0.25)
        agent.observe(Transition(state, ACTION_QUERY, 1.7, state, terminal=False))
        for _ in range(3000):
            agent.train_step()
        assert agent.q_values(state)[ACTION_QUERY] == pytest.approx(1.7, abs=1e-3)

    def test_terminal_target_is_reward(self):
        config = AgentConfig(gamma=0.95, warmup_steps=1, l1=0.0, l2=0.0,
                             learning_rate=5e-3, batch_size=8, seed=2)
        agent = DqnAgent(config)
        state = AgentState(0.4, 0.4, 0.4, 0.4)
        agent.observe(Transition(state, ACTION_NO_QUERY, 0.9, state, terminal=True))
        for _ in range(3000):
            agent.train_step()
        assert agent.q_values(state)[ACTION_NO_QUERY] == pytest.approx(0.9, abs=1e-3)

    def test_loss_and_mae_reported(self):
        agent = DqnAgent(AgentConfig(warmup_steps=5, seed=3))
        self._fill(agent, np.random.default_rng(3), 10)
        loss, mae = agent.train_step()
        assert np.isfinite(loss) and np.isfinite(mae)
        assert loss >= 0 and mae >= 0


class TestOfflineTraining:
    def _states(self, n, seed=0):
        rng = np.random.default_rng(seed)
        return [random_state(rng) for _ in range(n)]

    def test_episode_arithmetic(self):
        config = AgentConfig(total_steps=1000, warmup_steps=50, seed=4)
        agent = DqnAgent(config)
        curve = train_offline(agent, self._states(100))
        assert len(curve) == 10

    def test_same_seed_identical_curve(self):
        states = self._states(60, seed=5)
        curve_a = train_offline(DqnAgent(AgentConfig(total_steps=600, seed=6)), states)
        curve_b = train_offline(DqnAgent(AgentConfig(total_steps=600, seed=6)), states)
        assert curve_a == curve_b

    def test_empty_sequence_rejected(self):
        with pytest.raises(ParameterError):
            train_offline(DqnAgent(AgentConfig(total_steps=10)), [])


class TestCheckpointResume:
    def test_resume_is_bit_exact(self):
        def fresh():
            agent = DqnAgent(AgentConfig(warmup_steps=20, batch_size=8, seed=9))
            rng = np.random.default_rng(9)
            for _ in range(60):
                s = AgentState(*rng.uniform(0, 1, 4))
                s2 = AgentState(*rng.uniform(0, 1, 4))
                agent.observe(Transition(s, int(rng.integers(0, 2)),
                                         float(rng.uniform(0, 3)), s2))
            return agent

        reference = fresh()
        for _ in range(50):
            reference.train_step()
        snapshot_meta = reference.metadata()
        snapshot_arrays = {k: v.copy() for k, v in reference.arrays().items()}
        for _ in range(40):
            reference.train_step()

        resumed = DqnAgent.restore(snapshot_meta, snapshot_arrays)
        for _ in range(40):
            resumed.train_step()

        for wa, wb in zip(reference.net.weights, resumed.net.weights):
            assert wa.tobytes() == wb.tobytes()
        for wa, wb in zip(reference.target_net.weights, resumed.target_net.weights):
            assert wa.tobytes() == wb.tobytes()


class TestAdam:
    def test_descends_a_quadratic(self):
        net = QNetwork(layer_sizes=(4, 2), l1=0.0, l2=0.0,
                       rng=np.random.default_rng(10))
        adam = Adam(lr=1e-2)
        X = np.random.default_rng(11).uniform(0, 1, size=(16, 4))
        actions = np.zeros(16, dtype=int)
        targets = np.full(16, 2.0)
        first = net.loss_and_grads(X, actions, targets)[0]
        for _ in range(2000):
            _, _, gw, gb = net.loss_and_grads(X, actions, targets)
            adam.step(net, gw, gb)
        last = net.loss_and_grads(X, actions, targets)[0]
        assert last < first * 0.01
