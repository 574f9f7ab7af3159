import math
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from occlab.estimators import EstimatorConfig, RepresentationPair, init_representations
from occlab.gcrl import (
    GcBatch,
    GcPolicyParams,
    GcrlConfig,
    default_eval_pairs,
    evaluate_goal_reaching,
    gc_actor_loss_and_grad,
    gc_actor_step,
    gc_critic_loss_and_grad,
    goal_critic_matrices,
    greedy_path,
    greedy_policy_from_occupancy,
    path_length,
    policy_to_csv,
    render_paths,
    sample_gc_batch,
    sampled_actor_loss,
    train_gcrl,
)
from occlab.mdp import (
    GridworldSpec,
    TabularPolicy,
    TransitionDataset,
    build_gridworld,
    exact_occupancy,
    sample_transitions,
    shortest_path_lengths,
)

from .utils import assert_gradient_matches, numeric_gradient, open_grid, two_cycle

S, A, D, N = 4, 3, 3, 5


def random_gc_pair(seed):
    rng = np.random.default_rng(seed)
    return RepresentationPair(rng.normal(scale=0.5, size=(S, A, S, D)), rng.normal(scale=0.5, size=(S, D)))


def random_gc_batch(seed, size=N):
    rng = np.random.default_rng(seed)
    states, next_states, goals, futures = rng.integers(S, size=(4, size))
    actions, policy_actions, next_actions = rng.integers(A, size=(3, size))
    return GcBatch(states, actions, next_states, goals, futures, policy_actions, next_actions)


def bfs_policy(mdp):
    """One-hot pi(a | s, g) stepping to a successor one move closer to g."""
    S, A = mdp.num_states, mdp.num_actions
    successor = mdp.transition.argmax(axis=2)
    table = np.zeros((S, S, A))
    for goal in range(S):
        distance = shortest_path_lengths(mdp, goal)
        for state in range(S):
            table[state, goal, distance[successor[state]].argmin()] = 1.0
    return TabularPolicy(table, name='bfs')


class BatchTests(SimpleTestCase):
    def setUp(self):
        self.mdp = open_grid(3)
        policy = TabularPolicy.uniform(self.mdp.num_states, self.mdp.num_actions)
        self.dataset = sample_transitions(self.mdp, policy, 2000, episode_len=50, seed=1)

    def test_single_transition_episodes_relabel_goal_to_next_state(self):
        dataset = TransitionDataset([0, 1, 2, 3], [0, 1, 2, 3], [1, 2, 3, 0], 4, episodes=[0, 1, 2, 3])
        batch = sample_gc_batch(dataset, 0.9, 64, seed=0)
        assert_array_equal(batch.goals, batch.next_states)

    def test_same_seed_same_batch(self):
        a = sample_gc_batch(self.dataset, 0.9, 32, seed=4)
        b = sample_gc_batch(self.dataset, 0.9, 32, seed=4)
        for name in ('states', 'actions', 'next_states', 'goals', 'futures'):
            assert_array_equal(getattr(a, name), getattr(b, name))

    def test_futures_follow_the_dataset_marginal(self):
        batch = sample_gc_batch(self.dataset, 0.9, 100_000, seed=2)
        counts = np.bincount(batch.futures, minlength=self.mdp.num_states) / 100_000
        self.assertLessEqual(0.5 * np.abs(counts - self.dataset.empirical_marginal).sum(), 0.02)

    def test_policy_actions_are_drawn_when_a_policy_is_given(self):
        policy = GcPolicyParams.zeros(self.mdp.num_states, self.mdp.num_states, self.mdp.num_actions)
        batch = sample_gc_batch(self.dataset, 0.9, 16, seed=0, policy=policy)
        self.assertEqual(batch.policy_actions.shape, (16,))
        self.assertEqual(batch.next_actions.shape, (16,))

    def test_dataset_without_episodes_is_rejected(self):
        dataset = TransitionDataset([0, 1], [0, 0], [1, 0], 2)
        with self.assertRaises(ValidationError):
            sample_gc_batch(dataset, 0.9, 4, seed=0)


class CriticTests(SimpleTestCase):
    def test_zero_tables_give_log_batch_size(self):
        reps = RepresentationPair.zeros(S, A, D, num_goals=S)
        for critic in ('td_infonce', 'mc_infonce'):
            with self.subTest(critic=critic):
                loss, _ = gc_critic_loss_and_grad(reps, reps, random_gc_batch(0), 0.9, EstimatorConfig(), critic)
                self.assertAlmostEqual(loss, math.log(N), places=12)

    def test_zero_discount_is_next_state_cross_entropy(self):
        reps, target = random_gc_pair(1), random_gc_pair(2)
        batch = random_gc_batch(3)
        loss, _ = gc_critic_loss_and_grad(reps, target, batch, 0.0, EstimatorConfig())
        logits = reps.phi[batch.states, batch.actions, batch.goals] @ reps.psi[batch.next_states].T
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        self.assertAlmostEqual(loss, -np.trace(log_probs) / N, places=12)

    def test_critic_gradients(self):
        target = random_gc_pair(4)
        batch = random_gc_batch(5)
        for critic in ('td_infonce', 'mc_infonce'):
            with self.subTest(critic=critic):
                reps = random_gc_pair(6)
                config = EstimatorConfig()

                def loss_fn():
                    return gc_critic_loss_and_grad(reps, target, batch, 0.8, config, critic)[0]

                _, grads = gc_critic_loss_and_grad(reps, target, batch, 0.8, config, critic)
                assert_gradient_matches(grads.phi, numeric_gradient(loss_fn, reps.phi))
                assert_gradient_matches(grads.psi, numeric_gradient(loss_fn, reps.psi))


class ActorTests(SimpleTestCase):
    def test_actor_gradient_matches_finite_differences(self):
        reps = random_gc_pair(7)
        batch = random_gc_batch(8)
        policy = GcPolicyParams(np.random.default_rng(9).normal(size=(S, S, A)))

        def loss_fn():
            return gc_actor_loss_and_grad(policy, reps, batch)[0]

        _, grad = gc_actor_loss_and_grad(policy, reps, batch)
        assert_gradient_matches(grad, numeric_gradient(loss_fn, policy.logits))

    def test_actor_gradient_over_many_batches(self):
        for size in (2, 8, 32):
            for seed in range(20):
                with self.subTest(size=size, seed=seed):
                    reps = random_gc_pair(100 + seed)
                    batch = random_gc_batch(200 + seed, size)
                    policy = GcPolicyParams(np.random.default_rng(300 + seed).normal(size=(S, S, A)))

                    def loss_fn():
                        return gc_actor_loss_and_grad(policy, reps, batch)[0]

                    _, grad = gc_actor_loss_and_grad(policy, reps, batch)
                    assert_gradient_matches(grad, numeric_gradient(loss_fn, policy.logits))

    def test_single_action_has_no_gradient(self):
        rng = np.random.default_rng(0)
        reps = RepresentationPair(rng.normal(size=(S, 1, S, D)), rng.normal(size=(S, D)))
        policy = GcPolicyParams.zeros(S, S, 1)
        _, grad = gc_actor_loss_and_grad(policy, reps, random_gc_batch(1))
        assert_allclose(grad, 0.0)

    def test_step_favours_the_action_the_critic_prefers(self):
        phi = np.zeros((3, 2, 3, 3))
        for goal in range(3):
            phi[:, 0, goal, goal] = 10.0
            phi[:, 1, goal, goal] = -10.0
        reps = RepresentationPair(phi, np.eye(3))
        batch = GcBatch(
            states=np.array([0, 1, 2]),
            actions=np.array([1, 1, 1]),
            next_states=np.array([1, 2, 0]),
            goals=np.array([1, 2, 0]),
            futures=np.array([0, 1, 2]),
        )
        policy = GcPolicyParams.zeros(3, 3, 2)
        loss, updated = gc_actor_step(policy, reps, batch, learning_rate=1e-3)
        for state, goal in zip(batch.states, batch.goals):
            self.assertGreater(updated.logits[state, goal, 0], policy.logits[state, goal, 0])
            self.assertLess(updated.logits[state, goal, 1], policy.logits[state, goal, 1])
        new_loss, _ = gc_actor_loss_and_grad(updated, reps, batch)
        self.assertLess(new_loss, loss)
        assert_allclose(updated.probs().sum(axis=-1), 1.0)

    def test_goal_matrix_uses_the_policy_sampled_actions(self):
        reps = random_gc_pair(3)
        batch = random_gc_batch(4)
        F_goal = goal_critic_matrices(reps, batch).F_goal
        self.assertEqual(F_goal.shape, (N, N))
        for i in range(N):
            for j in range(N):
                expected = reps.phi[batch.states[i], batch.policy_actions[i], batch.goals[i]] @ reps.psi[batch.goals[j]]
                self.assertAlmostEqual(F_goal[i, j], expected)

    def test_goal_matrix_needs_policy_actions(self):
        batch = random_gc_batch(4)
        batch.policy_actions = None
        with self.assertRaises(ValidationError):
            goal_critic_matrices(random_gc_pair(3), batch)

    def test_sampled_loss_equals_exact_loss_for_a_deterministic_policy(self):
        reps = random_gc_pair(5)
        batch = random_gc_batch(6)
        batch.policy_actions = np.ones(N, dtype=np.int64)
        logits = np.zeros((S, S, A))
        logits[..., 1] = 60.0
        exact, _ = gc_actor_loss_and_grad(GcPolicyParams(logits), reps, batch)
        self.assertAlmostEqual(sampled_actor_loss(reps, batch), exact, places=12)

    def test_batch_of_one_is_rejected(self):
        policy = GcPolicyParams.zeros(S, S, A)
        with self.assertRaises(ValidationError):
            gc_actor_loss_and_grad(policy, random_gc_pair(0), random_gc_batch(0, size=1))

    def test_non_finite_logits_are_rejected(self):
        with self.assertRaises(ValidationError):
            GcPolicyParams(np.full((2, 2, 2), np.nan))


class TrainingTests(SimpleTestCase):
    def test_zero_iterations_returns_initial_parameters(self):
        mdp = two_cycle()
        dataset = sample_transitions(mdp, TabularPolicy.uniform(2, 1), 100)
        config = GcrlConfig(estimator=EstimatorConfig(batch_size=8, seed=3))
        reps, policy, metrics = train_gcrl(mdp, dataset, config, iterations=0)
        initial, _ = init_representations(config.estimator, 2, 1, num_goals=2)
        assert_allclose(reps.phi, initial.phi)
        assert_allclose(policy.logits, 0.0)
        self.assertEqual(metrics, [])

    def test_two_cycle_goals_are_always_reached(self):
        mdp = two_cycle()
        dataset = sample_transitions(mdp, TabularPolicy.uniform(2, 1), 500)
        config = GcrlConfig(
            estimator=EstimatorConfig(batch_size=16),
            eval_interval=50,
            eval_pairs=((0, 1), (1, 0)),
            horizon=4,
        )
        seen = []
        _, _, metrics = train_gcrl(mdp, dataset, config, iterations=200, on_row=seen.append)
        self.assertEqual(len(metrics), 4)
        self.assertEqual(seen, metrics)
        self.assertEqual(metrics[-1]['success_rate'], 1.0)
        self.assertTrue(all(np.isfinite(row['critic_loss']) for row in metrics))
        self.assertTrue(all(np.isfinite(row['actor_sampled_loss']) for row in metrics))

    def test_online_collection_from_scratch(self):
        mdp = open_grid(3)
        config = GcrlConfig(
            estimator=EstimatorConfig(batch_size=8),
            critic='mc_infonce',
            online=True,
            collect_interval=5,
            collect_episodes=2,
            episode_len=10,
            eval_interval=5,
            eval_episodes=2,
            horizon=12,
        )
        reps, policy, metrics = train_gcrl(mdp, None, config, iterations=10)
        self.assertEqual(len(metrics), 2)
        assert_allclose(policy.probs().sum(axis=-1), 1.0)
        self.assertEqual(reps.phi.shape[:3], (9, 5, 9))

    def test_offline_training_needs_data(self):
        with self.assertRaises(ValidationError):
            train_gcrl(open_grid(3), None, GcrlConfig(), iterations=1)

    def test_unknown_critic(self):
        with self.assertRaises(ValidationError):
            GcrlConfig(critic='c_learning')

    def test_default_horizon_scales_with_the_grid(self):
        self.assertEqual(GcrlConfig().horizon_for(open_grid(5)), 40)
        self.assertEqual(GcrlConfig().horizon_for(two_cycle()), 8)


class EvaluationTests(SimpleTestCase):
    def test_start_equal_to_goal_counts_as_success(self):
        mdp = open_grid(3)
        policy = TabularPolicy.uniform(9, 5, num_goals=9)
        result = evaluate_goal_reaching(mdp, policy, [(4, 4)], horizon=1, episodes=3)
        self.assertEqual(result.success_rate, 1.0)

    def test_enclosed_goal_is_never_reached(self):
        mdp = build_gridworld(GridworldSpec(3, 3, walls={(0, 1), (1, 0)}))
        S = mdp.num_states
        goal = mdp.grid.state_of((0, 0))
        start = mdp.grid.state_of((2, 2))
        result = evaluate_goal_reaching(mdp, TabularPolicy.uniform(S, 5, num_goals=S), [(start, goal)], 30)
        self.assertEqual(result.success_rate, 0.0)
        self.assertIsNone(path_length(result.paths[0], goal))

    def test_shortest_path_policy_always_succeeds(self):
        mdp = open_grid(5)
        pairs = default_eval_pairs(mdp, limit=32, seed=0)
        self.assertEqual(len(pairs), 32)
        result = evaluate_goal_reaching(mdp, bfs_policy(mdp), pairs, horizon=20, episodes=4)
        self.assertEqual(result.success_rate, 1.0)
        self.assertEqual(path_length(greedy_path(mdp, bfs_policy(mdp), 0, 24, 20), 24), 8)

    def test_greedy_evaluation_follows_the_argmax_action(self):
        mdp = open_grid(3)
        uniform = TabularPolicy.uniform(9, 5, num_goals=9)
        pairs = [(8, 0)]
        wandering = evaluate_goal_reaching(mdp, uniform, pairs, horizon=30, episodes=10, seed=0)
        greedy = evaluate_goal_reaching(mdp, uniform, pairs, horizon=30, episodes=10, seed=0, greedy=True)
        self.assertGreater(wandering.success_rate, 0.0)
        # ties resolve to one fixed action, which cannot leave the start's row and column both
        self.assertEqual(greedy.success_rate, 0.0)

    def test_greedy_evaluation_of_the_shortest_path_policy(self):
        mdp = open_grid(5)
        result = evaluate_goal_reaching(mdp, bfs_policy(mdp), [(0, 24), (20, 4)], horizon=8, greedy=True)
        self.assertEqual(result.per_pair, [1.0, 1.0])

    def test_zero_horizon_is_rejected(self):
        mdp = open_grid(3)
        with self.assertRaises(ValidationError):
            evaluate_goal_reaching(mdp, TabularPolicy.uniform(9, 5, num_goals=9), [(0, 8)], horizon=0)

    def test_pair_outside_state_space_is_rejected(self):
        mdp = open_grid(3)
        with self.assertRaises(ValidationError):
            evaluate_goal_reaching(mdp, TabularPolicy.uniform(9, 5, num_goals=9), [(0, 9)], horizon=3)

    def test_greedy_occupancy_policy_beats_random_walk(self):
        mdp = open_grid(3, 0.9)
        S = mdp.num_states
        occupancy = exact_occupancy(mdp, TabularPolicy.uniform(S, mdp.num_actions))
        greedy = greedy_policy_from_occupancy(occupancy)
        pairs = default_eval_pairs(mdp)
        improved = evaluate_goal_reaching(mdp, greedy, pairs, horizon=S - 1, episodes=5)
        baseline = evaluate_goal_reaching(mdp, TabularPolicy.uniform(S, 5, num_goals=S), pairs, S - 1, 5)
        self.assertEqual(improved.success_rate, 1.0)
        self.assertGreaterEqual(improved.success_rate, baseline.success_rate)


class ExportTests(SimpleTestCase):
    def test_render_paths_marks_start_goal_and_walls(self):
        mdp = build_gridworld(GridworldSpec(3, 3, walls={(1, 1)}))
        grid = mdp.grid
        path = [grid.state_of(cell) for cell in [(0, 0), (0, 1), (0, 2), (1, 2), (2, 2)]]
        text = render_paths(mdp, path[0], path[-1], path)
        self.assertEqual(text.splitlines(), ['X..', ' #.', '  *'])

    def test_render_paths_needs_a_grid(self):
        with self.assertRaises(ValidationError):
            render_paths(two_cycle(), 0, 1, [0, 1])

    def test_policy_csv(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = policy_to_csv(GcPolicyParams.zeros(2, 2, 2), Path(tmp) / 'policy.csv')
            frame = pd.read_csv(path)
        self.assertEqual(list(frame.columns), ['s', 'g', 'a', 'prob'])
        self.assertEqual(len(frame), 8)
        assert_allclose(frame['prob'], 0.5)
