"""
Goal-conditioned actor-critic on top of the contrastive occupancy estimators.

Each iteration samples a hindsight-relabeled batch, takes one SGD step on the
goal-conditioned critic, one SGD step on the tabular actor logits against the
pre-update critic, and refreshes the EMA target tables.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from django.core.exceptions import ValidationError

from .estimators import (
    ContrastiveBatch,
    CriticMatrices,
    EstimatorConfig,
    _log_softmax,
    _softmax,
    critic_matrix,
    ema_update,
    init_representations,
    mc_infonce_loss_and_grad,
    sgd_step,
    td_infonce_loss_and_grad,
)
from .mdp import TabularPolicy, TransitionDataset, sample_rows

logger = logging.getLogger(__name__)

CRITICS = ('td_infonce', 'mc_infonce')


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(eq=False)
class GcBatch:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    goals: np.ndarray
    futures: np.ndarray
    policy_actions: np.ndarray | None = None
    next_actions: np.ndarray | None = None

    def __len__(self):
        return len(self.states)

    def as_contrastive(self, critic='td_infonce'):
        if critic == 'mc_infonce':
            # Monte Carlo counterpart: the hindsight goal is the positive future state
            return ContrastiveBatch(self.states, self.actions, futures=self.goals, goals=self.goals)
        return ContrastiveBatch(
            self.states,
            self.actions,
            futures=self.futures,
            next_states=self.next_states,
            next_actions=self.next_actions,
            goals=self.goals,
        )


@dataclass(eq=False)
class GcPolicyParams:
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        self.clean()

    def clean(self):
        if self.logits.ndim != 3:
            raise ValidationError('Policy logits must be indexed [s][g][a].')
        if not np.isfinite(self.logits).all():
            raise ValidationError('Policy logits must be finite.')

    @classmethod
    def zeros(cls, num_states, num_goals, num_actions):
        return cls(np.zeros((num_states, num_goals, num_actions)))

    def probs(self):
        return _softmax(self.logits)

    def as_policy(self):
        return TabularPolicy(self.probs(), name='actor')


@dataclass(frozen=True)
class GcrlConfig:
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    critic: str = 'td_infonce'
    actor_learning_rate: float = 0.5
    eval_interval: int = 1000
    eval_episodes: int = 10
    horizon: int | None = None
    eval_pairs: tuple = ()
    online: bool = False
    collect_interval: int = 100
    collect_episodes: int = 10
    episode_len: int = 100
    explore_eps: float = 0.2

    def __post_init__(self):
        if self.critic not in CRITICS:
            raise ValidationError(f'Unknown critic {self.critic!r}; expected one of {CRITICS}.')
        if self.actor_learning_rate <= 0:
            raise ValidationError('actor_learning_rate must be positive.')
        if self.eval_interval < 1:
            raise ValidationError('eval_interval must be at least 1.')
        if not 0.0 <= self.explore_eps <= 1.0:
            raise ValidationError('explore_eps must lie in [0, 1].')

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def horizon_for(self, mdp):
        if self.horizon is not None:
            return self.horizon
        if mdp.grid is not None:
            return 4 * (mdp.grid.width + mdp.grid.height)
        return 4 * mdp.num_states


@dataclass
class GoalReachingResult:
    success_rate: float
    per_pair: list
    paths: list


def sample_gc_batch(dataset, discount, size, seed, policy=None):
    """
    Hindsight batch: goals come from the same trajectory's future at a
    geometric offset, s_future from the dataset marginal.
    """
    if not dataset.has_episodes:
        raise ValidationError('Goal-conditioned batches need an episodic dataset.')
    rng = _as_rng(seed)
    index = rng.integers(len(dataset), size=size)
    states, next_states = dataset.states[index], dataset.next_states[index]
    goals = dataset.sample_future(rng, index, discount)
    futures = dataset.sample_marginal(rng, size)
    policy_actions = next_actions = None
    if policy is not None:
        probs = policy.probs()
        policy_actions = sample_rows(rng, probs[states, goals])
        next_actions = sample_rows(rng, probs[next_states, goals])
    return GcBatch(
        states=states,
        actions=dataset.actions[index],
        next_states=next_states,
        goals=goals,
        futures=futures,
        policy_actions=policy_actions,
        next_actions=next_actions,
    )


def gc_critic_loss_and_grad(reps, target_reps, batch, discount, config, critic='td_infonce'):
    contrastive = batch.as_contrastive(critic)
    if critic == 'mc_infonce':
        return mc_infonce_loss_and_grad(reps, contrastive, config)
    return td_infonce_loss_and_grad(reps, target_reps, contrastive, discount, config)


def gc_critic_step(reps, target_reps, batch, discount, config, critic='td_infonce'):
    loss, grads = gc_critic_loss_and_grad(reps, target_reps, batch, discount, config, critic)
    return loss, sgd_step(reps, grads, config.learning_rate)


def gc_actor_loss_and_grad(policy, reps, batch):
    """
    Exact expectation over actions of CE(F_goal, I_N):
        -1/N sum_i sum_a pi(a | s_i, g_i) log softmax_j <phi(s_i, a, g_i), psi(g_j)> |_{j=i}
    Returns (loss, gradient w.r.t. the policy logits).
    """
    N = len(batch)
    if N < 2:
        raise ValidationError('Actor batch needs N >= 2 rows.')
    scale = reps.critic_scale
    anchors = reps.phi[batch.states, :, batch.goals]
    psi_goals = reps.psi[batch.goals]
    F = scale * np.einsum('iad,jd->aij', anchors, psi_goals)
    diag = np.arange(N)
    log_likelihood = _log_softmax(F)[:, diag, diag].T
    pi = policy.probs()[batch.states, batch.goals]
    loss = -float((pi * log_likelihood).sum()) / N
    expected = (pi * log_likelihood).sum(axis=1, keepdims=True)
    grad = np.zeros_like(policy.logits)
    np.add.at(grad, (batch.states, batch.goals), -pi * (log_likelihood - expected) / N)
    return loss, grad


def goal_critic_matrices(reps, batch):
    """F_goal[i, j] = <phi(s_i, a_i, g_i), psi(g_j)> with a_i the policy-sampled action."""
    if batch.policy_actions is None:
        raise ValidationError('F_goal needs a batch sampled with a policy.')
    sampled = reps.phi[batch.states, batch.policy_actions, batch.goals]
    return CriticMatrices(F_goal=critic_matrix(sampled, reps.psi[batch.goals], reps.critic_scale))


def sampled_actor_loss(reps, batch):
    """CE(F_goal, I_N) at the policy-sampled actions; an unbiased estimate of the exact actor loss."""
    F_goal = goal_critic_matrices(reps, batch).F_goal
    return -float(np.trace(_log_softmax(F_goal))) / len(batch)


def gc_actor_step(policy, reps, batch, learning_rate):
    loss, grad = gc_actor_loss_and_grad(policy, reps, batch)
    updated = GcPolicyParams(policy.logits - learning_rate * grad)
    updated.as_policy()
    return loss, updated


def collect_episodes(mdp, policy, episodes, episode_len, explore_eps, rng):
    """Rollouts of an epsilon-greedy goal-conditioned policy toward uniformly drawn goals."""
    S, A = mdp.num_states, mdp.num_actions
    goals = rng.integers(S, size=episodes)
    states = np.empty((episodes, episode_len + 1), dtype=np.int64)
    actions = np.empty((episodes, episode_len), dtype=np.int64)
    states[:, 0] = sample_rows(rng, np.broadcast_to(mdp.initial_dist, (episodes, S)))
    probs = policy.probs()
    for t in range(episode_len):
        greedy = probs[states[:, t], goals].argmax(axis=1)
        explore = rng.random(episodes) < explore_eps
        actions[:, t] = np.where(explore, rng.integers(A, size=episodes), greedy)
        states[:, t + 1] = sample_rows(rng, mdp.transition[states[:, t], actions[:, t]])
    return TransitionDataset(
        states[:, :-1].reshape(-1),
        actions.reshape(-1),
        states[:, 1:].reshape(-1),
        S,
        episodes=np.repeat(np.arange(episodes), episode_len),
        policy_id='epsilon_greedy_actor',
    )


def default_eval_pairs(mdp, limit=32, seed=0):
    pairs = [(s, g) for s in range(mdp.num_states) for g in range(mdp.num_states)]
    if len(pairs) <= limit:
        return pairs
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(pairs), size=limit, replace=False))
    return [pairs[i] for i in chosen]


def greedy_path(mdp, policy, start, goal, horizon):
    """Argmax actions through the most likely successor; stops on reaching the goal."""
    path = [start]
    state = start
    for _ in range(horizon):
        if state == goal:
            break
        action = int(policy.action_probs(state, goal).argmax())
        state = int(mdp.transition[state, action].argmax())
        path.append(state)
    return path


def path_length(path, goal):
    """Steps taken to reach `goal`, or None if the path never reaches it."""
    if goal not in path:
        return None
    return path.index(goal)


def evaluate_goal_reaching(mdp, policy, pairs, horizon, episodes=10, seed=0, greedy=False):
    """Success = the agent occupies the goal cell at some step t <= horizon (t = 0 included)."""
    if horizon < 1:
        raise ValidationError('horizon must be at least 1.')
    for start, goal in pairs:
        if not (0 <= start < mdp.num_states and 0 <= goal < mdp.num_states):
            raise ValidationError(f'Pair ({start}, {goal}) lies outside the state space.')
    rng = np.random.default_rng(seed)
    per_pair, paths = [], []
    for start, goal in pairs:
        states = np.full(episodes, start, dtype=np.int64)
        reached = states == goal
        for _ in range(horizon):
            probs = policy.action_probs(states, goal)
            actions = probs.argmax(axis=1) if greedy else sample_rows(rng, probs)
            states = sample_rows(rng, mdp.transition[states, actions])
            reached |= states == goal
        per_pair.append(float(reached.mean()))
        paths.append(greedy_path(mdp, policy, start, goal, horizon))
    success = float(np.mean(per_pair)) if per_pair else 0.0
    return GoalReachingResult(success, per_pair, paths)


def greedy_policy_from_occupancy(occupancy):
    """One-hot pi(a | s, g) maximizing the occupancy of g itself."""
    probs = occupancy.probs
    if probs.ndim == 4:
        goals = np.arange(probs.shape[2])
        scores = probs[:, :, goals, goals].transpose(0, 2, 1)
    else:
        scores = probs.transpose(0, 2, 1)
    return TabularPolicy.greedy(scores, name='greedy_occupancy')


def train_gcrl(mdp, dataset, config, iterations, on_row=None):
    """
    Returns (reps, policy, metrics); one metrics row per `eval_interval`
    iterations with critic loss, actor loss and goal-reaching success.
    """
    est = config.estimator
    S, A, gamma = mdp.num_states, mdp.num_actions, mdp.discount
    rng = np.random.default_rng([est.seed, 2])
    reps, target = init_representations(est, S, A, num_goals=S)
    policy = GcPolicyParams.zeros(S, S, A)
    if config.online:
        seed_data = collect_episodes(mdp, policy, config.collect_episodes, config.episode_len, 1.0, rng)
        dataset = seed_data if dataset is None else TransitionDataset.concat([dataset, seed_data])
    if dataset is None:
        raise ValidationError('Offline training needs a dataset.')
    dataset.validate_against(mdp)

    pairs = list(config.eval_pairs) or default_eval_pairs(mdp, seed=est.seed)
    horizon = config.horizon_for(mdp)
    metrics, critic_losses, actor_losses, sampled_losses = [], [], [], []
    for it in range(1, iterations + 1):
        if config.online and it % config.collect_interval == 0:
            fresh = collect_episodes(
                mdp, policy, config.collect_episodes, config.episode_len, config.explore_eps, rng
            )
            dataset = TransitionDataset.concat([dataset, fresh])
        batch = sample_gc_batch(dataset, gamma, est.batch_size, rng, policy)
        actor_loss, next_policy = gc_actor_step(policy, reps, batch, config.actor_learning_rate)
        sampled_losses.append(sampled_actor_loss(reps, batch))
        critic_loss, reps = gc_critic_step(reps, target, batch, gamma, est, config.critic)
        policy = next_policy
        target = ema_update(target, reps, est.ema_tau)
        critic_losses.append(critic_loss)
        actor_losses.append(actor_loss)

        if it % config.eval_interval == 0:
            result = evaluate_goal_reaching(
                mdp, policy.as_policy(), pairs, horizon, config.eval_episodes, seed=est.seed
            )
            row = {
                'step': it,
                'critic_loss': float(np.mean(critic_losses)),
                'actor_loss': float(np.mean(actor_losses)),
                'actor_sampled_loss': float(np.mean(sampled_losses)),
                'success_rate': result.success_rate,
            }
            critic_losses, actor_losses, sampled_losses = [], [], []
            metrics.append(row)
            logger.info('gcrl step %d: critic %.4f actor %.4f success %.3f',
                        it, row['critic_loss'], row['actor_loss'], row['success_rate'])
            if on_row is not None:
                on_row(row)
    return reps, policy, metrics


def render_paths(mdp, start, goal, path):
    """Plain-text grid: walls '#', start 'X', goal '*', visited cells '.'."""
    grid = mdp.grid
    if grid is None:
        raise ValidationError('Path rendering needs a gridworld MDP.')
    canvas = [[' '] * grid.width for _ in range(grid.height)]
    for row, col in grid.walls:
        canvas[row][col] = '#'
    for state in path:
        row, col = grid.cell_of(state)
        canvas[row][col] = '.'
    for state, mark in ((start, 'X'), (goal, '*')):
        row, col = grid.cell_of(state)
        canvas[row][col] = mark
    return '\n'.join(''.join(line) for line in canvas)


def policy_to_csv(policy, path):
    table = policy.table if isinstance(policy, TabularPolicy) else policy.probs()
    if table.ndim != 3:
        raise ValidationError('Policy export expects a goal-conditioned policy pi[s][g][a].')
    s, g, a = np.indices(table.shape).reshape(3, -1)
    frame = pd.DataFrame({'s': s, 'g': g, 'a': a, 'prob': table.reshape(-1)})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return path
