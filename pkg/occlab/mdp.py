"""
Finite MDPs, gridworld construction, transition sampling and the exact
(known-model) solvers for the discounted state occupancy measure.

Tensor layout used throughout the app:
    transition      P[s, a, s']
    plain policy    pi[s, a]
    goal policy     pi[s, g, a]
    occupancy       O[s, a, s_future]   or   O[s, a, g, s_future]
"""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd
from django.core.exceptions import ValidationError

from .exceptions import NumericalError

logger = logging.getLogger(__name__)

PROB_TOL = 1e-12
OCCUPANCY_TOL = 1e-9
RESIDUAL_TOL = 1e-8

ACTIONS = ('up', 'down', 'left', 'right', 'noop')
MOVES = {
    'up': (-1, 0),
    'down': (1, 0),
    'left': (0, -1),
    'right': (0, 1),
    'noop': (0, 0),
}
NOOP = ACTIONS.index('noop')


def sample_rows(rng, probs):
    """Draw one index per row of a (n, k) matrix of probabilities."""
    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    u = rng.random(probs.shape[0])
    return (cdf <= u[:, None]).sum(axis=1)


@dataclass(frozen=True)
class GridworldSpec:
    width: int
    height: int
    walls: frozenset = frozenset()
    slip_prob: float = 0.0
    start: tuple | None = None
    goal: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, 'walls', frozenset(tuple(cell) for cell in self.walls))
        for name in ('start', 'goal'):
            cell = getattr(self, name)
            if cell is not None:
                object.__setattr__(self, name, tuple(cell))
        self.clean()

    def clean(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError('Grid width and height must be positive.')
        if not 0.0 <= self.slip_prob < 1.0:
            raise ValidationError(f'slip_prob must lie in [0, 1), got {self.slip_prob}.')
        for cell in self.walls:
            if not self.in_bounds(cell):
                raise ValidationError(f'Wall {cell} lies outside the {self.height}x{self.width} grid.')
        if not self.cells:
            raise ValidationError('Every cell of the grid is a wall.')
        for name in ('start', 'goal'):
            cell = getattr(self, name)
            if cell is not None and (not self.in_bounds(cell) or cell in self.walls):
                raise ValidationError(f'{name.title()} cell {cell} must be a free cell.')

    @classmethod
    def from_dict(cls, data):
        return cls(
            width=int(data['width']),
            height=int(data['height']),
            walls=frozenset(tuple(cell) for cell in data.get('walls') or ()),
            slip_prob=float(data.get('slip_prob', 0.0)),
            start=data.get('start'),
            goal=data.get('goal'),
        )

    def to_dict(self):
        return {
            'width': self.width,
            'height': self.height,
            'walls': sorted(list(cell) for cell in self.walls),
            'slip_prob': self.slip_prob,
            'start': list(self.start) if self.start else None,
            'goal': list(self.goal) if self.goal else None,
        }

    def in_bounds(self, cell):
        row, col = cell
        return 0 <= row < self.height and 0 <= col < self.width

    @cached_property
    def cells(self):
        # Row-major order over free cells; a cell's position is its state index
        return [
            (row, col)
            for row in range(self.height)
            for col in range(self.width)
            if (row, col) not in self.walls
        ]

    @cached_property
    def index(self):
        return {cell: state for state, cell in enumerate(self.cells)}

    def state_of(self, cell):
        try:
            return self.index[tuple(cell)]
        except KeyError:
            raise ValidationError(f'Cell {cell} is not a free cell of the grid.')

    def cell_of(self, state):
        return self.cells[state]

    def move(self, cell, action):
        """Resolve a deterministic move; blocked moves stay in place."""
        d_row, d_col = MOVES[action]
        target = (cell[0] + d_row, cell[1] + d_col)
        if not self.in_bounds(target) or target in self.walls:
            return cell
        return target


@dataclass(eq=False)
class TabularMdp:
    transition: np.ndarray
    initial_dist: np.ndarray
    discount: float
    action_names: tuple = ()
    grid: GridworldSpec | None = None

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)
        if not self.action_names:
            self.action_names = tuple(f'a{a}' for a in range(self.transition.shape[1]))
        self.clean()

    def clean(self):
        P = self.transition
        if P.ndim != 3 or P.shape[0] != P.shape[2] or 0 in P.shape:
            raise ValidationError(f'Transition tensor must have shape (S, A, S), got {P.shape}.')
        if (P < 0).any():
            raise ValidationError('Transition probabilities must be non-negative.')
        if np.abs(P.sum(axis=2) - 1.0).max() > PROB_TOL:
            raise ValidationError('Every transition row P[s][a] must sum to 1.')
        if self.initial_dist.shape != (P.shape[0],):
            raise ValidationError('Initial distribution must have one entry per state.')
        if (self.initial_dist < 0).any() or abs(self.initial_dist.sum() - 1.0) > PROB_TOL:
            raise ValidationError('Initial distribution must be a probability vector.')
        if not 0.0 < self.discount < 1.0:
            raise ValidationError(f'Discount must lie strictly inside (0, 1), got {self.discount}.')
        if len(self.action_names) != P.shape[1]:
            raise ValidationError('One action name is required per action.')

    @property
    def num_states(self):
        return self.transition.shape[0]

    @property
    def num_actions(self):
        return self.transition.shape[1]


@dataclass(eq=False)
class TabularPolicy:
    table: np.ndarray
    name: str = 'policy'

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=float)
        self.clean()

    def clean(self):
        if self.table.ndim not in (2, 3):
            raise ValidationError('Policy table must be pi[s][a] or pi[s][g][a].')
        if (self.table < 0).any():
            raise ValidationError('Policy probabilities must be non-negative.')
        if np.abs(self.table.sum(axis=-1) - 1.0).max() > PROB_TOL:
            raise ValidationError('Every policy action row must sum to 1.')

    @classmethod
    def uniform(cls, num_states, num_actions, num_goals=None):
        shape = (num_states, num_actions) if num_goals is None else (num_states, num_goals, num_actions)
        return cls(np.full(shape, 1.0 / num_actions), name='uniform')

    @classmethod
    def greedy(cls, scores, name='greedy'):
        """One-hot policy on the argmax of the last axis of `scores`."""
        scores = np.asarray(scores)
        table = np.zeros_like(scores, dtype=float)
        np.put_along_axis(table, scores.argmax(axis=-1)[..., None], 1.0, axis=-1)
        return cls(table, name=name)

    @property
    def goal_conditioned(self):
        return self.table.ndim == 3

    @property
    def num_actions(self):
        return self.table.shape[-1]

    def for_goal(self, goal):
        if not self.goal_conditioned:
            return self
        return TabularPolicy(self.table[:, goal, :], name=f'{self.name}[g={goal}]')

    def action_probs(self, states, goals=None):
        if self.goal_conditioned:
            return self.table[states, goals]
        return self.table[states]

    def sample(self, rng, states, goals=None):
        return sample_rows(rng, self.action_probs(np.asarray(states), goals))


@dataclass(eq=False)
class OccupancyTable:
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        self.clean()

    def clean(self):
        if self.probs.ndim not in (3, 4):
            raise ValidationError('Occupancy table must be O[s][a][s+] or O[s][a][g][s+].')
        if (self.probs < -OCCUPANCY_TOL).any():
            raise ValidationError('Occupancy probabilities must be non-negative.')
        if np.abs(self.probs.sum(axis=-1) - 1.0).max() > OCCUPANCY_TOL:
            raise ValidationError('Every occupancy row must sum to 1.')

    @property
    def goal_conditioned(self):
        return self.probs.ndim == 4

    def for_goal(self, goal):
        if not self.goal_conditioned:
            return self
        return OccupancyTable(self.probs[:, :, goal, :])

    def to_frame(self):
        index = np.indices(self.probs.shape).reshape(self.probs.ndim, -1)
        columns = ['s', 'a', 'g', 's_future'] if self.goal_conditioned else ['s', 'a', 's_future']
        frame = pd.DataFrame(dict(zip(columns, index)))
        frame['p'] = self.probs.reshape(-1)
        return frame

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)


@dataclass(eq=False)
class TransitionDataset:
    """
    Sampled (s, a, s') records. When `episodes` is given, records sharing an
    episode id are contiguous and in time order, which is what Monte Carlo
    future sampling and hindsight relabeling rely on.
    """
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    num_states: int
    episodes: np.ndarray | None = None
    policy_id: str = 'uniform'
    seed: int | None = None
    empirical_marginal: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.next_states = np.asarray(self.next_states, dtype=np.int64)
        if self.episodes is not None:
            self.episodes = np.asarray(self.episodes, dtype=np.int64)
        self.clean()
        ends = self.episode_ends
        stored = np.concatenate([self.states, self.next_states[ends]])
        counts = np.bincount(stored, minlength=self.num_states).astype(float)
        self.empirical_marginal = counts / counts.sum()

    def clean(self):
        if len(self.states) == 0:
            raise ValidationError('Dataset is empty; its state marginal is undefined.')
        if not len(self.states) == len(self.actions) == len(self.next_states):
            raise ValidationError('States, actions and next states must have equal length.')
        if self.episodes is not None and len(self.episodes) != len(self.states):
            raise ValidationError('Episode ids must be given for every record.')
        for name in ('states', 'next_states'):
            values = getattr(self, name)
            if values.min() < 0 or values.max() >= self.num_states:
                raise ValidationError(f'{name} contains indices outside [0, {self.num_states}).')

    def __len__(self):
        return len(self.states)

    @classmethod
    def from_records(cls, records, num_states, **kwargs):
        records = np.asarray(records, dtype=np.int64).reshape(-1, 3)
        return cls(records[:, 0], records[:, 1], records[:, 2], num_states, **kwargs)

    @classmethod
    def concat(cls, datasets, policy_id=None):
        episodes, offset = [], 0
        for dataset in datasets:
            ids = dataset.episode_ids
            episodes.append(ids + offset)
            offset += ids.max() + 1
        first = datasets[0]
        return cls(
            np.concatenate([d.states for d in datasets]),
            np.concatenate([d.actions for d in datasets]),
            np.concatenate([d.next_states for d in datasets]),
            first.num_states,
            episodes=np.concatenate(episodes),
            policy_id=policy_id or first.policy_id,
            seed=first.seed,
        )

    @property
    def has_episodes(self):
        return self.episodes is not None

    @property
    def episode_ids(self):
        if self.episodes is None:
            return np.arange(len(self))
        return self.episodes

    @cached_property
    def episode_ends(self):
        ids = self.episode_ids
        return np.flatnonzero(np.r_[ids[1:] != ids[:-1], True])

    @cached_property
    def last_index(self):
        """Index of the final record of each record's episode."""
        ends = self.episode_ends
        position = np.r_[0, np.cumsum(np.r_[self.episode_ids[1:] != self.episode_ids[:-1]])]
        return ends[position]

    def episode_slices(self):
        starts = np.r_[0, self.episode_ends[:-1] + 1]
        return [slice(start, end + 1) for start, end in zip(starts, self.episode_ends)]

    def validate_against(self, mdp):
        if mdp.num_states != self.num_states:
            raise ValidationError('Dataset and MDP disagree on the number of states.')
        if self.actions.min() < 0 or self.actions.max() >= mdp.num_actions:
            raise ValidationError('Dataset contains actions the MDP does not define.')
        support = mdp.transition[self.states, self.actions, self.next_states]
        if (support <= 0).any():
            bad = int(np.flatnonzero(support <= 0)[0])
            raise ValidationError(
                f'Record {bad} ({self.states[bad]}, {self.actions[bad]}, {self.next_states[bad]}) '
                'is impossible under the MDP dynamics.'
            )

    def sample_marginal(self, rng, size):
        return rng.choice(self.num_states, size=size, p=self.empirical_marginal)

    def sample_future(self, rng, indices, discount):
        """
        Future states at a Geometric(1 - discount) offset inside each record's
        episode; offsets running past the episode end are redrawn.
        """
        if not self.has_episodes:
            raise ValidationError('Dataset has no trajectory structure for future-state sampling.')
        indices = np.asarray(indices)
        targets = np.empty_like(indices)
        pending = np.arange(len(indices))
        while len(pending):
            offsets = rng.geometric(1.0 - discount, size=len(pending))
            candidate = indices[pending] + offsets - 1
            valid = candidate <= self.last_index[indices[pending]]
            targets[pending[valid]] = candidate[valid]
            pending = pending[~valid]
        return self.next_states[targets]


def build_gridworld(spec, discount=0.9):
    """
    Gridworld with actions up/down/left/right/no-op. With probability
    `slip_prob` the chosen action is replaced by a uniformly random one.
    """
    cells = spec.cells
    num_states, num_actions = len(cells), len(ACTIONS)
    successor = np.array([
        [spec.index[spec.move(cell, action)] for action in ACTIONS]
        for cell in cells
    ])
    rows = np.arange(num_states)
    transition = np.zeros((num_states, num_actions, num_states))
    eps = spec.slip_prob
    for a in range(num_actions):
        transition[rows, a, successor[:, a]] += 1.0 - eps
    for b in range(num_actions):
        transition[rows, :, successor[:, b]] += eps / num_actions
    initial = np.full(num_states, 1.0 / num_states)
    return TabularMdp(transition, initial, discount, action_names=ACTIONS, grid=spec)


def build_cycle(num_states, discount, start=0):
    """Deterministic ring with a single `move` action: s -> s + 1 (mod n)."""
    transition = np.zeros((num_states, 1, num_states))
    transition[np.arange(num_states), 0, (np.arange(num_states) + 1) % num_states] = 1.0
    initial = np.zeros(num_states)
    initial[start] = 1.0
    return TabularMdp(transition, initial, discount, action_names=('move',))


def random_mdp(num_states, num_actions, discount, seed=0, concentration=1.0):
    rng = np.random.default_rng(seed)
    alpha = np.full(num_states, concentration)
    transition = rng.dirichlet(alpha, size=(num_states, num_actions))
    return TabularMdp(transition, rng.dirichlet(alpha), discount)


def load_gridworld_spec(path):
    with open(path) as handle:
        return GridworldSpec.from_dict(json.load(handle))


def _check_policy(mdp, policy):
    if policy.table.shape[0] != mdp.num_states or policy.num_actions != mdp.num_actions:
        raise ValidationError(
            f'Policy shape {policy.table.shape} does not match MDP with '
            f'{mdp.num_states} states and {mdp.num_actions} actions.'
        )


def _state_kernel(mdp, pi):
    # Pi P : state-to-state transition under the policy
    return np.einsum('sa,sap->sp', pi, mdp.transition)


def _solve_occupancy(mdp, pi):
    S, A, gamma = mdp.num_states, mdp.num_actions, mdp.discount
    next_state = mdp.transition.reshape(S * A, S)
    system = np.eye(S) - gamma * _state_kernel(mdp, pi)
    # O (I - gamma Pi P) = (1 - gamma) P
    occupancy = np.linalg.solve(system.T, (1.0 - gamma) * next_state.T).T
    residual = np.abs(occupancy @ system - (1.0 - gamma) * next_state).max()
    if residual > RESIDUAL_TOL:
        raise NumericalError(f'Occupancy solve residual {residual:.3e} exceeds {RESIDUAL_TOL:.0e}.')
    logger.debug('Occupancy solve residual %.3e', residual)
    return np.clip(occupancy, 0.0, None).reshape(S, A, S)


def exact_occupancy(mdp, policy):
    """O = (1 - gamma) P (I - gamma Pi P)^-1, one solve per goal for goal-conditioned policies."""
    _check_policy(mdp, policy)
    if policy.goal_conditioned:
        tables = [_solve_occupancy(mdp, policy.table[:, g, :]) for g in range(policy.table.shape[1])]
        return OccupancyTable(np.stack(tables, axis=2))
    return OccupancyTable(_solve_occupancy(mdp, policy.table))


def truncated_occupancy(mdp, policy, horizon):
    """Power series sum_{t=1..T} (1 - gamma) gamma^(t-1) p_t for a plain policy."""
    _check_policy(mdp, policy)
    S, A, gamma = mdp.num_states, mdp.num_actions, mdp.discount
    kernel = _state_kernel(mdp, policy.table)
    step = mdp.transition.reshape(S * A, S)
    total = np.zeros_like(step)
    for t in range(horizon):
        total += (1.0 - gamma) * gamma ** t * step
        step = step @ kernel
    return total.reshape(S, A, S)


def apply_infonce_bellman(mdp, policy, classifier):
    """
    One application of the InfoNCE Bellman operator:
        (T C)(s, a, .) = (1 - gamma) P(. | s, a) + gamma E_{s', a'}[C(s', a', .)]
    """
    _check_policy(mdp, policy)
    classifier.clean()
    P, gamma = mdp.transition, mdp.discount
    if policy.goal_conditioned:
        if not classifier.goal_conditioned:
            raise ValidationError('A goal-conditioned policy needs a goal-conditioned classifier.')
        value = np.einsum('pga,pagk->pgk', policy.table, classifier.probs)
        backup = np.einsum('sap,pgk->sagk', P, value)
        return OccupancyTable((1.0 - gamma) * P[:, :, None, :] + gamma * backup)
    if classifier.probs.shape != P.shape:
        raise ValidationError(f'Classifier shape {classifier.probs.shape} does not match {P.shape}.')
    value = np.einsum('pa,pak->pk', policy.table, classifier.probs)
    return OccupancyTable((1.0 - gamma) * P + gamma * (P @ value))


def uniform_classifier(mdp, num_goals=None):
    shape = (mdp.num_states, mdp.num_actions, mdp.num_states)
    if num_goals is not None:
        shape = (mdp.num_states, mdp.num_actions, num_goals, mdp.num_states)
    return OccupancyTable(np.full(shape, 1.0 / mdp.num_states))


def sample_transitions(mdp, policy, count, episode_len=100, seed=0):
    """
    Episodic rollouts restarted from p0 every `episode_len` steps, truncated
    to exactly `count` transitions.
    """
    _check_policy(mdp, policy)
    if count < 1:
        raise ValidationError('count must be at least 1; an empty dataset has no marginal.')
    if episode_len < 1:
        raise ValidationError('episode_len must be at least 1.')
    if policy.goal_conditioned:
        raise ValidationError('sample_transitions needs a plain policy pi[s][a].')
    rng = np.random.default_rng(seed)
    num_episodes = -(-count // episode_len)
    S = mdp.num_states
    states = np.empty((num_episodes, episode_len + 1), dtype=np.int64)
    actions = np.empty((num_episodes, episode_len), dtype=np.int64)
    states[:, 0] = sample_rows(rng, np.broadcast_to(mdp.initial_dist, (num_episodes, S)))
    for t in range(episode_len):
        actions[:, t] = sample_rows(rng, policy.table[states[:, t]])
        states[:, t + 1] = sample_rows(rng, mdp.transition[states[:, t], actions[:, t]])

    episodes = np.repeat(np.arange(num_episodes), episode_len)[:count]
    steps = np.tile(np.arange(episode_len), num_episodes)[:count]
    dataset = TransitionDataset(
        states[episodes, steps],
        actions[episodes, steps],
        states[episodes, steps + 1],
        S,
        episodes=episodes,
        policy_id=policy.name,
        seed=seed,
    )
    logger.debug('Sampled %d transitions in %d episodes (seed=%s)', count, num_episodes, seed)
    return dataset


def occupancy_error(estimate, truth):
    """Mean absolute error over every (s, a[, g], s_future) entry."""
    est = estimate.probs if isinstance(estimate, OccupancyTable) else np.asarray(estimate)
    ref = truth.probs if isinstance(truth, OccupancyTable) else np.asarray(truth)
    if est.shape != ref.shape:
        raise ValidationError(f'Shape mismatch: estimate {est.shape} vs truth {ref.shape}.')
    return float(np.abs(est - ref).mean())


def exact_q(mdp, policy, reward):
    reward = np.asarray(reward, dtype=float)
    if reward.shape != (mdp.num_states,):
        raise ValidationError('Reward must have one entry per future state.')
    return exact_occupancy(mdp, policy).probs @ reward


def shortest_path_lengths(mdp, source):
    """Breadth-first distances over the support of P; -1 marks unreachable states."""
    adjacency = (mdp.transition > 0).any(axis=1)
    distance = np.full(mdp.num_states, -1, dtype=np.int64)
    distance[source] = 0
    queue = deque([source])
    while queue:
        state = queue.popleft()
        for nxt in np.flatnonzero(adjacency[state]):
            if distance[nxt] < 0:
                distance[nxt] = distance[state] + 1
                queue.append(nxt)
    return distance


def export_occupancy(table, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path)
    return path
