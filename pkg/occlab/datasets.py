"""
Scripted trajectory datasets for the off-policy reasoning studies.

z_paths
    Windows cut from four scripts on the grid border and its diagonals:
    the "Z" (top row, anti-diagonal staircase, bottom row), its mirror
    image, and both reversed in time. Window lengths are capped at half a
    script, so cells at the two ends of one script never share a trajectory.

skewed_paths
    Complete bottom-left to bottom-right routes: the short route along the
    bottom row for a p_short share of trajectories, otherwise the long
    detour up the left edge, across the top row and down the right edge.
    Short routes are placed by systematic sampling from one random offset,
    so the realized share is within one trajectory of p_short.
"""
import logging

import numpy as np
from django.core.exceptions import ValidationError

from .mdp import ACTIONS, MOVES, TransitionDataset

logger = logging.getLogger(__name__)

STYLES = ('z_paths', 'skewed_paths')
MIN_SIDE = 3

_DELTA_TO_ACTION = {delta: ACTIONS.index(name) for name, delta in MOVES.items()}


def _check_grid(mdp):
    grid = mdp.grid
    if grid is None or tuple(mdp.action_names) != ACTIONS:
        raise ValidationError('Scripted datasets need a gridworld MDP.')
    if grid.width < MIN_SIDE or grid.height < MIN_SIDE:
        raise ValidationError(
            f'Grid {grid.height}x{grid.width} is too small for the scripted paths '
            f'(needs at least {MIN_SIDE}x{MIN_SIDE}).'
        )
    return grid


def _line(start, end):
    """Cells from start to end along one row or column, both ends included."""
    (r0, c0), (r1, c1) = start, end
    if r0 == r1:
        step = 1 if c1 >= c0 else -1
        return [(r0, c) for c in range(c0, c1 + step, step)]
    step = 1 if r1 >= r0 else -1
    return [(r, c0) for r in range(r0, r1 + step, step)]


def _staircase(start, end):
    """Alternate vertical and horizontal unit moves until `end` is reached."""
    cells = [start]
    row, col = start
    vertical = True
    while (row, col) != end:
        if (vertical and row != end[0]) or col == end[1]:
            row += 1 if end[0] > row else -1
        else:
            col += 1 if end[1] > col else -1
        vertical = not vertical
        cells.append((row, col))
    return cells


def _join(*segments):
    cells = list(segments[0])
    for segment in segments[1:]:
        cells.extend(segment[1:])
    return cells


def z_scripts(grid):
    top, bottom = 0, grid.height - 1
    left, right = 0, grid.width - 1
    z = _join(
        _line((top, left), (top, right)),
        _staircase((top, right), (bottom, left)),
        _line((bottom, left), (bottom, right)),
    )
    mirrored = _join(
        _line((top, right), (top, left)),
        _staircase((top, left), (bottom, right)),
        _line((bottom, right), (bottom, left)),
    )
    return [z, mirrored, z[::-1], mirrored[::-1]]


def skewed_routes(grid):
    """(short, long) scripted routes from the bottom-left to the bottom-right corner."""
    top, bottom = 0, grid.height - 1
    left, right = 0, grid.width - 1
    short = _line((bottom, left), (bottom, right))
    long = _join(
        _line((bottom, left), (top, left)),
        _line((top, left), (top, right)),
        _line((top, right), (bottom, right)),
    )
    return short, long


def route_lengths(grid):
    short, long = skewed_routes(grid)
    return len(short) - 1, len(long) - 1


def _encode(grid, cells):
    for cell in cells:
        if cell in grid.walls:
            raise ValidationError(f'Scripted path crosses the wall at {cell}.')
    states = [grid.state_of(cell) for cell in cells]
    actions = [
        _DELTA_TO_ACTION[(b[0] - a[0], b[1] - a[1])]
        for a, b in zip(cells[:-1], cells[1:])
    ]
    return states, actions


def synthesize_trajectory_dataset(mdp, style, count, seed=0, p_short=0.05):
    """Scripted trajectories until exactly `count` transitions are stored."""
    grid = _check_grid(mdp)
    if style not in STYLES:
        raise ValidationError(f'Unknown dataset style {style!r}; expected one of {STYLES}.')
    if count < 1:
        raise ValidationError('count must be at least 1.')
    if not 0.0 <= p_short <= 1.0:
        raise ValidationError('p_short must lie in [0, 1].')
    rng = np.random.default_rng(seed)
    offset_u = rng.random()

    if style == 'z_paths':
        scripts = [_encode(grid, cells) for cells in z_scripts(grid)]
    else:
        scripts = [_encode(grid, cells) for cells in skewed_routes(grid)]

    states, actions, next_states, episodes = [], [], [], []
    episode = 0
    while len(states) < count:
        if style == 'z_paths':
            script_states, script_actions = scripts[rng.integers(len(scripts))]
            max_len = max(1, len(script_actions) // 2)
            length = int(rng.integers(1, max_len + 1))
            offset = int(rng.integers(len(script_actions) - length + 1))
        else:
            short = np.floor((episode + 1) * p_short + offset_u) > np.floor(episode * p_short + offset_u)
            script_states, script_actions = scripts[0] if short else scripts[1]
            length, offset = len(script_actions), 0
        length = min(length, count - len(states))
        window = slice(offset, offset + length)
        states.extend(script_states[window])
        actions.extend(script_actions[window])
        next_states.extend(script_states[offset + 1:offset + length + 1])
        episodes.extend([episode] * length)
        episode += 1

    dataset = TransitionDataset(
        states, actions, next_states, mdp.num_states,
        episodes=episodes, policy_id=style, seed=seed,
    )
    dataset.validate_against(mdp)
    logger.debug('Synthesized %d %s transitions in %d trajectories', count, style, episode)
    return dataset


def short_route_fraction(dataset, grid):
    """Share of trajectories that are complete short routes."""
    short_len, _ = route_lengths(grid)
    lengths = np.array([s.stop - s.start for s in dataset.episode_slices()])
    return float((lengths == short_len).mean())


def border_pairs(grid):
    """Ordered pairs of distinct free cells sharing one edge of the grid."""
    edges = [
        [(0, c) for c in range(grid.width)],
        [(grid.height - 1, c) for c in range(grid.width)],
        [(r, 0) for r in range(grid.height)],
        [(r, grid.width - 1) for r in range(grid.height)],
    ]
    pairs = set()
    for edge in edges:
        free = [grid.state_of(cell) for cell in edge if cell not in grid.walls]
        pairs.update((s, g) for s in free for g in free if s != g)
    return sorted(pairs)


def co_occurrence(dataset):
    """seen[s, g] is True when g is visited at or after s inside one trajectory."""
    S = dataset.num_states
    seen = np.zeros((S, S), dtype=bool)
    for window in dataset.episode_slices():
        visits = np.r_[dataset.states[window], dataset.next_states[window.stop - 1]]
        suffix = np.zeros(S, dtype=bool)
        for state in visits[::-1]:
            suffix[state] = True
            seen[state] |= suffix
    return seen


def dataset_reachability(dataset):
    """reach[s, g]: g can be reached from s along transitions stored in the dataset."""
    S = dataset.num_states
    reach = np.eye(S, dtype=bool)
    reach[dataset.states, dataset.next_states] = True
    # Transitive closure by repeated squaring
    for _ in range(int(np.ceil(np.log2(max(S, 2)))) + 1):
        reach = reach | ((reach.astype(np.int64) @ reach.astype(np.int64)) > 0)
    return reach


def held_out_pairs(dataset, mdp, candidates=None):
    """
    Evaluation pairs that no single trajectory connects but the dataset's
    transition graph does; defaults to same-edge border pairs.
    """
    grid = _check_grid(mdp)
    if candidates is None:
        candidates = border_pairs(grid)
    seen = co_occurrence(dataset)
    reach = dataset_reachability(dataset)
    pairs = [(s, g) for s, g in candidates if not seen[s, g] and reach[s, g]]
    logger.debug('%d of %d candidate pairs are held out', len(pairs), len(candidates))
    return pairs
