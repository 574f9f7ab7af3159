"""
Walking between two states in representation space.

parametric
    Spherical interpolation between phi(s0, noop, g) and phi(g, noop, g),
    retrieved by spherical nearest neighbour among every state.
nonparametric
    Softmax features against a set of anchor representations, blended
    linearly and retrieved by L2 nearest neighbour in feature space.
"""
from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError

from .estimators import _softmax
from .mdp import NOOP

DOT_TOL = 1e-12
DEFAULT_ALPHAS = (0.0, 0.25, 0.5, 0.75, 1.0)


def _unit_rows(vectors):
    vectors = np.asarray(vectors, dtype=float)
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    if (norms == 0).any():
        raise ValidationError('Cannot project a zero representation onto the sphere.')
    return vectors / norms


def slerp(x, y, alphas):
    """
    Points along the great arc from unit vector x (alpha = 0) to y (alpha = 1).
    Identical endpoints yield the endpoint for every alpha.
    """
    x, y = _unit_rows(x), _unit_rows(y)
    alphas = np.atleast_1d(np.asarray(alphas, dtype=float))
    dot = float(np.clip(x @ y, -1.0, 1.0))
    if dot >= 1.0 - DOT_TOL:
        return np.tile(y, (len(alphas), 1))
    if dot <= -1.0 + DOT_TOL:
        raise ValidationError('Antipodal endpoints do not define a unique arc.')
    eta = float(np.arccos(dot))
    weights_x = np.sin((1.0 - alphas) * eta) / np.sin(eta)
    weights_y = np.sin(alphas * eta) / np.sin(eta)
    return weights_x[:, None] * x + weights_y[:, None] * y


def spherical_nearest(queries, candidates):
    """Index of the candidate with the smallest angle to each query."""
    return (_unit_rows(queries) @ _unit_rows(candidates).T).argmax(axis=1)


def l2_nearest(queries, candidates):
    distance = ((queries[:, None, :] - candidates[None, :, :]) ** 2).sum(axis=-1)
    return distance.argmin(axis=1)


def softmax_features(vectors, anchors):
    return _softmax(np.atleast_2d(vectors) @ np.atleast_2d(anchors).T)


def noop_representations(reps, goal, action=NOOP):
    """phi(s, action, goal) for every state s, L2-normalized."""
    if reps.goal_conditioned:
        return _unit_rows(reps.phi[:, action, goal])
    return _unit_rows(reps.phi[:, action])


@dataclass
class InterpolationResult:
    start: int
    goal: int
    alphas: tuple
    parametric: list
    nonparametric: list

    def rows(self):
        return [
            {'start': self.start, 'goal': self.goal, 'alpha': alpha, 'branch': branch, 'state': state}
            for branch, states in (('parametric', self.parametric), ('nonparametric', self.nonparametric))
            for alpha, state in zip(self.alphas, states)
        ]


def interpolate_representations(reps, start, goal, alphas=DEFAULT_ALPHAS, num_anchors=None,
                                seed=0, action=NOOP):
    num_states = reps.psi.shape[0]
    for state in (start, goal):
        if not 0 <= state < num_states:
            raise ValidationError(f'State {state} lies outside [0, {num_states}).')
    alphas = tuple(float(alpha) for alpha in alphas)
    if any(not 0.0 <= alpha <= 1.0 for alpha in alphas):
        raise ValidationError('Interpolation coefficients must lie in [0, 1].')

    validation = noop_representations(reps, goal, action)
    blends = slerp(validation[start], validation[goal], alphas)
    parametric = spherical_nearest(blends, validation)

    rng = np.random.default_rng(seed)
    num_anchors = num_anchors or num_states
    anchors = validation[rng.choice(num_states, size=num_anchors, replace=num_anchors > num_states)]
    features = softmax_features(validation, anchors)
    weights = np.asarray(alphas)[:, None]
    # alpha = 0 sits on the start state, alpha = 1 on the goal
    mixed = (1.0 - weights) * features[start] + weights * features[goal]
    nonparametric = l2_nearest(mixed, features)

    return InterpolationResult(
        start=start,
        goal=goal,
        alphas=alphas,
        parametric=[int(s) for s in parametric],
        nonparametric=[int(s) for s in nonparametric],
    )
