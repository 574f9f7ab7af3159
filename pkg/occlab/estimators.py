"""
Learned estimators of the discounted state occupancy measure.

Contrastive estimators parameterize the critic as an inner product
f(s, a[, g], s_future) = scale * phi(s, a[, g]) . psi(s_future) over lookup
tables, and are trained with plain SGD on exact analytic gradients.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError

from .mdp import OccupancyTable, apply_infonce_bellman, exact_occupancy, occupancy_error, uniform_classifier

logger = logging.getLogger(__name__)

LOSS_FAMILIES = ('categorical', 'binary')
WEIGHT_SCHEMES = ('softmax_normalized', 'exp_unnormalized')
NEGATIVES_SCHEMES = ('n_squared', 'n')

INIT_RANGE = 0.05
EXP_CLAMP = 50.0
NORM_TOL = 1e-9
MIN_SCALE = 1e-3


@dataclass(frozen=True)
class EstimatorConfig:
    loss_family: str = 'categorical'
    weight_scheme: str = 'softmax_normalized'
    negatives_scheme: str = 'n_squared'
    batch_size: int = 64
    repr_dim: int | None = None
    learning_rate: float = 0.5
    ema_tau: float = 0.05
    normalized: bool = False
    scale: float = 10.0
    sr_step_size: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.clean()

    def clean(self):
        if self.loss_family not in LOSS_FAMILIES:
            raise ValidationError(f'Unknown loss_family {self.loss_family!r}.')
        if self.weight_scheme not in WEIGHT_SCHEMES:
            raise ValidationError(f'Unknown weight_scheme {self.weight_scheme!r}.')
        if self.negatives_scheme not in NEGATIVES_SCHEMES:
            raise ValidationError(f'Unknown negatives_scheme {self.negatives_scheme!r}.')
        if self.batch_size < 2:
            raise ValidationError('batch_size must be at least 2.')
        if self.repr_dim is not None and self.repr_dim < 1:
            raise ValidationError('repr_dim must be at least 1.')
        if self.learning_rate <= 0:
            raise ValidationError('learning_rate must be positive.')
        if not 0.0 < self.ema_tau <= 1.0:
            raise ValidationError('ema_tau must lie in (0, 1].')
        if self.scale <= 0:
            raise ValidationError('scale must be positive.')
        if not 0.0 <= self.sr_step_size <= 1.0:
            raise ValidationError('sr_step_size must lie in [0, 1].')

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def c_learning_config(config):
    return config.replace(loss_family='binary', weight_scheme='exp_unnormalized', negatives_scheme='n')


def _normalize_rows(array):
    return array / np.linalg.norm(array, axis=-1, keepdims=True)


@dataclass(eq=False)
class RepresentationPair:
    phi: np.ndarray
    psi: np.ndarray
    normalized: bool = False
    scale: float = 1.0

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)
        self.psi = np.asarray(self.psi, dtype=float)
        self.clean()

    def clean(self):
        if self.phi.ndim not in (3, 4) or self.psi.ndim != 2:
            raise ValidationError('Expected phi[s][a][(g)][d] and psi[s][d] tables.')
        if self.phi.shape[-1] != self.psi.shape[-1] or self.dim < 1:
            raise ValidationError('phi and psi must share a representation dimension d >= 1.')
        if self.scale <= 0:
            raise ValidationError('scale must be positive.')
        if self.normalized:
            for name in ('phi', 'psi'):
                norms = np.linalg.norm(getattr(self, name), axis=-1)
                if np.abs(norms - 1.0).max() > NORM_TOL:
                    raise ValidationError(f'Normalized {name} rows must have unit L2 norm.')

    @classmethod
    def zeros(cls, num_states, num_actions, dim, num_goals=None):
        shape = (num_states, num_actions, dim) if num_goals is None else (num_states, num_actions, num_goals, dim)
        return cls(np.zeros(shape), np.zeros((num_states, dim)))

    @property
    def dim(self):
        return self.psi.shape[-1]

    @property
    def goal_conditioned(self):
        return self.phi.ndim == 4

    @property
    def critic_scale(self):
        return self.scale if self.normalized else 1.0

    def copy(self):
        return RepresentationPair(self.phi.copy(), self.psi.copy(), self.normalized, self.scale)

    def anchor_rows(self, states, actions, goals=None):
        if self.goal_conditioned:
            if goals is None:
                raise ValidationError('Goal-conditioned representations need goal indices.')
            return self.phi[states, actions, goals]
        return self.phi[states, actions]

    def critic_table(self):
        """f over every (s, a[, g], s_future)."""
        return self.critic_scale * (self.phi @ self.psi.T)


@dataclass(eq=False)
class RepresentationGrads:
    phi: np.ndarray
    psi: np.ndarray
    scale: float = 0.0
    clamped: int = 0

    @classmethod
    def zeros_like(cls, reps):
        return cls(np.zeros_like(reps.phi), np.zeros_like(reps.psi))


@dataclass(eq=False)
class CriticMatrices:
    """N x N critic values for one batch; row i is anchor i, column j is candidate j."""

    F_next: np.ndarray | None = None
    F_future: np.ndarray | None = None
    F_w: np.ndarray | None = None
    F_goal: np.ndarray | None = None


@dataclass(eq=False)
class SuccessorTable:
    table: np.ndarray
    step_size: float = 0.05

    @classmethod
    def uniform(cls, num_states, num_actions, step_size=0.05):
        return cls(np.full((num_states, num_actions, num_states), 1.0 / num_states), step_size)


@dataclass(eq=False)
class ContrastiveBatch:
    states: np.ndarray
    actions: np.ndarray
    futures: np.ndarray
    next_states: np.ndarray | None = None
    next_actions: np.ndarray | None = None
    goals: np.ndarray | None = None

    def __len__(self):
        return len(self.states)

    def clean(self, require_next=False):
        size = len(self.states)
        if size < 2:
            raise ValidationError('A contrastive batch needs N >= 2 rows.')
        fields = [self.actions, self.futures, self.goals]
        if require_next:
            if self.next_states is None or self.next_actions is None:
                raise ValidationError('TD losses need next states and next actions.')
            fields += [self.next_states, self.next_actions]
        for values in fields:
            if values is not None and len(values) != size:
                raise ValidationError('Every batch field must have N rows.')


def init_representations(config, num_states, num_actions, num_goals=None):
    """Online and target tables, entries uniform in [-0.05, 0.05]."""
    rng = np.random.default_rng([config.seed, 0])
    dim = config.repr_dim or num_states
    phi_shape = (num_states, num_actions, dim) if num_goals is None else (num_states, num_actions, num_goals, dim)
    phi = rng.uniform(-INIT_RANGE, INIT_RANGE, size=phi_shape)
    psi = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(num_states, dim))
    if config.normalized:
        phi, psi = _normalize_rows(phi), _normalize_rows(psi)
    scale = config.scale if config.normalized else 1.0
    online = RepresentationPair(phi, psi, config.normalized, scale)
    return online, online.copy()


def critic_matrix(phi_rows, psi_rows, scale=1.0):
    phi_rows, psi_rows = np.atleast_2d(phi_rows), np.atleast_2d(psi_rows)
    if phi_rows.shape[0] != psi_rows.shape[0]:
        raise ValidationError('critic_matrix needs equal batch sizes.')
    if phi_rows.shape[1] != psi_rows.shape[1]:
        raise ValidationError(f'Dimension mismatch: {phi_rows.shape[1]} vs {psi_rows.shape[1]}.')
    return scale * (phi_rows @ psi_rows.T)


def _softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax_importance_weights(F_w):
    """W = N * row-softmax(F_w); a constant label matrix (no gradient flows through it)."""
    F_w = np.asarray(F_w, dtype=float)
    if F_w.shape[0] < 2:
        raise ValidationError('Importance weights need N >= 2.')
    return F_w.shape[1] * _softmax(F_w)


def exp_importance_weights(F_w):
    """Unnormalized exp(f) weights; returns (W, number of clamped entries)."""
    F_w = np.asarray(F_w, dtype=float)
    clamped = int((np.abs(F_w) > EXP_CLAMP).sum())
    if clamped:
        logger.debug('Clamped %d critic values to |f| <= %s', clamped, EXP_CLAMP)
    return np.exp(np.clip(F_w, -EXP_CLAMP, EXP_CLAMP)), clamped


def _accumulate(reps, grads, batch, anchors, columns):
    """Chain rule from critic-matrix gradients onto the touched table rows."""
    s = reps.critic_scale
    grad_anchor = np.zeros_like(anchors)
    for G, psi_idx in columns:
        psi_rows = reps.psi[psi_idx]
        grad_anchor += s * (G @ psi_rows)
        np.add.at(grads.psi, psi_idx, s * (G.T @ anchors))
        if reps.normalized:
            grads.scale += float((G * (anchors @ psi_rows.T)).sum())
    if reps.goal_conditioned:
        np.add.at(grads.phi, (batch.states, batch.actions, batch.goals), grad_anchor)
    else:
        np.add.at(grads.phi, (batch.states, batch.actions), grad_anchor)


def _label_matrix(W, scheme):
    if scheme == 'n':
        return np.diag(np.diag(W))
    return W / W.shape[0]


def td_critic_matrices(reps, target_reps, batch):
    anchors = reps.anchor_rows(batch.states, batch.actions, batch.goals)
    target_anchors = target_reps.anchor_rows(batch.next_states, batch.next_actions, batch.goals)
    return CriticMatrices(
        F_next=critic_matrix(anchors, reps.psi[batch.next_states], reps.critic_scale),
        F_future=critic_matrix(anchors, reps.psi[batch.futures], reps.critic_scale),
        F_w=critic_matrix(target_anchors, target_reps.psi[batch.futures], target_reps.critic_scale),
    )


def td_infonce_loss_and_grad(reps, target_reps, batch, discount, config):
    """
    Temporal-difference contrastive loss for the switches in `config`.

    categorical: (1 - gamma) CE(F_next, I_N) + gamma CE(F_future, W)
    binary:      (1 - gamma) BCE(next positives) + gamma W-weighted BCE(future
                 positives) + BCE(random negatives)

    W comes from the target tables and is treated as a constant.
    Returns (loss, RepresentationGrads).
    """
    batch.clean(require_next=True)
    N, gamma = len(batch), discount
    matrices = td_critic_matrices(reps, target_reps, batch)
    F_next, F_future = matrices.F_next, matrices.F_future

    clamped = 0
    if config.weight_scheme == 'softmax_normalized':
        W = softmax_importance_weights(matrices.F_w)
    else:
        W, clamped = exp_importance_weights(matrices.F_w)
    labels = _label_matrix(W, config.negatives_scheme)

    if config.loss_family == 'categorical':
        logp_next, logp_future = _log_softmax(F_next), _log_softmax(F_future)
        loss = -(1.0 - gamma) / N * np.trace(logp_next) - gamma / N * (labels * logp_future).sum()
        G_next = (1.0 - gamma) / N * (np.exp(logp_next) - np.eye(N))
        G_future = gamma / N * (labels.sum(axis=1, keepdims=True) * np.exp(logp_future) - labels)
    else:
        if config.negatives_scheme == 'n':
            negatives = np.roll(np.eye(N), 1, axis=1)
        else:
            negatives = (1.0 - np.eye(N)) / (N - 1)
        next_diag = np.diag(F_next)
        loss = (
            (1.0 - gamma) / N * np.logaddexp(0.0, -next_diag).sum()
            + gamma / N * (labels * np.logaddexp(0.0, -F_future)).sum()
            + 1.0 / N * (negatives * np.logaddexp(0.0, F_future)).sum()
        )
        G_next = np.diag((1.0 - gamma) / N * (_sigmoid(next_diag) - 1.0))
        sig = _sigmoid(F_future)
        G_future = gamma / N * labels * (sig - 1.0) + 1.0 / N * negatives * sig

    grads = RepresentationGrads.zeros_like(reps)
    grads.clamped = clamped
    anchors = reps.anchor_rows(batch.states, batch.actions, batch.goals)
    _accumulate(reps, grads, batch, anchors, [(G_next, batch.next_states), (G_future, batch.futures)])
    return float(loss), grads


def c_learning_loss_and_grad(reps, target_reps, batch, discount, config):
    """TD NCE: binary cross entropy, exp(f) weights, one negative per anchor."""
    return td_infonce_loss_and_grad(reps, target_reps, batch, discount, c_learning_config(config))


def mc_infonce_loss_and_grad(reps, batch, config=None):
    """CE(F_future, I_N) where each row's future state was drawn from its own trajectory."""
    batch.clean()
    N = len(batch)
    anchors = reps.anchor_rows(batch.states, batch.actions, batch.goals)
    F = critic_matrix(anchors, reps.psi[batch.futures], reps.critic_scale)
    logp = _log_softmax(F)
    loss = -np.trace(logp) / N
    G = (np.exp(logp) - np.eye(N)) / N
    grads = RepresentationGrads.zeros_like(reps)
    _accumulate(reps, grads, batch, anchors, [(G, batch.futures)])
    return float(loss), grads


def sgd_step(reps, grads, learning_rate):
    phi = reps.phi - learning_rate * grads.phi
    psi = reps.psi - learning_rate * grads.psi
    scale = reps.scale
    if reps.normalized:
        # Projected step: back onto the unit sphere
        phi, psi = _normalize_rows(phi), _normalize_rows(psi)
        scale = max(reps.scale - learning_rate * grads.scale, MIN_SCALE)
    return RepresentationPair(phi, psi, reps.normalized, scale)


def ema_update(target, online, tau):
    if not 0.0 < tau <= 1.0:
        raise ValidationError('ema_tau must lie in (0, 1].')
    if target.phi.shape != online.phi.shape or target.psi.shape != online.psi.shape:
        raise ValidationError('Target and online representations differ in shape.')
    phi = (1.0 - tau) * target.phi + tau * online.phi
    psi = (1.0 - tau) * target.psi + tau * online.psi
    if online.normalized:
        phi, psi = _normalize_rows(phi), _normalize_rows(psi)
    scale = (1.0 - tau) * target.scale + tau * online.scale
    return RepresentationPair(phi, psi, online.normalized, scale)


def successor_td_update(table, transition, next_action, discount, step_size=None):
    """M(s,a) <- (1 - alpha) M(s,a) + alpha [(1 - gamma) onehot(s') + gamma M(s', a')]"""
    state, action, next_state = transition
    alpha = table.step_size if step_size is None else step_size
    M = table.table.copy()
    target = discount * M[next_state, next_action]
    target[next_state] += 1.0 - discount
    M[state, action] = (1.0 - alpha) * M[state, action] + alpha * target
    return SuccessorTable(M, table.step_size)


def successor_batch_update(table, batch, discount, step_size=None):
    """Synchronous version of successor_td_update; duplicate (s, a) rows average their targets."""
    alpha = table.step_size if step_size is None else step_size
    M = table.table.copy()
    targets = discount * M[batch.next_states, batch.next_actions]
    targets[np.arange(len(batch)), batch.next_states] += 1.0 - discount
    sums = np.zeros_like(M)
    counts = np.zeros(M.shape[:2])
    np.add.at(sums, (batch.states, batch.actions), targets)
    np.add.at(counts, (batch.states, batch.actions), 1.0)
    touched = counts > 0
    mean_target = sums[touched] / counts[touched][:, None]
    td_error = float(np.abs(mean_target - M[touched]).sum(axis=1).mean())
    M[touched] = (1.0 - alpha) * M[touched] + alpha * mean_target
    return SuccessorTable(M, table.step_size), td_error


def occupancy_from_critic(reps, empirical_marginal):
    """p(s+ | s, a) proportional to p(s+) exp f(s, a, s+), normalized over every state."""
    marginal = np.asarray(empirical_marginal, dtype=float)
    if marginal.shape != (reps.psi.shape[0],) or (marginal < 0).any() or abs(marginal.sum() - 1.0) > 1e-9:
        raise ValidationError('Empirical marginal must be a distribution over states.')
    if (marginal == 0).any():
        logger.warning(
            'Empirical marginal has zero mass on %d state(s); their estimated occupancy is 0.',
            int((marginal == 0).sum()),
        )
    with np.errstate(divide='ignore'):
        log_marginal = np.log(marginal)
    return OccupancyTable(_softmax(reps.critic_table() + log_marginal))


def q_from_representations(reps, empirical_marginal, reward):
    reward = np.asarray(reward, dtype=float)
    return occupancy_from_critic(reps, empirical_marginal).probs @ reward


def optimal_critic(occupancy, marginal):
    """Tables whose critic is log p(s+ | s, a) - log p(s+) (identity psi)."""
    probs = occupancy.probs if isinstance(occupancy, OccupancyTable) else np.asarray(occupancy)
    tiny = np.finfo(float).tiny
    phi = np.log(np.maximum(probs, tiny)) - np.log(np.maximum(marginal, tiny))
    return RepresentationPair(phi, np.eye(probs.shape[-1]))


def exhaustive_infonce_losses(mdp, policy, reps, marginal):
    """
    (TD, MC) InfoNCE losses in exact expectation: every (s, a) weighted
    uniformly, negatives integrated against `marginal`, the TD future term
    reweighted by the self-normalized critic of (s', a').
    """
    marginal = np.asarray(marginal, dtype=float)
    gamma = mdp.discount
    f = reps.critic_table()
    log_z = np.log((marginal * np.exp(f)).sum(axis=-1, keepdims=True))
    nll = log_z - f
    weights = np.exp(f) / np.exp(log_z)

    occupancy = exact_occupancy(mdp, policy).probs
    mc = (occupancy * nll).sum(axis=-1).mean()

    next_term = (mdp.transition * nll).sum(axis=-1)
    # E_{a' ~ pi(s')} w(s', a', s+) p(s+)
    future = np.einsum('pa,pak->pk', policy.table, weights) * marginal
    future_term = (np.einsum('sap,pk->sak', mdp.transition, future) * nll).sum(axis=-1)
    td = ((1.0 - gamma) * next_term + gamma * future_term).mean()
    return float(td), float(mc)


def sample_td_batch(dataset, policy, size, rng):
    """SARSA-style batch: a' is drawn fresh from the evaluated policy at s'."""
    index = rng.integers(len(dataset), size=size)
    next_states = dataset.next_states[index]
    return ContrastiveBatch(
        states=dataset.states[index],
        actions=dataset.actions[index],
        futures=dataset.sample_marginal(rng, size),
        next_states=next_states,
        next_actions=policy.sample(rng, next_states),
    )


def sample_mc_batch(dataset, size, discount, rng):
    index = rng.integers(len(dataset), size=size)
    return ContrastiveBatch(
        states=dataset.states[index],
        actions=dataset.actions[index],
        futures=dataset.sample_future(rng, index, discount),
    )


class BaseEstimator:
    """
    Shared training interface: `step()` performs one update and returns its
    loss, `occupancy()` returns the current estimate as an OccupancyTable.
    """
    method = None

    def __init__(self, mdp, policy, dataset, config):
        self.mdp = mdp
        self.policy = policy
        self.dataset = dataset
        self.config = config
        self.discount = mdp.discount
        self.rng = np.random.default_rng([config.seed, 1])

    def step(self):
        raise NotImplementedError

    def occupancy(self):
        raise NotImplementedError

    def error(self, truth):
        return occupancy_error(self.occupancy(), truth)


class ContrastiveEstimator(BaseEstimator):
    def __init__(self, mdp, policy, dataset, config):
        super().__init__(mdp, policy, dataset, config)
        self.reps, self.target = init_representations(config, mdp.num_states, mdp.num_actions)
        self.clamped = 0

    def occupancy(self):
        return occupancy_from_critic(self.reps, self.dataset.empirical_marginal)


class TdInfoNceEstimator(ContrastiveEstimator):
    method = 'td_infonce'

    def loss_and_grad(self, batch):
        return td_infonce_loss_and_grad(self.reps, self.target, batch, self.discount, self.config)

    def step(self):
        batch = sample_td_batch(self.dataset, self.policy, self.config.batch_size, self.rng)
        loss, grads = self.loss_and_grad(batch)
        self.clamped += grads.clamped
        self.reps = sgd_step(self.reps, grads, self.config.learning_rate)
        self.target = ema_update(self.target, self.reps, self.config.ema_tau)
        return loss


class CLearningEstimator(TdInfoNceEstimator):
    method = 'c_learning'

    def __init__(self, mdp, policy, dataset, config):
        super().__init__(mdp, policy, dataset, c_learning_config(config))


class McInfoNceEstimator(ContrastiveEstimator):
    method = 'mc_infonce'

    def step(self):
        batch = sample_mc_batch(self.dataset, self.config.batch_size, self.discount, self.rng)
        loss, grads = mc_infonce_loss_and_grad(self.reps, batch, self.config)
        self.reps = sgd_step(self.reps, grads, self.config.learning_rate)
        return loss


class SuccessorEstimator(BaseEstimator):
    method = 'successor_representation'

    def __init__(self, mdp, policy, dataset, config):
        super().__init__(mdp, policy, dataset, config)
        self.table = SuccessorTable.uniform(mdp.num_states, mdp.num_actions, config.sr_step_size)

    def step(self):
        batch = sample_td_batch(self.dataset, self.policy, self.config.batch_size, self.rng)
        self.table, td_error = successor_batch_update(self.table, batch, self.discount)
        return td_error

    def occupancy(self):
        return OccupancyTable(self.table.table)


class BellmanOracle(BaseEstimator):
    """Known-model iteration of the InfoNCE Bellman operator from a uniform classifier."""
    method = 'exact_bellman_oracle'

    def __init__(self, mdp, policy, dataset, config):
        super().__init__(mdp, policy, dataset, config)
        self.classifier = uniform_classifier(mdp)

    def step(self):
        updated = apply_infonce_bellman(self.mdp, self.policy, self.classifier)
        change = float(np.abs(updated.probs - self.classifier.probs).max())
        self.classifier = updated
        return change

    def occupancy(self):
        return self.classifier


ESTIMATORS = {
    cls.method: cls
    for cls in (TdInfoNceEstimator, McInfoNceEstimator, CLearningEstimator, SuccessorEstimator, BellmanOracle)
}


def make_estimator(method, mdp, policy, dataset, config):
    try:
        estimator_class = ESTIMATORS[method]
    except KeyError:
        raise ValidationError(f'Unknown method {method!r}; expected one of {sorted(ESTIMATORS)}.')
    return estimator_class(mdp, policy, dataset, config)


def train_estimator(estimator, steps, eval_interval, truth, on_row=None):
    """
    Run `steps` updates and emit a row {step, loss, occupancy_error} every
    `eval_interval` steps (and after the final step).
    """
    rows = []
    losses = []
    for step in range(1, steps + 1):
        losses.append(estimator.step())
        if step % eval_interval == 0 or step == steps:
            row = {
                'step': step,
                'loss': float(np.mean(losses)),
                'occupancy_error': estimator.error(truth),
            }
            losses = []
            rows.append(row)
            if on_row is not None:
                on_row(row)
    if getattr(estimator, 'clamped', 0):
        logger.warning('%s clamped %d exponentials during training', estimator.method, estimator.clamped)
    return rows
