"""
Reproducible experiment harnesses.

Every harness takes an ExperimentSpec, runs independent (method, seed[, size])
jobs, streams their metrics through one MetricsAppender and returns an
ExperimentResult. With `output_dir` set, artifacts land there:

    metrics.csv     experiment,method,seed,x,metric,value
    timings.csv     wall-clock seconds per job
    summary.json    final means / standard deviations and ordering checks
    *.svg           curves (unless plots are disabled)
    paths_*.txt     greedy-path renderings (goal-reaching studies)
"""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from django.core.exceptions import ValidationError

from .datasets import held_out_pairs, route_lengths, skewed_routes, synthesize_trajectory_dataset
from .estimators import ESTIMATORS, EstimatorConfig, make_estimator, train_estimator
from .exceptions import ConfigError
from .gcrl import (
    CRITICS,
    GcrlConfig,
    evaluate_goal_reaching,
    greedy_path,
    path_length,
    policy_to_csv,
    render_paths,
    train_gcrl,
)
from .interpolation import DEFAULT_ALPHAS, interpolate_representations
from .mdp import (
    GridworldSpec,
    OccupancyTable,
    TabularPolicy,
    apply_infonce_bellman,
    build_cycle,
    build_gridworld,
    exact_occupancy,
    export_occupancy,
    load_gridworld_spec,
    occupancy_error,
    random_mdp,
    sample_transitions,
    shortest_path_lengths,
    uniform_classifier,
)

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ('experiment', 'method', 'seed', 'x', 'metric', 'value')
ORACLE_TOL = 1e-8

ABLATION_VARIANTS = {
    'td_infonce': {'loss_family': 'categorical', 'weight_scheme': 'softmax_normalized', 'negatives_scheme': 'n_squared'},
    'td_infonce_exp_weights': {'loss_family': 'categorical', 'weight_scheme': 'exp_unnormalized', 'negatives_scheme': 'n_squared'},
    'td_infonce_n_negatives': {'loss_family': 'categorical', 'weight_scheme': 'softmax_normalized', 'negatives_scheme': 'n'},
    'c_learning': {'loss_family': 'binary', 'weight_scheme': 'exp_unnormalized', 'negatives_scheme': 'n'},
}


@dataclass(frozen=True)
class ExperimentSpec:
    experiment: str
    mdp: dict
    discount: float = 0.9
    methods: tuple = ('td_infonce', 'mc_infonce', 'c_learning', 'successor_representation', 'exact_bellman_oracle')
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    estimator_overrides: dict = field(default_factory=dict)
    seeds: tuple = (0, 1, 2)
    dataset_size: int = 100_000
    dataset_sizes: tuple = (1_000, 10_000, 100_000)
    episode_len: int = 100
    dataset_style: str = 'z_paths'
    p_short: float = 0.05
    steps: int = 50_000
    eval_interval: int = 1_000
    gcrl: GcrlConfig = field(default_factory=GcrlConfig)
    iterations: int = 50_000
    alphas: tuple = DEFAULT_ALPHAS
    pairs: tuple = ()
    num_anchors: int | None = None
    output_dir: Path | None = None
    plots: bool = True
    workers: int = 1

    def __post_init__(self):
        self.clean()

    def clean(self):
        if len(self.seeds) < 1:
            raise ValidationError('At least one seed is required.')
        if len(set(self.seeds)) != len(self.seeds):
            raise ValidationError('Seeds must be distinct.')
        sizes = list(self.dataset_sizes)
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValidationError('Dataset sizes must be strictly increasing.')
        if self.steps < 0 or self.iterations < 0:
            raise ValidationError('Step and iteration counts must be non-negative.')
        if self.eval_interval < 1:
            raise ValidationError('eval_interval must be at least 1.')
        if self.workers < 1:
            raise ValidationError('workers must be at least 1.')

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def build_mdp(self):
        kind = self.mdp.get('kind', 'gridworld')
        if kind == 'gridworld':
            layout = self.mdp.get('layout')
            grid = load_gridworld_spec(layout) if layout else GridworldSpec.from_dict(self.mdp)
            return build_gridworld(grid, self.discount)
        if kind == 'cycle':
            return build_cycle(self.mdp['num_states'], self.discount, self.mdp.get('start') or 0)
        if kind == 'random':
            return random_mdp(self.mdp['num_states'], self.mdp['num_actions'], self.discount,
                              seed=self.mdp.get('seed', 0))
        raise ConfigError(f'Unknown MDP kind {kind!r}.', key='mdp.kind')

    def method_estimator(self, method):
        return self.estimator.replace(**self.estimator_overrides.get(method, {}))

    def check_methods(self, allowed=None):
        allowed = set(ESTIMATORS) if allowed is None else set(allowed)
        for method in self.methods:
            if method not in allowed:
                raise ConfigError(f'Unknown method {method!r}; expected one of {sorted(allowed)}.', key='methods')

    @classmethod
    def from_config(cls, config, output_dir=None, seeds=None, plots=True, workers=1):
        """Build a spec from a validated (form-cleaned) configuration document."""
        dataset, training = config['dataset'], config['training']
        gcrl, interp = config['gcrl'], config['interpolation']
        seeds = tuple(seeds if seeds is not None else config['seeds'])
        estimator = EstimatorConfig(**config['estimator'], seed=seeds[0])
        gcrl_config = GcrlConfig(
            estimator=estimator,
            critic=gcrl['critic'],
            actor_learning_rate=gcrl['actor_learning_rate'],
            eval_interval=gcrl['eval_interval'],
            eval_episodes=gcrl['eval_episodes'],
            horizon=gcrl['horizon'],
            eval_pairs=tuple(tuple(pair) for pair in gcrl['pairs'] or ()),
            online=gcrl['online'],
            collect_interval=gcrl['collect_interval'],
            collect_episodes=gcrl['collect_episodes'],
            episode_len=gcrl['episode_len'],
            explore_eps=gcrl['explore_eps'],
        )
        return cls(
            experiment=config['experiment'],
            mdp=dict(config['mdp']),
            discount=config['gamma'],
            methods=tuple(config['methods']),
            estimator=estimator,
            estimator_overrides=copy.deepcopy(config.get('estimator_overrides') or {}),
            seeds=seeds,
            dataset_size=dataset['size'],
            dataset_sizes=tuple(dataset['sizes'] or ()),
            episode_len=dataset['episode_len'],
            dataset_style=dataset['style'],
            p_short=dataset['p_short'],
            steps=training['steps'],
            eval_interval=training['eval_interval'],
            gcrl=gcrl_config,
            iterations=gcrl['iterations'],
            alphas=tuple(interp['alphas'] or DEFAULT_ALPHAS),
            pairs=tuple(tuple(pair) for pair in interp['pairs'] or ()),
            num_anchors=interp['num_anchors'],
            output_dir=Path(output_dir) if output_dir else None,
            plots=plots,
            workers=workers,
        )

    def plan(self, harness):
        """Human-readable description of the jobs a harness would run."""
        return {
            'harness': harness,
            'experiment': self.experiment,
            'mdp': self.mdp,
            'gamma': self.discount,
            'methods': list(self.methods),
            'seeds': list(self.seeds),
            'steps': self.steps,
            'iterations': self.iterations,
            'dataset_size': self.dataset_size,
            'dataset_sizes': list(self.dataset_sizes),
            'output_dir': str(self.output_dir) if self.output_dir else None,
            'workers': self.workers,
        }


@dataclass(frozen=True)
class MetricsRecord:
    experiment: str
    method: str
    seed: int
    x: float
    metric: str
    value: float
    seconds: float = 0.0

    def as_row(self):
        return {
            'experiment': self.experiment,
            'method': self.method,
            'seed': self.seed,
            'x': float(self.x),
            'metric': self.metric,
            'value': float(self.value),
        }


class MetricsAppender:
    """Single writer for metrics.csv; records are only ever appended."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records = []
        self.timings = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            pd.DataFrame(columns=METRIC_COLUMNS).to_csv(self.path, index=False)

    def append(self, records, seconds=None):
        records = list(records)
        self.records.extend(records)
        if records and seconds is not None:
            first = records[0]
            self.timings.append({'method': first.method, 'seed': first.seed, 'seconds': seconds})
        if self.path is not None and records:
            frame = pd.DataFrame([record.as_row() for record in records], columns=METRIC_COLUMNS)
            frame.to_csv(self.path, mode='a', header=False, index=False)

    def write_timings(self, path):
        pd.DataFrame(self.timings, columns=['method', 'seed', 'seconds']).to_csv(path, index=False)


@dataclass
class ExperimentResult:
    experiment: str
    records: list
    summary: dict
    artifacts: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)


def summarize(records):
    """Mean and sample standard deviation over seeds per (metric, method, x)."""
    frame = pd.DataFrame([record.as_row() for record in records], columns=METRIC_COLUMNS)
    if frame.empty:
        return pd.DataFrame(columns=['metric', 'method', 'x', 'mean', 'std', 'count'])
    grouped = frame.groupby(['metric', 'method', 'x'], sort=True)['value']
    return grouped.agg(['mean', 'std', 'count']).reset_index()


def final_values(records, metric):
    """{method: (mean, std)} of each seed's last-x value for `metric`."""
    frame = pd.DataFrame([record.as_row() for record in records], columns=METRIC_COLUMNS)
    frame = frame[frame['metric'] == metric]
    if frame.empty:
        return {}
    last = frame.sort_values('x').groupby(['method', 'seed'], sort=True).tail(1)
    stats = last.groupby('method', sort=True)['value'].agg(['mean', 'std'])
    return {method: (row['mean'], row['std']) for method, row in stats.iterrows()}


def _clean_float(value):
    value = float(value)
    return None if math.isnan(value) else value


def _final_section(records, metrics):
    section = {}
    for metric in metrics:
        values = final_values(records, metric)
        if values:
            section[metric] = {
                method: {'mean': _clean_float(mean), 'std': _clean_float(std)}
                for method, (mean, std) in values.items()
            }
    return section


def _call(job):
    fn, kwargs = job
    return fn(**kwargs)


def _run_jobs(jobs, workers):
    """Results come back in job order whether or not a worker pool is used."""
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            yield from executor.map(_call, jobs)
    else:
        yield from map(_call, jobs)


class _Outputs:
    """Artifact bookkeeping shared by the harnesses."""

    def __init__(self, spec):
        self.spec = spec
        self.root = spec.output_dir
        self.artifacts = []
        metrics_path = None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            metrics_path = self.root / 'metrics.csv'
            self.artifacts.append(metrics_path)
        self.appender = MetricsAppender(metrics_path)

    def path(self, name):
        path = self.root / name
        self.artifacts.append(path)
        return path

    def write_text(self, name, text):
        if self.root is not None:
            self.path(name).write_text(text)

    def plot(self, name, metric, x_label, y_label, log_x=False, log_y=False):
        if self.root is None or not self.spec.plots:
            return
        from .plotting import plot_curves

        frame = summarize(self.appender.records)
        frame = frame[frame['metric'] == metric]
        if not frame.empty:
            plot_curves(frame, self.path(name), x_label, y_label, title=self.spec.experiment,
                        log_x=log_x, log_y=log_y)

    def finish(self, summary, tables=None):
        if self.root is not None:
            self.appender.write_timings(self.path('timings.csv'))
            self.path('summary.json').write_text(json.dumps(summary, indent=2, sort_keys=True) + '\n')
        return ExperimentResult(self.spec.experiment, self.appender.records, summary,
                                self.artifacts, tables or {})


def _estimation_job(spec, method, seed, size, config=None, label=None):
    started = time.perf_counter()
    mdp = spec.build_mdp()
    policy = TabularPolicy.uniform(mdp.num_states, mdp.num_actions)
    truth = exact_occupancy(mdp, policy)
    # Same (seed, size) -> same dataset for every method
    dataset = sample_transitions(mdp, policy, size, spec.episode_len, seed=seed)
    config = (config or spec.method_estimator(method)).replace(seed=seed)
    estimator = make_estimator(method, mdp, policy, dataset, config)
    rows = train_estimator(estimator, spec.steps, spec.eval_interval, truth)
    return label or method, seed, rows, time.perf_counter() - started


def _curve_records(spec, label, seed, rows, seconds):
    return [
        MetricsRecord(spec.experiment, label, seed, row['step'], metric, row[metric], seconds)
        for row in rows
        for metric in ('loss', 'occupancy_error')
    ]


def _below(values, a, b):
    if a in values and b in values:
        return bool(values[a][0] < values[b][0])
    return None


def settling_step(records, method, start, metric='occupancy_error', band=0.1):
    """
    First x from which the seed-mean curve stays within band * |start - final|
    of its final value, where `start` is the error before any training.
    """
    table = summarize(records)
    curve = table[(table['metric'] == metric) & (table['method'] == method)].sort_values('x')
    if curve.empty:
        return None
    final = curve['mean'].iloc[-1]
    outside = ((curve['mean'] - final).abs() > band * abs(start - final)).to_numpy()
    settled = len(outside) - int(np.argmax(outside[::-1])) if outside.any() else 0
    return float(curve['x'].iloc[settled])


def untrained_error(spec):
    """Occupancy error of the uniform table every estimator starts near."""
    mdp = spec.build_mdp()
    truth = exact_occupancy(mdp, TabularPolicy.uniform(mdp.num_states, mdp.num_actions))
    guess = np.full(truth.probs.shape, 1.0 / mdp.num_states)
    return occupancy_error(OccupancyTable(guess), truth)


def run_occupancy_benchmark(spec):
    """Occupancy error against gradient steps for every method on one shared dataset per seed."""
    spec.check_methods()
    outputs = _Outputs(spec)
    jobs = [
        (_estimation_job, {'spec': spec, 'method': method, 'seed': seed, 'size': spec.dataset_size})
        for seed in spec.seeds
        for method in spec.methods
    ]
    for label, seed, rows, seconds in _run_jobs(jobs, spec.workers):
        outputs.appender.append(_curve_records(spec, label, seed, rows, seconds), seconds)
        logger.info('%s seed %s: final error %.3e', label, seed, rows[-1]['occupancy_error'] if rows else float('nan'))

    records = outputs.appender.records
    final = final_values(records, 'occupancy_error')
    claims = {
        'td_infonce_below_mc_infonce': _below(final, 'td_infonce', 'mc_infonce'),
        'td_infonce_below_c_learning': _below(final, 'td_infonce', 'c_learning'),
        'c_learning_below_mc_infonce': _below(final, 'c_learning', 'mc_infonce'),
        'successor_representation_below_c_learning': _below(final, 'successor_representation', 'c_learning'),
    }
    if 'exact_bellman_oracle' in final:
        claims['oracle_converged'] = bool(final['exact_bellman_oracle'][0] < ORACLE_TOL)
    if 'td_infonce' in final:
        claims['td_infonce_final_below_0.01'] = bool(final['td_infonce'][0] < 0.01)
    start = untrained_error(spec)
    settling = {method: settling_step(records, method, start) for method in spec.methods if method in final}
    if 'td_infonce' in settling and 'successor_representation' in settling:
        claims['td_infonce_settles_no_later_than_successor_representation'] = bool(
            settling['td_infonce'] <= settling['successor_representation']
        )
    summary = {
        'experiment': spec.experiment,
        'seeds': list(spec.seeds),
        'final': _final_section(records, ['occupancy_error']),
        'untrained_error': start,
        'settling_step': settling,
        'claims': claims,
    }
    outputs.plot('occupancy_error.svg', 'occupancy_error', 'gradient steps', 'occupancy error', log_y=True)
    return outputs.finish(summary)


def run_sample_efficiency_sweep(spec):
    """Final occupancy error against dataset size, with a fresh dataset per size."""
    spec.check_methods()
    if not spec.dataset_sizes:
        raise ConfigError('The sweep needs at least one dataset size.', key='dataset.sizes')
    if spec.steps < 1:
        raise ConfigError('The sweep needs training.steps of at least 1.',
                          key='training.steps')
    outputs = _Outputs(spec)
    jobs = [
        (_estimation_job, {'spec': spec, 'method': method, 'seed': seed, 'size': size})
        for size in spec.dataset_sizes
        for seed in spec.seeds
        for method in spec.methods
    ]
    sizes = [job[1]['size'] for job in jobs]
    for size, (label, seed, rows, seconds) in zip(sizes, _run_jobs(jobs, spec.workers)):
        final = rows[-1] if rows else {'occupancy_error': float('nan')}
        record = MetricsRecord(spec.experiment, label, seed, size, 'occupancy_error',
                               final['occupancy_error'], seconds)
        outputs.appender.append([record], seconds)

    table = summarize(outputs.appender.records)
    means = {(row.method, row.x): (row.mean, row.std) for row in table.itertuples()}
    claims = {}
    for method in spec.methods:
        curve = [means[(method, float(size))] for size in spec.dataset_sizes]
        claims[f'{method}_non_increasing'] = all(
            later[0] <= earlier[0] + (0.0 if math.isnan(earlier[1]) else earlier[1])
            for earlier, later in zip(curve, curve[1:])
        )
    for small in spec.dataset_sizes:
        large = small * 10
        if large not in spec.dataset_sizes:
            continue
        for rival in ('mc_infonce', 'c_learning'):
            key = ('td_infonce', float(small)), (rival, float(large))
            if key[0] in means and key[1] in means:
                claims[f'td_infonce_{small}_vs_{rival}_{large}'] = bool(means[key[0]][0] <= means[key[1]][0])
    summary = {
        'experiment': spec.experiment,
        'seeds': list(spec.seeds),
        'final': {
            'occupancy_error': {
                f'{method}@{int(x)}': {'mean': _clean_float(mean), 'std': _clean_float(std)}
                for (method, x), (mean, std) in sorted(means.items())
            }
        },
        'claims': claims,
    }
    outputs.plot('sample_efficiency.svg', 'occupancy_error', 'dataset size', 'occupancy error',
                 log_x=True, log_y=True)
    return outputs.finish(summary)


def _gcrl_config(spec, critic, seed, eval_pairs=None):
    config = spec.gcrl.replace(critic=critic, estimator=spec.estimator.replace(seed=seed))
    if eval_pairs is not None:
        config = config.replace(eval_pairs=tuple(eval_pairs))
    return config


def _gcrl_records(spec, critic, seed, metrics, seconds):
    return [
        MetricsRecord(spec.experiment, critic, seed, row['step'], metric, row[metric], seconds)
        for row in metrics
        for metric in ('critic_loss', 'actor_loss', 'actor_sampled_loss', 'success_rate')
    ]


def _render_block(mdp, critic, seed, start, goal, path, success=None):
    header = f'# {critic} seed={seed} start={start} goal={goal}'
    if success is not None:
        header += f' success={success:.2f}'
    return header + '\n' + render_paths(mdp, start, goal, path) + '\n'


def _gcrl_job(spec, critic, seed):
    started = time.perf_counter()
    mdp = spec.build_mdp()
    config = _gcrl_config(spec, critic, seed)
    dataset = None
    if not config.online:
        policy = TabularPolicy.uniform(mdp.num_states, mdp.num_actions)
        dataset = sample_transitions(mdp, policy, spec.dataset_size, spec.episode_len, seed=seed)
    reps, params, metrics = train_gcrl(mdp, dataset, config, spec.iterations)
    return critic, seed, params, metrics, time.perf_counter() - started


def run_gcrl(spec):
    """Goal-conditioned training from uniform-random data (or online collection)."""
    outputs = _Outputs(spec)
    mdp = spec.build_mdp()
    critic = spec.gcrl.critic
    jobs = [(_gcrl_job, {'spec': spec, 'critic': critic, 'seed': seed}) for seed in spec.seeds]
    renderings = []
    for critic, seed, params, metrics, seconds in _run_jobs(jobs, spec.workers):
        outputs.appender.append(_gcrl_records(spec, critic, seed, metrics, seconds), seconds)
        policy = params.as_policy()
        if outputs.root is not None:
            policy_to_csv(policy, outputs.path(f'policy_seed{seed}.csv'))
        if mdp.grid is not None:
            horizon = spec.gcrl.horizon_for(mdp)
            for start, goal in spec.gcrl.eval_pairs:
                path = greedy_path(mdp, policy, start, goal, horizon)
                renderings.append(_render_block(mdp, critic, seed, start, goal, path))
    if renderings:
        outputs.write_text('paths_gcrl.txt', '\n'.join(renderings))
    records = outputs.appender.records
    summary = {
        'experiment': spec.experiment,
        'seeds': list(spec.seeds),
        'final': _final_section(records, ['success_rate', 'critic_loss']),
        'claims': {},
    }
    outputs.plot('success_rate.svg', 'success_rate', 'iterations', 'success rate')
    return outputs.finish(summary)


def _offline_job(spec, mode, critic, seed):
    started = time.perf_counter()
    mdp = spec.build_mdp()
    style = 'z_paths' if mode == 'stitching' else 'skewed_paths'
    dataset = synthesize_trajectory_dataset(mdp, style, spec.dataset_size, seed=seed, p_short=spec.p_short)
    grid = mdp.grid
    if mode == 'stitching':
        pairs = held_out_pairs(dataset, mdp, candidates=list(spec.gcrl.eval_pairs) or None)
    else:
        short, _ = skewed_routes(grid)
        pairs = [(grid.state_of(short[0]), grid.state_of(short[-1]))]
    if not pairs:
        raise ValidationError('No held-out evaluation pairs remain for this dataset.')
    config = _gcrl_config(spec, critic, seed, eval_pairs=pairs)
    _, params, metrics = train_gcrl(mdp, dataset, config, spec.iterations)
    policy = params.as_policy()
    horizon = config.horizon_for(mdp)
    result = evaluate_goal_reaching(mdp, policy, pairs, horizon, config.eval_episodes, seed=seed, greedy=True)
    return {
        'critic': critic,
        'seed': seed,
        'pairs': pairs,
        'metrics': metrics,
        'result': result,
        'seconds': time.perf_counter() - started,
    }


def run_offline_reasoning(spec, mode):
    """
    stitching: success on held-out pairs from Z-path data.
    shortcut:  greedy path length between the fixed corners of the skewed data.
    """
    if mode not in ('stitching', 'shortcut'):
        raise ValidationError(f'Unknown offline reasoning mode {mode!r}.')
    critics = [method for method in spec.methods if method in CRITICS] or list(CRITICS)
    outputs = _Outputs(spec)
    mdp = spec.build_mdp()
    if mdp.grid is None:
        raise ConfigError('Offline reasoning studies need a gridworld MDP.', key='mdp.kind')
    jobs = [
        (_offline_job, {'spec': spec, 'mode': mode, 'critic': critic, 'seed': seed})
        for seed in spec.seeds
        for critic in critics
    ]
    horizon = spec.gcrl.horizon_for(mdp)
    renderings, lengths = {critic: [] for critic in critics}, {critic: [] for critic in critics}
    for job in _run_jobs(jobs, spec.workers):
        critic, seed, result = job['critic'], job['seed'], job['result']
        records = _gcrl_records(spec, critic, seed, job['metrics'], job['seconds'])
        x = spec.iterations
        if mode == 'stitching':
            records.append(MetricsRecord(spec.experiment, critic, seed, x, 'held_out_success',
                                         result.success_rate, job['seconds']))
        else:
            (start, goal), path = job['pairs'][0], result.paths[0]
            steps = path_length(path, goal)
            length = horizon + 1 if steps is None else steps
            lengths[critic].append(length)
            records.append(MetricsRecord(spec.experiment, critic, seed, x, 'path_length', length, job['seconds']))
        outputs.appender.append(records, job['seconds'])
        for (start, goal), path, success in zip(job['pairs'], result.paths, result.per_pair):
            renderings[critic].append(_render_block(mdp, critic, seed, start, goal, path, success))
    for critic, blocks in renderings.items():
        outputs.write_text(f'paths_{critic}.txt', '\n'.join(blocks))

    records = outputs.appender.records
    claims = {}
    if mode == 'stitching':
        final = final_values(records, 'held_out_success')
        td, mc = final.get('td_infonce'), final.get('mc_infonce')
        if td is not None:
            claims['td_infonce_success_at_least_0.8'] = bool(td[0] >= 0.8)
        if td is not None and mc is not None:
            claims['td_infonce_beats_mc_infonce'] = bool(td[0] > mc[0])
        metrics = ['held_out_success', 'success_rate']
    else:
        grid = mdp.grid
        start = grid.state_of(skewed_routes(grid)[0][0])
        goal = grid.state_of(skewed_routes(grid)[0][-1])
        shortest = int(shortest_path_lengths(mdp, start)[goal])
        _, long_len = route_lengths(grid)
        if lengths.get('td_infonce'):
            claims['td_infonce_finds_shortcut'] = bool(max(lengths['td_infonce']) <= 1.2 * shortest)
        if lengths.get('mc_infonce'):
            claims['mc_infonce_follows_long_route'] = bool(min(lengths['mc_infonce']) >= long_len - 2)
        claims['shortest_path_length'] = shortest
        claims['long_route_length'] = long_len
        metrics = ['path_length', 'success_rate']
    summary = {
        'experiment': spec.experiment,
        'mode': mode,
        'seeds': list(spec.seeds),
        'final': _final_section(records, metrics),
        'claims': claims,
    }
    outputs.plot('success_rate.svg', 'success_rate', 'iterations', 'success rate')
    return outputs.finish(summary)


def run_ablation(spec):
    """The four corners of the loss / weight / negatives grid, trained as TD estimators."""
    outputs = _Outputs(spec)
    jobs = [
        (_estimation_job, {
            'spec': spec,
            'method': 'td_infonce',
            'seed': seed,
            'size': spec.dataset_size,
            'config': spec.estimator.replace(**switches),
            'label': variant,
        })
        for seed in spec.seeds
        for variant, switches in ABLATION_VARIANTS.items()
    ]
    for label, seed, rows, seconds in _run_jobs(jobs, spec.workers):
        outputs.appender.append(_curve_records(spec, label, seed, rows, seconds), seconds)

    records = outputs.appender.records
    final = final_values(records, 'occupancy_error')
    comparison = pd.DataFrame([
        {
            'variant': variant,
            **switches,
            'final_mean': final[variant][0],
            'final_std': final[variant][1],
        }
        for variant, switches in ABLATION_VARIANTS.items()
    ])
    categorical = comparison.loc[comparison['loss_family'] == 'categorical', 'final_mean'].mean()
    binary = comparison.loc[comparison['loss_family'] == 'binary', 'final_mean'].mean()
    gap = binary - categorical
    base = final['td_infonce'][0]
    weight_effect = abs(final['td_infonce_exp_weights'][0] - base)
    negatives_effect = abs(final['td_infonce_n_negatives'][0] - base)
    claims = {
        'categorical_beats_binary': bool(categorical < binary),
        'weight_scheme_minor': bool(weight_effect < gap / 2),
        'negatives_scheme_minor': bool(negatives_effect < gap / 2),
        'loss_family_gap': _clean_float(gap),
        'weight_scheme_effect': _clean_float(weight_effect),
        'negatives_scheme_effect': _clean_float(negatives_effect),
    }
    if outputs.root is not None:
        comparison.to_csv(outputs.path('comparison.csv'), index=False)
    summary = {
        'experiment': spec.experiment,
        'seeds': list(spec.seeds),
        'final': _final_section(records, ['occupancy_error']),
        'claims': claims,
    }
    outputs.plot('ablation.svg', 'occupancy_error', 'gradient steps', 'occupancy error', log_y=True)
    return outputs.finish(summary, tables={'comparison': comparison})


def _interpolation_job(spec, seed):
    started = time.perf_counter()
    mdp = spec.build_mdp()
    policy = TabularPolicy.uniform(mdp.num_states, mdp.num_actions)
    truth = exact_occupancy(mdp, policy)
    dataset = sample_transitions(mdp, policy, spec.dataset_size, spec.episode_len, seed=seed)
    config = spec.estimator.replace(normalized=True, seed=seed)
    estimator = make_estimator('td_infonce', mdp, policy, dataset, config)
    rows = train_estimator(estimator, spec.steps, spec.eval_interval, truth)
    pairs = list(spec.pairs) or [(0, mdp.num_states - 1)]
    results = [
        interpolate_representations(estimator.reps, start, goal, spec.alphas, spec.num_anchors, seed=seed)
        for start, goal in pairs
    ]
    return seed, rows, results, time.perf_counter() - started


def _non_decreasing(values):
    return all(b >= a for a, b in zip(values, values[1:]))


def _has_interior(states, start, goal):
    return any(state not in (start, goal) for state in states)


def run_interpolation(spec):
    """
    Retrieved state sequences between start and goal representations of a
    TD InfoNCE critic trained on uniform-policy data. A branch only counts as
    monotone when every sequence also passes through an interior state.
    """
    outputs = _Outputs(spec)
    mdp = spec.build_mdp()
    if mdp.grid is None:
        raise ConfigError('Interpolation needs a gridworld MDP.', key='mdp.kind')
    jobs = [(_interpolation_job, {'spec': spec, 'seed': seed}) for seed in spec.seeds]
    branches = ('parametric', 'nonparametric')
    rows, endpoints = [], True
    monotone, interior = dict.fromkeys(branches, True), dict.fromkeys(branches, True)
    for seed, curve, results, seconds in _run_jobs(jobs, spec.workers):
        records = _curve_records(spec, 'td_infonce', seed, curve, seconds)
        for result in results:
            distance = shortest_path_lengths(mdp, result.start)
            for branch in branches:
                states = getattr(result, branch)
                endpoints &= states[0] == result.start and states[-1] == result.goal
                monotone[branch] &= _non_decreasing([int(distance[s]) for s in states])
                interior[branch] &= _has_interior(states, result.start, result.goal)
                records.extend(
                    MetricsRecord(spec.experiment, branch, seed, alpha, f'bfs_distance_{result.start}_{result.goal}',
                                  distance[state], seconds)
                    for alpha, state in zip(result.alphas, states)
                )
            rows.extend({'seed': seed, **row} for row in result.rows())
        outputs.appender.append(records, seconds)
    if outputs.root is not None:
        pd.DataFrame(rows).to_csv(outputs.path('interpolation.csv'), index=False)
    claims = {'endpoint_identity': bool(endpoints)}
    for branch in branches:
        claims[f'{branch}_retrieves_interior_states'] = bool(interior[branch])
        claims[f'{branch}_monotone_in_bfs_distance'] = bool(monotone[branch] and interior[branch])
    summary = {
        'experiment': spec.experiment,
        'seeds': list(spec.seeds),
        'final': _final_section(outputs.appender.records, ['occupancy_error']),
        'claims': claims,
    }
    return outputs.finish(summary, tables={'interpolation': pd.DataFrame(rows)})


def oracle_iteration_bound(discount, tol=ORACLE_TOL):
    return math.ceil(math.log(tol) / math.log(discount))


def run_oracle(spec):
    """Exact occupancy under the uniform policy, plus the known-model Bellman iteration towards it."""
    outputs = _Outputs(spec)
    mdp = spec.build_mdp()
    policy = TabularPolicy.uniform(mdp.num_states, mdp.num_actions)
    truth = exact_occupancy(mdp, policy)
    started = time.perf_counter()
    classifier = uniform_classifier(mdp)
    errors = [occupancy_error(classifier, truth)]
    bound = oracle_iteration_bound(mdp.discount)
    while errors[-1] >= ORACLE_TOL and len(errors) <= 10 * bound:
        classifier = apply_infonce_bellman(mdp, policy, classifier)
        errors.append(occupancy_error(classifier, truth))
    seconds = time.perf_counter() - started
    seed = spec.seeds[0]
    outputs.appender.append(
        [MetricsRecord(spec.experiment, 'exact_bellman_oracle', seed, k, 'occupancy_error', error, seconds)
         for k, error in enumerate(errors)],
        seconds,
    )
    if outputs.root is not None:
        export_occupancy(truth, outputs.path('occupancy.csv'))
    summary = {
        'experiment': spec.experiment,
        'seeds': [seed],
        'final': _final_section(outputs.appender.records, ['occupancy_error']),
        'claims': {
            'iterations': len(errors) - 1,
            'iteration_bound': bound,
            'converged_within_bound': bool(errors[-1] < ORACLE_TOL and len(errors) - 1 <= bound),
            'contraction_bound_holds': bool(all(
                error <= mdp.discount ** k + 1e-12 for k, error in enumerate(errors)
            )),
        },
    }
    outputs.plot('oracle.svg', 'occupancy_error', 'iterations', 'occupancy error', log_y=True)
    return outputs.finish(summary, tables={'occupancy': truth})


HARNESSES = {
    'occupancy': run_occupancy_benchmark,
    'sweep': run_sample_efficiency_sweep,
    'gcrl': run_gcrl,
    'stitch': lambda spec: run_offline_reasoning(spec, 'stitching'),
    'shortcut': lambda spec: run_offline_reasoning(spec, 'shortcut'),
    'ablate': run_ablation,
    'interp': run_interpolation,
    'oracle': run_oracle,
}
