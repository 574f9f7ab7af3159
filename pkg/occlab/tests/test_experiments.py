import json
import tempfile
from pathlib import Path

import pandas as pd
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from occlab.experiments import (
    ABLATION_VARIANTS,
    ExperimentSpec,
    MetricsAppender,
    MetricsRecord,
    final_values,
    oracle_iteration_bound,
    run_ablation,
    run_interpolation,
    run_occupancy_benchmark,
    run_offline_reasoning,
    run_oracle,
    run_sample_efficiency_sweep,
    settling_step,
    summarize,
    untrained_error,
)
from occlab.exceptions import ConfigError
from occlab.forms import load_config


def smoke_spec(output_dir=None, **changes):
    spec = ExperimentSpec.from_config(load_config('smoke.json'), output_dir=output_dir, plots=False)
    return spec.replace(**changes) if changes else spec


class OutputDirTestCase(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()


class ExperimentSpecTests(SimpleTestCase):
    def test_from_config_carries_every_section(self):
        spec = smoke_spec()
        self.assertEqual(spec.experiment, 'smoke')
        self.assertEqual(spec.discount, 0.8)
        self.assertEqual(spec.estimator.batch_size, 8)
        self.assertEqual(spec.dataset_sizes, (200, 500))
        self.assertEqual(spec.gcrl.horizon, 12)
        self.assertEqual(spec.pairs, ((0, 8),))
        self.assertEqual(spec.build_mdp().num_states, 9)

    def test_seed_list_must_be_distinct_and_non_empty(self):
        with self.assertRaises(ValidationError):
            smoke_spec(seeds=())
        with self.assertRaises(ValidationError):
            smoke_spec(seeds=(1, 1))

    def test_dataset_sizes_must_increase(self):
        with self.assertRaises(ValidationError):
            smoke_spec(dataset_sizes=(500, 200))

    def test_unknown_mdp_kind(self):
        with self.assertRaises(ConfigError):
            smoke_spec(mdp={'kind': 'torus'}).build_mdp()

    def test_method_estimator_applies_that_methods_overrides(self):
        spec = smoke_spec(estimator_overrides={'c_learning': {'learning_rate': 0.1, 'batch_size': 16}})
        self.assertEqual(spec.method_estimator('c_learning').learning_rate, 0.1)
        self.assertEqual(spec.method_estimator('c_learning').batch_size, 16)
        self.assertEqual(spec.method_estimator('td_infonce'), spec.estimator)

    def test_config_defaults_give_c_learning_its_own_optimizer_settings(self):
        spec = smoke_spec()
        self.assertEqual(spec.estimator_overrides, {'c_learning': {'batch_size': 256, 'learning_rate': 0.25}})
        self.assertEqual(spec.method_estimator('mc_infonce').learning_rate, 0.5)

    def test_plan_lists_the_jobs(self):
        plan = smoke_spec(seeds=(0, 1)).plan('occupancy')
        self.assertEqual(plan['harness'], 'occupancy')
        self.assertEqual(plan['seeds'], [0, 1])
        self.assertIsNone(plan['output_dir'])

    def test_oracle_iteration_bound(self):
        self.assertEqual(oracle_iteration_bound(0.9), 175)
        self.assertEqual(oracle_iteration_bound(0.5), 27)


class MetricsTests(OutputDirTestCase):
    def records(self):
        return [
            MetricsRecord('e', 'td_infonce', 0, 10, 'occupancy_error', 0.4),
            MetricsRecord('e', 'td_infonce', 0, 20, 'occupancy_error', 0.2),
            MetricsRecord('e', 'td_infonce', 1, 10, 'occupancy_error', 0.6),
            MetricsRecord('e', 'td_infonce', 1, 20, 'occupancy_error', 0.4),
        ]

    def test_summarize_over_seeds(self):
        table = summarize(self.records())
        last = table[table['x'] == 20].iloc[0]
        self.assertAlmostEqual(last['mean'], 0.3)
        self.assertAlmostEqual(last['std'], 0.1414213562373095)
        self.assertEqual(last['count'], 2)

    def test_final_values_use_each_seeds_last_point(self):
        mean, std = final_values(self.records(), 'occupancy_error')['td_infonce']
        self.assertAlmostEqual(mean, 0.3)
        self.assertEqual(final_values(self.records(), 'loss'), {})

    def test_settling_step_is_where_the_curve_stays_near_its_final_value(self):
        records = [
            MetricsRecord('e', 'sr', 0, x, 'occupancy_error', value)
            for x, value in [(10, 1.0), (20, 0.5), (30, 0.105), (40, 0.12), (50, 0.1)]
        ]
        # start 1.1 against final 0.1: band widths 0.1, 0.5 and 0.01
        self.assertEqual(settling_step(records, 'sr', start=1.1), 30.0)
        self.assertEqual(settling_step(records, 'sr', start=1.1, band=0.5), 20.0)
        self.assertEqual(settling_step(records, 'sr', start=1.1, band=0.01), 50.0)
        self.assertIsNone(settling_step(records, 'td_infonce', start=1.1))

    def test_untrained_error_is_the_uniform_guess(self):
        spec = ExperimentSpec.from_config(load_config('two_cycle.json'), output_dir=None, plots=False)
        # every entry of the two-cycle occupancy is 1/3 or 2/3
        self.assertAlmostEqual(untrained_error(spec), 1 / 6)

    def test_appender_writes_header_then_rows(self):
        path = self.tmp / 'metrics.csv'
        appender = MetricsAppender(path)
        self.assertEqual(path.read_text().strip(), 'experiment,method,seed,x,metric,value')
        appender.append(self.records()[:2], seconds=1.5)
        appender.append(self.records()[2:], seconds=2.5)
        frame = pd.read_csv(path)
        self.assertEqual(len(frame), 4)
        self.assertEqual(list(frame['value']), [0.4, 0.2, 0.6, 0.4])
        self.assertEqual(appender.timings[1], {'method': 'td_infonce', 'seed': 1, 'seconds': 2.5})

    def test_appended_values_read_back_exactly(self):
        path = self.tmp / 'metrics.csv'
        values = [0.1 + 0.2, 1 / 3, 0.6, 2.0 ** -40, 123456.789e-3]
        MetricsAppender(path).append(
            [MetricsRecord('e', 'mc_infonce', 0, step, 'occupancy_error', value) for step, value in enumerate(values)]
        )
        frame = pd.read_csv(path, float_precision='round_trip')
        self.assertEqual(list(frame['value']), values)


class OracleHarnessTests(OutputDirTestCase):
    def test_two_cycle_oracle(self):
        spec = ExperimentSpec.from_config(load_config('two_cycle.json'), output_dir=self.tmp, plots=False)
        result = run_oracle(spec)
        assert_allclose(result.tables['occupancy'].probs[0, 0], [1 / 3, 2 / 3], atol=1e-12)
        claims = result.summary['claims']
        self.assertTrue(claims['converged_within_bound'])
        self.assertTrue(claims['contraction_bound_holds'])
        self.assertEqual(claims['iteration_bound'], 27)
        frame = pd.read_csv(self.tmp / 'occupancy.csv')
        self.assertEqual(len(frame), 4)
        summary = json.loads((self.tmp / 'summary.json').read_text())
        self.assertEqual(summary['claims'], claims)

    def test_plot_is_written_when_enabled(self):
        spec = ExperimentSpec.from_config(load_config('two_cycle.json'), output_dir=self.tmp, plots=True)
        run_oracle(spec)
        self.assertTrue((self.tmp / 'oracle.svg').read_text().lstrip().startswith('<?xml'))


class BenchmarkHarnessTests(OutputDirTestCase):
    def test_rows_for_every_method_and_interval(self):
        result = run_occupancy_benchmark(smoke_spec(self.tmp))
        frame = pd.read_csv(self.tmp / 'metrics.csv')
        # 5 methods x 2 evaluation points x (loss, occupancy_error)
        self.assertEqual(len(frame), 5 * 2 * 2)
        self.assertEqual(sorted(frame['x'].unique()), [10.0, 20.0])
        self.assertEqual(len(result.records), 20)
        claims = result.summary['claims']
        self.assertIn('td_infonce_below_mc_infonce', claims)
        self.assertIn('td_infonce_final_below_0.01', claims)
        self.assertIn('td_infonce_settles_no_later_than_successor_representation', claims)
        self.assertEqual(set(result.summary['settling_step']), set(smoke_spec().methods))
        self.assertTrue(all(x in (10.0, 20.0) for x in result.summary['settling_step'].values()))
        self.assertGreater(result.summary['untrained_error'], 0.0)
        self.assertTrue((self.tmp / 'timings.csv').exists())

    def test_rerun_is_byte_identical(self):
        run_occupancy_benchmark(smoke_spec(self.tmp / 'a'))
        run_occupancy_benchmark(smoke_spec(self.tmp / 'b'))
        self.assertEqual(
            (self.tmp / 'a' / 'metrics.csv').read_bytes(),
            (self.tmp / 'b' / 'metrics.csv').read_bytes(),
        )

    def test_worker_pool_matches_serial_run(self):
        run_occupancy_benchmark(smoke_spec(self.tmp / 'serial', seeds=(0, 1)))
        run_occupancy_benchmark(smoke_spec(self.tmp / 'pool', seeds=(0, 1), workers=2))
        self.assertEqual(
            (self.tmp / 'serial' / 'metrics.csv').read_bytes(),
            (self.tmp / 'pool' / 'metrics.csv').read_bytes(),
        )

    def test_unknown_method_is_rejected(self):
        with self.assertRaises(ConfigError):
            run_occupancy_benchmark(smoke_spec(methods=('td_infonce', 'q_learning')))

    def test_sweep_reports_final_error_per_size(self):
        spec = smoke_spec(self.tmp, methods=('td_infonce', 'successor_representation'))
        result = run_sample_efficiency_sweep(spec)
        frame = pd.read_csv(self.tmp / 'metrics.csv')
        self.assertEqual(sorted(frame['x'].unique()), [200.0, 500.0])
        self.assertEqual(len(frame), 4)
        self.assertIn('td_infonce_non_increasing', result.summary['claims'])

    def test_ablation_baseline_matches_the_benchmark(self):
        benchmark = run_occupancy_benchmark(smoke_spec(methods=('td_infonce',)))
        ablation = run_ablation(smoke_spec(self.tmp))
        baseline = [r.value for r in benchmark.records]
        variant = [r.value for r in ablation.records if r.method == 'td_infonce']
        self.assertEqual(baseline, variant)
        comparison = pd.read_csv(self.tmp / 'comparison.csv')
        self.assertEqual(list(comparison['variant']), list(ABLATION_VARIANTS))
        self.assertEqual(len(ablation.tables['comparison']), 4)


class GoalReachingHarnessTests(OutputDirTestCase):
    def test_stitching_smoke(self):
        result = run_offline_reasoning(smoke_spec(self.tmp), 'stitching')
        frame = pd.read_csv(self.tmp / 'metrics.csv')
        self.assertEqual(set(frame['method']), {'td_infonce', 'mc_infonce'})
        self.assertIn('held_out_success', set(frame['metric']))
        paths = (self.tmp / 'paths_td_infonce.txt').read_text()
        self.assertIn('X', paths)
        self.assertIn('*', paths)
        self.assertIn('td_infonce_success_at_least_0.8', result.summary['claims'])

    def test_shortcut_smoke(self):
        result = run_offline_reasoning(smoke_spec(self.tmp), 'shortcut')
        claims = result.summary['claims']
        self.assertEqual(claims['shortest_path_length'], 2)
        self.assertEqual(claims['long_route_length'], 6)
        lengths = [r.value for r in result.records if r.metric == 'path_length']
        self.assertEqual(len(lengths), 2)
        self.assertTrue(all(1 <= length <= 13 for length in lengths))

    def test_unknown_mode(self):
        with self.assertRaises(ValidationError):
            run_offline_reasoning(smoke_spec(), 'teleport')

    def test_interpolation_sequences_hit_their_endpoints(self):
        result = run_interpolation(smoke_spec(self.tmp))
        self.assertTrue(result.summary['claims']['endpoint_identity'])
        frame = pd.read_csv(self.tmp / 'interpolation.csv')
        self.assertEqual(len(frame), 2 * 5)
        self.assertEqual(set(frame['branch']), {'parametric', 'nonparametric'})
