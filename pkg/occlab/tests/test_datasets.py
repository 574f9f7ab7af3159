import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase
from numpy.testing import assert_array_equal

from occlab.datasets import (
    border_pairs,
    co_occurrence,
    dataset_reachability,
    held_out_pairs,
    route_lengths,
    short_route_fraction,
    skewed_routes,
    synthesize_trajectory_dataset,
    z_scripts,
)
from occlab.mdp import GridworldSpec, TransitionDataset, build_gridworld

from .utils import open_grid, two_cycle


class ScriptTests(SimpleTestCase):
    def test_z_scripts_are_unit_step_paths_over_the_grid(self):
        grid = open_grid(5).grid
        scripts = z_scripts(grid)
        self.assertEqual(len(scripts), 4)
        for cells in scripts:
            self.assertEqual(len(cells), 17)
            for a, b in zip(cells[:-1], cells[1:]):
                self.assertEqual(abs(a[0] - b[0]) + abs(a[1] - b[1]), 1)
        self.assertEqual(scripts[0][0], (0, 0))
        self.assertEqual(scripts[0][-1], (4, 4))
        self.assertEqual(scripts[2], scripts[0][::-1])

    def test_skewed_routes_share_their_endpoints(self):
        short, long = skewed_routes(open_grid(5).grid)
        self.assertEqual((short[0], short[-1]), ((4, 0), (4, 4)))
        self.assertEqual((long[0], long[-1]), ((4, 0), (4, 4)))
        self.assertEqual(route_lengths(open_grid(5).grid), (4, 12))


class SynthesisTests(SimpleTestCase):
    def test_exact_transition_count(self):
        mdp = open_grid(5)
        for style in ('z_paths', 'skewed_paths'):
            with self.subTest(style=style):
                dataset = synthesize_trajectory_dataset(mdp, style, 1001, seed=3)
                self.assertEqual(len(dataset), 1001)
                dataset.validate_against(mdp)

    def test_same_seed_same_data(self):
        mdp = open_grid(4)
        a = synthesize_trajectory_dataset(mdp, 'z_paths', 300, seed=5)
        b = synthesize_trajectory_dataset(mdp, 'z_paths', 300, seed=5)
        assert_array_equal(a.states, b.states)
        assert_array_equal(a.episodes, b.episodes)

    def test_z_windows_span_at_most_half_a_script(self):
        dataset = synthesize_trajectory_dataset(open_grid(5), 'z_paths', 2000, seed=0)
        lengths = [s.stop - s.start for s in dataset.episode_slices()]
        self.assertLessEqual(max(lengths), 8)

    def test_only_short_routes_when_p_short_is_one(self):
        mdp = open_grid(5)
        dataset = synthesize_trajectory_dataset(mdp, 'skewed_paths', 400, p_short=1.0)
        self.assertEqual(short_route_fraction(dataset, mdp.grid), 1.0)

    def test_short_route_share_matches_p_short(self):
        mdp = open_grid(5)
        dataset = synthesize_trajectory_dataset(mdp, 'skewed_paths', 11_600, seed=7, p_short=0.05)
        fraction = short_route_fraction(dataset, mdp.grid)
        self.assertAlmostEqual(fraction, 0.05, delta=0.01)

    def test_small_grid_is_rejected(self):
        with self.assertRaises(ValidationError):
            synthesize_trajectory_dataset(open_grid(2), 'z_paths', 10)

    def test_non_grid_mdp_is_rejected(self):
        with self.assertRaises(ValidationError):
            synthesize_trajectory_dataset(two_cycle(), 'skewed_paths', 10)

    def test_unknown_style_is_rejected(self):
        with self.assertRaises(ValidationError):
            synthesize_trajectory_dataset(open_grid(5), 'spiral', 10)

    def test_wall_on_a_script_is_reported(self):
        mdp = build_gridworld(GridworldSpec(5, 5, walls={(0, 2)}))
        with self.assertRaises(ValidationError):
            synthesize_trajectory_dataset(mdp, 'z_paths', 10)


class HeldOutPairTests(SimpleTestCase):
    def setUp(self):
        # 3x3 grid: 0 -> 1 -> 2 in one trajectory, 2 -> 5 -> 8 in another
        self.mdp = open_grid(3)
        self.dataset = TransitionDataset([0, 1, 2, 5], [3, 3, 1, 1], [1, 2, 5, 8], 9, episodes=[0, 0, 1, 1])

    def test_stitched_pair_is_held_out(self):
        candidates = [(0, 2), (0, 8), (2, 8), (8, 0)]
        self.assertEqual(held_out_pairs(self.dataset, self.mdp, candidates), [(0, 8)])

    def test_co_occurrence_respects_time_order(self):
        seen = co_occurrence(self.dataset)
        self.assertTrue(seen[0, 2])
        self.assertFalse(seen[2, 0])
        self.assertFalse(seen[0, 5])

    def test_reachability_is_transitive(self):
        reach = dataset_reachability(self.dataset)
        self.assertTrue(reach[0, 8])
        self.assertFalse(reach[8, 0])
        self.assertTrue(reach[4, 4])

    def test_border_pairs_stay_on_one_edge(self):
        pairs = border_pairs(self.mdp.grid)
        self.assertIn((0, 2), pairs)
        self.assertIn((2, 8), pairs)
        self.assertNotIn((0, 8), pairs)
        self.assertNotIn((4, 0), pairs)

    def test_z_paths_hold_out_the_left_edge(self):
        mdp = open_grid(5)
        dataset = synthesize_trajectory_dataset(mdp, 'z_paths', 5000, seed=0)
        pairs = held_out_pairs(dataset, mdp)
        self.assertIn((0, 20), pairs)
        seen = co_occurrence(dataset)
        self.assertFalse(np.any([seen[s, g] for s, g in pairs]))
