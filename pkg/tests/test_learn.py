#  Copyright 2022 The netcausal Authors. All rights reserved.
#
#  Licensed under the Apache License, Version 2.0 (the "License");
#  you may not use this file except in compliance with the License.
#  You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
#  Unless required by applicable law or agreed to in writing, software
#  distributed under the License is distributed on an "AS IS" BASIS,
#  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#  See the License for the specific language governing permissions and
#  limitations under the License.

import os
import time
import unittest

import numpy as np
from parameterized import parameterized

from netcausal.aipw.learn import (
    ConstantPredictor,
    ForestConfig,
    MeanLearner,
    NuisanceTriple,
    RandomForestLearner,
    clip_propensity,
    fit_random_forest,
    get_learner,
    mean_learner,
    oracle_learner,
)
from netcausal.aipw.simulate import appendix_b_sem
from netcausal.aipw.utils import InvalidParameterError, NonFiniteInputError, TooFewSamplesError


def step_function(c):
    return np.where(c < 0.5, 2.5, np.where(c < 0.7, 1.5, 4.0))


class RandomForestTest(unittest.TestCase):
    def test_constant_target(self):
        rng = np.random.default_rng(0)
        forest = fit_random_forest(ForestConfig(n_trees=10, seed=1), rng.random((50, 2)), np.full(50, 3.5))
        np.testing.assert_array_equal(forest.predict(rng.random((20, 2))), np.full(20, 3.5))

    def test_identity_recovery(self):
        rng = np.random.default_rng(1)
        x_train, x_test = rng.random((1000, 1)), rng.random((1000, 1))
        forest = fit_random_forest(ForestConfig(n_trees=50, seed=2), x_train, x_train[:, 0])
        self.assertLess(np.mean((forest.predict(x_test) - x_test[:, 0]) ** 2), 0.01)

    def test_step_function_recovery(self):
        rng = np.random.default_rng(2)
        x_train, x_test = rng.random((2000, 2)), rng.random((1000, 2))
        forest = fit_random_forest(ForestConfig(n_trees=50, seed=3), x_train, step_function(x_train[:, 0]))
        self.assertLess(np.mean((forest.predict(x_test) - step_function(x_test[:, 0])) ** 2), 0.05)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(3)
        x, y = rng.random((200, 3)), rng.random(200)
        first = fit_random_forest(ForestConfig(n_trees=20, seed=7), x, y).predict(x)
        second = fit_random_forest(ForestConfig(n_trees=20, seed=7), x, y).predict(x)
        other = fit_random_forest(ForestConfig(n_trees=20, seed=8), x, y).predict(x)
        np.testing.assert_array_equal(first, second)
        self.assertFalse(np.array_equal(first, other))

    def test_parallel_matches_sequential(self):
        rng = np.random.default_rng(4)
        x, y = rng.random((150, 2)), rng.random(150)
        sequential = fit_random_forest(ForestConfig(n_trees=8, seed=5, n_jobs=1), x, y).predict(x)
        parallel = fit_random_forest(ForestConfig(n_trees=8, seed=5, n_jobs=2), x, y).predict(x)
        np.testing.assert_array_equal(sequential, parallel)

    def test_prediction_does_not_depend_on_batch(self):
        rng = np.random.default_rng(5)
        x, y = rng.random((150, 2)), rng.random(150)
        forest = fit_random_forest(ForestConfig(n_trees=10, seed=0), x, y)
        full = forest.predict(x)
        np.testing.assert_array_equal(full[40:60], forest.predict(x[40:60]))

    def test_binary_targets_stay_in_unit_interval(self):
        rng = np.random.default_rng(6)
        x = rng.random((300, 2))
        y = (rng.random(300) < x[:, 0]).astype(float)
        prediction = fit_random_forest(ForestConfig(n_trees=20, seed=0), x, y).predict(rng.random((100, 2)))
        self.assertTrue(((prediction >= 0) & (prediction <= 1)).all())

    def test_without_features(self):
        forest = fit_random_forest(ForestConfig(n_trees=5, seed=0), np.empty((10, 0)), np.arange(10.0))
        self.assertEqual(forest.predict(np.empty((3, 0))).shape, (3,))

    def test_random_state_override(self):
        rng = np.random.default_rng(7)
        x, y = rng.random((100, 2)), rng.random(100)
        learner = RandomForestLearner(ForestConfig(n_trees=5, seed=0))
        np.testing.assert_array_equal(
            learner.fit(x, y, random_state=9).predict(x),
            fit_random_forest(ForestConfig(n_trees=5, seed=9), x, y).predict(x),
        )

    def test_errors(self):
        cfg = ForestConfig(n_trees=2)
        with self.assertRaises(TooFewSamplesError):
            fit_random_forest(cfg, np.ones((1, 1)), np.ones(1))
        with self.assertRaises(NonFiniteInputError):
            fit_random_forest(cfg, np.array([[0.0], [np.nan]]), np.ones(2))
        with self.assertRaises(InvalidParameterError):
            fit_random_forest(ForestConfig(n_trees=2, mtry=3), np.ones((5, 2)), np.ones(5))

    @parameterized.expand([({"n_trees": 0},), ({"min_node_size": 0},), ({"mtry": 0},), ({"bootstrap": 0.0},)])
    def test_invalid_config(self, kwargs):
        with self.assertRaises(InvalidParameterError):
            ForestConfig(**kwargs)

    def test_default_mtry(self):
        self.assertEqual(ForestConfig().resolve_mtry(2), 1)
        self.assertEqual(ForestConfig().resolve_mtry(7), 2)


class SimpleLearnerTest(unittest.TestCase):
    @parameterized.expand([([1.0, 3.0], 2.0), ([0.0, 0.0, 0.0], 0.0), ([5.0], 5.0)])
    def test_mean_learner(self, targets, expected):
        predictor = mean_learner().fit(np.empty((len(targets), 0)), np.array(targets))
        np.testing.assert_array_equal(predictor.predict(np.empty((4, 0))), np.full(4, expected))

    def test_oracle_learner(self):
        sem = appendix_b_sem()
        predictor = oracle_learner(lambda f: sem.g1(f[:, :1], f[:, 1:])).fit(np.zeros((3, 2)), np.zeros(3))
        rows = np.array([[0.2, 0.0], [0.55, 1.0], [0.9, -1.0]])
        np.testing.assert_array_equal(predictor.predict(rows), [2.5, 1.5, 4.0])

    def test_get_learner(self):
        self.assertIsInstance(get_learner("mean"), MeanLearner)
        self.assertEqual(get_learner("forest", n_trees=3).config.n_trees, 3)
        with self.assertRaises(InvalidParameterError):
            get_learner("boosting")


class ClipTest(unittest.TestCase):
    @parameterized.expand([(0.001, 0.01), (0.5, 0.5), (0.9999, 0.99)])
    def test_clip(self, p, expected):
        self.assertAlmostEqual(float(clip_propensity(np.array([p]), eps=0.01)[0]), expected, places=12)

    @parameterized.expand([(0.0,), (0.5,), (-0.1,)])
    def test_invalid_eps(self, eps):
        with self.assertRaises(InvalidParameterError):
            clip_propensity(np.array([0.5]), eps=eps)

    def test_nuisance_triple_counts_clipped(self):
        eta = NuisanceTriple(ConstantPredictor(1.0), ConstantPredictor(0.0), ConstantPredictor(0.999), eps=0.01)
        h, clipped = eta.predict_h(np.zeros((4, 1)), np.zeros((4, 0)))
        np.testing.assert_allclose(h, np.full(4, 0.99))
        self.assertEqual(clipped, 4)


@unittest.skipUnless(os.environ.get("RUN_SLOW"), "slow forest checks, set RUN_SLOW=1")
class ForestScalingTest(unittest.TestCase):
    def test_two_hundred_trees_fit_quickly(self):
        rng = np.random.default_rng(8)
        x = rng.random((800, 2))
        y = step_function(x[:, 0]) + rng.standard_normal(800)
        start = time.perf_counter()
        forest = fit_random_forest(ForestConfig(n_trees=200, seed=0), x, y)
        elapsed = time.perf_counter() - start
        self.assertEqual(len(forest.trees), 200)
        self.assertLess(elapsed, 3.0)

    def test_holdout_error_falls_with_training_size(self):
        medians = []
        for n_train in [500, 1500, 5000]:
            errors = []
            for seed in range(10):
                rng = np.random.default_rng([seed, n_train])
                x_train, x_test = rng.random((n_train, 2)), rng.random((2000, 2))
                y_train = step_function(x_train[:, 0]) + rng.standard_normal(n_train)
                forest = fit_random_forest(ForestConfig(n_trees=50, seed=seed), x_train, y_train)
                errors.append(np.mean((forest.predict(x_test) - step_function(x_test[:, 0])) ** 2))
            medians.append(float(np.median(errors)))
        self.assertGreater(medians[0], medians[1])
        self.assertGreater(medians[1], medians[2])
