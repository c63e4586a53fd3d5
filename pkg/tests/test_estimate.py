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

import dataclasses
import os
import tempfile
import unittest

import numpy as np
from parameterized import parameterized
from scipy.stats import kurtosis, norm, skew

from netcausal.aipw.estimate import (
    EstimateReport,
    FoldPlan,
    aggregate,
    complement_of,
    cross_fitted_scores,
    degree_strata,
    fit_nuisances,
    make_folds,
    normal_p_value,
    point_estimate,
    run_algorithm1,
    score_phi,
    score_values,
    single_run,
    stratum_effects,
    variance_estimate,
    variance_from_scores,
)
from netcausal.aipw.graph import gen_erdos_renyi, gen_watts_strogatz, new_network
from netcausal.aipw.learn import ConstantPredictor, ForestConfig, NuisanceTriple, RandomForestLearner, mean_learner
from netcausal.aipw.simulate import (
    appendix_b_sem,
    oracle_nuisances,
    simulate,
    true_eate_oracle,
    unit_effects_oracle,
)
from netcausal.aipw.spillover import DependencyGraph, UnitData, derive_dependency_graph, frac_treated_neighbors
from netcausal.aipw.utils import (
    CrossFitInfeasibleError,
    DegeneratePropensityError,
    EmptyRunsError,
    InvalidParameterError,
    derive_seeds,
)


def as_dependency_graph(net):
    return DependencyGraph(net.n, net.to_sparse(bool))


def zero_noise(rng, n):
    return np.zeros(n)


def constant_eta(g1, g0, h, eps=None):
    return NuisanceTriple(ConstantPredictor(g1), ConstantPredictor(g0), ConstantPredictor(h), eps=eps)


class ConstantShift:
    def __init__(self, predictor, shift):
        self.predictor = predictor
        self.shift = shift

    def predict(self, features):
        return self.predictor.predict(features) + self.shift


class FoldTest(unittest.TestCase):
    def test_chain_complement(self):
        graph = derive_dependency_graph(new_network(4, [(0, 1), (1, 2), (2, 3)]), frac_treated_neighbors())
        np.testing.assert_array_equal(complement_of([0], graph), [3])

    def test_empty_graph_complement(self):
        graph = as_dependency_graph(new_network(6, []))
        np.testing.assert_array_equal(complement_of([0, 1], graph), [2, 3, 4, 5])

    def test_complete_graph_complement(self):
        graph = as_dependency_graph(new_network(5, [(i, j) for i in range(5) for j in range(i + 1, 5)]))
        plan = make_folds(5, 2, graph, seed=0)
        for comp in plan.complements:
            self.assertEqual(comp.size, 0)

    @parameterized.expand([(10, 3), (11, 2), (100, 7)])
    def test_partition(self, n, n_folds):
        graph = as_dependency_graph(gen_erdos_renyi(n, 0.05, seed=1))
        plan = make_folds(n, n_folds, graph, seed=2)
        sizes = [fold.size for fold in plan.folds]
        self.assertLessEqual(max(sizes) - min(sizes), 1)
        np.testing.assert_array_equal(np.sort(np.concatenate(plan.folds)), np.arange(n))
        adjacency = graph.to_sparse(bool)
        for k, (fold, comp) in enumerate(zip(plan.folds, plan.complements)):
            self.assertEqual(np.intersect1d(fold, comp).size, 0)
            self.assertEqual(adjacency[fold][:, comp].nnz, 0)
            np.testing.assert_array_equal(plan.fold_of[fold], np.full(fold.size, k))

    @parameterized.expand([(1,), (11,)])
    def test_invalid_fold_count(self, n_folds):
        with self.assertRaises(InvalidParameterError):
            make_folds(10, n_folds, as_dependency_graph(new_network(10, [])), seed=0)

    def test_deterministic(self):
        graph = as_dependency_graph(new_network(30, []))
        first, second = make_folds(30, 4, graph, seed=3), make_folds(30, 4, graph, seed=3)
        for a, b in zip(first.folds, second.folds):
            np.testing.assert_array_equal(a, b)


class ScoreTest(unittest.TestCase):
    @parameterized.expand([(1, 2.6, 2.5), (0, 0.5, 1.0 + 0.5 / 0.6), (1, 2.0, 1.0)])
    def test_score_phi(self, w, y, expected):
        unit = UnitData(w=w, c=np.array([0.3]), x=np.array([0.0]), z=np.zeros(0), y=y)
        self.assertAlmostEqual(score_phi(unit, constant_eta(2.0, 1.0, 0.4)), expected, places=12)

    def test_degenerate_propensity(self):
        unit = UnitData(w=1, c=np.array([0.3]), x=np.array([0.0]), z=np.zeros(0), y=1.0)
        with self.assertRaises(DegeneratePropensityError):
            score_phi(unit, constant_eta(2.0, 1.0, 1.0))

    def test_clipping_prevents_degenerate_propensity(self):
        unit = UnitData(w=1, c=np.array([0.3]), x=np.array([0.0]), z=np.zeros(0), y=1.0)
        self.assertAlmostEqual(score_phi(unit, constant_eta(2.0, 1.0, 1.0, eps=0.01)), 1.0 - 1.0 / 0.99)


class PointEstimateTest(unittest.TestCase):
    sem = dataclasses.replace(appendix_b_sem(), outcome_noise=zero_noise)
    data = simulate(gen_erdos_renyi(100, 0.03, seed=0), sem, seed=1)

    def oracle_plan(self):
        plan = make_folds(100, 4, self.data.dependency_graph, seed=2)
        return plan, [oracle_nuisances(self.sem)] * plan.n_folds

    def test_oracle_zero_noise(self):
        plan, etas = self.oracle_plan()
        expected = np.mean(self.sem.g1(self.data.c, self.data.x) - self.sem.g0(self.data.c, self.data.x))
        self.assertAlmostEqual(point_estimate(self.data, plan, etas), expected, places=12)

    def test_fold_relabelling(self):
        plan, etas = self.oracle_plan()
        relabelled = FoldPlan(plan.folds[::-1], plan.complements[::-1], plan.n_folds - 1 - plan.fold_of)
        self.assertAlmostEqual(point_estimate(self.data, plan, etas), point_estimate(self.data, relabelled, etas))

    def test_single_stratum_effect(self):
        plan, etas = self.oracle_plan()
        strata = [np.arange(100)]
        effects = stratum_effects(self.data, plan, etas, strata)
        self.assertAlmostEqual(float(effects[0]), point_estimate(self.data, plan, etas), places=12)

    def test_scores_cover_every_unit(self):
        plan, etas = self.oracle_plan()
        phi, clip_counts = cross_fitted_scores(self.data, plan, etas)
        self.assertTrue(np.isfinite(phi).all())
        self.assertEqual(clip_counts, [0, 0, 0, 0])


class StrataTest(unittest.TestCase):
    def test_regular_graph(self):
        graph = as_dependency_graph(gen_watts_strogatz(60, 2, 0.0, seed=0))
        strata = degree_strata(graph, min_size=30)
        self.assertEqual(len(strata), 1)
        self.assertEqual(strata[0].size, 60)

    def test_greedy_merge(self):
        # 40 isolated units, then two five-unit paths: four units of degree 1, six of degree 2
        edges = [(40 + 5 * p + k, 41 + 5 * p + k) for p in range(2) for k in range(4)]
        strata = degree_strata(as_dependency_graph(new_network(50, edges)), min_size=10)
        self.assertEqual([s.size for s in strata], [40, 10])
        np.testing.assert_array_equal(strata[0], np.arange(40))

    def test_short_tail_joins_last_stratum(self):
        edges = [(40, 41), (42, 43)]
        strata = degree_strata(as_dependency_graph(new_network(44, edges)), min_size=10)
        self.assertEqual([s.size for s in strata], [44])


class VarianceTest(unittest.TestCase):
    def test_empty_graph_unit_scores(self):
        graph = as_dependency_graph(new_network(2, []))
        sigma2, fallback = variance_from_scores(np.array([1.0, -1.0]), [np.arange(2)], graph)
        self.assertEqual(sigma2, 1.0)
        self.assertFalse(fallback)

    def test_empty_graph_is_plain_variance(self):
        phi = np.random.default_rng(0).normal(size=10000)
        graph = as_dependency_graph(new_network(10000, []))
        sigma2, _ = variance_from_scores(phi, [np.arange(10000)], graph)
        self.assertAlmostEqual(sigma2, float(np.var(phi)), places=10)

    def test_edge_terms(self):
        graph = as_dependency_graph(new_network(4, [(0, 1)]))
        phi = np.array([1.0, 1.0, -1.0, -1.0])
        sigma2, fallback = variance_from_scores(phi, [np.arange(4)], graph)
        self.assertAlmostEqual(sigma2, 1.0 + 2.0 / 4)
        self.assertFalse(fallback)

    def test_negative_estimate_falls_back(self):
        graph = as_dependency_graph(new_network(2, [(0, 1)]))
        sigma2, fallback = variance_from_scores(np.array([1.0, -1.0]), [np.arange(2)], graph)
        self.assertEqual(sigma2, 1.0)
        self.assertTrue(fallback)

    def test_from_nuisances(self):
        sem = appendix_b_sem()
        data = simulate(new_network(120, []), sem, seed=3)
        plan = make_folds(120, 3, data.dependency_graph, seed=0)
        etas = [oracle_nuisances(sem)] * 3
        phi, _ = cross_fitted_scores(data, plan, etas)
        sigma2 = variance_estimate(data, plan, etas, [np.arange(120)], data.dependency_graph)
        self.assertAlmostEqual(sigma2, float(np.var(phi)), places=10)


class InferenceTest(unittest.TestCase):
    def test_p_values(self):
        self.assertEqual(normal_p_value(0.0, 1.0), 1.0)
        self.assertAlmostEqual(normal_p_value(norm.ppf(0.975) * 0.3, 0.3), 0.05, places=9)
        self.assertAlmostEqual(normal_p_value(-1.96, 1.0), 2 * norm.sf(1.96), places=12)

    def test_single_repetition_interval(self):
        theta_hat, p_aggr, (lo, hi) = aggregate([(0.0, 1.0, 1.0)], alpha=0.05, n=1)
        self.assertEqual(theta_hat, 0.0)
        self.assertEqual(p_aggr, 1.0)
        self.assertAlmostEqual(lo, -2.2414, delta=1e-3)
        self.assertAlmostEqual(hi, 2.2414, delta=1e-3)
        quantile = norm.ppf(1 - 0.05 / 4)
        self.assertAlmostEqual(hi - lo, 2 * quantile, places=7)
        self.assertGreater(hi - lo, 2 * norm.ppf(1 - 0.05 / 2))

    def test_identical_runs(self):
        theta_hat, p_aggr, (lo, hi) = aggregate([(0.4, 2.0, 0.2)] * 5, alpha=0.1, n=100)
        self.assertAlmostEqual(theta_hat, 0.4)
        self.assertAlmostEqual(p_aggr, 0.4)
        self.assertAlmostEqual(hi - lo, 2 * norm.ppf(1 - 0.1 / 4) * 0.2, places=7)

    def test_interval_contains_median(self):
        runs = [(0.1, 1.0, 0.5), (0.3, 1.2, 0.4), (0.2, 0.8, 0.6), (0.5, 1.0, 0.3)]
        theta_hat, _, (lo, hi) = aggregate(runs, alpha=0.05, n=25)
        self.assertLessEqual(lo, theta_hat)
        self.assertLessEqual(theta_hat, hi)

    def test_empty_runs(self):
        with self.assertRaises(EmptyRunsError):
            aggregate([], alpha=0.05, n=10)


class CrossFittingTest(unittest.TestCase):
    sem = appendix_b_sem()
    data = simulate(new_network(300, []), sem, seed=11)

    def test_fit_with_forest(self):
        learner = RandomForestLearner(ForestConfig(n_trees=3, seed=0))
        eta = fit_nuisances(self.data, np.arange(150), learner, min_fit_size=10)
        self.assertEqual(eta.eps, 0.01)
        h, _ = eta.predict_h(self.data.c[:5], self.data.z[:5])
        self.assertTrue(((h >= 0.01) & (h <= 0.99)).all())

    def test_known_propensity(self):
        eta = fit_nuisances(self.data, np.arange(300), mean_learner(), known_propensity=0.5, min_fit_size=10)
        h, clipped = eta.predict_h(self.data.c, self.data.z)
        np.testing.assert_array_equal(h, np.full(300, 0.5))
        self.assertEqual(clipped, 0)

    def test_no_treated_units(self):
        controls = np.flatnonzero(self.data.w == 0)
        with self.assertRaises(CrossFitInfeasibleError):
            fit_nuisances(self.data, controls, mean_learner(), min_fit_size=1)

    def test_single_run_is_deterministic(self):
        first = single_run(self.data, 3, mean_learner(), seed=4, min_fit_size=10)
        second = single_run(self.data, 3, mean_learner(), seed=4, min_fit_size=10)
        self.assertEqual(first, second)
        self.assertTrue(np.isfinite(first.theta) and first.sigma > 0)

    def test_one_repetition(self):
        report = run_algorithm1(self.data, 3, 1, 0.05, mean_learner(), seed=9, min_fit_size=10)
        run = single_run(self.data, 3, mean_learner(), seed=derive_seeds(9, 1)[0], min_fit_size=10)
        self.assertEqual(report.per_repetition, [run.as_tuple()])
        self.assertEqual(report.theta_hat, run.theta)
        self.assertEqual(report.diagnostics["failed"], 0)

    def test_report_fields(self):
        report = run_algorithm1(self.data, 3, 4, 0.05, mean_learner(), seed=1, min_fit_size=10, min_stratum_size=10)
        self.assertEqual(len(report.per_repetition), 4)
        self.assertEqual(report.diagnostics["d_max"], 0)
        self.assertEqual(report.diagnostics["stratum_sizes"], [300])
        self.assertEqual(len(report.diagnostics["complement_sizes"]), 4)
        self.assertLessEqual(report.ci[0], report.theta_hat)
        self.assertLessEqual(report.theta_hat, report.ci[1])

    def test_infeasible_cross_fitting_aborts(self):
        dense = simulate(new_network(30, [(i, j) for i in range(30) for j in range(i + 1, 30)]), self.sem, seed=0)
        with self.assertRaises(CrossFitInfeasibleError):
            run_algorithm1(dense, 2, 3, 0.05, mean_learner(), seed=0, min_fit_size=1)

    def test_report_round_trip(self):
        report = run_algorithm1(self.data, 3, 2, 0.05, mean_learner(), seed=2, min_fit_size=10)
        with tempfile.TemporaryDirectory() as tmp_dir:
            path = os.path.join(tmp_dir, "report.yml")
            report.save(path)
            loaded = EstimateReport.load(path)
        self.assertEqual(loaded.theta_hat, report.theta_hat)
        self.assertEqual(loaded.ci, report.ci)
        self.assertEqual(loaded.per_repetition, report.per_repetition)
        self.assertEqual(loaded.diagnostics, report.diagnostics)


@unittest.skipUnless(os.environ.get("RUN_SLOW"), "statistical checks, set RUN_SLOW=1")
class StatisticalPropertiesTest(unittest.TestCase):
    def test_identification_on_example_network(self):
        edges = [(1, 2), (2, 3), (2, 6), (3, 4), (4, 9), (5, 6), (6, 7), (7, 8), (8, 9)]
        net = new_network(9, [(i - 1, j - 1) for i, j in edges])
        sem = appendix_b_sem()
        eta = oracle_nuisances(sem)
        scores = np.empty(100000)
        for r in range(scores.size):
            data = simulate(net, sem, seed=r, dependency_graph=as_dependency_graph(net))
            scores[r] = score_phi(data.unit(5), eta)
        effects, effects_se = unit_effects_oracle(net, sem, reps=100000, seed=123456)
        se = np.hypot(scores.std(ddof=1) / np.sqrt(scores.size), effects_se[5])
        self.assertLess(abs(scores.mean() - effects[5]), 4 * se)

    def _point_estimates(self, eta, seed_offset=0, reps=200):
        sem = appendix_b_sem()
        net = gen_erdos_renyi(2500, 3 / 2500, seed=0)
        graph = derive_dependency_graph(net, sem.feature_spec)
        truth, truth_se = true_eate_oracle(net, sem, reps=2000, seed=77)
        estimates = []
        for r in range(reps):
            data = simulate(net, sem, seed=seed_offset + r, dependency_graph=graph)
            plan = make_folds(data.n, 10, graph, seed=r)
            estimates.append(point_estimate(data, plan, [eta] * 10))
        se = np.hypot(np.std(estimates, ddof=1) / np.sqrt(reps), truth_se)
        return abs(np.mean(estimates) - truth), se

    def test_true_nuisances_are_unbiased(self):
        error, se = self._point_estimates(oracle_nuisances(appendix_b_sem()), seed_offset=1000)
        self.assertLess(error, 3 * se)

    def test_double_robustness_wrong_outcome_model(self):
        oracle = oracle_nuisances(appendix_b_sem())
        eta = NuisanceTriple(g1=ConstantShift(oracle.g1, 0.5), g0=oracle.g0, h=oracle.h, eps=None)
        error, se = self._point_estimates(eta)
        self.assertLess(error, 3 * se)

    def test_double_robustness_wrong_propensity(self):
        oracle = oracle_nuisances(appendix_b_sem())
        eta = NuisanceTriple(g1=oracle.g1, g0=oracle.g0, h=ConstantPredictor(0.5), eps=None)
        error, se = self._point_estimates(eta, seed_offset=2000)
        self.assertLess(error, 3 * se)

    def test_score_is_first_order_insensitive_to_nuisances(self):
        sem = appendix_b_sem()
        net = new_network(10**6, [])
        data = simulate(net, sem, seed=5, dependency_graph=as_dependency_graph(net))
        oracle = oracle_nuisances(sem)
        step = 1e-3
        idx = np.arange(data.n)

        def moved(r):
            return NuisanceTriple(
                g1=ConstantShift(oracle.g1, 0.3 * r),
                g0=ConstantShift(oracle.g0, -0.2 * r),
                h=ConstantShift(oracle.h, 0.1 * r),
                eps=None,
            )

        derivative = (score_values(data, moved(step), idx)[0] - score_values(data, moved(-step), idx)[0]) / (2 * step)
        bound = 5 * derivative.std(ddof=1) / np.sqrt(data.n)
        self.assertLessEqual(abs(derivative.mean()), bound)

        c, x = data.c, data.x
        plug_in = [moved(r).predict_g1(c, x) - moved(r).predict_g0(c, x) for r in (step, -step)]
        plug_in_derivative = np.mean((plug_in[0] - plug_in[1]) / (2 * step))
        self.assertGreater(abs(plug_in_derivative), 10 * bound)

    def test_studentised_estimates_look_gaussian(self):
        sem = appendix_b_sem()
        net = gen_erdos_renyi(2500, 3 / 2500, seed=2)
        graph = derive_dependency_graph(net, sem.feature_spec)
        truth, _ = true_eate_oracle(net, sem, reps=2000, seed=78)
        oracle = oracle_nuisances(sem)
        strata = degree_strata(graph, 30)
        standardised = []
        for r in range(500):
            data = simulate(net, sem, seed=r, dependency_graph=graph)
            plan = make_folds(data.n, 10, graph, seed=r)
            phi, _ = cross_fitted_scores(data, plan, [oracle] * 10)
            theta = np.mean([phi[fold].mean() for fold in plan.folds])
            sigma2, _ = variance_from_scores(phi, strata, graph)
            standardised.append((theta - truth) / np.sqrt(sigma2 / data.n))
        self.assertLess(abs(skew(standardised)), 0.3)
        self.assertLess(abs(kurtosis(standardised, fisher=True)), 0.6)

    def test_fold_count_robustness(self):
        sem = appendix_b_sem()
        net = gen_erdos_renyi(2500, 3 / 2500, seed=3)
        graph = derive_dependency_graph(net, sem.feature_spec)
        learner = RandomForestLearner(ForestConfig(n_trees=25))
        thetas = {5: [], 10: []}
        for r in range(200):
            data = simulate(net, sem, seed=r, dependency_graph=graph)
            for n_folds, values in thetas.items():
                values.append(single_run(data, n_folds, learner, seed=r).theta)
        # standard error of a sample median under normality
        median_se = [1.2533 * np.std(values, ddof=1) / np.sqrt(200) for values in thetas.values()]
        self.assertLess(abs(np.median(thetas[5]) - np.median(thetas[10])), 2 * np.hypot(*median_se))

    def test_variance_consistency(self):
        sem = appendix_b_sem()
        net = gen_erdos_renyi(2500, 3 / 2500, seed=1)
        graph = derive_dependency_graph(net, sem.feature_spec)
        oracle = oracle_nuisances(sem)
        thetas, ses = [], []
        for r in range(200):
            data = simulate(net, sem, seed=r, dependency_graph=graph)
            plan = make_folds(data.n, 10, graph, seed=r)
            phi, _ = cross_fitted_scores(data, plan, [oracle] * 10)
            thetas.append(np.mean([phi[fold].mean() for fold in plan.folds]))
            sigma2, _ = variance_from_scores(phi, degree_strata(graph, 30), graph)
            ses.append(np.sqrt(sigma2 / data.n))
        ratio = np.median(ses) / np.std(thetas, ddof=1)
        self.assertGreaterEqual(ratio, 0.75)
        self.assertLessEqual(ratio, 1.35)
