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

from .baselines import hajek, ipw_crossfit
from .bench import run_experiment, summarize
from .configuration import DensityMode, EstimatorKind, ExperimentConfig, NetworkKind
from .estimate import (
    EstimateReport,
    FoldPlan,
    aggregate,
    degree_strata,
    fit_nuisances,
    make_folds,
    point_estimate,
    run_algorithm1,
    score_phi,
    single_run,
    stratum_effects,
    variance_estimate,
)
from .gate import InterventionVector, estimate_gate, gate_alpha, score_phi_gate
from .graph import Network, gen_erdos_renyi, gen_watts_strogatz, neighbors, new_network, second_neighbors
from .learn import (
    ForestConfig,
    LearnerKind,
    NuisanceTriple,
    RandomForestLearner,
    RegressionLearner,
    clip_propensity,
    fit_random_forest,
    get_learner,
    mean_learner,
    oracle_learner,
)
from .simulate import (
    Dataset,
    SemSpec,
    appendix_b_sem,
    oracle_nuisances,
    simulate,
    true_eate_oracle,
    true_gate_oracle,
)
from .spillover import (
    DependencyGraph,
    FeatureSpec,
    UnitData,
    appendix_b_feature,
    compute_x_features,
    compute_z_features,
    derive_dependency_graph,
    frac_treated_neighbors,
    two_hop_treated_fractions,
)
from .version import __version__
