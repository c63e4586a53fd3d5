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

import logging
import os
from dataclasses import dataclass
from functools import partial
from typing import Optional, Tuple, Union

import numpy as np

from .estimate import EstimateReport, run_algorithm1
from .learn import NuisanceTriple, RegressionLearner
from .simulate import Dataset
from .spillover import DependencyGraph, compute_x_features
from .utils import AlphaTooLargeError, DegeneratePropensityError, DimensionMismatchError, InvalidParameterError


logger = logging.getLogger(__name__)

ALL_ONES = "all-ones"
ALL_ZEROS = "all-zeros"


@dataclass(frozen=True)
class InterventionVector:
    """Binary treatment assignment imposed on every unit."""

    pi: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi)
        if pi.ndim != 1 or not np.isin(pi, (0, 1)).all():
            raise InvalidParameterError("An intervention must be a vector of 0/1 entries.")
        object.__setattr__(self, "pi", pi.astype(np.int64))

    @property
    def n(self) -> int:
        return int(self.pi.size)

    def flipped(self) -> "InterventionVector":
        return InterventionVector(1 - self.pi)

    @classmethod
    def all_ones(cls, n: int) -> "InterventionVector":
        return cls(np.ones(n, dtype=np.int64))

    @classmethod
    def all_zeros(cls, n: int) -> "InterventionVector":
        return cls(np.zeros(n, dtype=np.int64))

    @classmethod
    def from_file(cls, path: Union[str, os.PathLike], n: Optional[int] = None) -> "InterventionVector":
        """Read whitespace-separated 0/1 entries, one per unit in unit order."""
        with open(path, "r") as f:
            tokens = f.read().split()
        try:
            values = np.array([int(token) for token in tokens], dtype=np.int64)
        except ValueError:
            logger.error(f"Intervention file {path} holds non-integer entries")
            raise InvalidParameterError(f"{path}: intervention entries must be 0 or 1.")
        if n is not None and values.size != n:
            raise DimensionMismatchError(f"{path} holds {values.size} entries for {n} units.")
        return cls(values)

    @classmethod
    def parse(cls, value: str, n: int) -> "InterventionVector":
        """`"all-ones"`, `"all-zeros"` or the path of a file read with `from_file`."""
        if value == ALL_ONES:
            return cls.all_ones(n)
        if value == ALL_ZEROS:
            return cls.all_zeros(n)
        return cls.from_file(value, n)


def gate_alpha(graph: DependencyGraph, i: int) -> np.ndarray:
    """Unit `i` together with its dependency-graph neighbors, sorted."""
    return np.sort(np.append(graph.neighbor_array(i), i))


def _check_cap(graph: DependencyGraph, l_cap: int):
    if graph.d_max + 1 > l_cap:
        raise AlphaTooLargeError(
            f"A unit shares the dependency graph with {graph.d_max} others; the weight products are capped at "
            f"{l_cap} factors."
        )


def gate_score_values(
    data: Dataset,
    eta: NuisanceTriple,
    idx: np.ndarray,
    pi: np.ndarray,
    graph: Optional[DependencyGraph] = None,
    l_cap: int = 20,
) -> Tuple[np.ndarray, int]:
    """
    Global-effect scores of the units `idx`:
    `g1(C_i, X_i^pi) - g0(C_i, X_i^(1-pi)) + P1_i (Y_i - g1(C_i, X_i)) - P0_i (Y_i - g0(C_i, X_i))` where `P1_i`
    (resp. `P0_i`) multiplies `W_j / h_j` (resp. `(1 - W_j) / (1 - h_j)`) over `i` and its dependency-graph
    neighbors. Counterfactual features use the intervention in place of the observed treatments.
    """
    graph = graph if graph is not None else data.dependency_graph
    pi = np.asarray(pi, dtype=np.int64)
    if pi.shape != (data.n,):
        raise DimensionMismatchError(f"Intervention must have shape ({data.n},), got {pi.shape}.")
    idx = np.asarray(idx, dtype=np.int64)
    h, _ = eta.predict_h(data.c, data.z)
    clipped = 0 if eta.eps is None else int(((h[idx] <= eta.eps) | (h[idx] >= 1.0 - eta.eps)).sum())
    w = data.w.astype(np.float64)
    treated_ratio = w / h
    control_ratio = (1 - w) / (1 - h)

    c, x, y = data.c[idx], data.x[idx], data.y[idx]
    x_pi = compute_x_features(data.network, data.feature_spec, pi, data.c)[idx]
    x_flip = compute_x_features(data.network, data.feature_spec, 1 - pi, data.c)[idx]
    treated_weight = np.empty(idx.size)
    control_weight = np.empty(idx.size)
    for row, i in enumerate(idx):
        units = gate_alpha(graph, int(i))
        if units.size > l_cap:
            raise AlphaTooLargeError(f"Unit {i} has |alpha(i)| = {units.size} > {l_cap}.")
        if ((h[units] <= 0.0) | (h[units] >= 1.0)).any():
            raise DegeneratePropensityError(f"A propensity of exactly 0 or 1 reached the score of unit {i}.")
        treated_weight[row] = np.prod(treated_ratio[units])
        control_weight[row] = np.prod(control_ratio[units])
    g1_pi = eta.predict_g1(c, x_pi)
    g0_flip = eta.predict_g0(c, x_flip)
    g1, g0 = eta.predict_g1(c, x), eta.predict_g0(c, x)
    values = g1_pi - g0_flip + treated_weight * (y - g1) - control_weight * (y - g0)
    return values, clipped


def score_phi_gate(
    i: int,
    data: Dataset,
    eta: NuisanceTriple,
    pi: InterventionVector,
    graph: DependencyGraph,
    l_cap: int = 20,
) -> float:
    values, _ = gate_score_values(data, eta, np.array([i]), pi.pi, graph=graph, l_cap=l_cap)
    return float(values[0])


def estimate_gate(
    data: Dataset,
    n_folds: int,
    n_repetitions: int,
    alpha: float,
    learner: RegressionLearner,
    pi: InterventionVector,
    seed: int,
    l_cap: int = 20,
    **kwargs,
) -> EstimateReport:
    """
    Estimate the global effect of `pi` against `1 - pi` with the repeated cross-fitting procedure, the variance
    estimator and the aggregation used for the expected average treatment effect.

    Arguments:
        l_cap (`int`, *optional*, defaults to 20):
            Maximal size of the sets over which propensity ratios are multiplied.
        kwargs:
            Forwarded to `run_algorithm1` (`known_propensity`, `eps`, `min_fit_size`, `min_stratum_size`, `n_jobs`).
    """
    if pi.n != data.n:
        raise DimensionMismatchError(f"Intervention covers {pi.n} units, the dataset {data.n}.")
    _check_cap(data.dependency_graph, l_cap)
    score_fn = partial(gate_score_values, pi=pi.pi, graph=data.dependency_graph, l_cap=l_cap)
    return run_algorithm1(
        data, n_folds, n_repetitions, alpha, learner, seed, score_fn=score_fn, estimand="gate", **kwargs
    )
