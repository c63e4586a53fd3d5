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
from typing import Optional

import numpy as np

from .estimate import make_folds
from .learn import RegressionLearner, clip_propensity
from .simulate import Dataset
from .utils import (
    CrossFitInfeasibleError,
    DegenerateArmsError,
    DimensionMismatchError,
    InvalidParameterError,
    derive_seeds,
)


logger = logging.getLogger(__name__)


def hajek(w: np.ndarray, y: np.ndarray) -> float:
    """Difference between the mean outcome of the treated and the mean outcome of the control units."""
    w = np.asarray(w)
    y = np.asarray(y, dtype=np.float64)
    if w.shape != y.shape or w.ndim != 1:
        raise DimensionMismatchError(
            f"Treatments and outcomes must be vectors of equal length, got {w.shape} and {y.shape}."
        )
    if not np.isin(w, (0, 1)).all():
        raise InvalidParameterError("Treatments must be binary.")
    treated = w == 1
    if treated.all() or not treated.any():
        raise DegenerateArmsError(f"Both arms must be non-empty, got {int(treated.sum())} treated of {w.size} units.")
    return float(y[treated].mean() - y[~treated].mean())


def ipw_crossfit(
    data: Dataset,
    n_folds: int,
    learner: RegressionLearner,
    seed: int,
    eps: float = 0.01,
    min_fit_size: int = 50,
    known_propensity: Optional[float] = None,
) -> float:
    """
    Cross-fitted inverse probability weighting estimator ignoring spillover.

    The propensity is regressed on the confounders only, over the same dependency-aware complements as the doubly
    robust estimator, and clipped to `[eps, 1 - eps]`. The estimate averages over folds the fold means of
    `W Y / e(C) - (1 - W) Y / (1 - e(C))`.

    Arguments:
        data (`Dataset`):
            Observations.
        n_folds (`int`):
            Number of folds.
        learner (`RegressionLearner`):
            Propensity learner.
        seed (`int`):
            Seed of the folds and the learner.
        eps (`float`, *optional*, defaults to 0.01):
            Clipping level.
        min_fit_size (`int`, *optional*, defaults to 50):
            Minimal number of training units in each treatment arm.
        known_propensity (`float`, *optional*):
            Randomization probability replacing the propensity regression.
    """
    fold_seed, *learner_seeds = derive_seeds(seed, 1 + n_folds)
    plan = make_folds(data.n, n_folds, data.dependency_graph, fold_seed)
    w = data.w.astype(np.float64)
    fold_means = []
    for k, (fold, comp) in enumerate(zip(plan.folds, plan.complements)):
        if known_propensity is not None:
            if not 0.0 < known_propensity < 1.0:
                raise InvalidParameterError(f"Known propensity must lie in (0, 1), got {known_propensity}.")
            e = np.full(fold.size, known_propensity)
        else:
            n_treated = int(data.w[comp].sum())
            required = max(1, min_fit_size)
            if n_treated < required or comp.size - n_treated < required:
                raise CrossFitInfeasibleError(
                    f"Complement of {comp.size} units holds {n_treated} treated units, at least {required} per arm "
                    f"are needed (dependency graph d_max = {data.dependency_graph.d_max})."
                )
            fitted = learner.fit(data.c[comp], w[comp], random_state=learner_seeds[k])
            e = clip_propensity(fitted.predict(data.c[fold]), eps)
        terms = w[fold] * data.y[fold] / e - (1.0 - w[fold]) * data.y[fold] / (1.0 - e)
        fold_means.append(terms.mean())
    return float(np.mean(fold_means))
