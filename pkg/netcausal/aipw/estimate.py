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
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from joblib import Parallel, delayed
from scipy import optimize, sparse
from scipy.stats import norm

from .learn import ConstantPredictor, NuisanceTriple, RegressionLearner
from .simulate import Dataset
from .spillover import DependencyGraph, check_degree_assumption
from .utils import (
    CrossFitInfeasibleError,
    DegeneratePropensityError,
    DimensionMismatchError,
    EmptyRunsError,
    InvalidParameterError,
    as_index_array,
    derive_rng,
    derive_seeds,
)


__all__ = [
    "FoldPlan",
    "NuisanceTriple",
    "EstimateReport",
    "RepetitionResult",
    "make_folds",
    "complement_of",
    "fit_nuisances",
    "score_phi",
    "score_values",
    "cross_fitted_scores",
    "point_estimate",
    "degree_strata",
    "stratum_effects",
    "variance_from_scores",
    "variance_estimate",
    "normal_p_value",
    "single_run",
    "aggregate",
    "run_algorithm1",
]

logger = logging.getLogger(__name__)

# (data, eta, idx) -> (score values on idx, number of clipped propensities)
ScoreFunction = Callable[[Dataset, NuisanceTriple, np.ndarray], Tuple[np.ndarray, int]]


@dataclass(frozen=True)
class FoldPlan:
    """
    Attributes:
        folds (`List[np.ndarray]`):
            Disjoint sorted index sets covering `0, ..., N - 1`.
        complements (`List[np.ndarray]`):
            For each fold, the sorted units outside the fold that are not adjacent to it in the dependency graph.
        fold_of (`np.ndarray`):
            Fold index of each unit.
    """

    folds: List[np.ndarray]
    complements: List[np.ndarray]
    fold_of: np.ndarray

    @property
    def n_folds(self) -> int:
        return len(self.folds)


def complement_of(fold: Sequence[int], graph: DependencyGraph) -> np.ndarray:
    """Units neither in `fold` nor adjacent to a unit of `fold` in the dependency graph."""
    fold = as_index_array(fold, graph.n)
    keep = np.ones(graph.n, dtype=bool)
    keep[fold] = False
    keep[graph.to_sparse(bool)[fold].indices] = False
    return np.flatnonzero(keep)


def make_folds(n: int, n_folds: int, graph: DependencyGraph, seed: int) -> FoldPlan:
    """
    Randomly partition the units into `n_folds` sets whose sizes differ by at most one and derive their complements.
    """
    if graph.n != n:
        raise DimensionMismatchError(f"Dependency graph has {graph.n} units, expected {n}.")
    if not 2 <= n_folds <= n:
        raise InvalidParameterError(f"The number of folds must lie in [2, {n}], got {n_folds}.")
    permutation = derive_rng(seed).permutation(n)
    folds = [np.sort(chunk) for chunk in np.array_split(permutation, n_folds)]
    fold_of = np.empty(n, dtype=np.int64)
    for k, fold in enumerate(folds):
        fold_of[fold] = k
    return FoldPlan(folds=folds, complements=[complement_of(fold, graph) for fold in folds], fold_of=fold_of)


def fit_nuisances(
    data: Dataset,
    comp: Sequence[int],
    learner: RegressionLearner,
    known_propensity: Optional[float] = None,
    min_fit_size: int = 50,
    eps: Optional[float] = 0.01,
    seeds: Sequence[Optional[int]] = (None, None, None),
) -> NuisanceTriple:
    """
    Fit the outcome regressions on the treated, resp. control, units of `comp` over `(C, X)` and the propensity on
    all of `comp` over `(C, Z)`.

    Arguments:
        data (`Dataset`):
            Observations.
        comp (`Sequence[int]`):
            Training units, usually the complement of a fold.
        learner (`RegressionLearner`):
            Learner used for the three regressions.
        known_propensity (`float`, *optional*):
            Randomization probability replacing the propensity regression.
        min_fit_size (`int`, *optional*, defaults to 50):
            Minimal number of training units in each treatment arm.
        eps (`float`, *optional*, defaults to 0.01):
            Clipping level of the fitted propensity.
        seeds (`Sequence[int]`, *optional*):
            Learner seeds of the `g1`, `g0` and `h` fits.
    Returns:
        eta: `NuisanceTriple`.
    """
    comp = as_index_array(comp, data.n)
    treated = comp[data.w[comp] == 1]
    control = comp[data.w[comp] == 0]
    required = max(1, min_fit_size)
    if treated.size < required or control.size < required:
        raise CrossFitInfeasibleError(
            f"Complement of {comp.size} units holds {treated.size} treated and {control.size} control units, "
            f"at least {required} of each are needed (dependency graph d_max = {data.dependency_graph.d_max}). "
            "Reduce the network density or the number of folds."
        )
    g_features = np.hstack([data.c, data.x])
    g1 = learner.fit(g_features[treated], data.y[treated], random_state=seeds[0])
    g0 = learner.fit(g_features[control], data.y[control], random_state=seeds[1])
    if known_propensity is not None:
        if not 0.0 < known_propensity < 1.0:
            raise InvalidParameterError(f"Known propensity must lie in (0, 1), got {known_propensity}.")
        return NuisanceTriple(g1=g1, g0=g0, h=ConstantPredictor(known_propensity), eps=None)
    h = learner.fit(np.hstack([data.c, data.z])[comp], data.w[comp], random_state=seeds[2])
    return NuisanceTriple(g1=g1, g0=g0, h=h, eps=eps)


def _aipw(g1, g0, h, w, y):
    if ((h <= 0.0) | (h >= 1.0)).any():
        raise DegeneratePropensityError("A propensity of exactly 0 or 1 reached the score; enable clipping.")
    return g1 - g0 + w / h * (y - g1) - (1 - w) / (1 - h) * (y - g0)


def score_values(data: Dataset, eta: NuisanceTriple, idx: Sequence[int]) -> Tuple[np.ndarray, int]:
    """Doubly robust scores of the units `idx` under `eta`, with the number of clipped propensities."""
    idx = as_index_array(idx, data.n)
    c, x = data.c[idx], data.x[idx]
    h, clipped = eta.predict_h(c, data.z[idx])
    values = _aipw(eta.predict_g1(c, x), eta.predict_g0(c, x), h, data.w[idx].astype(np.float64), data.y[idx])
    return values, clipped


def score_phi(unit, eta: NuisanceTriple) -> float:
    """
    Score of a single unit record:
    `g1 - g0 + W / h * (Y - g1) - (1 - W) / (1 - h) * (Y - g0)` with the nuisances evaluated at the record.
    """
    c, x, z = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (unit.c, unit.x, unit.z))
    h, _ = eta.predict_h(c, z)
    values = _aipw(eta.predict_g1(c, x), eta.predict_g0(c, x), h, np.array([float(unit.w)]), np.array([unit.y]))
    return float(values[0])


def cross_fitted_scores(
    data: Dataset, plan: FoldPlan, etas: Sequence[NuisanceTriple], score_fn: ScoreFunction = score_values
) -> Tuple[np.ndarray, List[int]]:
    """Score of every unit under the nuisances fitted away from its fold, plus the clip count of each fold."""
    if len(etas) != plan.n_folds:
        raise DimensionMismatchError(f"Got {len(etas)} nuisance fits for {plan.n_folds} folds.")
    phi = np.empty(data.n)
    clip_counts = []
    for fold, eta in zip(plan.folds, etas):
        phi[fold], clipped = score_fn(data, eta, fold)
        clip_counts.append(int(clipped))
    return phi, clip_counts


def _fold_average(phi: np.ndarray, plan: FoldPlan) -> float:
    return float(np.mean([phi[fold].mean() for fold in plan.folds]))


def point_estimate(
    data: Dataset, plan: FoldPlan, etas: Sequence[NuisanceTriple], score_fn: ScoreFunction = score_values
) -> float:
    """Cross-fitting estimator: the average over folds of the mean score in each fold."""
    phi, _ = cross_fitted_scores(data, plan, etas, score_fn)
    return _fold_average(phi, plan)


def degree_strata(graph: DependencyGraph, min_size: int = 30) -> List[np.ndarray]:
    """
    Group the units by dependency-graph degree. Degree classes are visited in ascending order and merged until the
    running group reaches `min_size` units; a short trailing group joins the last closed stratum.
    """
    degrees = graph.degrees
    strata: List[np.ndarray] = []
    pending: List[np.ndarray] = []
    for d in np.unique(degrees):
        pending.append(np.flatnonzero(degrees == d))
        if sum(part.size for part in pending) >= min_size:
            strata.append(np.sort(np.concatenate(pending)))
            pending = []
    if pending:
        leftover = np.concatenate(pending)
        if strata:
            strata[-1] = np.sort(np.concatenate([strata[-1], leftover]))
        else:
            strata.append(np.sort(leftover))
    return strata


def _stratum_means(phi: np.ndarray, strata: Sequence[np.ndarray]) -> np.ndarray:
    return np.array([phi[stratum].mean() for stratum in strata])


def stratum_effects(
    data: Dataset,
    plan: FoldPlan,
    etas: Sequence[NuisanceTriple],
    strata: Sequence[np.ndarray],
    score_fn: ScoreFunction = score_values,
) -> np.ndarray:
    phi, _ = cross_fitted_scores(data, plan, etas, score_fn)
    return _stratum_means(phi, strata)


def variance_from_scores(
    phi: np.ndarray, strata: Sequence[np.ndarray], graph: DependencyGraph
) -> Tuple[float, bool]:
    """
    Variance estimate from cross-fitted scores: with `psi_i = phi_i - theta_d(i)` centered by the stratum effects,
    `(1/N) sum_i psi_i^2 + (2/N) sum_{ij in E_D} psi_i psi_j`.

    Returns:
        sigma2 (`float`), fallback (`bool`): the estimate and whether the non-positive full estimate was replaced by
        its diagonal part.
    """
    psi = np.asarray(phi, dtype=np.float64).copy()
    for stratum, effect in zip(strata, _stratum_means(phi, strata)):
        psi[stratum] -= effect
    n = psi.size
    diagonal = float(psi @ psi) / n
    adjacency = sparse.csr_matrix(graph.to_sparse(np.float64))
    sigma2 = diagonal + float(psi @ (adjacency @ psi)) / n
    if sigma2 <= 0.0:
        logger.warning(f"Variance estimate {sigma2:.3g} is not positive, falling back to the diagonal term.")
        return diagonal, True
    return sigma2, False


def variance_estimate(
    data: Dataset,
    plan: FoldPlan,
    etas: Sequence[NuisanceTriple],
    strata: Sequence[np.ndarray],
    graph: DependencyGraph,
    score_fn: ScoreFunction = score_values,
) -> float:
    phi, _ = cross_fitted_scores(data, plan, etas, score_fn)
    return variance_from_scores(phi, strata, graph)[0]


def normal_p_value(theta: float, se: float) -> float:
    """Two-sided p-value `2 (1 - Phi(|theta| / se))`, capped at 1."""
    if se == 0.0:
        return 1.0 if theta == 0.0 else 0.0
    return float(min(1.0, 2.0 * norm.sf(abs(theta) / se)))


@dataclass(frozen=True)
class RepetitionResult:
    theta: float
    sigma: float
    p_value: float
    clip_count: int = 0
    variance_fallback: bool = False
    complement_sizes: Tuple[int, ...] = ()

    def as_tuple(self) -> Tuple[float, float, float]:
        return self.theta, self.sigma, self.p_value


def single_run(
    data: Dataset,
    n_folds: int,
    learner: RegressionLearner,
    seed: int,
    known_propensity: Optional[float] = None,
    eps: Optional[float] = 0.01,
    min_fit_size: int = 50,
    min_stratum_size: int = 30,
    score_fn: ScoreFunction = score_values,
) -> RepetitionResult:
    """
    One repetition: draw folds, fit the nuisances on each fold's complement, then compute the point estimate, the
    variance estimate and the two-sided normal p-value with standard error `sigma / sqrt(N)`.
    """
    fold_seed, *learner_seeds = derive_seeds(seed, 1 + 3 * n_folds)
    plan = make_folds(data.n, n_folds, data.dependency_graph, fold_seed)
    etas = [
        fit_nuisances(
            data,
            comp,
            learner,
            known_propensity=known_propensity,
            min_fit_size=min_fit_size,
            eps=eps,
            seeds=learner_seeds[3 * k : 3 * k + 3],
        )
        for k, comp in enumerate(plan.complements)
    ]
    phi, clip_counts = cross_fitted_scores(data, plan, etas, score_fn)
    theta = _fold_average(phi, plan)
    strata = degree_strata(data.dependency_graph, min_stratum_size)
    sigma2, fallback = variance_from_scores(phi, strata, data.dependency_graph)
    sigma = float(np.sqrt(sigma2))
    return RepetitionResult(
        theta=theta,
        sigma=sigma,
        p_value=normal_p_value(theta, sigma / np.sqrt(data.n)),
        clip_count=int(sum(clip_counts)),
        variance_fallback=fallback,
        complement_sizes=tuple(int(comp.size) for comp in plan.complements),
    )


def _median_statistic(thetas: np.ndarray, ses: np.ndarray) -> Callable[[float], float]:
    def statistic(theta: float) -> float:
        distance = np.abs(thetas - theta)
        safe = np.where(ses > 0, ses, 1.0)
        ratio = np.where(ses > 0, distance / safe, np.where(distance > 0, np.inf, 0.0))
        return float(np.median(ratio))

    return statistic


def aggregate(
    runs: Sequence[Tuple[float, float, float]], alpha: float, n: int
) -> Tuple[float, float, Tuple[float, float]]:
    """
    Combine repetitions into the median estimate, the doubled median p-value and a confidence interval.

    The interval collects the `theta` for which `median_b |theta_b - theta| / se_b <= q` with
    `q = Phi^-1(1 - alpha / 4)`; its endpoints are found by bisection on both sides of the minimizer of that
    quasiconvex function.

    Arguments:
        runs (`Sequence[Tuple[float, float, float]]`):
            `(theta_b, sigma_b, p_b)` of each repetition.
        alpha (`float`):
            Level of the interval.
        n (`int`):
            Number of units, turning `sigma_b` into `se_b = sigma_b / sqrt(n)`.
    Returns:
        theta_hat (`float`), p_aggr (`float`), ci (`Tuple[float, float]`)
    """
    if len(runs) == 0:
        raise EmptyRunsError("Cannot aggregate an empty list of repetitions.")
    if not 0.0 < alpha < 1.0:
        raise InvalidParameterError(f"alpha must lie in (0, 1), got {alpha}.")
    values = np.asarray(runs, dtype=np.float64).reshape(-1, 3)
    thetas, ses = values[:, 0], values[:, 1] / np.sqrt(n)
    theta_hat = float(np.median(thetas))
    p_aggr = float(min(1.0, 2.0 * np.median(values[:, 2])))

    statistic = _median_statistic(thetas, ses)
    candidates = list(thetas)
    if thetas.min() < thetas.max():
        candidates.append(optimize.minimize_scalar(statistic, bounds=(thetas.min(), thetas.max()), method="bounded").x)
    center = min(candidates, key=statistic)
    quantile = norm.ppf(1.0 - alpha / 4.0)
    if statistic(center) > quantile:
        logger.warning("No parameter value is accepted by the aggregated test; the interval is empty.")
        return theta_hat, p_aggr, (float("nan"), float("nan"))
    if ses.max() == 0.0:
        return theta_hat, p_aggr, (float(center), float(center))

    reach = 20.0 * ses.max()
    xtol = 1e-9 * max(1.0, abs(theta_hat))

    def excess(theta):
        return statistic(theta) - quantile

    lo = optimize.bisect(excess, thetas.min() - reach, center, xtol=xtol)
    hi = optimize.bisect(excess, center, thetas.max() + reach, xtol=xtol)
    return theta_hat, p_aggr, (float(lo), float(hi))


@dataclass
class EstimateReport:
    """
    Result of the repeated cross-fitting procedure.

    Attributes:
        theta_hat (`float`): median of the per-repetition estimates.
        sigma_hat (`float`): median of the per-repetition `sigma_b`.
        p_value (`float`): aggregated p-value of the null of no effect.
        ci (`Tuple[float, float]`): confidence interval at level `alpha`.
        per_repetition (`List[Tuple[float, float, float]]`): `(theta_b, sigma_b, p_b)` of the successful repetitions.
        diagnostics (`Dict[str, Any]`): dependency-graph, fold and clipping statistics.
        alpha (`float`), estimand (`str`), n (`int`)
    """

    theta_hat: float
    sigma_hat: float
    p_value: float
    ci: Tuple[float, float]
    per_repetition: List[Tuple[float, float, float]] = field(default_factory=list)
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    alpha: float = 0.05
    estimand: str = "eate"
    n: int = 0

    @property
    def se_hat(self) -> float:
        return self.sigma_hat / np.sqrt(self.n) if self.n else float("nan")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "estimand": self.estimand,
            "n": int(self.n),
            "alpha": float(self.alpha),
            "theta_hat": float(self.theta_hat),
            "sigma_hat": float(self.sigma_hat),
            "p_value": float(self.p_value),
            "ci_lo": float(self.ci[0]),
            "ci_hi": float(self.ci[1]),
            "per_repetition": [
                {"theta": float(t), "sigma": float(s), "p_value": float(p)} for t, s, p in self.per_repetition
            ],
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "EstimateReport":
        return cls(
            theta_hat=values["theta_hat"],
            sigma_hat=values["sigma_hat"],
            p_value=values["p_value"],
            ci=(values["ci_lo"], values["ci_hi"]),
            per_repetition=[(r["theta"], r["sigma"], r["p_value"]) for r in values.get("per_repetition", [])],
            diagnostics=values.get("diagnostics", {}),
            alpha=values.get("alpha", 0.05),
            estimand=values.get("estimand", "eate"),
            n=values.get("n", 0),
        )

    def save(self, path: Union[str, os.PathLike]):
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)
        logger.info(f"Estimate report written to {path}")

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "EstimateReport":
        with open(path, "r") as f:
            return cls.from_dict(yaml.safe_load(f))


def _guarded_run(*args, **kwargs):
    try:
        return single_run(*args, **kwargs)
    except CrossFitInfeasibleError as err:
        return err


def run_algorithm1(
    data: Dataset,
    n_folds: int,
    n_repetitions: int,
    alpha: float,
    learner: RegressionLearner,
    seed: int,
    known_propensity: Optional[float] = None,
    eps: Optional[float] = 0.01,
    min_fit_size: int = 50,
    min_stratum_size: int = 30,
    n_jobs: int = 1,
    score_fn: ScoreFunction = score_values,
    estimand: str = "eate",
) -> EstimateReport:
    """
    Repeat the cross-fitting procedure `n_repetitions` times with seeds derived from `seed` and aggregate.

    Repetitions whose folds leave too few training units are dropped; more than half of them failing aborts with
    the first `CrossFitInfeasibleError`.

    Arguments:
        data (`Dataset`):
            Observations.
        n_folds (`int`):
            Number of cross-fitting folds `K`.
        n_repetitions (`int`):
            Number of repetitions `B`.
        alpha (`float`):
            Level of the confidence interval.
        learner (`RegressionLearner`):
            Learner of the nuisance functions.
        seed (`int`):
            Master seed.
        known_propensity (`float`, *optional*):
            Randomization probability used instead of a fitted propensity.
        eps (`float`, *optional*, defaults to 0.01):
            Propensity clipping level.
        min_fit_size (`int`, *optional*, defaults to 50):
            Minimal training units per treatment arm.
        min_stratum_size (`int`, *optional*, defaults to 30):
            Minimal size of a degree stratum.
        n_jobs (`int`, *optional*, defaults to 1):
            Number of joblib workers running repetitions.
        score_fn (`Callable`, *optional*):
            Score evaluated on each fold, the doubly robust score by default.
        estimand (`str`, *optional*, defaults to `"eate"`):
            Label stored in the report.
    Returns:
        report: `EstimateReport`.
    """
    if n_repetitions < 1:
        raise InvalidParameterError(f"The number of repetitions must be at least 1, got {n_repetitions}.")
    d_max, bound, ok = check_degree_assumption(data.dependency_graph)
    seeds = derive_seeds(seed, n_repetitions)
    kwargs = dict(
        known_propensity=known_propensity,
        eps=eps,
        min_fit_size=min_fit_size,
        min_stratum_size=min_stratum_size,
        score_fn=score_fn,
    )
    logger.info(f"Running {n_repetitions} repetitions of {n_folds}-fold cross-fitting on {data.n} units")
    if n_jobs == 1:
        outcomes = [_guarded_run(data, n_folds, learner, s, **kwargs) for s in seeds]
    else:
        outcomes = Parallel(n_jobs=n_jobs)(delayed(_guarded_run)(data, n_folds, learner, s, **kwargs) for s in seeds)

    failures = [o for o in outcomes if isinstance(o, CrossFitInfeasibleError)]
    runs = [o for o in outcomes if isinstance(o, RepetitionResult)]
    if len(failures) > n_repetitions / 2:
        logger.error(f"{len(failures)} of {n_repetitions} repetitions could not be cross-fitted")
        raise failures[0]
    if failures:
        logger.warning(f"{len(failures)} of {n_repetitions} repetitions failed and were dropped: {failures[0]}")
    clip_counts = [r.clip_count for r in runs]
    if any(clip_counts):
        logger.warning(f"Propensity clipping moved {sum(clip_counts)} predictions over {len(runs)} repetitions.")

    theta_hat, p_value, ci = aggregate([r.as_tuple() for r in runs], alpha, data.n)
    diagnostics = {
        "d_max": int(d_max),
        "degree_bound": float(bound),
        "degree_assumption_ok": bool(ok),
        "stratum_sizes": [int(s.size) for s in degree_strata(data.dependency_graph, min_stratum_size)],
        "complement_sizes": [list(r.complement_sizes) for r in runs],
        "clip_counts": clip_counts,
        "variance_fallbacks": int(sum(r.variance_fallback for r in runs)),
        "failed": len(failures),
    }
    return EstimateReport(
        theta_hat=theta_hat,
        sigma_hat=float(np.median([r.sigma for r in runs])),
        p_value=p_value,
        ci=ci,
        per_repetition=[r.as_tuple() for r in runs],
        diagnostics=diagnostics,
        alpha=alpha,
        estimand=estimand,
        n=data.n,
    )
