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
import logging
import os
import time
from typing import Any, Dict, List, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import norm
from tqdm import tqdm

from .baselines import hajek, ipw_crossfit
from .configuration import DensityMode, EstimatorKind, ExperimentConfig, NetworkKind
from .estimate import run_algorithm1
from .graph import Network, gen_erdos_renyi, gen_watts_strogatz
from .learn import get_learner
from .simulate import SemSpec, appendix_b_sem, simulate, true_eate_oracle
from .spillover import derive_dependency_graph, get_feature_spec
from .utils import (
    FLOAT_FORMAT,
    RESULTS_COLUMNS,
    CrossFitInfeasibleError,
    DegenerateArmsError,
    DegeneratePropensityError,
    InvalidParameterError,
    derive_seeds,
)


logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = [
    "network",
    "density_mode",
    "n",
    "estimator",
    "median_bias",
    "coverage",
    "median_length",
    "log_median_length",
    "n_reps",
    "n_failed",
]

ESTIMATOR_FAILURES = (CrossFitInfeasibleError, DegenerateArmsError, DegeneratePropensityError)


def expected_degree(mode: str, n: int) -> float:
    """Expected degree 3, or `3 N^(1/9)` when the density grows with the sample size."""
    return 3.0 if DensityMode(mode) == DensityMode.CONST else 3.0 * n ** (1.0 / 9.0)


def make_network(kind: str, mode: str, n: int, seed: int, ws_beta: float = 0.05) -> Network:
    degree = expected_degree(mode, n)
    if NetworkKind(kind) == NetworkKind.ERDOS_RENYI:
        return gen_erdos_renyi(n, degree / n, seed)
    # half the degree rounded half up; the constant density gives 2 neighbours per side, i.e. degree 4
    k_side = max(1, int(np.floor(degree / 2 + 0.5)))
    return gen_watts_strogatz(n, k_side, ws_beta, seed)


def experiment_sem(settings: Dict[str, Any]) -> SemSpec:
    spec = get_feature_spec(settings["feature_spec"])
    if spec.x_dim < 1:
        raise InvalidParameterError(f"The simulation design needs at least one X-feature, `{spec.name}` has none.")
    return dataclasses.replace(appendix_b_sem(), feature_spec=spec)


def adaptive_truth(
    net: Network, sem: SemSpec, seed: int, half_width: float, min_reps: int, max_reps: int
) -> Tuple[float, float, int]:
    """
    Oracle effect whose Monte Carlo standard error falls below a tenth of `half_width`, doubling the number of
    oracle repetitions from `min_reps` up to `max_reps`.

    Returns:
        theta (`float`), mc_se (`float`), reps (`int`)
    """
    reps = min_reps
    theta, mc_se = true_eate_oracle(net, sem, reps, seed)
    while mc_se >= 0.1 * half_width and 2 * reps <= max_reps:
        reps *= 2
        theta, mc_se = true_eate_oracle(net, sem, reps, seed)
    if mc_se >= 0.1 * half_width:
        logger.warning(
            f"Oracle standard error {mc_se:.3g} is not below a tenth of the CI half-width {half_width:.3g} "
            f"after {reps} repetitions."
        )
    return theta, mc_se, reps


def _empty_row(settings: Dict[str, Any], n: int, estimator: str, rep: int) -> Dict[str, Any]:
    row = dict.fromkeys(RESULTS_COLUMNS, float("nan"))
    row.update(
        network=settings["network"], density_mode=settings["density_mode"], n=n, estimator=estimator, rep=rep
    )
    row["failed"] = False
    return row


def run_repetition(settings: Dict[str, Any], n: int, rep: int) -> List[Dict[str, Any]]:
    """
    One repetition of the design for `n` units: draw a network and a dataset, run every configured estimator on it
    and attach the oracle effect of that network.
    """
    estimators = settings["estimators"]
    net_seed, data_seed, oracle_seed, *estimator_seeds = derive_seeds(settings["seed"], 3 + len(estimators), n, rep)
    net = make_network(settings["network"], settings["density_mode"], n, net_seed, settings["ws_beta"])
    sem = experiment_sem(settings)
    data = simulate(net, sem, data_seed, dependency_graph=derive_dependency_graph(net, sem.feature_spec))
    learner = get_learner(
        settings["learner"],
        n_trees=settings["n_trees"],
        min_node_size=settings["min_node_size"],
        mtry=settings["mtry"],
        bootstrap=settings["bootstrap"],
    )

    rows = []
    for estimator, seed in zip(estimators, estimator_seeds):
        row = _empty_row(settings, n, estimator, rep)
        start = time.perf_counter()
        try:
            kind = EstimatorKind(estimator)
            if kind == EstimatorKind.NETAIPW:
                report = run_algorithm1(
                    data,
                    settings["folds"],
                    settings["repetitions_per_estimate"],
                    settings["alpha"],
                    learner,
                    seed,
                    eps=settings["eps"],
                    min_fit_size=settings["min_fit_size"],
                    min_stratum_size=settings["min_stratum_size"],
                )
                row.update(
                    theta_hat=report.theta_hat,
                    sigma_hat=report.sigma_hat,
                    p_value=report.p_value,
                    ci_lo=report.ci[0],
                    ci_hi=report.ci[1],
                )
            elif kind == EstimatorKind.HAJEK:
                row["theta_hat"] = hajek(data.w, data.y)
            else:
                row["theta_hat"] = ipw_crossfit(
                    data, settings["folds"], learner, seed, eps=settings["eps"], min_fit_size=settings["min_fit_size"]
                )
        except ESTIMATOR_FAILURES as err:
            logger.warning(f"{estimator} failed on n={n}, rep={rep}: {err}")
            row["failed"] = True
        if settings["record_timing"]:
            row["seconds"] = time.perf_counter() - start
        rows.append(row)

    half_widths = [(r["ci_hi"] - r["ci_lo"]) / 2 for r in rows if np.isfinite(r["ci_hi"] - r["ci_lo"])]
    half_width = min(half_widths) if half_widths else 0.05
    truth, _, _ = adaptive_truth(
        net, sem, oracle_seed, half_width, settings["oracle_min_reps"], settings["oracle_max_reps"]
    )
    for row in rows:
        row["truth"] = truth
    return rows


def run_experiment(cfg: ExperimentConfig, progress: bool = True) -> pd.DataFrame:
    """
    Run the repetition grid `n_list x repetitions`. Every repetition draws its own network and dataset from seeds
    derived from `(seed, N, rep)`; estimator failures are recorded in the `failed` column.

    Returns:
        results: one row per (N, repetition, estimator) with the columns of `RESULTS_COLUMNS`.
    """
    cfg.validate()
    settings = cfg.to_dict()
    tasks = [(n, rep) for n in settings["n_list"] for rep in range(settings["repetitions"])]
    logger.info(
        f"Running {len(tasks)} repetitions of {', '.join(settings['estimators'])} on {settings['network']} networks "
        f"({settings['density_mode']} density)"
    )
    iterator = tqdm(tasks, disable=not progress, desc="bench")
    if settings["n_jobs"] == 1:
        chunks = [run_repetition(settings, n, rep) for n, rep in iterator]
    else:
        chunks = Parallel(n_jobs=settings["n_jobs"])(delayed(run_repetition)(settings, n, rep) for n, rep in iterator)
    results = pd.DataFrame([row for chunk in chunks for row in chunk], columns=RESULTS_COLUMNS)
    n_failed = int(results["failed"].sum())
    if n_failed:
        logger.warning(f"{n_failed} of {len(results)} estimator runs failed")
    return results


def write_results(results: pd.DataFrame, path: Union[str, os.PathLike]):
    results.to_csv(path, index=False, float_format=FLOAT_FORMAT, columns=RESULTS_COLUMNS)
    logger.info(f"{len(results)} result rows written to {path}")


def read_results(path: Union[str, os.PathLike]) -> pd.DataFrame:
    results = pd.read_csv(path, float_precision="round_trip")
    if list(results.columns) != RESULTS_COLUMNS:
        logger.error(f"Unexpected columns in {path}: {list(results.columns)}")
        raise ValueError(f"{path} is not a results table; expected the columns {RESULTS_COLUMNS}.")
    return results


def _interval(group: pd.DataFrame, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
    if group["estimator"].iloc[0] == EstimatorKind.NETAIPW.value:
        return group["ci_lo"].to_numpy(), group["ci_hi"].to_numpy()
    # competitors get intervals from the spread of their estimates across repetitions
    theta = group["theta_hat"].to_numpy()
    half = norm.ppf(1.0 - alpha / 2.0) * (theta.std(ddof=1) if theta.size > 1 else float("nan"))
    return theta - half, theta + half


def summarize(results: pd.DataFrame, alpha: float = 0.05) -> pd.DataFrame:
    """
    Per `(network, density_mode, n, estimator)`: median bias, coverage of the oracle effect, median and log median
    confidence interval length, number of repetitions and of failed ones.
    """
    records = []
    for key, group in results.groupby(["network", "density_mode", "n", "estimator"], sort=True):
        failed = group["failed"].astype(bool)
        ok = group[~failed]
        record = dict(zip(["network", "density_mode", "n", "estimator"], key))
        record.update(n_reps=int(len(group)), n_failed=int(failed.sum()))
        if ok.empty:
            record.update(median_bias=np.nan, coverage=np.nan, median_length=np.nan, log_median_length=np.nan)
        else:
            lo, hi = _interval(ok, alpha)
            truth = ok["truth"].to_numpy()
            median_length = float(np.median(hi - lo))
            record.update(
                median_bias=float(np.median(ok["theta_hat"].to_numpy() - truth)),
                coverage=float(np.mean((lo <= truth) & (truth <= hi))),
                median_length=median_length,
                log_median_length=float(np.log(median_length)) if median_length > 0 else np.nan,
            )
        records.append(record)
    return pd.DataFrame(records, columns=SUMMARY_COLUMNS)
