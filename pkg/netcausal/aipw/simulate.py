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
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import expit
from tqdm import tqdm

from .graph import Network
from .learn import FunctionPredictor, NuisanceTriple
from .spillover import (
    DependencyGraph,
    FeatureSpec,
    UnitData,
    appendix_b_feature,
    compute_x_features,
    compute_z_features,
    derive_dependency_graph,
)
from .utils import FLOAT_FORMAT, DimensionMismatchError, InvalidParameterError, InvalidSemError, derive_rng


logger = logging.getLogger(__name__)

# one stream per structural stage; Z and X are deterministic given the others
_STAGE_C, _STAGE_W, _STAGE_Y = 0, 2, 4


def _as_columns(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return values[:, None] if values.ndim == 1 else values


@dataclass(frozen=True)
class SemSpec:
    """
    Structural equations generating `(C, Z, W, X, Y)` on a network.

    Attributes:
        confounder_sampler (`Callable`):
            `(rng, n) -> (n, p)` i.i.d. confounder draws.
        propensity (`Callable`):
            `(C, Z) -> (n,)` treatment probabilities, which must lie in (0, 1).
        g1 (`Callable`), g0 (`Callable`):
            `(C, X) -> (n,)` outcome regressions of the treated and control arm.
        outcome_noise (`Callable`, *optional*):
            `(rng, n) -> (n,)` centered additive outcome errors. `None` selects the binary model where `Y` is drawn
            from a Bernoulli with mean `g_W(C, X)`.
        feature_spec (`FeatureSpec`):
            Spillover features entering the propensity (`Z`) and the outcome (`X`).
        n_confounders (`int`, defaults to 1):
            Number `p` of confounder columns.
        name (`str`):
            Name used in logs.
    """

    confounder_sampler: Callable[[np.random.Generator, int], np.ndarray]
    propensity: Callable[[np.ndarray, np.ndarray], np.ndarray]
    g1: Callable[[np.ndarray, np.ndarray], np.ndarray]
    g0: Callable[[np.ndarray, np.ndarray], np.ndarray]
    outcome_noise: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None
    feature_spec: FeatureSpec = field(default_factory=FeatureSpec)
    n_confounders: int = 1
    name: str = "custom"

    @property
    def is_binary(self) -> bool:
        return self.outcome_noise is None


@dataclass(frozen=True)
class Dataset:
    """
    Unit-level observations stored column-wise; row `i` of every array belongs to unit `i`.

    Attributes:
        w (`np.ndarray`): `(N,)` binary treatments.
        c (`np.ndarray`): `(N, p)` confounders.
        x (`np.ndarray`): `(N, r)` outcome-side spillover features.
        z (`np.ndarray`): `(N, t)` treatment-side spillover features.
        y (`np.ndarray`): `(N,)` outcomes.
        network (`Network`), dependency_graph (`DependencyGraph`), feature_spec (`FeatureSpec`)
    """

    w: np.ndarray
    c: np.ndarray
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    network: Network
    dependency_graph: DependencyGraph
    feature_spec: FeatureSpec

    def __post_init__(self):
        n = self.network.n
        shapes = {"w": (n,), "y": (n,)}
        for name, expected in shapes.items():
            if getattr(self, name).shape != expected:
                raise DimensionMismatchError(f"`{name}` must have shape {expected}, got {getattr(self, name).shape}.")
        for name in ("c", "x", "z"):
            values = getattr(self, name)
            if values.ndim != 2 or values.shape[0] != n:
                raise DimensionMismatchError(f"`{name}` must have {n} rows, got shape {values.shape}.")
        if self.dependency_graph.n != n:
            raise DimensionMismatchError(f"Dependency graph has {self.dependency_graph.n} units, network has {n}.")

    @property
    def n(self) -> int:
        return self.network.n

    def unit(self, i: int) -> UnitData:
        return UnitData(w=int(self.w[i]), c=self.c[i], x=self.x[i], z=self.z[i], y=float(self.y[i]))

    @property
    def units(self) -> List[UnitData]:
        return [self.unit(i) for i in range(self.n)]


def _draw_design(net: Network, sem: SemSpec, rng_c, rng_w) -> Tuple[np.ndarray, ...]:
    confounders = _as_columns(sem.confounder_sampler(rng_c, net.n))
    if confounders.shape != (net.n, sem.n_confounders):
        raise InvalidSemError(
            f"Confounder sampler returned shape {confounders.shape}, expected ({net.n}, {sem.n_confounders})."
        )
    z = compute_z_features(net, sem.feature_spec, confounders)
    propensity = np.asarray(sem.propensity(confounders, z), dtype=np.float64).reshape(net.n)
    if not ((propensity > 0.0) & (propensity < 1.0)).all():
        bad = propensity[~((propensity > 0.0) & (propensity < 1.0))][0]
        raise InvalidSemError(f"SEM `{sem.name}` produced the propensity {bad}, outside (0, 1).")
    w = (rng_w.random(net.n) < propensity).astype(np.int64)
    x = compute_x_features(net, sem.feature_spec, w, confounders)
    return confounders, z, propensity, w, x


def simulate(
    net: Network, sem: SemSpec, seed: int, dependency_graph: Optional[DependencyGraph] = None
) -> Dataset:
    """
    Draw one dataset by evaluating the structural equations in the order C, Z, W, X, Y.

    Arguments:
        net (`Network`):
            Network on the units.
        sem (`SemSpec`):
            Structural equations.
        seed (`int`):
            Master seed; the confounder, treatment and outcome stages each draw from their own derived stream.
        dependency_graph (`DependencyGraph`, *optional*):
            Precomputed dependency graph of `net` under `sem.feature_spec`, derived when not given.
    Returns:
        data: `Dataset`.
    """
    confounders, z, propensity, w, x = _draw_design(
        net, sem, derive_rng(seed, _STAGE_C), derive_rng(seed, _STAGE_W)
    )
    extreme = int(((propensity < 0.01) | (propensity > 0.99)).sum())
    if extreme:
        logger.warning(f"SEM `{sem.name}`: {extreme} propensities lie outside [0.01, 0.99].")
    mean = np.where(w == 1, sem.g1(confounders, x), sem.g0(confounders, x)).astype(np.float64)
    rng_y = derive_rng(seed, _STAGE_Y)
    if sem.is_binary:
        if not ((mean >= 0.0) & (mean <= 1.0)).all():
            raise InvalidSemError(f"Binary SEM `{sem.name}` has outcome means outside [0, 1].")
        y = (rng_y.random(net.n) < mean).astype(np.float64)
    else:
        y = mean + np.asarray(sem.outcome_noise(rng_y, net.n), dtype=np.float64).reshape(net.n)
    if dependency_graph is None:
        dependency_graph = derive_dependency_graph(net, sem.feature_spec)
    return Dataset(
        w=w,
        c=confounders,
        x=x,
        z=z,
        y=y,
        network=net,
        dependency_graph=dependency_graph,
        feature_spec=sem.feature_spec,
    )


def _appendix_b_g1(confounders, x_features):
    c = _as_columns(confounders)[:, 0]
    return np.where(c < 0.5, 2.5, np.where(c < 0.7, 1.5, 4.0))


def _appendix_b_g0(confounders, x_features):
    c = _as_columns(confounders)[:, 0]
    x = _as_columns(x_features)[:, 0]
    return np.where(c >= 0.4, np.where(x >= 0.2, 0.5, -0.75), np.where(x >= 0.2, 0.25, -0.5))


def _appendix_b_propensity(confounders, z_features):
    return expit(_as_columns(confounders)[:, 0] - 0.25)


def _uniform_confounders(rng, n):
    return rng.random((n, 1))


APPENDIX_B_NOISE_HALF_WIDTH = np.sqrt(0.12) / 2


def _appendix_b_noise(rng, n):
    return rng.uniform(-APPENDIX_B_NOISE_HALF_WIDTH, APPENDIX_B_NOISE_HALF_WIDTH, size=n)


def appendix_b_sem() -> SemSpec:
    """
    Simulation design with one uniform confounder, `h(C) = sigmoid(C - 0.25)`, step-function outcome regressions
    and uniform outcome noise of variance 0.01. `X_i` is the signed mean of the neighbors' confounders.
    """
    return SemSpec(
        confounder_sampler=_uniform_confounders,
        propensity=_appendix_b_propensity,
        g1=_appendix_b_g1,
        g0=_appendix_b_g0,
        outcome_noise=_appendix_b_noise,
        feature_spec=appendix_b_feature(),
        n_confounders=1,
        name="appendix_b",
    )


def oracle_nuisances(sem: SemSpec) -> NuisanceTriple:
    """Predictors evaluating the true `g1`, `g0` and `h` of `sem` on stacked `(C, X)` / `(C, Z)` rows."""
    p = sem.n_confounders
    return NuisanceTriple(
        g1=FunctionPredictor(lambda features: sem.g1(features[:, :p], features[:, p:])),
        g0=FunctionPredictor(lambda features: sem.g0(features[:, :p], features[:, p:])),
        h=FunctionPredictor(lambda features: sem.propensity(features[:, :p], features[:, p:])),
        eps=None,
    )


def _check_reps(reps: int, minimum: int = 100):
    if reps < minimum:
        raise InvalidParameterError(f"Oracle Monte Carlo needs at least {minimum} repetitions, got {reps}.")


def _oracle_draws(net: Network, sem: SemSpec, reps: int, seed: int, verbose: bool):
    for r in tqdm(range(reps), disable=not verbose, desc="oracle"):
        confounders, _, _, w, x = _draw_design(
            net, sem, derive_rng(seed, r, _STAGE_C), derive_rng(seed, r, _STAGE_W)
        )
        yield confounders, w, x


def true_eate_oracle(
    net: Network, sem: SemSpec, reps: int, seed: int, verbose: bool = False
) -> Tuple[float, float]:
    """
    Monte Carlo value of the expected average treatment effect `(1/N) sum_i E[g1(C_i, X_i) - g0(C_i, X_i)]`.

    Each repetition redraws `(C, W, X)` and records the unit average of `g1 - g0`.

    Returns:
        theta (`float`), mc_se (`float`): mean over repetitions and its standard error.
    """
    _check_reps(reps)
    averages = np.empty(reps)
    for r, (confounders, _, x) in enumerate(_oracle_draws(net, sem, reps, seed, verbose)):
        averages[r] = np.mean(sem.g1(confounders, x) - sem.g0(confounders, x))
    return float(averages.mean()), float(averages.std(ddof=1) / np.sqrt(reps))


def unit_effects_oracle(
    net: Network, sem: SemSpec, reps: int, seed: int, verbose: bool = False
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-unit effects `E[g1(C_i, X_i) - g0(C_i, X_i)]` with their Monte Carlo standard errors."""
    _check_reps(reps)
    total = np.zeros(net.n)
    total_sq = np.zeros(net.n)
    for confounders, _, x in _oracle_draws(net, sem, reps, seed, verbose):
        effect = sem.g1(confounders, x) - sem.g0(confounders, x)
        total += effect
        total_sq += effect * effect
    mean = total / reps
    variance = np.maximum(total_sq - reps * mean * mean, 0.0) / (reps - 1)
    return mean, np.sqrt(variance / reps)


def true_gate_oracle(
    net: Network, sem: SemSpec, pi: np.ndarray, reps: int, seed: int, verbose: bool = False
) -> Tuple[float, float]:
    """
    Monte Carlo value of the global effect of intervening with `pi` against `1 - pi`: treatments are set to `pi`
    (resp. `1 - pi`) when building the spillover features, and `(1/N) sum_i E[g1(C_i, X_i^pi) - g0(C_i, X_i^(1-pi))]`
    is averaged over confounder draws.
    """
    _check_reps(reps)
    pi = np.asarray(pi, dtype=np.int64)
    if pi.shape != (net.n,):
        raise DimensionMismatchError(f"Intervention must have shape ({net.n},), got {pi.shape}.")
    averages = np.empty(reps)
    for r in tqdm(range(reps), disable=not verbose, desc="gate oracle"):
        confounders = _as_columns(sem.confounder_sampler(derive_rng(seed, r, _STAGE_C), net.n))
        x_pi = compute_x_features(net, sem.feature_spec, pi, confounders)
        x_flip = compute_x_features(net, sem.feature_spec, 1 - pi, confounders)
        averages[r] = np.mean(sem.g1(confounders, x_pi) - sem.g0(confounders, x_flip))
    return float(averages.mean()), float(averages.std(ddof=1) / np.sqrt(reps))


def _dataset_columns(dims: Tuple[int, int, int]) -> List[str]:
    p, r, t = dims
    return (
        ["unit", "w"]
        + [f"c_{k + 1}" for k in range(p)]
        + [f"x_{k + 1}" for k in range(r)]
        + [f"z_{k + 1}" for k in range(t)]
        + ["y"]
    )


def write_dataset(data: Dataset, path: Union[str, os.PathLike]):
    """Write one row per unit (1-indexed `unit` column) with floats printed to 17 significant digits."""
    frame = pd.DataFrame(
        np.hstack([data.c, data.x, data.z]),
        columns=_dataset_columns((data.c.shape[1], data.x.shape[1], data.z.shape[1]))[2:-1],
    )
    frame.insert(0, "w", data.w.astype(np.int64))
    frame.insert(0, "unit", np.arange(1, data.n + 1))
    frame["y"] = data.y
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Dataset with {data.n} units written to {path}")


def read_dataset(
    path: Union[str, os.PathLike],
    network: Network,
    feature_spec: FeatureSpec,
    dependency_graph: Optional[DependencyGraph] = None,
) -> Dataset:
    """
    Read a dataset written by `write_dataset` for the given network and features.

    The stored spillover features must coincide with the ones recomputed from `(W, C)`.
    """
    frame = pd.read_csv(path, float_precision="round_trip")
    c_cols = [col for col in frame.columns if col.startswith("c_")]
    x_cols = [col for col in frame.columns if col.startswith("x_")]
    z_cols = [col for col in frame.columns if col.startswith("z_")]
    expected = _dataset_columns((len(c_cols), len(x_cols), len(z_cols)))
    if list(frame.columns) != expected or len(frame) != network.n:
        logger.error(f"Unexpected layout in {path}: columns {list(frame.columns)}, {len(frame)} rows")
        raise DimensionMismatchError(
            f"{path} does not hold a dataset for {network.n} units with columns {expected}."
        )
    if not np.array_equal(frame["unit"].to_numpy(), np.arange(1, network.n + 1)):
        raise InvalidParameterError(f"{path}: units must be listed as 1..{network.n} in order.")
    data = Dataset(
        w=frame["w"].to_numpy(dtype=np.int64),
        c=frame[c_cols].to_numpy(dtype=np.float64),
        x=frame[x_cols].to_numpy(dtype=np.float64),
        z=frame[z_cols].to_numpy(dtype=np.float64),
        y=frame["y"].to_numpy(dtype=np.float64),
        network=network,
        dependency_graph=dependency_graph if dependency_graph is not None else derive_dependency_graph(
            network, feature_spec
        ),
        feature_spec=feature_spec,
    )
    if not (
        np.array_equal(compute_x_features(network, feature_spec, data.w, data.c), data.x)
        and np.array_equal(compute_z_features(network, feature_spec, data.c), data.z)
    ):
        raise InvalidParameterError(f"{path}: stored features differ from the ones of spec `{feature_spec.name}`.")
    return data
