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
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from .utils import InvalidParameterError, NonFiniteInputError, TooFewSamplesError, derive_rng


logger = logging.getLogger(__name__)


class LearnerKind(Enum):
    FOREST = "forest"
    MEAN = "mean"


SUPPORTED_LEARNERS = set([kind.value for kind in LearnerKind])


class Predictor(ABC):
    @abstractmethod
    def predict(self, features: np.ndarray) -> np.ndarray:
        """Map an `(m, q)` feature matrix to `m` predictions."""


class RegressionLearner(ABC):
    @abstractmethod
    def fit(self, features: np.ndarray, targets: np.ndarray, random_state: Optional[int] = None) -> Predictor:
        """
        Arguments:
            features (`np.ndarray`):
                `(m, q)` training matrix.
            targets (`np.ndarray`):
                `m` training targets.
            random_state (`int`, *optional*):
                Seed overriding the learner's own seed for this fit.
        Returns:
            predictor: fitted `Predictor`.
        """


def _as_matrix(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if features.ndim != 2:
        raise InvalidParameterError(f"Features must be a matrix, got an array with {features.ndim} dimensions.")
    return features


def _check_training_data(features: np.ndarray, targets: np.ndarray, min_rows: int = 2):
    features = _as_matrix(features)
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if features.shape[0] != targets.shape[0]:
        raise InvalidParameterError(f"Got {features.shape[0]} feature rows but {targets.shape[0]} targets.")
    if targets.shape[0] < min_rows:
        raise TooFewSamplesError(f"At least {min_rows} training rows are required, got {targets.shape[0]}.")
    if not (np.isfinite(features).all() and np.isfinite(targets).all()):
        raise NonFiniteInputError("Training data contains NaN or infinite values.")
    return features, targets


class ConstantPredictor(Predictor):
    def __init__(self, value: float):
        self.value = float(value)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.full(_as_matrix(features).shape[0], self.value)


class FunctionPredictor(Predictor):
    """Evaluates a known function row-wise instead of a fitted model."""

    def __init__(self, function: Callable[[np.ndarray], np.ndarray]):
        self.function = function

    def predict(self, features: np.ndarray) -> np.ndarray:
        features = _as_matrix(features)
        return np.asarray(self.function(features), dtype=np.float64).reshape(features.shape[0])


@dataclass(frozen=True)
class ForestConfig:
    """
    Attributes:
        n_trees (`int`, defaults to 500):
            Number of trees.
        min_node_size (`int`, defaults to 5):
            Nodes holding at most this many samples are not split.
        mtry (`int`, *optional*):
            Features tried per split, defaults to `max(1, q // 3)`.
        bootstrap (`float`, defaults to 1.0):
            Size of the with-replacement sample drawn for each tree, as a fraction of the training rows.
        seed (`int`, defaults to 0):
            Seed of the per-tree streams.
        n_jobs (`int`, defaults to 1):
            Number of joblib workers growing trees.
    """

    n_trees: int = 500
    min_node_size: int = 5
    mtry: Optional[int] = None
    bootstrap: float = 1.0
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_trees < 1:
            raise InvalidParameterError(f"n_trees must be at least 1, got {self.n_trees}.")
        if self.min_node_size < 1:
            raise InvalidParameterError(f"min_node_size must be at least 1, got {self.min_node_size}.")
        if self.mtry is not None and self.mtry < 1:
            raise InvalidParameterError(f"mtry must be at least 1, got {self.mtry}.")
        if not 0.0 < self.bootstrap <= 1.0:
            raise InvalidParameterError(f"bootstrap fraction must lie in (0, 1], got {self.bootstrap}.")

    def resolve_mtry(self, n_features: int) -> int:
        mtry = self.mtry if self.mtry is not None else max(1, n_features // 3)
        if n_features and mtry > n_features:
            raise InvalidParameterError(f"mtry={mtry} exceeds the number of features {n_features}.")
        return min(mtry, n_features)


class RegressionTree(Predictor):
    """CART regression tree stored as flat node arrays; `feature == -1` marks a leaf."""

    def __init__(self, feature, threshold, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    def predict(self, features: np.ndarray) -> np.ndarray:
        features = _as_matrix(features)
        node = np.zeros(features.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            current = node[rows]
            go_left = features[rows, self.feature[current]] <= self.threshold[current]
            node[rows] = np.where(go_left, self.left[current], self.right[current])
            active[rows] = self.feature[node[rows]] >= 0
        return self.value[node]


def _level_split(
    xs: np.ndarray,
    ys: np.ndarray,
    starts: np.ndarray,
    seg_id: np.ndarray,
    sizes: np.ndarray,
    totals: np.ndarray,
    allowed: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Best split of every node of a level along one feature.

    `xs` / `ys` hold the feature values and targets of the level's samples grouped by node (segments beginning at
    `starts`) and sorted by `xs` inside each node. Returns, per node, the best variance reduction (`-inf` if the node
    cannot be split along this feature) and the split threshold. Among equal gains the lowest split value wins.
    """
    positions = np.arange(xs.size)
    cumulative = np.cumsum(ys)
    left_sum = cumulative - (cumulative[starts] - ys[starts])[seg_id]
    n_left = (positions - starts[seg_id] + 1).astype(np.float64)
    n_node = sizes[seg_id].astype(np.float64)
    total = totals[seg_id]
    valid = np.append(xs[1:] > xs[:-1], False) & (n_left < n_node) & allowed[seg_id]
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = left_sum ** 2 / n_left + (total - left_sum) ** 2 / (n_node - n_left) - total ** 2 / n_node
    gain = np.where(valid, gain, -np.inf)
    best = np.maximum.reduceat(gain, starts)
    first = np.minimum.reduceat(np.where(gain == best[seg_id], positions, xs.size), starts)
    first = np.minimum(first, xs.size - 2)
    threshold = 0.5 * (xs[first] + xs[first + 1])
    threshold = np.where(threshold >= xs[first + 1], xs[first], threshold)
    return best, threshold


def _grow_tree(features: np.ndarray, targets: np.ndarray, cfg: ForestConfig, seed: int, tree_index: int):
    """
    Grow one tree level by level on a bootstrap sample. Every feature is sorted once; each level then scans all of
    its nodes at once with segmented cumulative sums over the per-feature orders, which stay grouped by node.
    """
    rng = derive_rng(seed, tree_index)
    n, q = features.shape
    sample = rng.integers(n, size=max(1, int(round(cfg.bootstrap * n))))
    x, y = features[sample], targets[sample]
    m = y.size
    mtry = cfg.resolve_mtry(q)

    capacity = 2 * m + 1
    feature = np.full(capacity, -1, dtype=np.int64)
    threshold = np.zeros(capacity)
    left = np.full(capacity, -1, dtype=np.int64)
    right = np.full(capacity, -1, dtype=np.int64)
    value = np.zeros(capacity)
    value[0] = y.mean()
    n_nodes = 1
    if q == 0:
        return RegressionTree(feature[:1], threshold[:1], left[:1], right[:1], value[:1])

    orders = [np.argsort(x[:, f], kind="stable") for f in range(q)]
    node_of = np.zeros(m, dtype=np.int64)
    while orders[0].size:
        # every order lists the active samples grouped by ascending node id, so segments coincide across features
        node_ids = node_of[orders[0]]
        starts = np.flatnonzero(np.append(True, node_ids[1:] != node_ids[:-1]))
        sizes = np.diff(np.append(starts, node_ids.size))
        seg_id = np.repeat(np.arange(starts.size), sizes)
        y_first = y[orders[0]]
        totals = np.add.reduceat(y_first, starts)
        pure = np.maximum.reduceat(y_first, starts) == np.minimum.reduceat(y_first, starts)
        splittable = (sizes > cfg.min_node_size) & ~pure
        # mtry features per node, uniformly without replacement
        ranks = np.argsort(np.argsort(rng.random((starts.size, q)), axis=1), axis=1)
        candidate = ranks < mtry

        best_gain = np.zeros(starts.size)
        best_feature = np.full(starts.size, -1, dtype=np.int64)
        best_threshold = np.zeros(starts.size)
        # ascending features with a strict comparison: ties go to the lowest feature
        for f in range(q):
            gain, thr = _level_split(
                x[orders[f], f], y[orders[f]], starts, seg_id, sizes, totals, splittable & candidate[:, f]
            )
            better = gain > best_gain
            best_gain[better] = gain[better]
            best_feature[better] = f
            best_threshold[better] = thr[better]

        split = best_feature >= 0
        if not split.any():
            break
        parents = node_ids[starts[split]]
        children = n_nodes + 2 * np.arange(parents.size)
        feature[parents] = best_feature[split]
        threshold[parents] = best_threshold[split]
        left[parents] = children
        right[parents] = children + 1
        n_nodes += 2 * parents.size

        first_child = np.full(starts.size, -1, dtype=np.int64)
        first_child[split] = children
        samples = orders[0]
        child_base = first_child[seg_id]
        goes_left = x[samples, np.maximum(best_feature[seg_id], 0)] <= best_threshold[seg_id]
        node_of[samples] = np.where(child_base >= 0, child_base + (~goes_left), -1)

        counts = np.bincount(node_of[samples][child_base >= 0], minlength=n_nodes)
        sums = np.bincount(node_of[samples][child_base >= 0], weights=y[samples][child_base >= 0], minlength=n_nodes)
        new = np.arange(children[0], n_nodes)
        value[new] = sums[new] / counts[new]

        for f in range(q):
            kept = orders[f][node_of[orders[f]] >= 0]
            orders[f] = kept[np.argsort(node_of[kept], kind="stable")]

    return RegressionTree(
        feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]
    )


class RandomForestPredictor(Predictor):
    def __init__(self, trees: List[RegressionTree]):
        self.trees = trees

    def predict(self, features: np.ndarray) -> np.ndarray:
        features = _as_matrix(features)
        total = np.zeros(features.shape[0])
        # accumulate tree by tree so a row's prediction does not depend on the batch it is predicted in
        for tree in self.trees:
            total += tree.predict(features)
        return total / len(self.trees)


def fit_random_forest(cfg: ForestConfig, features: np.ndarray, targets: np.ndarray) -> RandomForestPredictor:
    """
    Grow a regression forest: each tree is fitted on a bootstrap sample, every split maximizes the variance reduction
    among `mtry` uniformly drawn features with thresholds at midpoints between consecutive distinct values.

    Tree `t` draws from a stream derived from `(cfg.seed, t)`, so the fitted forest is bit-identical whether trees are
    grown sequentially or by joblib workers.
    """
    features, targets = _check_training_data(features, targets)
    cfg.resolve_mtry(features.shape[1])
    if cfg.n_jobs == 1:
        trees = [_grow_tree(features, targets, cfg, cfg.seed, t) for t in range(cfg.n_trees)]
    else:
        trees = Parallel(n_jobs=cfg.n_jobs)(
            delayed(_grow_tree)(features, targets, cfg, cfg.seed, t) for t in range(cfg.n_trees)
        )
    return RandomForestPredictor(trees)


class RandomForestLearner(RegressionLearner):
    def __init__(self, config: Optional[ForestConfig] = None):
        self.config = config if config is not None else ForestConfig()

    def __repr__(self):
        return f"{self.__class__.__name__}({self.config})"

    def fit(self, features, targets, random_state=None):
        cfg = self.config
        if random_state is not None:
            cfg = ForestConfig(
                n_trees=cfg.n_trees,
                min_node_size=cfg.min_node_size,
                mtry=cfg.mtry,
                bootstrap=cfg.bootstrap,
                seed=int(random_state),
                n_jobs=cfg.n_jobs,
            )
        return fit_random_forest(cfg, features, targets)


class MeanLearner(RegressionLearner):
    def fit(self, features, targets, random_state=None):
        targets = np.asarray(targets, dtype=np.float64).ravel()
        if targets.size == 0:
            raise TooFewSamplesError("The mean learner needs at least one target.")
        if not np.isfinite(targets).all():
            raise NonFiniteInputError("Training targets contain NaN or infinite values.")
        return ConstantPredictor(targets.mean())


class OracleLearner(RegressionLearner):
    """Ignores the training data and always returns a predictor evaluating `truth`."""

    def __init__(self, truth: Callable[[np.ndarray], np.ndarray]):
        self.truth = truth

    def fit(self, features, targets, random_state=None):
        return FunctionPredictor(self.truth)


def mean_learner() -> MeanLearner:
    return MeanLearner()


def oracle_learner(truth: Callable[[np.ndarray], np.ndarray]) -> OracleLearner:
    return OracleLearner(truth)


def get_learner(kind: str, **forest_kwargs) -> RegressionLearner:
    if kind not in SUPPORTED_LEARNERS:
        raise InvalidParameterError(
            f"Unknown learner `{kind}`. Supported learners are " + ", ".join(sorted(SUPPORTED_LEARNERS))
        )
    if LearnerKind(kind) == LearnerKind.MEAN:
        return mean_learner()
    return RandomForestLearner(ForestConfig(**forest_kwargs))


def clip_propensity(p: np.ndarray, eps: float = 0.01) -> np.ndarray:
    """Clamp propensities to `[eps, 1 - eps]`."""
    if not 0.0 < eps < 0.5:
        raise InvalidParameterError(f"Clipping level must lie in (0, 0.5), got {eps}.")
    return np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)


@dataclass(frozen=True)
class NuisanceTriple:
    """
    Outcome regressions `g1`, `g0` on `(C, X)` and propensity `h` on `(C, Z)`.

    Attributes:
        g1 (`Predictor`), g0 (`Predictor`), h (`Predictor`):
            Fitted or known nuisance functions.
        eps (`float`, *optional*):
            Clipping level applied to propensity predictions. `None` leaves them untouched, as for true nuisances.
    """

    g1: Predictor
    g0: Predictor
    h: Predictor
    eps: Optional[float] = None

    def predict_g1(self, confounders: np.ndarray, x_features: np.ndarray) -> np.ndarray:
        return self.g1.predict(np.hstack([_as_matrix(confounders), _as_matrix(x_features)]))

    def predict_g0(self, confounders: np.ndarray, x_features: np.ndarray) -> np.ndarray:
        return self.g0.predict(np.hstack([_as_matrix(confounders), _as_matrix(x_features)]))

    def predict_h(self, confounders: np.ndarray, z_features: np.ndarray) -> Tuple[np.ndarray, int]:
        """Returns the (clipped) propensities and the number of predictions moved by clipping."""
        raw = self.h.predict(np.hstack([_as_matrix(confounders), _as_matrix(z_features)]))
        if self.eps is None:
            return raw, 0
        clipped = clip_propensity(raw, self.eps)
        return clipped, int((clipped != raw).sum())
