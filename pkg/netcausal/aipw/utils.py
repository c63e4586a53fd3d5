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
from typing import List, Sequence

import numpy as np


logger = logging.getLogger(__name__)


CONFIG_NAME = "netaipw.yml"
REPORT_NAME = "estimate_report.yml"
RESULTS_COLUMNS = [
    "network",
    "density_mode",
    "n",
    "estimator",
    "rep",
    "theta_hat",
    "sigma_hat",
    "p_value",
    "ci_lo",
    "ci_hi",
    "truth",
    "failed",
    "seconds",
]
# 17 significant digits round-trip any float64
FLOAT_FORMAT = "%.17g"


class IndexOutOfRangeError(IndexError):
    pass


class SelfLoopError(ValueError):
    pass


class InvalidParameterError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


class InvalidSemError(ValueError):
    pass


class TooFewSamplesError(ValueError):
    pass


class NonFiniteInputError(ValueError):
    pass


class CrossFitInfeasibleError(RuntimeError):
    pass


class DegeneratePropensityError(ArithmeticError):
    pass


class EmptyRunsError(ValueError):
    pass


class DegenerateArmsError(ValueError):
    pass


class AlphaTooLargeError(ValueError):
    pass


def seed_sequence(seed: int, *keys: int) -> np.random.SeedSequence:
    """
    Build the seed sequence addressed by `keys` below the master `seed`.

    Arguments:
        seed (`int`):
            Master seed.
        keys (`int`):
            Counters identifying the stream (repetition index, stage, tree index...).
    Returns:
        seq: `np.random.SeedSequence` whose entropy is the concatenation of the master seed and the keys.
    """
    if not isinstance(seed, (int, np.integer)):
        raise TypeError(f"Seeds must be integers, got {type(seed)}.")
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *keys))


def derive_seeds(seed: int, count: int, *keys: int) -> List[int]:
    """Derive `count` independent 64-bit integer seeds from the master seed."""
    state = seed_sequence(seed, *keys).generate_state(count, dtype=np.uint64)
    return [int(s) for s in state]


def as_index_array(indices: Sequence[int], n: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexOutOfRangeError(f"Unit indices must lie in [0, {n}), got range [{idx.min()}, {idx.max()}].")
    return idx
