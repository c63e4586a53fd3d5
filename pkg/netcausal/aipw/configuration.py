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

import copy
import logging
import os
from enum import Enum
from functools import reduce
from typing import Any, Dict, Optional, Union

import yaml

from .learn import SUPPORTED_LEARNERS, LearnerKind
from .spillover import get_feature_spec
from .utils import CONFIG_NAME, InvalidParameterError


logger = logging.getLogger(__name__)


class NetworkKind(Enum):
    ERDOS_RENYI = "er"
    WATTS_STROGATZ = "ws"


class DensityMode(Enum):
    CONST = "const"
    GROWTH = "growth"


class EstimatorKind(Enum):
    NETAIPW = "netaipw"
    HAJEK = "hajek"
    IPW = "ipw"


SUPPORTED_NETWORKS = set([kind.value for kind in NetworkKind])
SUPPORTED_DENSITY_MODES = set([mode.value for mode in DensityMode])
SUPPORTED_ESTIMATORS = set([kind.value for kind in EstimatorKind])

DEFAULT_CONFIG = {
    "network": NetworkKind.ERDOS_RENYI.value,
    "density_mode": DensityMode.CONST.value,
    "n_list": [625, 2500],
    "repetitions": 200,
    "folds": 10,
    "repetitions_per_estimate": 10,
    "alpha": 0.05,
    "learner": LearnerKind.FOREST.value,
    "n_trees": 200,
    "min_node_size": 5,
    "mtry": None,
    "bootstrap": 1.0,
    "estimators": [kind.value for kind in EstimatorKind],
    "seed": 0,
    "output": "results.csv",
    "paper_mode": False,
    "n_jobs": 1,
    "eps": 0.01,
    "min_fit_size": 50,
    "min_stratum_size": 30,
    "ws_beta": 0.05,
    "oracle_min_reps": 200,
    "oracle_max_reps": 12800,
    "record_timing": False,
    "feature_spec": "appendix_b_feature",
}

PAPER_MODE = {
    "repetitions": 1000,
    "repetitions_per_estimate": 20,
    "n_trees": 500,
    "n_list": [625, 1250, 2500, 5000, 10000],
}


class ExperimentConfig:
    def __init__(self, config_path: Optional[str] = None, **overrides):
        """
        Args:
            config_path (`str`, *optional*):
                Path to a flat YAML document overriding the default experiment settings.
            overrides:
                Settings applied on top of the file.
        Returns:
            config: ExperimentConfig object.
        """

        self.path = config_path
        self.usr_cfg = copy.deepcopy(DEFAULT_CONFIG)
        if config_path is not None:
            self._merge(self._read_config())
        self._merge(overrides)
        if self.usr_cfg["paper_mode"]:
            self.apply_paper_mode()

    def _read_config(self) -> Dict[str, Any]:
        with open(self.path, "r") as f:
            try:
                config = yaml.safe_load(f)
            except yaml.YAMLError as err:
                logger.error(err)
                raise InvalidParameterError(f"{self.path} is not a valid YAML document.")
        if config is None:
            return {}
        if not isinstance(config, dict):
            raise InvalidParameterError(f"{self.path} must hold a mapping, got {type(config)}.")
        return config

    def _merge(self, values: Dict[str, Any]):
        unknown = sorted(set(values) - set(DEFAULT_CONFIG))
        if unknown:
            logger.error(f"Unknown configuration keys: {unknown}")
            raise InvalidParameterError(
                f"Unknown configuration keys {unknown}. Supported keys are " + ", ".join(DEFAULT_CONFIG)
            )
        self.usr_cfg.update(values)

    def get_config(self, keys: str):
        return reduce(lambda d, key: d.get(key) if d else None, keys.split("."), self.usr_cfg)

    def set_config(self, keys: str, value: Any):
        d = self.usr_cfg
        keys = keys.split(".")
        for key in keys[:-1]:
            d = d.setdefault(key, {})
        d[keys[-1]] = value

    def __getattr__(self, name: str):
        if name != "usr_cfg" and name in self.__dict__.get("usr_cfg", {}):
            return self.usr_cfg[name]
        raise AttributeError(f"{self.__class__.__name__} has no attribute `{name}`.")

    def apply_paper_mode(self):
        self.usr_cfg.update(PAPER_MODE)
        self.usr_cfg["paper_mode"] = True

    def forest_kwargs(self) -> Dict[str, Any]:
        return {
            "n_trees": self.n_trees,
            "min_node_size": self.min_node_size,
            "mtry": self.mtry,
            "bootstrap": self.bootstrap,
        }

    def validate(self) -> "ExperimentConfig":
        checks = [
            ("network", self.network in SUPPORTED_NETWORKS, "one of " + ", ".join(sorted(SUPPORTED_NETWORKS))),
            (
                "density_mode",
                self.density_mode in SUPPORTED_DENSITY_MODES,
                "one of " + ", ".join(sorted(SUPPORTED_DENSITY_MODES)),
            ),
            ("learner", self.learner in SUPPORTED_LEARNERS, "one of " + ", ".join(sorted(SUPPORTED_LEARNERS))),
            (
                "estimators",
                bool(self.estimators) and set(self.estimators) <= SUPPORTED_ESTIMATORS,
                "a non-empty subset of " + ", ".join(sorted(SUPPORTED_ESTIMATORS)),
            ),
            (
                "n_list",
                bool(self.n_list) and all(isinstance(n, int) and n >= 8 for n in self.n_list),
                "a non-empty list of integers >= 8",
            ),
            ("repetitions", self.repetitions >= 1, ">= 1"),
            ("folds", self.folds >= 2, ">= 2"),
            ("repetitions_per_estimate", self.repetitions_per_estimate >= 1, ">= 1"),
            ("alpha", 0.0 < self.alpha < 1.0, "(0, 1)"),
            ("eps", 0.0 < self.eps < 0.5, "(0, 0.5)"),
            ("ws_beta", 0.0 <= self.ws_beta <= 1.0, "[0, 1]"),
            ("oracle_min_reps", 100 <= self.oracle_min_reps <= self.oracle_max_reps, "[100, oracle_max_reps]"),
            ("n_jobs", self.n_jobs != 0, "a non-zero joblib worker count"),
        ]
        for key, ok, admissible in checks:
            if not ok:
                logger.error(f"Invalid value {self.usr_cfg[key]!r} for `{key}`")
                raise InvalidParameterError(f"`{key}` must be {admissible}, got {self.usr_cfg[key]!r}.")
        if not isinstance(self.seed, int):
            raise TypeError(f"`seed` must be an integer, got {type(self.seed)}.")
        get_feature_spec(self.feature_spec)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self.usr_cfg)

    def save(self, save_directory_or_file: Union[str, os.PathLike]):
        path = save_directory_or_file
        if os.path.isdir(path):
            path = os.path.join(path, CONFIG_NAME)
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)
        logger.info(f"Configuration saved in {path}")

    @classmethod
    def from_file(cls, config_name_or_path: str, config_file_name: Optional[str] = None, **overrides):
        """
        Instantiate an ExperimentConfig object from a configuration file or a directory holding one.

        Args:
            config_name_or_path (`str`):
                Path to a YAML configuration file or to a directory containing it.
            config_file_name (`str`, *optional*):
                Name of the configuration file inside the directory, defaults to `netaipw.yml`.
            overrides:
                Settings applied on top of the file.
        Returns:
            config: ExperimentConfig object.
        """

        config_file_name = config_file_name if config_file_name is not None else CONFIG_NAME
        if os.path.isdir(config_name_or_path):
            config_file = os.path.join(config_name_or_path, config_file_name)
        else:
            config_file = config_name_or_path
        if not os.path.isfile(config_file):
            msg = (
                f"Can't load config for '{config_name_or_path}'. Make sure that it is a YAML file or a directory "
                f"containing a {config_file_name} file."
            )
            logger.error(msg)
            raise EnvironmentError(msg)
        return cls(config_file, **overrides)
