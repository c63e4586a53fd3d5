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

import argparse
import logging
import os
import sys
from typing import List, Optional

import pandas as pd
import yaml

from .bench import experiment_sem, make_network, read_results, run_experiment, summarize, write_results
from .configuration import ExperimentConfig
from .estimate import run_algorithm1
from .gate import InterventionVector, estimate_gate
from .graph import read_edge_list, write_edge_list
from .learn import get_learner
from .simulate import read_dataset, simulate, write_dataset
from .spillover import derive_dependency_graph
from .utils import FLOAT_FORMAT, derive_seeds


logger = logging.getLogger(__name__)

LIBRARY_ERRORS = (ValueError, TypeError, RuntimeError, ArithmeticError, IndexError, OSError)


def _load_config(args) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.paper_mode:
        overrides["paper_mode"] = True
    if args.config is not None:
        cfg = ExperimentConfig.from_file(args.config, **overrides)
    else:
        cfg = ExperimentConfig(**overrides)
    return cfg.validate()


def _learner(cfg: ExperimentConfig):
    if cfg.learner == "mean":
        return get_learner("mean")
    return get_learner(cfg.learner, **cfg.forest_kwargs())


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    n = args.n if args.n is not None else cfg.n_list[0]
    net_seed, data_seed = derive_seeds(cfg.seed, 2, n)
    net = make_network(cfg.network, cfg.density_mode, n, net_seed, cfg.ws_beta)
    data = simulate(net, experiment_sem(cfg.to_dict()), data_seed)
    write_dataset(data, args.out)
    write_edge_list(net, args.edges if args.edges is not None else os.path.splitext(args.out)[0] + ".edges")
    return 0


def cmd_estimate(args) -> int:
    cfg = _load_config(args)
    n = len(pd.read_csv(args.data, usecols=["unit"]))
    net = read_edge_list(args.edges, n)
    sem = experiment_sem(cfg.to_dict())
    graph = derive_dependency_graph(net, sem.feature_spec)
    data = read_dataset(args.data, net, sem.feature_spec, dependency_graph=graph)
    kwargs = dict(
        eps=cfg.eps, min_fit_size=cfg.min_fit_size, min_stratum_size=cfg.min_stratum_size, n_jobs=cfg.n_jobs
    )
    if args.gate is not None:
        pi = InterventionVector.parse(args.gate, n)
        report = estimate_gate(
            data, cfg.folds, cfg.repetitions_per_estimate, cfg.alpha, _learner(cfg), pi, cfg.seed, **kwargs
        )
    else:
        report = run_algorithm1(
            data, cfg.folds, cfg.repetitions_per_estimate, cfg.alpha, _learner(cfg), cfg.seed, **kwargs
        )
    if args.out is not None:
        report.save(args.out)
    else:
        yaml.safe_dump(report.to_dict(), sys.stdout, sort_keys=False)
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    if args.out is not None:
        cfg.set_config("output", args.out)
    results = run_experiment(cfg, progress=not args.quiet)
    write_results(results, cfg.output)
    return 0


def cmd_summarize(args) -> int:
    cfg = _load_config(args)
    summary = summarize(read_results(args.results), alpha=cfg.alpha)
    summary.to_csv(args.out if args.out is not None else sys.stdout, index=False, float_format=FLOAT_FORMAT)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netaipw", description="Doubly robust treatment effect estimation under network spillover."
    )
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add_common(sub):
        sub.add_argument("--config", default=None, help="YAML experiment configuration or a directory holding one.")
        sub.add_argument("--seed", type=int, default=None, help="Master seed overriding the configuration.")
        sub.add_argument("--out", default=None, help="Output path.")
        sub.add_argument("--paper-mode", action="store_true", help="Use the full-size study settings.")

    sim = subparsers.add_parser("simulate", help="Draw a network and a dataset from the simulation design.")
    add_common(sim)
    sim.add_argument("--n", type=int, default=None, help="Number of units, defaults to the first entry of n_list.")
    sim.add_argument("--edges", default=None, help="Edge list output path, defaults to <out>.edges.")
    sim.set_defaults(func=cmd_simulate)

    est = subparsers.add_parser("estimate", help="Estimate the treatment effect of a dataset on a network.")
    add_common(est)
    est.add_argument("--edges", required=True, help="1-indexed edge list of the network.")
    est.add_argument("--data", required=True, help="Dataset written by `netaipw simulate`.")
    est.add_argument("--gate", default=None, help="Estimate the global effect of all-ones, all-zeros or a 0/1 file.")
    est.set_defaults(func=cmd_estimate)

    bench = subparsers.add_parser("bench", help="Run the simulation study and write the results table.")
    add_common(bench)
    bench.add_argument("--quiet", action="store_true", help="Hide the progress bar.")
    bench.set_defaults(func=cmd_bench)

    summ = subparsers.add_parser("summarize", help="Summarize a results table per design point and estimator.")
    add_common(summ)
    summ.add_argument("--results", required=True, help="Results table written by `netaipw bench`.")
    summ.set_defaults(func=cmd_summarize)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        format="%(asctime)s - %(levelname)s - %(name)s - %(message)s",
        datefmt="%m/%d/%Y %H:%M:%S",
        level=getattr(logging, args.log_level),
    )
    try:
        return args.func(args)
    except LIBRARY_ERRORS as err:
        logger.error(f"{args.command} failed: {err}")
        return 1
