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
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Set, Tuple

import numpy as np
from scipy import sparse

from .graph import Network
from .utils import DimensionMismatchError, InvalidParameterError, derive_rng


logger = logging.getLogger(__name__)


XFootprint = Callable[[int, Network], Tuple[Set[int], Set[int]]]
ZFootprint = Callable[[int, Network], Set[int]]
XEvaluator = Callable[[int, np.ndarray, np.ndarray, Network], np.ndarray]
ZEvaluator = Callable[[int, np.ndarray, Network], np.ndarray]


def _no_x_footprint(i: int, net: Network) -> Tuple[Set[int], Set[int]]:
    return set(), set()


def _no_z_footprint(i: int, net: Network) -> Set[int]:
    return set()


def _no_x_features(i: int, treatments: np.ndarray, confounders: np.ndarray, net: Network) -> np.ndarray:
    return np.zeros(0)


def _no_z_features(i: int, confounders: np.ndarray, net: Network) -> np.ndarray:
    return np.zeros(0)


@dataclass(frozen=True)
class FeatureSpec:
    """
    User-declared spillover features together with their dependency footprints.

    Attributes:
        x_dim (`int`):
            Dimension `r` of the outcome-side features `X_i`.
        z_dim (`int`):
            Dimension `t` of the treatment-side features `Z_i`.
        x_footprint (`Callable`):
            `(i, net) -> (w_units, c_units)`: units whose treatment, resp. confounders, enter `X_i`.
        z_footprint (`Callable`):
            `(i, net) -> c_units`: units whose confounders enter `Z_i`.
        x_eval (`Callable`):
            `(i, W, C, net) -> array of length x_dim`.
        z_eval (`Callable`):
            `(i, C, net) -> array of length z_dim`.
        x_batch (`Callable`, *optional*):
            `(W, C, net) -> (N, x_dim)` array equal to stacking `x_eval` over all units.
        z_batch (`Callable`, *optional*):
            `(C, net) -> (N, z_dim)` array equal to stacking `z_eval` over all units.
        name (`str`):
            Name used in logs and configuration files.
    """

    x_dim: int = 0
    z_dim: int = 0
    x_footprint: XFootprint = _no_x_footprint
    z_footprint: ZFootprint = _no_z_footprint
    x_eval: XEvaluator = _no_x_features
    z_eval: ZEvaluator = _no_z_features
    x_batch: Optional[Callable[[np.ndarray, np.ndarray, Network], np.ndarray]] = field(default=None, compare=False)
    z_batch: Optional[Callable[[np.ndarray, Network], np.ndarray]] = field(default=None, compare=False)
    name: str = "custom"

    def __post_init__(self):
        if self.x_dim < 0 or self.z_dim < 0:
            raise InvalidParameterError(
                f"Feature dimensions must be non-negative, got r={self.x_dim}, t={self.z_dim}."
            )


@dataclass(frozen=True)
class UnitData:
    """The record `S_i = (W_i, C_i, X_i, Z_i, Y_i)` of a single unit."""

    w: int
    c: np.ndarray
    x: np.ndarray
    z: np.ndarray
    y: float

    def __post_init__(self):
        if self.w not in (0, 1):
            raise InvalidParameterError(f"Treatment must be 0 or 1, got {self.w}.")
        for name in ("c", "x", "z"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidParameterError(f"Unit record has non-finite entries in `{name}`.")
        if not np.isfinite(self.y):
            raise InvalidParameterError(f"Unit record has a non-finite outcome {self.y}.")


class DependencyGraph(Network):
    """Graph on the units where a missing edge means the unit records are independent."""

    @property
    def d_max(self) -> int:
        return self.max_degree


def _check_inputs(net: Network, treatments: Optional[np.ndarray], confounders: np.ndarray):
    confounders = np.asarray(confounders, dtype=np.float64)
    if confounders.ndim == 1:
        confounders = confounders[:, None]
    if confounders.ndim != 2 or confounders.shape[0] != net.n:
        raise DimensionMismatchError(
            f"Confounders must have shape ({net.n}, p) for a network on {net.n} units, got {confounders.shape}."
        )
    if treatments is None:
        return None, confounders
    treatments = np.asarray(treatments)
    if treatments.shape != (net.n,):
        raise DimensionMismatchError(f"Treatments must have shape ({net.n},), got {treatments.shape}.")
    if not np.isin(treatments, (0, 1)).all():
        raise InvalidParameterError("Treatments must be binary.")
    return treatments.astype(np.float64), confounders


def compute_x_features(net: Network, spec: FeatureSpec, treatments: np.ndarray, confounders: np.ndarray) -> np.ndarray:
    """
    Evaluate the outcome-side spillover features of every unit.

    Returns:
        features: `(N, spec.x_dim)` array whose row `i` is `spec.x_eval(i, W, C, net)`.
    """
    treatments, confounders = _check_inputs(net, treatments, confounders)
    if spec.x_batch is not None:
        features = np.asarray(spec.x_batch(treatments, confounders, net), dtype=np.float64)
    else:
        features = np.empty((net.n, spec.x_dim))
        for i in range(net.n):
            features[i] = spec.x_eval(i, treatments, confounders, net)
    if features.shape != (net.n, spec.x_dim):
        raise DimensionMismatchError(f"Spec `{spec.name}` produced X-features of shape {features.shape}.")
    return features


def compute_z_features(net: Network, spec: FeatureSpec, confounders: np.ndarray) -> np.ndarray:
    """Evaluate the treatment-side spillover features; `t = 0` yields an `(N, 0)` array."""
    _, confounders = _check_inputs(net, None, confounders)
    if spec.z_batch is not None:
        features = np.asarray(spec.z_batch(confounders, net), dtype=np.float64)
    else:
        features = np.empty((net.n, spec.z_dim))
        for i in range(net.n):
            features[i] = spec.z_eval(i, confounders, net)
    if features.shape != (net.n, spec.z_dim):
        raise DimensionMismatchError(f"Spec `{spec.name}` produced Z-features of shape {features.shape}.")
    return features


def _incidence(rows: List[Set[int]], n: int) -> sparse.csr_matrix:
    indptr = np.zeros(n + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(r) for r in rows])
    indices = np.fromiter((j for r in rows for j in sorted(r)), dtype=np.int64, count=int(indptr[-1]))
    return sparse.csr_matrix((np.ones(indices.size, dtype=np.int64), indices, indptr), shape=(n, n))


def footprint_matrices(net: Network, spec: FeatureSpec) -> Tuple[sparse.csr_matrix, ...]:
    """
    Incidence matrices `(F_xw, F_xc, F_z)`: entry `(i, m)` is one when `W_m` (resp. `C_m`) enters `X_i`
    (resp. `C_m` enters `Z_i`).
    """
    xw_rows, xc_rows, z_rows = [], [], []
    for i in range(net.n):
        w_units, c_units = spec.x_footprint(i, net)
        z_units = spec.z_footprint(i, net)
        if i in w_units or i in c_units or i in z_units:
            raise InvalidParameterError(f"Unit {i} appears in its own feature footprint in spec `{spec.name}`.")
        for units in (w_units, c_units, z_units):
            if any(not 0 <= j < net.n for j in units):
                raise InvalidParameterError(f"Footprint of unit {i} in spec `{spec.name}` leaves [0, {net.n}).")
        xw_rows.append(set(w_units))
        xc_rows.append(set(c_units))
        z_rows.append(set(z_units))
    return _incidence(xw_rows, net.n), _incidence(xc_rows, net.n), _incidence(z_rows, net.n)


def derive_dependency_graph(net: Network, spec: FeatureSpec, conservative: bool = False) -> DependencyGraph:
    """
    Derive the dependency graph on the unit records from the declared footprints.

    Units `i` and `j` are linked when some third unit `m` enters both `X_i` and `X_j` (through `W_m` or `C_m`), or
    `C_m` enters both `Z_i` and `Z_j`; or when `W_i` or `C_i` enters a feature of `j`, or the other way round.

    Arguments:
        net (`Network`):
            Underlying network.
        spec (`FeatureSpec`):
            Features with their footprints.
        conservative (`bool`, *optional*, defaults to `False`):
            Also link `i` and `j` when a confounder `C_m` enters `X_i` and `Z_j`.
    Returns:
        graph: `DependencyGraph` on the same units.
    """
    xw, xc, z = footprint_matrices(net, spec)
    x_units = ((xw + xc) > 0).astype(np.int64)
    # a unit never sits in its own footprint, so shared units are always third units
    linked = x_units @ x_units.T + z @ z.T
    direct = xw + xc + z
    linked = linked + direct + direct.T
    if conservative:
        cross = xc @ z.T
        linked = linked + cross + cross.T
    linked = sparse.csr_matrix(linked)
    linked = linked - sparse.diags(linked.diagonal(), format="csr")
    linked.eliminate_zeros()
    graph = DependencyGraph(net.n, linked > 0)
    logger.info(
        f"Dependency graph for `{spec.name}`: {graph.n_edges} edges on {graph.n} units "
        f"(network has {net.n_edges}), d_max = {graph.d_max}"
    )
    return graph


def check_degree_assumption(graph: DependencyGraph) -> Tuple[int, float, bool]:
    """Compare the maximal dependency-graph degree with `N ** (1 / 4)` and warn when it is exceeded."""
    bound = graph.n ** 0.25
    ok = graph.d_max <= bound
    if not ok:
        logger.warning(
            f"Maximal dependency-graph degree {graph.d_max} exceeds N^(1/4) = {bound:.2f}; "
            "normal approximations may be poor at this sample size."
        )
    return graph.d_max, bound, ok


def verify_footprints(
    net: Network,
    spec: FeatureSpec,
    treatments: np.ndarray,
    confounders: np.ndarray,
    trials: int = 1000,
    seed: int = 0,
) -> List[Tuple[str, int, int]]:
    """
    Check by random perturbation that the evaluators only read the variables declared in their footprints.

    Each trial picks a unit `i` and a variable outside the footprint of `X_i` (or `Z_i`), perturbs it and recomputes
    the feature of `i`, which must stay bit-identical.

    Returns:
        violations: list of `(feature, i, j)` triples where perturbing unit `j` changed the feature of unit `i`.
    """
    treatments, confounders = _check_inputs(net, treatments, confounders)
    rng = derive_rng(seed, 0)
    violations = []
    for _ in range(trials):
        i = int(rng.integers(net.n))
        w_units, c_units = spec.x_footprint(i, net)
        z_units = spec.z_footprint(i, net)
        kind = ("xw", "xc", "z")[int(rng.integers(3))]
        declared = {"xw": w_units, "xc": c_units, "z": z_units}[kind]
        outside = np.setdiff1d(np.arange(net.n), np.fromiter(declared, dtype=np.int64, count=len(declared)))
        if outside.size == 0:
            continue
        j = int(outside[rng.integers(outside.size)])
        w_new, c_new = treatments.copy(), confounders.copy()
        if kind == "xw":
            w_new[j] = 1.0 - w_new[j]
        else:
            c_new[j] = c_new[j] + rng.normal(size=c_new.shape[1])
        if kind == "z":
            before = np.asarray(spec.z_eval(i, confounders, net), dtype=np.float64)
            after = np.asarray(spec.z_eval(i, c_new, net), dtype=np.float64)
        else:
            before = np.asarray(spec.x_eval(i, treatments, confounders, net), dtype=np.float64)
            after = np.asarray(spec.x_eval(i, w_new, c_new, net), dtype=np.float64)
        if not np.array_equal(before, after):
            violations.append((kind, i, j))
    if violations:
        logger.warning(f"Spec `{spec.name}`: {len(violations)} footprint violations in {trials} perturbations.")
    return violations


def _neighbor_mean(net: Network, values: np.ndarray) -> np.ndarray:
    # 0 on isolated units
    degrees = net.degrees.astype(np.float64)
    sums = net.to_sparse() @ values
    return np.divide(sums, degrees, out=np.zeros_like(sums), where=degrees > 0)


def _row_mean(values: np.ndarray) -> float:
    return float(values.sum() / values.size) if values.size else 0.0


def frac_treated_neighbors() -> FeatureSpec:
    """`X_i` = fraction of treated direct neighbors of `i` (`r = 1`)."""

    def footprint(i, net):
        return set(net.neighbor_array(i).tolist()), set()

    def evaluate(i, treatments, confounders, net):
        return np.array([_row_mean(treatments[net.neighbor_array(i)])])

    def batch(treatments, confounders, net):
        return _neighbor_mean(net, treatments)[:, None]

    return FeatureSpec(x_dim=1, x_footprint=footprint, x_eval=evaluate, x_batch=batch, name="frac_treated_neighbors")


def two_hop_treated_fractions() -> FeatureSpec:
    """`X_i` = (fraction of treated neighbors, fraction of treated units at distance exactly two) (`r = 2`)."""

    def footprint(i, net):
        return set(net.neighbor_array(i).tolist()) | set(net.second_neighbor_array(i).tolist()), set()

    def evaluate(i, treatments, confounders, net):
        first = _row_mean(treatments[net.neighbor_array(i)])
        second = _row_mean(treatments[net.second_neighbor_array(i)])
        return np.array([first, second])

    def batch(treatments, confounders, net):
        second = net.second_neighbor_matrix().astype(np.float64)
        sizes = np.diff(second.indptr).astype(np.float64)
        sums = second @ treatments
        second_mean = np.divide(sums, sizes, out=np.zeros_like(sums), where=sizes > 0)
        return np.stack([_neighbor_mean(net, treatments), second_mean], axis=1)

    return FeatureSpec(
        x_dim=2, x_footprint=footprint, x_eval=evaluate, x_batch=batch, name="two_hop_treated_fractions"
    )


def appendix_b_feature() -> FeatureSpec:
    """
    `X_i` = average over the neighbors `j` of `i` of `(1{W_j = 1} - 1{W_j = 0}) * C_j` (first confounder column),
    0 for isolated units (`r = 1`, `t = 0`).
    """

    def footprint(i, net):
        units = set(net.neighbor_array(i).tolist())
        return units, set(units)

    def evaluate(i, treatments, confounders, net):
        nb = net.neighbor_array(i)
        return np.array([_row_mean((2.0 * treatments[nb] - 1.0) * confounders[nb, 0])])

    def batch(treatments, confounders, net):
        return _neighbor_mean(net, (2.0 * treatments - 1.0) * confounders[:, 0])[:, None]

    return FeatureSpec(x_dim=1, x_footprint=footprint, x_eval=evaluate, x_batch=batch, name="appendix_b_feature")


def mean_neighbor_confounders() -> FeatureSpec:
    """`Z_i` = mean of the first confounder over the direct neighbors of `i`, 0 if isolated (`t = 1`)."""

    def footprint(i, net):
        return set(net.neighbor_array(i).tolist())

    def evaluate(i, confounders, net):
        return np.array([_row_mean(confounders[net.neighbor_array(i), 0])])

    def batch(confounders, net):
        return _neighbor_mean(net, confounders[:, 0])[:, None]

    return FeatureSpec(
        z_dim=1, z_footprint=footprint, z_eval=evaluate, z_batch=batch, name="mean_neighbor_confounders"
    )


def combine_feature_specs(x_spec: FeatureSpec, z_spec: FeatureSpec) -> FeatureSpec:
    """Take the X-features of `x_spec` and the Z-features of `z_spec`."""
    return FeatureSpec(
        x_dim=x_spec.x_dim,
        z_dim=z_spec.z_dim,
        x_footprint=x_spec.x_footprint,
        z_footprint=z_spec.z_footprint,
        x_eval=x_spec.x_eval,
        z_eval=z_spec.z_eval,
        x_batch=x_spec.x_batch,
        z_batch=z_spec.z_batch,
        name=f"{x_spec.name}+{z_spec.name}",
    )


def builtin_feature_specs() -> Dict[str, Callable[[], FeatureSpec]]:
    return {
        "frac_treated_neighbors": frac_treated_neighbors,
        "two_hop_treated_fractions": two_hop_treated_fractions,
        "appendix_b_feature": appendix_b_feature,
        "mean_neighbor_confounders": mean_neighbor_confounders,
    }


def get_feature_spec(name: str) -> FeatureSpec:
    """Look up a built-in spec by name; `x_name+z_name` combines the X-part of one with the Z-part of another."""
    registry = builtin_feature_specs()
    parts = name.split("+")
    for part in parts:
        if part not in registry:
            raise InvalidParameterError(
                f"Unknown feature spec `{part}`. Supported specs are " + ", ".join(sorted(registry))
            )
    if len(parts) == 1:
        return registry[name]()
    if len(parts) == 2:
        return combine_feature_specs(registry[parts[0]](), registry[parts[1]]())
    raise InvalidParameterError(f"Feature spec `{name}` combines more than two specs.")
