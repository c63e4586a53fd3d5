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
from typing import Iterable, List, Optional, Set, Tuple, Union

import numpy as np
from scipy import sparse

from .utils import IndexOutOfRangeError, InvalidParameterError, SelfLoopError, derive_rng


logger = logging.getLogger(__name__)


class Network:
    """
    Undirected simple graph on the units `0, ..., n - 1`.

    The adjacency is held as a symmetric scipy CSR matrix with sorted column indices, which gives a deterministic
    neighbor order. Instances are never mutated after construction.
    """

    def __init__(self, n: int, adjacency: sparse.csr_matrix):
        """
        Arguments:
            n (`int`):
                Number of units.
            adjacency (`sparse.csr_matrix`):
                Symmetric boolean adjacency matrix of shape `(n, n)` with an empty diagonal.
        """
        if adjacency.shape != (n, n):
            raise InvalidParameterError(f"Adjacency must have shape ({n}, {n}), got {adjacency.shape}.")
        adjacency = sparse.csr_matrix(adjacency, dtype=bool)
        adjacency.sum_duplicates()
        adjacency.sort_indices()
        adjacency.eliminate_zeros()
        if adjacency.diagonal().any():
            raise SelfLoopError(f"Self-loop on unit {int(np.flatnonzero(adjacency.diagonal())[0])} is not allowed.")
        if (adjacency != adjacency.T).nnz:
            raise InvalidParameterError("Adjacency matrix of an undirected network must be symmetric.")
        self.n = n
        self._adjacency = adjacency
        self._second = None

    def __repr__(self):
        return f"{self.__class__.__name__}(n={self.n}, n_edges={self.n_edges})"

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.edges(), other.edges())

    @property
    def indptr(self) -> np.ndarray:
        return self._adjacency.indptr

    @property
    def indices(self) -> np.ndarray:
        return self._adjacency.indices

    @property
    def adjacency(self) -> List[np.ndarray]:
        return [self.neighbor_array(i) for i in range(self.n)]

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr).astype(np.int64)

    @property
    def max_degree(self) -> int:
        return int(self.degrees.max()) if self.n > 0 else 0

    @property
    def n_edges(self) -> int:
        return int(self._adjacency.nnz // 2)

    def to_sparse(self, dtype=np.float64) -> sparse.csr_matrix:
        return self._adjacency.astype(dtype)

    def edges(self) -> np.ndarray:
        """Edges as an `(n_edges, 2)` array of pairs `i < j` in lexicographic order."""
        upper = sparse.triu(self._adjacency, k=1, format="coo")
        order = np.lexsort((upper.col, upper.row))
        return np.stack([upper.row[order], upper.col[order]], axis=1).astype(np.int64)

    def _check_unit(self, i: int):
        if not 0 <= i < self.n:
            raise IndexOutOfRangeError(f"Unit index {i} out of range [0, {self.n}).")

    def neighbor_array(self, i: int) -> np.ndarray:
        self._check_unit(i)
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def second_neighbor_matrix(self) -> sparse.csr_matrix:
        """Boolean matrix whose row `i` marks the units at distance exactly two from `i`."""
        if self._second is None:
            a = self._adjacency.astype(np.int64)
            reach = sparse.csr_matrix(a @ a)
            reach.data[:] = 1
            reach = reach - sparse.csr_matrix(reach.multiply(a)) - sparse.diags(reach.diagonal(), format="csr")
            reach = sparse.csr_matrix(reach)
            reach.eliminate_zeros()
            second = sparse.csr_matrix(reach, dtype=bool)
            second.sort_indices()
            self._second = second
        return self._second

    def second_neighbor_array(self, i: int) -> np.ndarray:
        self._check_unit(i)
        second = self.second_neighbor_matrix()
        return second.indices[second.indptr[i] : second.indptr[i + 1]]


def _from_pairs(n: int, rows: np.ndarray, cols: np.ndarray, cls=Network) -> Network:
    data = np.ones(2 * rows.size, dtype=bool)
    adjacency = sparse.csr_matrix(
        (data, (np.concatenate([rows, cols]), np.concatenate([cols, rows]))), shape=(n, n), dtype=bool
    )
    return cls(n, adjacency)


def new_network(n: int, edges: Iterable[Tuple[int, int]]) -> Network:
    """
    Build a network from a list of unordered pairs. Duplicated pairs, in either orientation, are merged.

    Arguments:
        n (`int`):
            Number of units.
        edges (`Iterable[Tuple[int, int]]`):
            0-indexed unordered pairs.
    Returns:
        net: `Network`.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidParameterError(f"The unit count must be a positive integer, got {n}.")
    pairs = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
        bad = pairs[(pairs < 0).any(axis=1) | (pairs >= n).any(axis=1)][0]
        raise IndexOutOfRangeError(f"Edge ({bad[0]}, {bad[1]}) has an endpoint outside [0, {n}).")
    loops = pairs[:, 0] == pairs[:, 1]
    if loops.any():
        raise SelfLoopError(f"Self-loop on unit {pairs[loops][0, 0]} is not allowed.")
    return _from_pairs(n, pairs[:, 0], pairs[:, 1])


def gen_erdos_renyi(n: int, p: float, seed: int) -> Network:
    """
    Erdős–Rényi graph where each unordered pair is an edge independently with probability `p`.

    Rows of the upper triangle are drawn in order from a single stream, so the result only depends on `(n, p, seed)`.
    """
    if not 0.0 <= p <= 1.0:
        raise InvalidParameterError(f"Edge probability must lie in [0, 1], got {p}.")
    rng = derive_rng(seed, 0)
    rows, cols = [], []
    for i in range(n - 1):
        hits = np.flatnonzero(rng.random(n - i - 1) < p)
        if hits.size:
            rows.append(np.full(hits.size, i, dtype=np.int64))
            cols.append(hits + i + 1)
    if rows:
        return _from_pairs(n, np.concatenate(rows), np.concatenate(cols))
    return _from_pairs(n, np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))


def gen_watts_strogatz(n: int, k_side: int, beta: float, seed: int) -> Network:
    """
    Small-world graph: a ring lattice linking every unit to `k_side` neighbors on each side, whose lattice edges are
    then rewired with probability `beta`.

    Lattice edges `(i, i + offset)` are visited with `i` ascending and `offset` ascending. A rewired edge keeps `i`
    and moves its far endpoint to a unit drawn uniformly among those that are neither `i` nor adjacent to `i`; when
    no such unit exists the edge is kept. The edge count is therefore always `n * k_side`.
    """
    if k_side < 1 or 2 * k_side >= n:
        raise InvalidParameterError(
            f"Watts-Strogatz needs 1 <= k_side and 2 * k_side < n, got k_side={k_side}, n={n}."
        )
    if not 0.0 <= beta <= 1.0:
        raise InvalidParameterError(f"Rewiring probability must lie in [0, 1], got {beta}.")
    rng = derive_rng(seed, 1)
    adjacency: List[Set[int]] = [set() for _ in range(n)]
    for i in range(n):
        for offset in range(1, k_side + 1):
            j = (i + offset) % n
            adjacency[i].add(j)
            adjacency[j].add(i)

    for i in range(n):
        for offset in range(1, k_side + 1):
            j = (i + offset) % n
            if rng.random() >= beta:
                continue
            if len(adjacency[i]) >= n - 1:
                continue
            while True:
                target = int(rng.integers(n))
                if target != i and target not in adjacency[i]:
                    break
            adjacency[i].discard(j)
            adjacency[j].discard(i)
            adjacency[i].add(target)
            adjacency[target].add(i)

    rows = np.fromiter((i for i in range(n) for j in adjacency[i] if i < j), dtype=np.int64)
    cols = np.fromiter((j for i in range(n) for j in adjacency[i] if i < j), dtype=np.int64)
    return _from_pairs(n, rows, cols)


def neighbors(net: Network, i: int) -> Set[int]:
    return set(int(j) for j in net.neighbor_array(i))


def second_neighbors(net: Network, i: int) -> Set[int]:
    """Units at distance exactly two from `i`, which excludes `i` itself and its direct neighbors."""
    return set(int(j) for j in net.second_neighbor_array(i))


def write_edge_list(net: Network, path: Union[str, os.PathLike]):
    """Write one 1-indexed `i j` pair per line, `i < j`, in lexicographic order."""
    with open(path, "w") as f:
        for i, j in net.edges():
            f.write(f"{i + 1} {j + 1}\n")
    logger.info(f"Edge list with {net.n_edges} edges written to {path}")


def read_edge_list(path: Union[str, os.PathLike], n: Optional[int] = None) -> Network:
    """
    Read a 1-indexed whitespace-separated edge list.

    Arguments:
        path (`str` or `os.PathLike`):
            File holding one `i j` pair per line. Blank lines and lines starting with `#` are skipped.
        n (`int`, *optional*):
            Number of units. Defaults to the largest label found, which cannot represent trailing isolated units.
    """
    pairs = []
    with open(path, "r") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 2:
                raise ValueError(f"{path}:{line_number}: expected two unit labels, got {line!r}.")
            pairs.append((int(fields[0]) - 1, int(fields[1]) - 1))
    if n is None:
        n = max((max(pair) for pair in pairs), default=-1) + 1
    return new_network(n, pairs)
