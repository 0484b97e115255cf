"""Sampling set construction and FUS-minimizing uniform selection.

The pipeline is: dilate the occupied grid cells with a discrete ball to
estimate the feasible region of feature space, draw lattice points from that
region uniformly, map each drawn point to its nearest data sample, and keep
the best of many such draws according to the farthest-unselected-point (FUS)
criterion.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ElementTooLarge, InsufficientDiversity
from .feature_space import (
    FeatureMatrix,
    GridConfig,
    GridPointSet,
    apply_zscore,
    discretize,
    fit_zscore,
    NormalizationModel,
)

DEFAULT_RADIUS = 4.0
DEFAULT_K = 100
DEFAULT_TRIALS = 1000
MAX_ELEMENT_OFFSETS = 10**7
TIE_BREAK_POLICY = "nearest sample: lowest row index; equal FUS across trials: lowest trial index"

# Relative slack used to detect possible nearest-neighbour ties before
# resolving them with exact arithmetic.
_TIE_RTOL = 1e-9
_TIE_ATOL = 1e-12


@dataclass(frozen=True)
class StructuringElement:
    """Integer offsets of a filled discrete ball, sorted lexicographically."""

    radius: float
    offsets: np.ndarray

    @property
    def dim(self) -> int:
        return self.offsets.shape[1]

    def __len__(self) -> int:
        return self.offsets.shape[0]


@dataclass(frozen=True)
class SamplingSet:
    """Deduplicated lattice points, sorted lexicographically."""

    points: np.ndarray

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class SelectionParams:
    k: int = DEFAULT_K
    n_trials: int = DEFAULT_TRIALS
    seed: int = 0
    enforce_group_exclusion: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.n_trials < 1:
            raise ValueError(f"n_trials must be >= 1, got {self.n_trials}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


@dataclass
class SelectionResult:
    selected_ids: list[str]
    selected_indices: np.ndarray
    fus: float
    winning_trial: int
    params: SelectionParams
    grid_config: GridConfig
    trial_fus: np.ndarray = field(repr=False)

    def as_record(self, radius: float, dropped_features: Sequence[str] = ()) -> dict:
        return {
            "selected_ids": list(self.selected_ids),
            "fus": float(self.fus),
            "winning_trial": int(self.winning_trial),
            "seed": int(self.params.seed),
            "k": int(self.params.k),
            "n_trials": int(self.params.n_trials),
            "cell_size": float(self.grid_config.cell_size),
            "radius": float(radius),
            "dropped_features": list(dropped_features),
            "tie_break_policy": TIE_BREAK_POLICY,
        }


# --------------------------------------------------------------------------
# structuring element and dilation


def _squared_limit(radius: float) -> int:
    return int(math.floor(radius * radius))


def count_ball_points(d: int, radius: float) -> int:
    """Number of integer vectors in ``Z^d`` with Euclidean norm <= radius."""
    reach = int(math.floor(radius))
    limit = _squared_limit(radius)
    ways = [1] + [0] * limit
    squares = [t * t for t in range(-reach, reach + 1)]
    for _ in range(d):
        nxt = [0] * (limit + 1)
        for s, w in enumerate(ways):
            if w:
                for sq in squares:
                    if s + sq <= limit:
                        nxt[s + sq] += w
        ways = nxt
    return sum(ways)


def build_structuring_element(
    d: int, radius: float, max_offsets: int = MAX_ELEMENT_OFFSETS
) -> StructuringElement:
    """All integer offsets ``o`` in ``Z^d`` with ``||o|| <= radius``."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    size = count_ball_points(d, radius)
    if size > max_offsets:
        raise ElementTooLarge(
            f"structuring element too large: {size} offsets for d={d}, r={radius} "
            f"(cap {max_offsets})"
        )
    reach = int(math.floor(radius))
    limit = _squared_limit(radius)
    steps = np.arange(-reach, reach + 1, dtype=np.int64)
    partial = np.zeros((1, 0), dtype=np.int64)
    partial_sq = np.zeros(1, dtype=np.int64)
    # grow one coordinate at a time, pruning prefixes that already leave the ball
    for _ in range(d):
        sq = partial_sq[:, None] + steps[None, :] ** 2
        rows, cols = np.nonzero(sq <= limit)
        partial = np.hstack([partial[rows], steps[cols, None]])
        partial_sq = sq[rows, cols]
    return StructuringElement(radius=float(radius), offsets=partial)


def dilate(grid_points: GridPointSet, element: StructuringElement, chunk: int = 1 << 22) -> SamplingSet:
    """Union of the element translated onto every occupied lattice cell."""
    if element.dim != grid_points.dim:
        raise ValueError(f"element dimension {element.dim} != grid dimension {grid_points.dim}")
    centers = np.unique(grid_points.lattice, axis=0)
    offsets = element.offsets
    reach = np.abs(offsets).max(axis=0)
    lo = centers.min(axis=0) - reach
    extent = centers.max(axis=0) + reach - lo + 1
    if math.prod(int(e) for e in extent) >= 2**62:
        return _dilate_rows(centers, offsets)

    # row-major keys: sorting keys == lexicographic sorting of points
    stride = np.ones(len(extent), dtype=np.int64)
    for j in range(len(extent) - 2, -1, -1):
        stride[j] = stride[j + 1] * extent[j + 1]
    base = (centers - lo) @ stride
    shift = offsets @ stride
    per_block = max(1, chunk // len(shift))
    parts = []
    for start in range(0, len(base), per_block):
        keys = (base[start:start + per_block, None] + shift[None, :]).ravel()
        parts.append(np.unique(keys))
    keys = np.unique(np.concatenate(parts))
    points = np.empty((len(keys), len(extent)), dtype=np.int64)
    rest = keys
    for j in range(len(extent)):
        points[:, j], rest = np.divmod(rest, stride[j])
    return SamplingSet(points + lo)


def _dilate_rows(centers: np.ndarray, offsets: np.ndarray) -> SamplingSet:
    parts = [np.unique(centers + o, axis=0) for o in offsets]
    return SamplingSet(np.unique(np.concatenate(parts), axis=0))


# --------------------------------------------------------------------------
# nearest neighbours


def squared_distances(points: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances accumulated in coordinate order.

    The fixed summation order makes results bitwise reproducible across call
    sites, which the tie-breaking rules rely on.
    """
    diff = points - target
    acc = diff[..., 0] * diff[..., 0]
    for j in range(1, diff.shape[-1]):
        acc = acc + diff[..., j] * diff[..., j]
    return acc


class NearestSample:
    """Exact nearest-sample lookup in continuous coordinates.

    A kd-tree proposes candidates; any query whose two best candidates are
    within rounding distance of each other is resolved by recomputing exact
    squared distances over every sample inside the tie radius.
    """

    def __init__(self, coords: np.ndarray):
        self.coords = np.asarray(coords, dtype=np.float64)
        self.tree = cKDTree(self.coords)

    def query_ties(self, points: np.ndarray) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        """Lowest-index nearest sample per point, plus the full tie set where there is one.

        The second value maps a query row to the ascending indices of every
        sample at exactly the minimal distance, for rows with two or more.
        """
        points = np.asarray(points, dtype=np.float64)
        ties: dict[int, np.ndarray] = {}
        if len(points) == 0:
            return np.zeros(0, dtype=np.int64), ties
        if len(self.coords) == 1:
            return np.zeros(len(points), dtype=np.int64), ties
        dist, idx = self.tree.query(points, k=2)
        nearest = idx[:, 0].astype(np.int64)
        slack = dist[:, 0] * (1 + _TIE_RTOL) + _TIE_ATOL
        for i in np.nonzero(dist[:, 1] <= slack)[0]:
            cand = np.asarray(sorted(self.tree.query_ball_point(points[i], slack[i])), dtype=np.int64)
            sq = squared_distances(self.coords[cand], points[i])
            best = cand[sq == sq.min()]
            nearest[i] = best[0]
            if len(best) > 1:
                ties[int(i)] = best
        return nearest, ties

    def query(self, points: np.ndarray) -> np.ndarray:
        """Nearest sample per point, ties broken by lowest row index."""
        return self.query_ties(points)[0]


def lattice_nearest_sq(points: np.ndarray, targets: np.ndarray, budget: int = 1 << 22) -> np.ndarray:
    """For each lattice point, the squared distance to the nearest target (exact int64)."""
    out = np.empty(len(points), dtype=np.int64)
    step = max(1, budget // max(1, len(targets) * points.shape[1]))
    for start in range(0, len(points), step):
        block = points[start:start + step]
        out[start:start + step] = squared_distances(block[:, None, :], targets[None, :, :]).min(axis=1)
    return out


def _lattice_nearest_sq_tree(points: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Same as :func:`lattice_nearest_sq`, via a kd-tree over the targets.

    Lattice coordinates are small integers, so the tree's float arithmetic on
    them is exact and its nearest target attains the true minimum; the
    distance is still recomputed in int64 for the returned value.
    """
    _, nearest = cKDTree(targets.astype(np.float64)).query(points.astype(np.float64))
    return squared_distances(points, targets[nearest])


def _as_selection(selected, n: int) -> np.ndarray:
    sel = np.unique(np.asarray(selected, dtype=np.int64).ravel())
    if sel.size == 0:
        raise ValueError("selection is empty")
    if sel[0] < 0 or sel[-1] >= n:
        raise IndexError(f"selection indices must lie in [0, {n})")
    return sel


class FusEvaluator:
    """Computes FUS for many selections over one fixed set of lattice points.

    Samples that share a lattice cell are indistinguishable for FUS, so the
    distance search runs over distinct occupied cells only.
    """

    brute_force_limit = 20_000

    def __init__(self, lattice: np.ndarray):
        self.n = len(lattice)
        cells, inverse, counts = np.unique(lattice, axis=0, return_inverse=True, return_counts=True)
        self.cells = cells
        self.inverse = inverse.reshape(-1)
        self.counts = counts

    def __call__(self, selected) -> float:
        sel = _as_selection(selected, self.n)
        sel_cells = self.inverse[sel]
        taken = np.bincount(sel_cells, minlength=len(self.cells))
        open_cells = np.nonzero(self.counts > taken)[0]
        if open_cells.size == 0:
            return 0.0
        sources = self.cells[open_cells]
        targets = self.cells[np.unique(sel_cells)]
        if len(sources) * len(targets) > self.brute_force_limit:
            best = _lattice_nearest_sq_tree(sources, targets)
        else:
            best = lattice_nearest_sq(sources, targets)
        return math.sqrt(int(best.max()))


def compute_fus(selected, grid_points: GridPointSet) -> float:
    """Largest lattice distance from an unselected sample to its nearest selected one."""
    return FusEvaluator(grid_points.lattice)(selected)


def nearest_selected_distances(selected, grid_points: GridPointSet) -> list[tuple[int, float]]:
    """``(index, distance)`` for every unselected sample, farthest first.

    Equal distances are ordered by ascending sample index.
    """
    lattice = grid_points.lattice
    sel = _as_selection(selected, len(lattice))
    rest = np.setdiff1d(np.arange(len(lattice)), sel)
    if rest.size == 0:
        return []
    sq = lattice_nearest_sq(lattice[rest], lattice[sel])
    order = np.lexsort((rest, -sq))
    return [(int(rest[i]), math.sqrt(int(sq[i]))) for i in order]


# --------------------------------------------------------------------------
# drawing


def trial_seed(seed: int, trial_index: int) -> int:
    """64-bit seed for one trial, derived from the master seed via SeedSequence spawning."""
    seq = np.random.SeedSequence(seed, spawn_key=(trial_index,))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def _draw_order(rng: np.random.Generator, m: int, batch: int) -> Iterator[np.ndarray]:
    """Yield positions in ``range(m)`` as a uniformly random permutation, batch by batch.

    Rejection sampling keeps early batches cheap when ``m`` is large; once half
    of the population is used up, the remainder is shuffled in one go.
    """
    seen: set[int] = set()
    while len(seen) < m:
        if 2 * len(seen) > m:
            used = np.fromiter(seen, dtype=np.int64, count=len(seen))
            rest = rng.permutation(np.setdiff1d(np.arange(m), used))
            for start in range(0, len(rest), batch):
                yield rest[start:start + batch]
            return
        fresh = []
        for c in rng.integers(0, m, size=batch).tolist():
            if c not in seen:
                seen.add(c)
                fresh.append(c)
        if fresh:
            yield np.asarray(fresh, dtype=np.int64)


class UniformSampler:
    """Reusable state for repeated draws over one sampling set."""

    def __init__(self, sset: SamplingSet, grid_points: GridPointSet, groups: Optional[Sequence[str]] = None):
        if len(sset) == 0:
            raise InsufficientDiversity("insufficient diversity for k: sampling set is empty")
        self.sset = sset
        self.grid_points = grid_points
        self.nearest = NearestSample(grid_points.scaled)
        self.fus = FusEvaluator(grid_points.lattice)
        if groups is not None:
            labels, codes = np.unique(np.asarray(groups, dtype=object).astype(str), return_inverse=True)
            self.group_codes = codes.reshape(-1)
            self.n_groups = len(labels)
        else:
            self.group_codes = None
            self.n_groups = grid_points.n_samples

    def check_feasible(self, k: int) -> None:
        n = self.grid_points.n_samples
        if k > n:
            raise InsufficientDiversity(f"insufficient diversity for k: k={k} exceeds {n} samples")
        if self.group_codes is not None and k > self.n_groups:
            raise InsufficientDiversity(
                f"insufficient diversity for k: k={k} exceeds {self.n_groups} distinct groups"
            )

    def _first_available(self, candidates, taken: set, used_groups: set) -> Optional[int]:
        for s in candidates:
            if s in taken:
                continue
            if self.group_codes is not None and int(self.group_codes[s]) in used_groups:
                continue
            return s
        return None

    def draw(self, k: int, seed: int) -> np.ndarray:
        """Indices of ``k`` distinct samples obtained from one random draw sequence.

        Each drawn lattice point yields its nearest sample; among exactly
        equidistant samples the lowest available index wins. A draw whose
        nearest samples are all taken (or group-blocked) is discarded.
        """
        self.check_feasible(k)
        rng = np.random.default_rng(seed)
        chosen: list[int] = []
        taken: set[int] = set()
        used_groups: set[int] = set()
        for positions in _draw_order(rng, len(self.sset), max(2 * k, 64)):
            nearest, ties = self.nearest.query_ties(self.sset.points[positions])
            for i, s in enumerate(nearest.tolist()):
                s = self._first_available(ties[i].tolist() if i in ties else (s,), taken, used_groups)
                if s is None:
                    continue
                taken.add(s)
                chosen.append(s)
                if self.group_codes is not None:
                    used_groups.add(int(self.group_codes[s]))
                if len(chosen) == k:
                    return np.asarray(chosen, dtype=np.int64)
        raise InsufficientDiversity(
            f"insufficient diversity for k: sampling set exhausted after {len(chosen)} of {k} samples"
        )


def draw_one_trial(
    sset: SamplingSet,
    grid_points: GridPointSet,
    matrix: FeatureMatrix,
    params: SelectionParams,
    trial_seed: int,
) -> np.ndarray:
    groups = matrix.groups if params.enforce_group_exclusion else None
    return UniformSampler(sset, grid_points, groups).draw(params.k, trial_seed)


def select(
    matrix: FeatureMatrix,
    grid_points: GridPointSet,
    sset: SamplingSet,
    params: SelectionParams,
    threads: int = 1,
) -> SelectionResult:
    """Best of ``params.n_trials`` independent draws by FUS.

    The outcome depends only on the inputs and ``params``; ``threads`` changes
    wall time, never the result.
    """
    groups = matrix.groups if params.enforce_group_exclusion else None
    sampler = UniformSampler(sset, grid_points, groups)
    sampler.check_feasible(params.k)

    def run(t: int) -> tuple[np.ndarray, float]:
        chosen = sampler.draw(params.k, trial_seed(params.seed, t))
        return chosen, sampler.fus(chosen)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trials = list(pool.map(run, range(params.n_trials)))
    else:
        trials = [run(t) for t in range(params.n_trials)]

    trial_fus = np.asarray([f for _, f in trials], dtype=np.float64)
    best = int(np.argmin(trial_fus))
    chosen = trials[best][0]
    return SelectionResult(
        selected_ids=[matrix.ids[i] for i in chosen],
        selected_indices=chosen,
        fus=float(trial_fus[best]),
        winning_trial=best,
        params=params,
        grid_config=GridConfig(grid_points.cell_size),
        trial_fus=trial_fus,
    )


@dataclass
class SamplingRun:
    """Everything produced on the way from raw features to a selection."""

    normalization: NormalizationModel
    normalized: FeatureMatrix
    grid_points: GridPointSet
    element: StructuringElement
    sset: SamplingSet
    result: SelectionResult


def sample_subset(
    matrix: FeatureMatrix,
    params: SelectionParams,
    cell_size: float = 0.1,
    radius: float = DEFAULT_RADIUS,
    threads: int = 1,
) -> SamplingRun:
    """z-score, discretize, dilate and select in one call."""
    model = fit_zscore(matrix)
    normalized = apply_zscore(matrix, model)
    grid_points = discretize(normalized, GridConfig(cell_size))
    element = build_structuring_element(grid_points.dim, radius)
    sset = dilate(grid_points, element)
    result = select(normalized, grid_points, sset, params, threads=threads)
    return SamplingRun(model, normalized, grid_points, element, sset, result)
