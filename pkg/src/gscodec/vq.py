"""K-means vector quantization: codebooks, Lloyd runs and the QAT update schedule."""

from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import _nearest
from .model import GROUPS, GaussianCloud, ParamGroup, group_view

log = logging.getLogger(__name__)

# rows per kernel call scale as CHUNK_ELEMENTS / k
CHUNK_ELEMENTS = 1 << 22


class Init(str, enum.Enum):
    KMEANS_PLUS_PLUS = "kmeans++"
    RANDOM_SAMPLE = "random"


@dataclass
class Codebook:
    group: str
    centroids: np.ndarray
    assignments: np.ndarray
    history: list[float] = field(default_factory=list)  # SSE after init and each Lloyd iteration
    empty: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def lookup(self) -> np.ndarray:
        return self.centroids[self.assignments]


@dataclass
class VqConfig:
    k_dc: int = 4096
    k_sh: int = 4096
    k_scale: int = 16384
    k_rot: int = 16384
    lloyd_iters: int = 30
    init: Init = Init.KMEANS_PLUS_PLUS
    seed: int = 0

    def __post_init__(self):
        self.init = Init(self.init)
        if min(self.k_dc, self.k_sh, self.k_scale, self.k_rot) < 1:
            raise ValueError("codebook sizes must be >= 1")
        if self.lloyd_iters < 0:
            raise ValueError("lloyd_iters must be >= 0")

    def k_for(self, group: ParamGroup | str) -> int:
        return {
            ParamGroup.COLOR_DC: self.k_dc,
            ParamGroup.SH: self.k_sh,
            ParamGroup.SCALE: self.k_scale,
            ParamGroup.ROTATION: self.k_rot,
        }[ParamGroup(group)]


@dataclass
class QatSchedule:
    """Training schedule; fractions are of ``total_iters``.

    Defaults map the 30K-iteration recipe: plain training until 20K, assignment
    refresh every 100 iterations until 25K, opacity regularization 15K-20K.
    """

    total_iters: int = 30000
    qat_start: float = 2 / 3
    assign_every: int = 100
    assign_until: float = 5 / 6
    reg_lambda: float = 1e-4
    reg_start: float = 1 / 2
    reg_end: float = 2 / 3
    prune_every: int = 1000
    min_opacity: float = 0.005

    def __post_init__(self):
        if not 0 <= self.qat_start <= self.assign_until <= 1:
            raise ValueError("need 0 <= qat_start <= assign_until <= 1")
        if self.reg_start > self.reg_end:
            raise ValueError("need reg_start <= reg_end")
        if self.assign_every < 1 or self.prune_every < 1:
            raise ValueError("assign_every and prune_every must be >= 1")

    def _step(self, frac: float) -> int:
        return int(round(frac * self.total_iters))

    @property
    def qat_start_step(self) -> int:
        return self._step(self.qat_start)

    @property
    def assign_until_step(self) -> int:
        return self._step(self.assign_until)

    @property
    def reg_start_step(self) -> int:
        return self._step(self.reg_start)

    @property
    def reg_end_step(self) -> int:
        return self._step(self.reg_end)


def sse(data: np.ndarray, centroids: np.ndarray, assignments: np.ndarray) -> float:
    """Within-cluster sum of squared distances, accumulated in float64."""
    diff = np.asarray(data, dtype=np.float64) - np.asarray(centroids, dtype=np.float64)[assignments]
    return float(np.einsum("ij,ij->", diff, diff))


def assign(data: np.ndarray, centroids: np.ndarray, chunk_size: int | None = None) -> np.ndarray:
    """Nearest centroid per row by squared Euclidean distance; ties go to the lowest index.

    Distances are exact float64 differences, so the result is the same for
    any ``chunk_size``. Memory stays at one k-vector per call; chunks only
    bound how many rows each kernel call handles.
    """
    x = np.ascontiguousarray(data, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    if x.ndim != 2 or c.ndim != 2 or x.shape[1] != c.shape[1]:
        raise ValueError(f"dimension mismatch: data {x.shape}, centroids {c.shape}")
    n, k = x.shape[0], c.shape[0]
    out = np.empty(n, dtype=np.int64)
    if n == 0:
        return out
    if k == 0:
        raise ValueError("empty codebook")
    if x.shape[1] == 0:
        out[:] = 0
        return out
    if chunk_size is None:
        chunk_size = max(1, CHUNK_ELEMENTS // k)
    ct = np.ascontiguousarray(c.T)
    for start in range(0, n, chunk_size):
        _nearest.nearest(x[start:start + chunk_size], ct, out[start:start + chunk_size])
    return out


def update_centroids(data: np.ndarray, assignments: np.ndarray, k: int,
                     previous: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-cluster means (float64 accumulation).

    Returns ``(centroids, empty)``. Empty clusters keep their ``previous`` row
    (zeros when no previous table is given) and are flagged in ``empty``.
    """
    x = np.asarray(data, dtype=np.float64)
    assignments = np.asarray(assignments)
    d = x.shape[1]
    counts = np.bincount(assignments, minlength=k)[:k]
    sums = np.empty((k, d), dtype=np.float64)
    for j in range(d):
        sums[:, j] = np.bincount(assignments, weights=x[:, j], minlength=k)[:k]
    empty = counts == 0
    centroids = np.zeros((k, d)) if previous is None else np.array(previous, dtype=np.float64, copy=True)
    filled = ~empty
    centroids[filled] = sums[filled] / counts[filled, None]
    return centroids, empty


def reseed_empty(data: np.ndarray, centroids: np.ndarray, assignments: np.ndarray,
                 empty: np.ndarray) -> np.ndarray:
    """Move each flagged centroid onto the point farthest from its own centroid."""
    x = np.asarray(data, dtype=np.float64)
    centroids = np.array(centroids, dtype=np.float64, copy=True)
    diff = x - centroids[assignments]
    dist = np.einsum("ij,ij->i", diff, diff)
    order = np.argsort(-dist, kind="stable")
    for j, row in zip(np.flatnonzero(empty), order):
        centroids[j] = x[row]
    return centroids


def _kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    first = int(rng.integers(x.shape[0]))
    draws = rng.random(k)
    chosen = np.empty(k, dtype=np.int64)
    _nearest.kmeans_plus_plus(np.ascontiguousarray(x, dtype=np.float64), first, draws, chosen)
    return chosen


def init_codebook(data: np.ndarray, k: int, init: Init | str = Init.KMEANS_PLUS_PLUS,
                  seed: int = 0, group: str = "") -> Codebook:
    x = np.asarray(data, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot initialize a codebook from zero rows")
    if k < 1:
        raise ValueError("k must be >= 1")
    init = Init(init)
    rng = np.random.default_rng(seed)
    if k > n:
        warnings.warn(f"k={k} exceeds N={n}; padding the codebook with duplicates", stacklevel=2)
        idx = np.concatenate([np.arange(n), np.full(k - n, n - 1)])
    elif init is Init.RANDOM_SAMPLE:
        idx = rng.choice(n, size=k, replace=False)
    else:
        idx = _kmeans_plus_plus(x, k, rng)
    centroids = x[idx]
    assignments = assign(x, centroids)
    return Codebook(group, centroids, assignments, history=[sse(x, centroids, assignments)])


def lloyd(data: np.ndarray, k: int, iters: int = 30, init: Init | str = Init.KMEANS_PLUS_PLUS,
          seed: int = 0, group: str = "", reseed: bool = False) -> Codebook:
    """Plain Lloyd iterations from ``init_codebook`` until ``iters`` or no assignment changes.

    Centroids are returned in the dtype of ``data``; the SSE trace in
    ``history`` is measured on the float64 iterates.
    """
    x = np.asarray(data, dtype=np.float64)
    book = init_codebook(x, k, init, seed, group)
    centroids, assignments = book.centroids, book.assignments
    empty = np.zeros(k, dtype=bool)
    for _ in range(iters):
        centroids, empty = update_centroids(x, assignments, k, centroids)
        if reseed and empty.any():
            centroids = reseed_empty(x, centroids, assignments, empty)
        new = assign(x, centroids)
        book.history.append(sse(x, centroids, new))
        changed = not np.array_equal(new, assignments)
        assignments = new
        if not changed:
            break
    out_dtype = np.asarray(data).dtype if np.asarray(data).dtype.kind == "f" else np.float64
    book.centroids = centroids.astype(out_dtype)
    # final assignments against the stored (possibly narrowed) centroids, so
    # reassigning to a frozen copy of this codebook reproduces them
    narrowed = not np.array_equal(book.centroids.astype(np.float64), centroids)
    book.assignments = assign(x, book.centroids) if narrowed else assignments
    book.empty = empty
    return book


def qat_update(codebook: Codebook, data: np.ndarray, step: int, schedule: QatSchedule) -> Codebook:
    """One training-step codebook update, in place.

    Centroids follow the current (non-quantized) parameters every step. On
    the refresh schedule one Lloyd iteration runs on top of that: reassign to
    the refreshed centroids, then recompute them. Assigning against centroids
    that already track ``data`` keeps k = N codebooks an exact identity.
    """
    x = np.asarray(data, dtype=np.float64)
    centroids, empty = update_centroids(x, codebook.assignments, codebook.k, codebook.centroids)
    if step % schedule.assign_every == 0 and step <= schedule.assign_until_step:
        codebook.assignments = assign(x, centroids)
        centroids, empty = update_centroids(x, codebook.assignments, codebook.k, centroids)
    codebook.centroids = centroids.astype(codebook.centroids.dtype)
    codebook.empty = empty
    return codebook


def fit_cloud(cloud: GaussianCloud, config: VqConfig, groups=GROUPS) -> dict[ParamGroup, Codebook]:
    """Post-training Lloyd run for each group."""
    books = {}
    for group in groups:
        data = group_view(cloud, group)
        k = config.k_for(group)
        log.info("lloyd %s: N=%d k=%d iters=%d", group.value, len(data), k, config.lloyd_iters)
        # seed by fixed group position so subsets of groups reproduce the full run
        books[group] = lloyd(data, k, config.lloyd_iters, config.init, config.seed + GROUPS.index(group), group.value)
    return books


def quantize_cloud(cloud: GaussianCloud, codebooks: Mapping[ParamGroup, Codebook],
                   groups=GROUPS) -> GaussianCloud:
    """Replace each group block by its assigned centroids; position and opacity pass through."""
    replacements = {}
    for group in groups:
        book = codebooks[group]
        if len(book.assignments) != cloud.count:
            raise ValueError(f"{group.value}: {len(book.assignments)} assignments for {cloud.count} Gaussians")
        if book.dim != group.dim:
            raise ValueError(f"{group.value}: codebook dim {book.dim}, expected {group.dim}")
        replacements[group.value] = np.asarray(book.centroids, dtype=np.float32)[book.assignments]
    return cloud.with_fields(**replacements)


def assign_frozen(cloud: GaussianCloud, frozen: Mapping[ParamGroup, Codebook], groups=GROUPS
                  ) -> tuple[GaussianCloud, dict[ParamGroup, Codebook]]:
    """Quantize against fixed codebooks; only assignments are computed."""
    books = {}
    for group in groups:
        if group not in frozen:
            raise ValueError(f"no frozen codebook for {group.value}")
        src = frozen[group]
        if src.dim != group.dim:
            raise ValueError(f"{group.value}: frozen codebook dim {src.dim}, expected {group.dim}")
        idx = assign(group_view(cloud, group), src.centroids)
        books[group] = Codebook(src.group or group.value, src.centroids, idx)
    return quantize_cloud(cloud, books, groups), books
