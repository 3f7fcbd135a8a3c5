"""Codebooks and the residual quantization loop.

Each level approximates the residual left by the previous levels with its
nearest code vector; the reconstruction is the sum of the selected codes.
Distances are squared Euclidean; ties break toward the smallest index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .dataio import read_cste, write_cste
from .errors import ConfigError, UsageError
from .numerics import Tensor
from .numerics import straight_through as _straight_through_op
from .numerics import take as _take

Array = np.ndarray


@dataclass
class CodebookSet:
    """M levels of K code vectors of dimension d; optionally one shared table."""

    num_levels: int
    codebook_size: int
    dim: int
    shared: bool
    tables: list[Tensor]  # one entry when shared, else num_levels entries

    @classmethod
    def from_arrays(cls, arrays: Sequence[Array], num_levels: int, shared: bool) -> "CodebookSet":
        expected = 1 if shared else num_levels
        if len(arrays) != expected:
            raise ConfigError(f"expected {expected} tables, got {len(arrays)}")
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1:
            raise ConfigError(f"codebook tables disagree on shape: {sorted(shapes)}")
        k, d = next(iter(shapes))
        tables = [Tensor(np.array(a), requires_grad=True) for a in arrays]
        return cls(num_levels=num_levels, codebook_size=k, dim=d, shared=shared, tables=tables)

    def table(self, level: int) -> Tensor:
        if not 0 <= level < self.num_levels:
            raise UsageError(f"level {level} out of range [0, {self.num_levels})")
        return self.tables[0] if self.shared else self.tables[level]

    def parameters(self) -> list[Tensor]:
        return list(self.tables)


@dataclass
class QuantizationResult:
    """Codes plus the intermediate residuals of one quantization pass.

    ``residuals[0]`` is the input itself, ``residuals[i]`` what is left after
    level i; ``code_vectors[i]`` the selected entries of level i's table;
    ``z_hat`` their sum. Entries are Tensors when the input was on the tape,
    plain arrays otherwise.
    """

    codes: Array  # (M,) or (B, M) integer
    residuals: list  # length M + 1
    code_vectors: list  # length M
    z_hat: Union[Tensor, Array]


def _nearest_indices(residual: Array, table: Array) -> Array:
    """Argmin over squared Euclidean distance, first index on ties.

    ``residual`` is (B, d); distances are computed from explicit differences
    so that exact input ties stay exact.
    """
    diffs = residual[:, None, :] - table[None, :, :]
    dists = np.einsum("bkd,bkd->bk", diffs, diffs)
    return np.argmin(dists, axis=1)


def nearest_code(residual: Array, level: int, books: CodebookSet) -> tuple[int, Array]:
    """Closest code vector of one level for a single residual vector."""
    residual = np.asarray(residual)
    if residual.ndim != 1 or residual.shape[0] != books.dim:
        raise UsageError(f"residual must be a vector of dimension {books.dim}")
    table = books.table(level).data
    if table.shape[0] == 0:
        raise ConfigError(f"codebook level {level} is empty")
    idx = int(_nearest_indices(residual[None, :], table)[0])
    return idx, table[idx].copy()


def residual_quantize(z, books: CodebookSet) -> QuantizationResult:
    """Quantize ``z`` level by level against the running residual.

    Accepts a single vector (d,) or a batch (B, d), as a plain array or a
    Tensor. With a Tensor input the residuals and selected code vectors stay
    on the tape (code selection itself is a constant of the forward pass).
    """
    on_tape = isinstance(z, Tensor)
    data = z.data if on_tape else np.asarray(z)
    single = data.ndim == 1
    batch = data[None, :] if single else data
    if batch.ndim != 2 or batch.shape[1] != books.dim:
        raise UsageError(f"expected vectors of dimension {books.dim}, got {data.shape}")

    # forward-only code selection
    codes = np.empty((batch.shape[0], books.num_levels), dtype=np.int64)
    running = batch.copy()
    for level in range(books.num_levels):
        table = books.table(level).data
        if table.shape[0] == 0:
            raise ConfigError(f"codebook level {level} is empty")
        idx = _nearest_indices(running, table)
        codes[:, level] = idx
        running -= table[idx]

    def maybe_squeeze(x):
        if not single:
            return x
        return x.reshape(-1) if isinstance(x, Tensor) else x.reshape(-1)

    if on_tape:
        residual = z if not single else z.reshape(1, -1)
        residuals = [residual]
        code_vectors = []
        z_hat = None
        for level in range(books.num_levels):
            picked = _take(books.table(level), codes[:, level])
            code_vectors.append(picked)
            z_hat = picked if z_hat is None else z_hat + picked
            residual = residual - picked
            residuals.append(residual)
        if single:
            residuals = [maybe_squeeze(r) for r in residuals]
            code_vectors = [maybe_squeeze(c) for c in code_vectors]
            z_hat = maybe_squeeze(z_hat)
    else:
        residual = batch
        residuals = [residual]
        code_vectors = []
        z_hat = np.zeros_like(batch)
        for level in range(books.num_levels):
            picked = books.table(level).data[codes[:, level]]
            code_vectors.append(picked)
            z_hat = z_hat + picked
            residual = residual - picked
            residuals.append(residual)
        if single:
            residuals = [r.reshape(-1) for r in residuals]
            code_vectors = [c.reshape(-1) for c in code_vectors]
            z_hat = z_hat.reshape(-1)

    return QuantizationResult(
        codes=codes[0] if single else codes,
        residuals=residuals,
        code_vectors=code_vectors,
        z_hat=z_hat,
    )


def straight_through(z: Tensor, z_hat) -> Tensor:
    """Forward ``z_hat`` exactly; gradients pass through to ``z`` unchanged."""
    return _straight_through_op(z, z_hat)


# ---------------------------------------------------------------------------
# k-means initialization
# ---------------------------------------------------------------------------


def _distinct_rows(points: Array) -> Array:
    """Unique rows in first-occurrence order."""
    _, first = np.unique(points, axis=0, return_index=True)
    return points[np.sort(first)]


def kmeans_init(
    points: Array, k: int, seed: int, max_iters: int = 100
) -> tuple[Array, int]:
    """k-means++ seeding plus Lloyd iterations to an assignment fixpoint.

    Returns (centroids (k, d), jitter_count). When the input has fewer than k
    distinct rows, the distinct rows are returned in first-occurrence order
    and the remaining slots are filled with jittered copies; jitter_count
    reports how many slots needed that treatment. Empty clusters during Lloyd
    iterations are reseeded to the point farthest from its assigned centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise UsageError("kmeans_init needs a non-empty (n, d) batch")
    if k < 1:
        raise UsageError("k must be positive")
    rng = np.random.default_rng(seed)
    distinct = _distinct_rows(points)
    if distinct.shape[0] <= k:
        jitter_count = k - distinct.shape[0]
        if jitter_count == 0:
            return distinct.copy(), 0
        scale = 1e-6 * max(1.0, float(np.abs(points).max()))
        extra = [
            distinct[i % distinct.shape[0]]
            + rng.standard_normal(points.shape[1]) * scale
            for i in range(jitter_count)
        ]
        return np.vstack([distinct, extra]), jitter_count

    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    best_d2 = np.full(n, np.inf)
    for j in range(1, k):
        diff = points - centroids[j - 1]
        best_d2 = np.minimum(best_d2, np.einsum("nd,nd->n", diff, diff))
        total = best_d2.sum()
        if total <= 0:
            centroids[j] = points[rng.integers(n)]
            continue
        centroids[j] = points[rng.choice(n, p=best_d2 / total)]

    assignment = np.full(n, -1)
    for _ in range(max_iters):
        new_assignment = _nearest_indices(points, centroids)
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for c in range(k):
            mask = assignment == c
            if mask.any():
                centroids[c] = points[mask].mean(axis=0)
        empty = [c for c in range(k) if not (assignment == c).any()]
        if empty:
            diff = points - centroids[assignment]
            dist = np.einsum("nd,nd->n", diff, diff)
            for c in empty:
                far = int(np.argmax(dist))
                centroids[c] = points[far]
                dist[far] = -1.0  # do not reuse the same point
    return centroids, 0


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


@dataclass
class UtilizationReport:
    fractions: list[float]  # per level, share of codes selected at least once
    histogram: Array  # (M, K) usage counts


def utilization(assignments: Array, books: CodebookSet) -> UtilizationReport:
    """Fraction of each level's codes in use over a batch of assignments."""
    assignments = np.asarray(assignments)
    if assignments.ndim == 1:
        assignments = assignments[None, :]
    if assignments.size == 0:
        raise UsageError("utilization needs at least one assignment")
    if assignments.shape[1] != books.num_levels:
        raise UsageError(
            f"assignments have {assignments.shape[1]} levels, codebooks {books.num_levels}"
        )
    hist = np.zeros((books.num_levels, books.codebook_size), dtype=np.int64)
    for level in range(books.num_levels):
        counts = np.bincount(assignments[:, level], minlength=books.codebook_size)
        hist[level] = counts
    fractions = [(hist[level] > 0).mean() for level in range(books.num_levels)]
    return UtilizationReport(fractions=[float(f) for f in fractions], histogram=hist)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_HEADER = "codebooks.json"


def save_codebooks(directory: str | Path, books: CodebookSet) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "num_levels": books.num_levels,
        "codebook_size": books.codebook_size,
        "dim": books.dim,
        "shared": books.shared,
    }
    with open(directory / _HEADER, "w", encoding="utf-8") as fh:
        json.dump(header, fh, sort_keys=True, indent=2)
        fh.write("\n")
    if books.shared:
        write_cste(directory / "codebook_shared.cste", books.tables[0].data)
    else:
        for level, table in enumerate(books.tables):
            write_cste(directory / f"codebook_l{level + 1}.cste", table.data)


def load_codebooks(directory: str | Path) -> CodebookSet:
    directory = Path(directory)
    with open(directory / _HEADER, encoding="utf-8") as fh:
        header = json.load(fh)
    shared = bool(header["shared"])
    num_levels = int(header["num_levels"])
    if shared:
        arrays = [read_cste(directory / "codebook_shared.cste")]
    else:
        arrays = [
            read_cste(directory / f"codebook_l{level + 1}.cste")
            for level in range(num_levels)
        ]
    books = CodebookSet.from_arrays(arrays, num_levels=num_levels, shared=shared)
    if books.codebook_size != int(header["codebook_size"]) or books.dim != int(header["dim"]):
        raise ConfigError(f"{directory}: codebook header disagrees with stored tables")
    return books
