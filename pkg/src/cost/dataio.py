"""Datasets on disk and desk-scale synthetic generators.

File formats:
  * embeddings: binary, magic ``CSTE`` | u32 version=1 | u32 count | u32 dim |
    count*dim little-endian float32, with a ``<path>.ids`` text sidecar holding
    one item id per row;
  * behavior sequences: one ``user_id<TAB>item item ...`` line per user,
    items time-ascending;
  * token maps: ``item_id<TAB>c1 c2 ... cM dis`` with non-negative integers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DataError,
    DuplicateIdError,
    FormatError,
    TruncatedError,
    UsageError,
)
from .seeding import make_rng

MAGIC = b"CSTE"
VERSION = 1
MIN_SEQUENCE_LEN = 3  # leave-one-out needs train/validation/test items


@dataclass
class ItemEmbedding:
    item_id: str
    vector: np.ndarray  # float32, shape (d_in,)


@dataclass
class BehaviorSequence:
    user_id: str
    items: list[str]  # time-ascending


@dataclass(frozen=True)
class SemanticTokenTuple:
    """Discrete code tuple for one item, plus a collision-breaking suffix."""

    codes: tuple[int, ...]
    disambig: int = 0

    def as_flat(self) -> tuple[int, ...]:
        return self.codes + (self.disambig,)


@dataclass
class SyntheticSpec:
    """Clustered synthetic catalog with sticky-random-walk user histories."""

    n_items: int = 1000
    n_clusters: int = 32
    d_in: int = 768
    cluster_spread: float = 0.05
    n_users: int = 200
    seq_len: tuple[int, int] = (5, 15)
    walk_stickiness: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        if self.n_clusters < 1 or self.n_items < self.n_clusters:
            raise UsageError("need 1 <= n_clusters <= n_items")
        if self.d_in < 1:
            raise UsageError("d_in must be positive")
        if self.cluster_spread < 0:
            raise UsageError("cluster_spread must be non-negative")
        if not (0.0 <= self.walk_stickiness <= 1.0):
            raise UsageError("walk_stickiness must lie in [0, 1]")
        lo, hi = self.seq_len
        if lo > hi or lo < MIN_SEQUENCE_LEN:
            raise UsageError(f"seq_len range must satisfy {MIN_SEQUENCE_LEN} <= lo <= hi")


@dataclass
class SuccessorSpec:
    """Deterministic-successor catalog: item i is always followed by the next
    item in its cycle block."""

    n_items: int = 500
    cycle_len: int = 50
    d_in: int = 64
    n_users: int = 2000
    seq_len: tuple[int, int] = (8, 16)
    seed: int = 0

    def validate(self) -> None:
        if self.n_items < 1 or self.cycle_len < 2:
            raise UsageError("need n_items >= 1 and cycle_len >= 2")
        if self.d_in < 1:
            raise UsageError("d_in must be positive")
        lo, hi = self.seq_len
        if lo > hi or lo < MIN_SEQUENCE_LEN:
            raise UsageError(f"seq_len range must satisfy {MIN_SEQUENCE_LEN} <= lo <= hi")


# ---------------------------------------------------------------------------
# CSTE binary matrices
# ---------------------------------------------------------------------------


def write_cste(path: str | Path, matrix: np.ndarray) -> None:
    """Write a 2-D array as little-endian float32."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise UsageError(f"CSTE stores 2-D matrices, got shape {matrix.shape}")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.tobytes())


def read_cste(path: str | Path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16 or header[:4] != MAGIC:
            raise FormatError(f"{path}: not a CSTE file (bad magic)")
        version, count, dim = struct.unpack("<III", header[4:])
        if version != VERSION:
            raise FormatError(f"{path}: unsupported CSTE version {version}")
        payload = fh.read(4 * count * dim + 1)
    if len(payload) < 4 * count * dim:
        raise TruncatedError(
            f"{path}: header announces {count}x{dim} floats, payload is short"
        )
    if len(payload) > 4 * count * dim:
        raise FormatError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(count, dim).copy()


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------


def _ids_path(path: str | Path) -> Path:
    return Path(str(path) + ".ids")


def save_embeddings(path: str | Path, items: Sequence[ItemEmbedding]) -> None:
    if not items:
        raise UsageError("refusing to write an empty embedding file")
    dims = {item.vector.shape for item in items}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise UsageError(f"all vectors must share one dimension, got {sorted(dims)}")
    matrix = np.stack([item.vector for item in items]).astype("<f4")
    write_cste(path, matrix)
    with open(_ids_path(path), "w", encoding="utf-8") as fh:
        for item in items:
            if "\n" in item.item_id or "\t" in item.item_id:
                raise UsageError(f"item id {item.item_id!r} contains whitespace")
            fh.write(item.item_id + "\n")


def load_embeddings(path: str | Path) -> list[ItemEmbedding]:
    matrix = read_cste(path)
    ids_file = _ids_path(path)
    if not ids_file.exists():
        raise FormatError(f"{ids_file}: id sidecar is missing")
    with open(ids_file, encoding="utf-8") as fh:
        ids = [line.rstrip("\n") for line in fh if line.strip()]
    if len(ids) != matrix.shape[0]:
        raise TruncatedError(
            f"{ids_file}: {len(ids)} ids for {matrix.shape[0]} embedding rows"
        )
    seen: set[str] = set()
    for item_id in ids:
        if item_id in seen:
            raise DuplicateIdError(f"duplicate item id {item_id!r} in {ids_file}")
        seen.add(item_id)
    return [ItemEmbedding(item_id, matrix[i]) for i, item_id in enumerate(ids)]


# ---------------------------------------------------------------------------
# Behavior sequences
# ---------------------------------------------------------------------------


def save_sequences(path: str | Path, sequences: Sequence[BehaviorSequence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            for token in (seq.user_id, *seq.items):
                if any(c in token for c in "\t\n "):
                    raise UsageError(f"id {token!r} contains whitespace")
            fh.write(seq.user_id + "\t" + " ".join(seq.items) + "\n")


def load_sequences(
    path: str | Path, min_len: int = MIN_SEQUENCE_LEN
) -> tuple[list[BehaviorSequence], int]:
    """Returns (sequences, rejected_short_count)."""
    sequences: list[BehaviorSequence] = []
    rejected = 0
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'user<TAB>items'")
            user_id, items_field = parts
            if user_id in seen:
                raise DuplicateIdError(f"duplicate user id {user_id!r} in {path}")
            seen.add(user_id)
            items = items_field.split()
            if len(items) < min_len:
                rejected += 1
                continue
            sequences.append(BehaviorSequence(user_id, items))
    return sequences, rejected


# ---------------------------------------------------------------------------
# Token maps
# ---------------------------------------------------------------------------


def save_token_map(path: str | Path, tokens: Mapping[str, SemanticTokenTuple]) -> None:
    """One line per item, codes then the disambiguation suffix, sorted by id."""
    with open(path, "w", encoding="utf-8") as fh:
        for item_id in sorted(tokens):
            tok = tokens[item_id]
            fields = " ".join(str(c) for c in tok.as_flat())
            fh.write(f"{item_id}\t{fields}\n")


def load_token_map(
    path: str | Path, num_levels: int | None = None
) -> dict[str, SemanticTokenTuple]:
    """Read a token map.

    When ``num_levels`` is None the final integer on each line is taken to be
    the disambiguation suffix (the layout this package writes). Pass
    ``num_levels`` explicitly to read maps that omit the suffix.
    """
    tokens: dict[str, SemanticTokenTuple] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'item<TAB>codes'")
            item_id, codes_field = parts
            if item_id in tokens:
                raise DuplicateIdError(f"duplicate item id {item_id!r} in {path}")
            try:
                values = [int(v) for v in codes_field.split()]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-integer code") from exc
            if any(v < 0 for v in values):
                raise FormatError(f"{path}:{lineno}: negative code")
            if num_levels is None:
                if len(values) < 2:
                    raise FormatError(f"{path}:{lineno}: need codes plus suffix")
                codes, dis = tuple(values[:-1]), values[-1]
            elif len(values) == num_levels:
                codes, dis = tuple(values), 0
            elif len(values) == num_levels + 1:
                codes, dis = tuple(values[:-1]), values[-1]
            else:
                raise FormatError(
                    f"{path}:{lineno}: expected {num_levels} or {num_levels + 1} "
                    f"integers, got {len(values)}"
                )
            tokens[item_id] = SemanticTokenTuple(codes, dis)
    return tokens


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def _sample_cluster_means(
    rng: np.random.Generator, n_clusters: int, dim: int, min_dist: float
) -> np.ndarray:
    """Unit-sphere means with pairwise distance >= min_dist, by rejection."""
    means = np.empty((n_clusters, dim))
    accepted = 0
    attempts = 0
    max_attempts = 200 * max(n_clusters, 1)
    while accepted < n_clusters:
        if attempts >= max_attempts:
            raise UsageError(
                f"could not place {n_clusters} cluster means at pairwise distance "
                f">= {min_dist:.4g} on the unit sphere; reduce n_clusters or "
                "cluster_spread"
            )
        attempts += 1
        v = rng.standard_normal(dim)
        norm = np.linalg.norm(v)
        if norm == 0.0:
            continue
        v /= norm
        if accepted and np.linalg.norm(means[:accepted] - v, axis=1).min() < min_dist:
            continue
        means[accepted] = v
        accepted += 1
    return means


def synth_clusters(spec: SyntheticSpec) -> tuple[list[ItemEmbedding], np.ndarray]:
    """Clustered item embeddings; returns (items, cluster labels)."""
    spec.validate()
    rng = make_rng(spec.seed, "clusters")
    means = _sample_cluster_means(rng, spec.n_clusters, spec.d_in, 4.0 * spec.cluster_spread)
    # every cluster owns at least one item
    labels = np.concatenate(
        [
            np.arange(spec.n_clusters),
            rng.integers(0, spec.n_clusters, size=spec.n_items - spec.n_clusters),
        ]
    )
    noise = rng.standard_normal((spec.n_items, spec.d_in)) * spec.cluster_spread
    vectors = (means[labels] + noise).astype(np.float32)
    width = max(5, len(str(spec.n_items - 1)))
    items = [
        ItemEmbedding(f"item_{i:0{width}d}", vectors[i]) for i in range(spec.n_items)
    ]
    return items, labels


def synth_sequences(spec: SyntheticSpec, labels: np.ndarray) -> list[BehaviorSequence]:
    """Sticky cluster-level random walks over the labeled catalog."""
    spec.validate()
    labels = np.asarray(labels)
    if labels.shape != (spec.n_items,):
        raise UsageError("labels must match the spec item count")
    rng = make_rng(spec.seed, "sequences")
    width = max(5, len(str(spec.n_items - 1)))
    item_ids = [f"item_{i:0{width}d}" for i in range(spec.n_items)]
    members = [np.flatnonzero(labels == c) for c in range(spec.n_clusters)]
    for c, m in enumerate(members):
        if m.size == 0:
            raise DataError(f"cluster {c} has no items; cannot sample sequences")
    lo, hi = spec.seq_len
    sequences = []
    uw = max(4, len(str(spec.n_users - 1)))
    for u in range(spec.n_users):
        length = int(rng.integers(lo, hi + 1))
        cluster = int(rng.integers(spec.n_clusters))
        items = []
        for _ in range(length):
            pool = members[cluster]
            items.append(item_ids[int(pool[rng.integers(pool.size)])])
            if spec.n_clusters > 1 and rng.random() >= spec.walk_stickiness:
                jump = int(rng.integers(spec.n_clusters - 1))
                cluster = jump if jump < cluster else jump + 1
        sequences.append(BehaviorSequence(f"user_{u:0{uw}d}", items))
    return sequences


def successor_of(index: int, n_items: int, cycle_len: int) -> int:
    """Next item in the cycle block containing ``index``."""
    block_start = (index // cycle_len) * cycle_len
    block_size = min(cycle_len, n_items - block_start)
    return block_start + (index - block_start + 1) % block_size


def synth_successor(spec: SuccessorSpec) -> tuple[list[ItemEmbedding], list[BehaviorSequence]]:
    """Unit-norm random embeddings and deterministic-successor walks."""
    spec.validate()
    rng = make_rng(spec.seed, "successor")
    vectors = rng.standard_normal((spec.n_items, spec.d_in))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    vectors = vectors.astype(np.float32)
    width = max(5, len(str(spec.n_items - 1)))
    items = [
        ItemEmbedding(f"item_{i:0{width}d}", vectors[i]) for i in range(spec.n_items)
    ]
    lo, hi = spec.seq_len
    uw = max(4, len(str(spec.n_users - 1)))
    sequences = []
    for u in range(spec.n_users):
        length = int(rng.integers(lo, hi + 1))
        current = int(rng.integers(spec.n_items))
        walk = []
        for _ in range(length):
            walk.append(items[current].item_id)
            current = successor_of(current, spec.n_items, spec.cycle_len)
        sequences.append(BehaviorSequence(f"user_{u:0{uw}d}", walk))
    return items, sequences
