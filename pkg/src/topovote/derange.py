"""Derangement sampling and validation.

A derangement over C classes is a fixed-point-free permutation of
[0, C). Ensembles additionally need sets of derangements that pairwise
disagree at EVERY index; such a set is an identity-avoiding Latin
rectangle and can have at most C-1 members, so larger collections are
split into groups.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SamplingExhaustedError(RuntimeError):
    """Set construction gave up; message reports the attempt budget."""


def _check_mapping(mapping: np.ndarray) -> np.ndarray:
    mapping = np.asarray(mapping, dtype=np.int64)
    if mapping.ndim != 1 or mapping.size < 2:
        raise ValueError("a derangement needs at least 2 entries in a flat array")
    c = mapping.size
    if not np.array_equal(np.sort(mapping), np.arange(c)):
        raise ValueError("mapping is not a permutation")
    if np.any(mapping == np.arange(c)):
        raise ValueError("mapping has a fixed point")
    return mapping


@dataclass(frozen=True)
class Derangement:
    """Fixed-point-free permutation; mapping[i] is the class i is sent to."""

    mapping: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mapping", _check_mapping(self.mapping))

    @property
    def num_classes(self) -> int:
        return int(self.mapping.size)

    def __getitem__(self, i: int) -> int:
        return int(self.mapping[i])

    def as_tuple(self) -> tuple:
        return tuple(int(v) for v in self.mapping)


def _pairwise_disagree(a: np.ndarray, b: np.ndarray) -> bool:
    return bool(np.all(a != b))


@dataclass(frozen=True)
class DerangementSet:
    """Derangements over a common C, partitioned into groups inside which
    every pair disagrees at every index."""

    members: tuple
    groups: tuple

    def __post_init__(self):
        members = tuple(self.members)
        groups = tuple(tuple(int(i) for i in g) for g in self.groups)
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "groups", groups)
        if not members:
            raise ValueError("empty derangement set")
        c = members[0].num_classes
        if any(m.num_classes != c for m in members):
            raise ValueError("members span different class counts")
        flat = [i for g in groups for i in g]
        if sorted(flat) != list(range(len(members))):
            raise ValueError("groups must partition the member indices")
        for g in groups:
            if len(g) > c - 1:
                raise ValueError(
                    f"group of {len(g)} exceeds the limit of C-1 = {c - 1}"
                )
            for a in range(len(g)):
                for b in range(a + 1, len(g)):
                    if not _pairwise_disagree(
                        members[g[a]].mapping, members[g[b]].mapping
                    ):
                        raise ValueError(
                            f"members {g[a]} and {g[b]} agree at some index"
                        )

    @property
    def num_classes(self) -> int:
        return self.members[0].num_classes

    def __len__(self) -> int:
        return len(self.members)


def subfactorial(n: int) -> int:
    """Count of derangements of n items, exact integer arithmetic.

    Uses the recurrence !n = (n-1) (!(n-1) + !(n-2)) with !1 = 0, !2 = 1.
    n = 0 is rejected: the recurrence's base cases start at 1.
    """
    n = int(n)
    if n < 1:
        raise ValueError(f"subfactorial requires n >= 1, got {n}")
    if n == 1:
        return 0
    if n == 2:
        return 1
    prev2, prev1 = 0, 1  # !1, !2
    for k in range(3, n + 1):
        prev2, prev1 = prev1, (k - 1) * (prev1 + prev2)
    return prev1


def sample_derangement(num_classes: int, rng: np.random.Generator) -> Derangement:
    """Uniformly random derangement by rejection over random permutations."""
    c = int(num_classes)
    if c < 2:
        raise ValueError(f"derangements need at least 2 classes, got {c}")
    idx = np.arange(c)
    while True:
        perm = rng.permutation(c)
        if not np.any(perm == idx):
            return Derangement(perm)


def _fill_column(matrix, col, remaining, rng, budget):
    """Assign column `col` for all rows by backtracking.

    remaining[r] is the set of values row r has not used yet. Values get
    consumed on success. Returns True on success; `budget` is a one-element
    node counter shared across the recursion, to bound worst-case search.
    """
    n = len(remaining)
    order = rng.permutation(n)
    chosen: list = []

    def extend(k: int) -> bool:
        if budget[0] <= 0:
            return False
        budget[0] -= 1
        if k == n:
            return True
        r = order[k]
        cands = [v for v in remaining[r] if v != col and v not in chosen]
        rng.shuffle(cands)
        for v in cands:
            chosen.append(v)
            matrix[r, col] = v
            if extend(k + 1):
                return True
            chosen.pop()
        return False

    if not extend(0):
        return False
    for r in range(n):
        remaining[r].discard(int(matrix[r, col]))
    return True


def sample_disjoint_set(
    num_classes: int,
    num_members: int,
    rng: np.random.Generator,
    max_restarts: int = 1000,
) -> DerangementSet:
    """N derangements over C classes with pairwise all-index disagreement.

    Built column by column: column c gets N distinct values, all != c, each
    unused so far in its row. Columns can dead-end, so the whole set restarts
    on failure, up to max_restarts times.
    """
    c, n = int(num_classes), int(num_members)
    if c < 2:
        raise ValueError(f"need at least 2 classes, got {c}")
    if n < 1:
        raise ValueError(f"need at least 1 member, got {n}")
    if n > c - 1:
        raise ValueError(
            f"at most C-1 = {c - 1} derangements can pairwise disagree at every "
            f"index; for {n} members use grouped_sets"
        )
    for attempt in range(max_restarts):
        matrix = np.full((n, c), -1, dtype=np.int64)
        remaining = [set(range(c)) for _ in range(n)]
        budget = [200_000]
        if all(_fill_column(matrix, col, remaining, rng, budget) for col in range(c)):
            members = tuple(Derangement(matrix[r]) for r in range(n))
            return DerangementSet(members, (tuple(range(n)),))
    raise SamplingExhaustedError(
        f"failed to build a disjoint set with C={c}, N={n} after "
        f"{max_restarts} restarts"
    )


def grouped_sets(
    num_classes: int,
    num_members: int,
    rng: np.random.Generator,
    max_restarts: int = 1000,
) -> DerangementSet:
    """N derangements split into groups of at most C-1, each group internally
    pairwise disagreeing at every index. All groups except possibly the last
    have exactly C-1 members."""
    c, n = int(num_classes), int(num_members)
    if c < 2:
        raise ValueError(f"need at least 2 classes, got {c}")
    if n < 1:
        raise ValueError(f"need at least 1 member, got {n}")
    cap = c - 1
    members: list = []
    groups: list = []
    start = 0
    while start < n:
        size = min(cap, n - start)
        sub = sample_disjoint_set(c, size, rng, max_restarts)
        members.extend(sub.members)
        groups.append(tuple(range(start, start + size)))
        start += size
    return DerangementSet(tuple(members), tuple(groups))
