# app/services/pair_groups.py
"""The four pair groups fed to the domain-class discriminator.

G1  source/source, same class      (unordered, no self-pairs)
G2  source/target, same class      (ordered, source first)
G3  source/source, different class (unordered)
G4  source/target, different class (ordered, source first)

Pools are never materialised: each one is a list of index blocks that
decodes a flat pair number into (first, second), so uniform sampling
without replacement stays cheap even for SVHN-sized source sets.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

GROUPS = (1, 2, 3, 4)
SOURCE = "source"
TARGET = "target"
TARGET_GROUPS = (2, 4)


@dataclass(frozen=True)
class PairRecord:
    first_index: int
    second_index: int
    second_domain: str
    group: int

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"group must be one of {GROUPS}, got {self.group}")
        expected = TARGET if self.group in TARGET_GROUPS else SOURCE
        if self.second_domain != expected:
            raise ValueError(f"group {self.group} pairs take their second sample from the {expected} set")

    def line(self) -> str:
        return f"{self.group} {self.first_index} {self.second_domain} {self.second_index}"


# ---------- Implicit pools ----------
def _triangle_decode(r: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """r -> (i, j) with i < j, enumerating (0,1), (0,2), (1,2), (0,3), ..."""
    j = np.floor((1.0 + np.sqrt(1.0 + 8.0 * r.astype(np.float64))) / 2.0).astype(np.int64)
    # float rounding guard
    j = np.where(j * (j - 1) // 2 > r, j - 1, j)
    j = np.where((j + 1) * j // 2 <= r, j + 1, j)
    i = r - j * (j - 1) // 2
    return i, j


@dataclass
class _Block:
    first: np.ndarray
    second: np.ndarray  # ignored for triangles
    triangle: bool

    @property
    def size(self) -> int:
        if self.triangle:
            m = self.first.size
            return m * (m - 1) // 2
        return self.first.size * self.second.size

    def decode(self, local: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if self.triangle:
            i, j = _triangle_decode(local)
            a, b = self.first[i], self.first[j]
            return np.minimum(a, b), np.maximum(a, b)
        row, col = np.divmod(local, self.second.size)
        return self.first[row], self.second[col]


class PairPool:
    """Concatenation of blocks; flat pair numbers run block by block."""

    def __init__(self, blocks: Sequence[_Block]):
        self.blocks = [b for b in blocks if b.size > 0]
        self.offsets = np.cumsum([0] + [b.size for b in self.blocks]).astype(np.int64)

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    def decode(self, ks: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        ks = np.asarray(ks, dtype=np.int64)
        first = np.empty(ks.size, dtype=np.int64)
        second = np.empty(ks.size, dtype=np.int64)
        if ks.size == 0:
            return first, second
        block_of = np.searchsorted(self.offsets, ks, side="right") - 1
        for b in np.unique(block_of):
            sel = block_of == b
            f, s = self.blocks[b].decode(ks[sel] - self.offsets[b])
            first[sel], second[sel] = f, s
        return first, second

    def enumerate(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.decode(np.arange(self.size, dtype=np.int64))


def _members(labels: np.ndarray) -> Dict[int, np.ndarray]:
    return {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}


def build_pools(source_labels: np.ndarray, target_labels: np.ndarray) -> Dict[int, PairPool]:
    src = _members(np.asarray(source_labels))
    tgt = _members(np.asarray(target_labels))
    src_classes = sorted(src)
    g1 = [_Block(src[c], src[c], True) for c in src_classes]
    g2 = [_Block(src[c], tgt[c], False) for c in src_classes if c in tgt]
    g3 = [
        _Block(src[a], src[b], False)
        for ai, a in enumerate(src_classes)
        for b in src_classes[ai + 1:]
    ]
    g4 = [_Block(src[a], tgt[b], False) for a in src_classes for b in sorted(tgt) if a != b]
    return {1: PairPool(g1), 2: PairPool(g2), 3: PairPool(g3), 4: PairPool(g4)}


def _canonical(group: int, first: np.ndarray, second: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # G3 blocks pair class a with class b, so order the indices like G1
    if group == 3:
        return np.minimum(first, second), np.maximum(first, second)
    return first, second


def _records(group: int, first: np.ndarray, second: np.ndarray) -> List[PairRecord]:
    domain = TARGET if group in TARGET_GROUPS else SOURCE
    return [PairRecord(int(a), int(b), domain, group) for a, b in zip(first, second)]


def enumerate_g2(source, target) -> List[PairRecord]:
    """Every ordered (source, target) pair that shares a class label."""
    pool = build_pools(source.labels, target.labels)[2]
    if pool.size == 0:
        raise ValueError("source and target share no class; G2 is empty")
    first, second = pool.enumerate()
    return _records(2, first, second)


# ---------- Grouped pairs ----------
@dataclass
class GroupedPairs:
    first: Dict[int, np.ndarray]
    second: Dict[int, np.ndarray]
    seed: int
    pool_sizes: Dict[int, int] = field(default_factory=dict)
    with_replacement: Tuple[int, ...] = ()

    def sizes(self) -> Dict[int, int]:
        return {g: int(self.first[g].size) for g in GROUPS}

    def __len__(self) -> int:
        return sum(self.sizes().values())

    def pairs(self, group: int) -> List[PairRecord]:
        return _records(group, self.first[group], self.second[group])

    def all_pairs(self) -> List[PairRecord]:
        return [p for g in GROUPS for p in self.pairs(g)]

    def as_batch(self) -> "PairBatch":
        """Every pair as one batch, grouped in order 1..4."""
        return PairBatch(
            np.concatenate([self.first[g] for g in GROUPS]),
            np.concatenate([self.second[g] for g in GROUPS]),
            np.concatenate([np.full(self.first[g].size, g, dtype=np.int64) for g in GROUPS]),
        )

    def subset(self, selection: Dict[int, np.ndarray]) -> "GroupedPairs":
        return GroupedPairs(
            first={g: self.first[g][selection[g]] for g in GROUPS},
            second={g: self.second[g][selection[g]] for g in GROUPS},
            seed=self.seed,
            pool_sizes=dict(self.pool_sizes),
            with_replacement=self.with_replacement,
        )

    def dumps(self) -> str:
        return "\n".join(p.line() for p in self.all_pairs()) + "\n"

    def dump(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.dumps())


def build_grouped_pairs(source, target, seed: int,
                        ratios: Sequence[float] = (1.0, 1.0, 1.0, 1.0)) -> GroupedPairs:
    """Keep G2 whole and sample G1, G3, G4 uniformly to ``|G2| * ratio / ratio_2``.

    Pools smaller than the quota fall back to sampling with replacement.
    """
    if len(ratios) != 4 or any(r <= 0 for r in ratios):
        raise ValueError(f"group ratios must be four positive numbers, got {list(ratios)}")
    pools = build_pools(source.labels, target.labels)
    g2_size = pools[2].size
    if g2_size == 0:
        raise ValueError("source and target share no class; G2 is empty")

    rng = np.random.default_rng(int(seed))
    first: Dict[int, np.ndarray] = {}
    second: Dict[int, np.ndarray] = {}
    replaced = []
    for g in GROUPS:
        pool = pools[g]
        if g == 2:
            first[g], second[g] = pool.enumerate()
            continue
        quota = max(1, int(round(g2_size * ratios[g - 1] / ratios[1])))
        if pool.size == 0:
            raise ValueError(f"group {g} has no eligible pairs; the source set needs more samples per class")
        if pool.size >= quota:
            ks = np.sort(rng.choice(pool.size, size=quota, replace=False))
        else:
            logger.warning(f"Group {g} pool has {pool.size} pairs for a quota of {quota}; sampling with replacement")
            ks = np.sort(rng.integers(0, pool.size, size=quota))
            replaced.append(g)
        first[g], second[g] = _canonical(g, *pool.decode(ks))

    gp = GroupedPairs(first, second, seed=int(seed),
                      pool_sizes={g: pools[g].size for g in GROUPS},
                      with_replacement=tuple(replaced))
    logger.info(f"Grouped pairs: pools {gp.pool_sizes}, kept {gp.sizes()}")
    return gp


def split_holdout(gp: GroupedPairs, fraction: float, seed: int) -> Tuple[GroupedPairs, GroupedPairs]:
    """Hold out ``fraction`` of every group for discriminator validation."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"holdout fraction must lie in [0, 1), got {fraction}")
    rng = np.random.default_rng([int(seed), 21])
    keep, hold = {}, {}
    for g in GROUPS:
        n = gp.first[g].size
        order = rng.permutation(n)
        n_hold = int(np.floor(n * fraction))
        if n - n_hold < 1:
            n_hold = n - 1
        hold[g] = np.sort(order[:n_hold])
        keep[g] = np.sort(order[n_hold:])
    return gp.subset(keep), gp.subset(hold)


# ---------- Batches ----------
@dataclass
class PairBatch:
    first: np.ndarray
    second: np.ndarray
    group: np.ndarray  # 1..4

    @property
    def second_is_target(self) -> np.ndarray:
        return np.isin(self.group, TARGET_GROUPS)

    def __len__(self) -> int:
        return int(self.group.size)

    def select(self, groups: Sequence[int]) -> "PairBatch":
        mask = np.isin(self.group, groups)
        return PairBatch(self.first[mask], self.second[mask], self.group[mask])

    def group_counts(self) -> np.ndarray:
        return np.bincount(self.group, minlength=5)[1:]


class PairBatchStream:
    """Group-stratified batches with a fresh shuffle per epoch."""

    def __init__(self, gp: GroupedPairs, batch_size: int, seed: int):
        if batch_size < 4 or batch_size % 4:
            raise ValueError(f"pair batch size must be a positive multiple of 4, got {batch_size}")
        self.gp = gp
        self.batch_size = batch_size
        self.per_group = batch_size // 4
        self.seed = int(seed)
        self.length = min(gp.sizes().values())
        if self.length == 0:
            raise ValueError("cannot stream batches from an empty group")

    def batches_per_epoch(self) -> int:
        return -(-self.length // self.per_group)

    def epoch(self, index: int) -> Iterator[PairBatch]:
        rng = np.random.default_rng([self.seed, int(index)])
        orders = {g: rng.permutation(self.gp.first[g].size)[: self.length] for g in GROUPS}
        for start in range(0, self.length, self.per_group):
            firsts, seconds, groups = [], [], []
            for g in GROUPS:
                sel = orders[g][start:start + self.per_group]
                firsts.append(self.gp.first[g][sel])
                seconds.append(self.gp.second[g][sel])
                groups.append(np.full(sel.size, g, dtype=np.int64))
            yield PairBatch(np.concatenate(firsts), np.concatenate(seconds), np.concatenate(groups))

    def forever(self, start_epoch: int = 0) -> Iterator[PairBatch]:
        e = start_epoch
        while True:
            yield from self.epoch(e)
            e += 1


def pair_batches(gp: GroupedPairs, batch_size: int, seed: int, epochs: int = 1) -> Iterator[PairBatch]:
    stream = PairBatchStream(gp, batch_size, seed)
    for e in range(epochs):
        yield from stream.epoch(e)
