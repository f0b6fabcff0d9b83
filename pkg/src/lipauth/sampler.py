"""Open-set speaker splits, positive-pair sampling, key-unique batches, augmentation."""

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataprep import load_clip
from .errors import CapacityError, ConstraintError, SpecError

# the 25 canonical GRID training speakers (21 has no video in the corpus)
GRID_TRAIN = tuple(str(i) for i in (3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15,
                                    23, 24, 25, 26, 27, 28, 29, 30, 31, 32, 33, 34))
GRID_VAL = ("16", "17", "18", "19")
GRID_TEST = ("1", "2", "20", "22")

DELETE_P = 0.1
DUPLICATE_P = 0.1
ROTATE_P = 0.15
MAX_ROTATION = 20.0
FLIP_P = 0.2


@dataclass(frozen=True)
class SplitSpec:
    train: tuple
    val: tuple
    test: tuple

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, tuple(str(s) for s in getattr(self, name)))
        for name in ("train", "val", "test"):
            ids = getattr(self, name)
            if len(set(ids)) != len(ids):
                dup = [s for s, c in Counter(ids).items() if c > 1]
                raise SpecError(f"{name} split lists speakers {dup} more than once")
        for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
            shared = set(getattr(self, a)) & set(getattr(self, b))
            if shared:
                raise SpecError(f"speakers {sorted(shared)} appear in both {a} and {b}")

    def parts(self):
        return {"train": self.train, "val": self.val, "test": self.test}

    @classmethod
    def parse(cls, text):
        parts = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            name, _, ids = line.partition(":")
            name = name.strip()
            if name not in ("train", "val", "test"):
                raise SpecError(f"unknown split name {name!r}")
            parts[name] = tuple(s.strip() for s in ids.split(",") if s.strip())
        missing = {"train", "val", "test"} - set(parts)
        if missing:
            raise SpecError(f"split spec lacks {sorted(missing)}")
        return cls(**parts)

    @classmethod
    def load(cls, path):
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def format(self):
        return "".join(f"{k}: {','.join(v)}\n" for k, v in self.parts().items())


GRID_SPLIT = SplitSpec(GRID_TRAIN, GRID_VAL, GRID_TEST)


def split_speakers(manifest, spec):
    """Partition a manifest into (train, val, test) sub-manifests by speaker."""
    known = set(manifest.speakers)
    for name, ids in spec.parts().items():
        unknown = set(ids) - known
        if unknown:
            raise SpecError(f"{name} split names speakers {sorted(unknown)} not in the manifest")
    return tuple(manifest.subset(ids) for ids in (spec.train, spec.val, spec.test))


# --------------------------------------------------------------------------
# positive pairs


@dataclass(frozen=True)
class PositivePair:
    first: object  # UtteranceRecord
    second: object

    def __post_init__(self):
        if self.first.key != self.second.key:
            raise ValueError("a positive pair needs equal speaker and phrase")
        if self.first.utterance_id == self.second.utterance_id:
            raise ValueError("a positive pair needs two distinct utterances")

    @property
    def key(self):
        return self.first.key

    @property
    def ids(self):
        return frozenset((self.first.utterance_id, self.second.utterance_id))


def positive_capacity(manifest):
    return sum(len(g) * (len(g) - 1) // 2 for g in manifest.groups().values())


def sample_positive_pairs(manifest, count, seed=0):
    """Draw ``count`` distinct unordered positive pairs uniformly at random."""
    groups = list(manifest.groups().values())
    sizes = np.array([len(g) * (len(g) - 1) // 2 for g in groups], dtype=np.int64)
    capacity = int(sizes.sum())
    if count > capacity:
        raise CapacityError(count, capacity)
    rng = np.random.default_rng(seed)
    picks = rng.choice(capacity, size=count, replace=False)
    offsets = np.cumsum(sizes)
    triu = {}
    pairs = []
    for flat in picks:
        g = int(np.searchsorted(offsets, flat, side="right"))
        local = int(flat - (offsets[g] - sizes[g]))
        k = len(groups[g])
        if k not in triu:
            triu[k] = np.triu_indices(k, 1)
        i, j = triu[k][0][local], triu[k][1][local]
        pairs.append(PositivePair(groups[g][i], groups[g][j]))
    return pairs


# --------------------------------------------------------------------------
# batches


@dataclass
class PairBatch:
    pairs: list

    @property
    def keys(self):
        return [p.key for p in self.pairs]

    def __len__(self):
        return len(self.pairs)


def _greedy(pairs, n):
    """Fill batches in order, deferring pairs whose key is already taken."""
    batches, deferred = [], []
    stream = iter(pairs)
    exhausted = False
    while deferred or not exhausted:
        batch, keys, still = [], set(), []
        for p in deferred:
            if len(batch) < n and p.key not in keys:
                batch.append(p)
                keys.add(p.key)
            else:
                still.append(p)
        deferred = still
        while len(batch) < n and not exhausted:
            p = next(stream, None)
            if p is None:
                exhausted = True
            elif p.key in keys:
                deferred.append(p)
            else:
                batch.append(p)
                keys.add(p.key)
        if batch:
            batches.append(batch)
    return batches


def _full_batch_count(counts, n):
    """Largest m with sum(min(c, m)) >= m * n: that many key-unique full batches fit."""
    counts = np.sort(np.asarray(list(counts), dtype=np.int64))
    for m in range(int(counts.sum()) // n, 0, -1):
        if np.minimum(counts, m).sum() >= m * n:
            return m
    return 0


def build_batches(pairs, n, seed=0, training=False):
    """Pack pairs into batches whose (speaker, phrase) keys are all distinct.

    Pairs are shuffled, then the largest number ``m`` of full batches that can
    be key-unique is found; up to ``m`` pairs per key, taken in shuffled order,
    are striped across those ``m`` batches so each is filled exactly.  Anything
    left over is packed greedily with deferral into trailing batches.  Training
    drops under-filled batches; evaluation keeps them.
    """
    if n < 2:
        raise ConstraintError(f"batch size must be >= 2, got {n}")
    counts = Counter(p.key for p in pairs)
    if len(counts) < n:
        raise ConstraintError(
            f"only {len(counts)} distinct (speaker, phrase) keys for batches of {n}"
        )
    rng = np.random.default_rng(seed)
    shuffled = [pairs[i] for i in rng.permutation(len(pairs))]
    full = _full_batch_count(counts.values(), n)
    head, tail, taken = [], [], Counter()
    for p in shuffled:
        if len(head) < full * n and taken[p.key] < full:
            head.append(p)
            taken[p.key] += 1
        else:
            tail.append(p)
    order = {}
    for p in head:
        order.setdefault(p.key, []).append(p)
    sequence = [p for group in order.values() for p in group]
    striped = [sequence[b::full] for b in range(full)]
    striped = [striped[i] for i in rng.permutation(len(striped))]
    batches = [PairBatch(b) for b in striped + _greedy(tail, n) if b]
    if training:
        batches = [b for b in batches if len(b) == n]
    return batches


def check_batch(batch):
    keys = batch.keys
    if len(set(keys)) != len(keys):
        raise ConstraintError("batch repeats a (speaker, phrase) key")


# --------------------------------------------------------------------------
# clips and augmentation


def fix_length(frames, length=50):
    """Pad by repeating the last frame, or crop the temporal center."""
    frames = np.asarray(frames)
    t = frames.shape[0]
    if t < 1:
        raise ValueError("cannot fix the length of an empty clip")
    if t < length:
        pad = np.repeat(frames[-1:], length - t, axis=0)
        return np.concatenate([frames, pad])
    start = (t - length) // 2
    return frames[start : start + length]


def augment_clip(frames, rng, length=50):
    """Frame deletion/duplication, whole-clip rotation and flip, then fix_length."""
    frames = np.asarray(frames)
    keep = rng.random(frames.shape[0]) >= DELETE_P
    if not keep.any():
        keep[rng.integers(frames.shape[0])] = True
    frames = frames[keep]
    repeats = 1 + (rng.random(frames.shape[0]) < DUPLICATE_P)
    frames = np.repeat(frames, repeats, axis=0)
    if rng.random() < ROTATE_P:
        angle = rng.uniform(-MAX_ROTATION, MAX_ROTATION)
        frames = ndimage.rotate(frames, angle, axes=(2, 1), reshape=False, order=1,
                                mode="constant", cval=0.0)
        frames = np.clip(frames, 0.0, 1.0)
    if rng.random() < FLIP_P:
        frames = frames[:, :, ::-1]
    return np.ascontiguousarray(fix_length(frames, length))


class ClipCache:
    """Loads clips once and keeps them in memory.

    Records are resolved against whichever of ``manifests`` lists them;
    unknown records fall back to their path as written.
    """

    def __init__(self, *manifests):
        self._frames = {}
        self._paths = {}
        for m in manifests:
            if m is not None:
                self.add(m)

    def add(self, manifest):
        for r in manifest:
            self._paths[r] = manifest.resolve(r)
        return self

    def frames(self, record):
        key = str(self._paths.get(record, Path(record.path)))
        if key not in self._frames:
            self._frames[key] = load_clip(key).frames
        return self._frames[key]


def batch_tensors(batch, clips, length=50, rng=None):
    """Stack branch inputs X1, X2 of shape (N, 1, T, H, W) for a batch."""
    x1, x2 = [], []
    for pair in batch.pairs:
        for rec, dest in ((pair.first, x1), (pair.second, x2)):
            f = clips.frames(rec)
            dest.append(augment_clip(f, rng, length) if rng is not None else fix_length(f, length))
    return (np.stack(x1)[:, None].astype(np.float32),
            np.stack(x2)[:, None].astype(np.float32))


def expected_batch_count(pair_count, n):
    return math.ceil(pair_count / n)
