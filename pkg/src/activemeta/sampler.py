"""Task decomposition and input ordering for meta-tuning.

A meta batch (one patient) is split into an inner pool (support samples D)
and an outer pool (query samples D').  Both pools are scored with the
current parameters (mean foreground DSC per slice) and partitioned into
good (score >= tau) and bad (score < tau) tasks.  A schedule then pairs
every inner sample with one outer sample:

* passive: good and bad are shuffled, pairs alternate bad, good, bad, ...
  and D' is drawn at random from the outer partition with the same origin
  (falling back to the whole remaining outer pool);
* active: bad ascending by score, good descending, same alternation, and
  D' is the extreme remaining outer sample (minimum for bad-origin pairs,
  maximum for good-origin pairs).

Ties are broken by ``(patient, slice)`` ascending.  Outer samples are used at
most once per meta batch; if the outer pool runs out the schedule stops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import segnet
from .errors import ActiveMetaError, ConfigError
from .metrics import dice_report, fmt
from .rng import Xoshiro256ss
from .synthdata import NUM_CLASSES, Sample

GOOD, BAD = "good", "bad"
INNER, OUTER = "inner", "outer"
METHODS = ("naive", "passive", "active")
ORDER_LOG_HEADER = ("meta_batch", "position", "pool", "origin", "patient", "slice", "dsc")


class SamplerError(ActiveMetaError, ValueError):
    pass


@dataclass(frozen=True)
class ScoredSample:
    patient: str
    slice: int
    pool: str
    score: float | None
    sample: Sample | None = field(default=None, compare=False, repr=False)

    @property
    def key(self) -> tuple[str, int]:
        return (self.patient, self.slice)


@dataclass
class TaskPartition:
    good: list[ScoredSample]
    bad: list[ScoredSample]
    tau: float

    def __len__(self) -> int:
        return len(self.good) + len(self.bad)

    def all(self) -> list[ScoredSample]:
        return self.good + self.bad


@dataclass
class OrderedSchedule:
    pairs: list[tuple[ScoredSample, ScoredSample | None]]
    method: str
    seed: int | None
    origins: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def log_rows(self, meta_batch: int) -> list[list[str]]:
        rows = []
        for pos, (d, d_out) in enumerate(self.pairs):
            origin = self.origins[pos] if self.origins else "none"
            for s in (d, d_out):
                if s is None:
                    continue
                dsc = "" if s.score is None else fmt(s.score)
                rows.append([str(meta_batch), str(pos), s.pool, origin, s.patient, str(s.slice), dsc])
        return rows


def split_inner_outer(slices: Sequence[Sample], ratio: float = 0.5, seed: int = 0):
    """Seeded shuffle, then the first ``floor(ratio*n)`` (at least 1) go inner."""
    n = len(slices)
    if n < 2:
        raise SamplerError(f"split_inner_outer needs at least 2 slices, got {n}")
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"ratio must be in (0, 1), got {ratio}")
    perm = Xoshiro256ss(seed).permutation(n)
    n_inner = min(max(int(math.floor(ratio * n)), 1), n - 1)
    inner = [slices[i] for i in perm[:n_inner]]
    outer = [slices[i] for i in perm[n_inner:]]
    return inner, outer


def score_samples(params: Mapping, samples: Sequence[Sample], pool: str,
                  num_classes: int = NUM_CLASSES) -> list[ScoredSample]:
    """Mean foreground DSC of the current model on each sample."""
    if not samples:
        return []
    preds = segnet.predict_batch(params, np.stack([s.x for s in samples]))
    return [ScoredSample(s.patient, s.index, pool, dice_report(p, s.y, num_classes).mean_foreground, s)
            for s, p in zip(samples, preds)]


def partition(scored: Sequence[ScoredSample], tau: float = 0.5) -> TaskPartition:
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must be in [0, 1], got {tau}")
    good = [s for s in scored if s.score >= tau]
    bad = [s for s in scored if s.score < tau]
    return TaskPartition(good, bad, tau)


def decompose_tasks(params: Mapping, pool: Sequence[Sample], tau: float = 0.5,
                    pool_name: str = INNER) -> TaskPartition:
    if not pool:
        raise SamplerError("decompose_tasks: empty pool")
    return partition(score_samples(params, pool, pool_name), tau)


def _alternate(bad: list, good: list) -> list[tuple[str, ScoredSample]]:
    out = []
    for i in range(max(len(bad), len(good))):
        if i < len(bad):
            out.append((BAD, bad[i]))
        if i < len(good):
            out.append((GOOD, good[i]))
    return out


def _check(inner: TaskPartition, outer: TaskPartition) -> None:
    if not len(inner) or not len(outer):
        raise SamplerError(f"ordering needs nonempty pools (inner={len(inner)}, outer={len(outer)})")


def order_passive(inner: TaskPartition, outer: TaskPartition, seed: int) -> OrderedSchedule:
    _check(inner, outer)
    rng = Xoshiro256ss(seed)
    good, bad = list(inner.good), list(inner.bad)
    rng.shuffle(good)
    rng.shuffle(bad)
    remaining = {GOOD: list(outer.good), BAD: list(outer.bad)}
    pairs, origins = [], []
    for origin, d in _alternate(bad, good):
        source = remaining[origin] or remaining[GOOD if origin == BAD else BAD]
        if not source:
            break
        d_out = source.pop(rng.choice_index(len(source)))
        pairs.append((d, d_out))
        origins.append(origin)
    return OrderedSchedule(pairs, "passive", seed, origins)


def _bad_key(s: ScoredSample):
    return (s.score, s.patient, s.slice)


def _good_key(s: ScoredSample):
    return (-s.score, s.patient, s.slice)


def order_active(inner: TaskPartition, outer: TaskPartition) -> OrderedSchedule:
    _check(inner, outer)
    bad = sorted(inner.bad, key=_bad_key)
    good = sorted(inner.good, key=_good_key)
    remaining = list(outer.good) + list(outer.bad)
    pairs, origins = [], []
    for origin, d in _alternate(bad, good):
        if not remaining:
            break
        # every bad score is below every good score, so the global extreme of
        # the remaining pool is the extreme of the matching partition when it
        # is nonempty and the next-extreme fallback otherwise
        key = _bad_key if origin == BAD else _good_key
        idx = min(range(len(remaining)), key=lambda i: key(remaining[i]))
        pairs.append((d, remaining.pop(idx)))
        origins.append(origin)
    return OrderedSchedule(pairs, "active", None, origins)


def order_naive(pool: Sequence[Sample], seed: int) -> OrderedSchedule:
    if not pool:
        raise SamplerError("order_naive: empty pool")
    perm = Xoshiro256ss(seed).permutation(len(pool))
    pairs = [(ScoredSample(pool[i].patient, pool[i].index, INNER, None, pool[i]), None) for i in perm]
    return OrderedSchedule(pairs, "naive", seed, [])


def order(method: str, inner: TaskPartition, outer: TaskPartition, seed: int) -> OrderedSchedule:
    if method == "passive":
        return order_passive(inner, outer, seed)
    if method == "active":
        return order_active(inner, outer)
    raise ConfigError(f"unknown meta-tune ordering {method!r}; expected passive or active")
