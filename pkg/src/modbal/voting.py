"""Subset assignment by majority voting over (video, audio, multimodal) label triples."""

import enum
from dataclasses import dataclass, field

from .errors import ArgumentError
from .numerics import Rng

EMOTIONS = ("angry", "happy", "surprise", "fear", "sad", "worry", "neutral", "doubt", "contempt")


class Subset(enum.Enum):
    VIDEO_ALIGNED = "video_aligned"
    AUDIO_ALIGNED = "audio_aligned"
    CONSISTENT = "consistent"
    DISCARDED = "discarded"


def majority_vote(video, audio, multi, labels=EMOTIONS):
    """Assign one label triple to a subset.

    ``video = audio != multi`` has no subset of its own and is discarded
    together with fully inconsistent triples.
    """
    for name, lab in (("video", video), ("audio", audio), ("multi", multi)):
        if lab not in labels:
            raise ArgumentError(f"{name} label {lab!r} not in the declared label set")
    if video == audio == multi:
        return Subset.CONSISTENT
    if video == multi:
        return Subset.VIDEO_ALIGNED
    if audio == multi:
        return Subset.AUDIO_ALIGNED
    return Subset.DISCARDED


@dataclass
class PartitionReport:
    """Indices into the input records, per subset.

    ``unselected`` holds records that voted into a subset already at ``cap``.
    """
    cap: int
    seed: int
    subsets: dict = field(default_factory=dict)
    unselected: dict = field(default_factory=dict)

    def counts(self):
        return {s.value: len(self.subsets[s]) for s in Subset}

    def to_json(self):
        return {
            "cap": self.cap,
            "seed": self.seed,
            "counts": self.counts(),
            "subsets": {s.value: self.subsets[s] for s in Subset},
            "unselected": {s.value: self.unselected[s] for s in Subset if s is not Subset.DISCARDED},
        }


def _triple(rec):
    if isinstance(rec, dict):
        return rec["video"], rec["audio"], rec["multi"]
    video, audio, multi = rec
    return video, audio, multi


def partition(records, cap=500, seed=0, labels=EMOTIONS):
    """Vote every record into a subset and keep at most ``cap`` per kept subset.

    Over-full subsets are subsampled with a seeded permutation; selected
    indices are returned in input order. Discarded records are not capped.
    """
    if cap < 0:
        raise ArgumentError("cap must be non-negative")
    groups = {s: [] for s in Subset}
    for i, rec in enumerate(records):
        groups[majority_vote(*_triple(rec), labels=labels)].append(i)
    report = PartitionReport(cap=cap, seed=seed)
    rng = Rng(seed)
    for k, s in enumerate(Subset):
        idx = groups[s]
        if s is Subset.DISCARDED or len(idx) <= cap:
            report.subsets[s], report.unselected[s] = idx, []
            continue
        order = rng.split(k).permutation(len(idx))
        keep = set(order[:cap])
        report.subsets[s] = [i for j, i in enumerate(idx) if j in keep]
        report.unselected[s] = [i for j, i in enumerate(idx) if j not in keep]
    return report
