"""Ranking and retrieval metrics under the medium/hard junk protocols.

Rankings order database descriptors by inner product with the query,
with id-order tie breaking so results are reproducible. Junk entries are
struck from a ranking before scoring; average precision uses the
trapezoidal (interpolated) convention, precision-at-10 divides by 10
regardless of how many positives exist.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .head import Descriptor
from .tensor import ShapeError


@dataclass
class QueryGroundTruth:
    """Per-query id lists. Easy/hard/junk must be pairwise disjoint and
    must not contain the query's own id."""

    id: str
    easy: list[str]
    hard: list[str]
    junk: list[str]

    def __post_init__(self):
        easy, hard, junk = set(self.easy), set(self.hard), set(self.junk)
        if easy & hard or easy & junk or hard & junk:
            raise ValueError(f"overlapping ground-truth lists for {self.id!r}")
        if self.id in easy | hard | junk:
            raise ValueError(f"query {self.id!r} appears in its own lists")


@dataclass
class RankedList:
    """Database ids sorted by descending similarity to one query."""

    query_id: str
    ids: list[str]


def rank(query: Descriptor, db: list[Descriptor]) -> RankedList:
    """Order database descriptors by inner product, ties by ascending id."""
    for d in db:
        if d.vec.shape != query.vec.shape:
            raise ShapeError(
                f"descriptor {d.id!r} has dim {d.vec.shape[0]}, "
                f"query has {query.vec.shape[0]}")
    scored = [(-float(np.einsum("i,i->", query.vec, d.vec)), d.id) for d in db]
    scored.sort()
    return RankedList(query_id=query.id, ids=[i for _, i in scored])


def _filtered(ids: list[str], junk: set[str]) -> list[str]:
    return [i for i in ids if i not in junk]


def average_precision(ranking: RankedList, positives: set[str],
                      junk: set[str]) -> float:
    """Trapezoidal AP after junk removal.

    The j-th positive found (0-based) at filtered rank r contributes the
    average of precision just before and just after it:
    ((j/r if r>0 else 1) + (j+1)/(r+1)) / 2. The sum is divided by the
    total positive count.
    """
    positives = set(positives) - set(junk)
    if not positives:
        raise ValueError("no positives left after junk removal")
    kept = _filtered(ranking.ids, set(junk))
    total = 0.0
    found = 0
    for r, image_id in enumerate(kept):
        if image_id in positives:
            j = found
            before = j / r if r > 0 else 1.0
            after = (j + 1) / (r + 1)
            total += (before + after) / 2.0
            found += 1
    return total / len(positives)


def precision_at_10(ranking: RankedList, positives: set[str],
                    junk: set[str]) -> float:
    """Fraction of the top 10 (after junk removal) that are positive."""
    positives = set(positives) - set(junk)
    if not positives:
        raise ValueError("no positives left after junk removal")
    kept = _filtered(ranking.ids, set(junk))[:10]
    return sum(1 for i in kept if i in positives) / 10.0


@dataclass
class ProtocolReport:
    protocol: str
    mean_ap: float
    mean_p10: float
    per_query: dict[str, tuple[float, float]]
    skipped: list[str]

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "mAP": self.mean_ap,
            "mP@10": self.mean_p10,
            "queries": {q: {"AP": ap, "P@10": p10}
                        for q, (ap, p10) in self.per_query.items()},
            "skipped": self.skipped,
        }


def protocol_sets(gt: QueryGroundTruth, protocol: str):
    """Positive and junk id sets for one query under a protocol.

    Medium counts easy and hard images as positives; hard demotes the easy
    ones to junk and scores only hard positives.
    """
    if protocol == "medium":
        return set(gt.easy) | set(gt.hard), set(gt.junk)
    if protocol == "hard":
        return set(gt.hard), set(gt.junk) | set(gt.easy)
    raise ValueError(f"unknown protocol {protocol!r}")


def map_protocol(descriptors: list[Descriptor],
                 ground_truth: list[QueryGroundTruth],
                 protocol: str) -> ProtocolReport:
    """Mean AP and mean P@10 over all queries with a nonempty positive set.

    Every id mentioned in the ground truth must have a descriptor. Each
    query ranks against all other descriptors (never against itself);
    queries whose protocol positive set is empty are skipped with a
    warning and excluded from the means.
    """
    by_id = {d.id: d for d in descriptors}
    if len(by_id) != len(descriptors):
        raise ValueError("duplicate descriptor ids")
    for gt in ground_truth:
        for image_id in [gt.id, *gt.easy, *gt.hard, *gt.junk]:
            if image_id not in by_id:
                raise ValueError(f"ground truth references unknown id {image_id!r}")

    per_query: dict[str, tuple[float, float]] = {}
    skipped: list[str] = []
    for gt in ground_truth:
        positives, junk = protocol_sets(gt, protocol)
        if not positives:
            warnings.warn(f"query {gt.id!r} has no positives under "
                          f"{protocol}; skipping", stacklevel=2)
            skipped.append(gt.id)
            continue
        db = [d for d in descriptors if d.id != gt.id]
        ranking = rank(by_id[gt.id], db)
        per_query[gt.id] = (average_precision(ranking, positives, junk),
                            precision_at_10(ranking, positives, junk))

    if per_query:
        order = [gt.id for gt in ground_truth if gt.id in per_query]
        mean_ap = sum(per_query[q][0] for q in order) / len(order)
        mean_p10 = sum(per_query[q][1] for q in order) / len(order)
    else:
        mean_ap = mean_p10 = 0.0
    return ProtocolReport(protocol=protocol, mean_ap=mean_ap,
                          mean_p10=mean_p10, per_query=per_query,
                          skipped=skipped)
