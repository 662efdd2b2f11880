"""Ranking, calibration, diversity and trace metrics."""

from __future__ import annotations

import math
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np


class ProtocolError(ValueError):
    """Raised when metric inputs violate the evaluation protocol."""


def ndcg_recall_at_k(ranked: Sequence[int], positive: int, k: int = 10) -> tuple[float, float]:
    """Single-relevant-item NDCG@k and Recall@k (ideal DCG is 1)."""
    try:
        rank = list(ranked).index(positive) + 1
    except ValueError:
        raise ProtocolError(f"positive item {positive} not among ranked candidates") from None
    if rank > k:
        return 0.0, 0.0
    return 1.0 / math.log2(rank + 1), 1.0


def ece(confidences: Sequence[float], hits: Sequence[int], bins: int = 10) -> float:
    """Expected calibration error with equal-width bins over [0, 1].

    A confidence of exactly 1.0 falls in the last bin.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    hit = np.asarray(hits, dtype=np.float64)
    if conf.shape != hit.shape:
        raise ProtocolError("confidences and hits differ in length")
    if conf.size == 0:
        raise ProtocolError("empty input")
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    n = conf.size
    total = 0.0
    for b in range(bins):
        sel = idx == b
        cnt = int(sel.sum())
        if cnt:
            total += cnt / n * abs(hit[sel].mean() - conf[sel].mean())
    return float(total)


def _tag_union(items: Iterable[int], item_tags: Mapping[int, Iterable[int]]) -> set:
    out: set = set()
    for i in items:
        out.update(item_tags.get(i, ()))
    return out


def diversity_at_k(topk_items: Sequence[int], candidate_items: Sequence[int],
                   item_tags: Mapping[int, Iterable[int]], k: int = 10,
                   normalize: bool = True) -> float:
    """Unique tag coverage of the top-k list.

    With ``normalize`` the count is divided by the tag union of the whole
    candidate list; otherwise the absolute number of distinct tags is returned.
    """
    top = _tag_union(list(topk_items)[:k], item_tags)
    if not top:
        return 0.0
    if not normalize:
        return float(len(top))
    return len(top) / len(_tag_union(candidate_items, item_tags) | top)


def jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def tils_at_k(topk_items: Sequence[int], item_tags: Mapping[int, Iterable[int]],
              k: int = 10) -> float:
    """Mean pairwise tag-Jaccard over the top-k (lower means more diverse)."""
    top = list(topk_items)[:k]
    if len(top) < 2:
        raise ProtocolError("T-ILS needs at least two ranked items")
    sets = [set(item_tags.get(i, ())) for i in top]
    pairs = [jaccard(a, b) for a, b in combinations(sets, 2)]
    return float(sum(pairs) / len(pairs))


def trace_stats(traces, item_tags: Mapping[int, Iterable[int]]) -> dict:
    """Coverage, tag alignment and mean confidence over explanation traces.

    ``traces`` is an iterable of ``(item, score, tag_path)`` where ``tag_path``
    is the list of tag indices on the best path, or ``None`` if no path exists.
    Alignment and confidence are taken over traces that have a path.
    """
    total = with_path = aligned = 0
    conf_sum = 0.0
    for item, score, tags in traces:
        total += 1
        if not tags:
            continue
        with_path += 1
        conf_sum += score
        if set(tags) & set(item_tags.get(item, ())):
            aligned += 1
    if total == 0:
        raise ProtocolError("no traces")
    return {
        "alignment_pct": 100.0 * aligned / with_path if with_path else 0.0,
        "coverage_pct": 100.0 * with_path / total,
        "mean_confidence": conf_sum / with_path if with_path else 0.0,
    }
