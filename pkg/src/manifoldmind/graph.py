"""Typed user/tag/item adjacency that defines which reasoning hops are legal."""

from __future__ import annotations

import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable

import numpy as np

from .spheres import EntityId, Kind

MIN_TAG_LENGTH = 2
MIN_TAG_ITEMS = 2
DEFAULT_COOCCUR_THRESHOLD = 2

_WS = re.compile(r"\s+")


def clean_tag(tag: str) -> str | None:
    """Lowercase, trim and collapse whitespace; ``None`` if the tag is too short."""
    t = _WS.sub(" ", tag.strip().lower())
    return t if len(t) >= MIN_TAG_LENGTH else None


def clean_item_tags(pairs: Iterable[tuple[str, str]],
                    min_tag_items: int = MIN_TAG_ITEMS) -> tuple[list[tuple[str, str]], dict]:
    """Apply tag cleaning to raw ``(item, tag)`` pairs.

    Returns the surviving deduplicated pairs (sorted) and a small report.
    """
    cleaned = set()
    too_short = 0
    for item, tag in pairs:
        t = clean_tag(tag)
        if t is None:
            too_short += 1
            continue
        cleaned.add((item, t))
    support = Counter(t for _, t in cleaned)
    kept = sorted(p for p in cleaned if support[p[1]] >= min_tag_items)
    rare = sorted(t for t, c in support.items() if c < min_tag_items)
    return kept, {"dropped_short": too_short, "dropped_rare_tags": len(rare),
                  "kept_pairs": len(kept)}


@dataclass
class SemanticGraph:
    n_users: int
    n_items: int
    n_tags: int
    user_tags: dict[int, frozenset[int]]
    tag_tags: dict[int, frozenset[int]]
    tag_items: dict[int, frozenset[int]]
    item_tags: dict[int, frozenset[int]]
    cooccur_threshold: int = DEFAULT_COOCCUR_THRESHOLD
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        # sorted arrays for the beam search hot loop
        self.user_tag_arr = {u: np.array(sorted(ts), dtype=np.int64)
                             for u, ts in self.user_tags.items()}
        self.tag_tag_arr = {t: np.array(sorted(ts), dtype=np.int64)
                            for t, ts in self.tag_tags.items()}
        self.tag_item_arr = {t: np.array(sorted(its), dtype=np.int64)
                             for t, its in self.tag_items.items()}

    def tag_edge_layout(self):
        """Flat ``(src tag, dst index, dst is item, row bounds)`` over all tag-side edges.

        Rows run tag 0 neighbors, tag 0 items, tag 1 neighbors, ... so that
        ``bounds[2t]:bounds[2t+1]`` are tag-tag edges of ``t`` and
        ``bounds[2t+1]:bounds[2t+2]`` its tag-item edges. Built once per graph.
        """
        layout = getattr(self, "_layout", None)
        if layout is None:
            src, dst, is_item, bounds = [], [], [], [0]
            for t in range(self.n_tags):
                for arr, flag in ((self.tag_neighbors(t), False), (self.items_of_tag(t), True)):
                    src.append(np.full(len(arr), t, dtype=np.int64))
                    dst.append(arr)
                    is_item.append(np.full(len(arr), flag))
                    bounds.append(bounds[-1] + len(arr))
            cat = (lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dtype=dt))
            layout = (cat(src, np.int64), cat(dst, np.int64), cat(is_item, bool), bounds)
            self._layout = layout
        return layout

    def check(self) -> None:
        """Assert the structural invariants (inverse index, symmetry, no loops)."""
        for t, items in self.tag_items.items():
            for i in items:
                assert t in self.item_tags.get(i, ()), (t, i)
        for i, tags in self.item_tags.items():
            for t in tags:
                assert i in self.tag_items.get(t, ()), (t, i)
        for t, others in self.tag_tags.items():
            assert t not in others, f"self-loop on tag {t}"
            for o in others:
                assert t in self.tag_tags.get(o, ()), (t, o)

    def neighbors(self, e: EntityId) -> set[EntityId]:
        if e.kind == Kind.USER:
            if not 0 <= e.index < self.n_users:
                raise KeyError(f"unknown entity {e}")
            return {EntityId(Kind.TAG, t) for t in self.user_tags.get(e.index, ())}
        if e.kind == Kind.TAG:
            if not 0 <= e.index < self.n_tags:
                raise KeyError(f"unknown entity {e}")
            out = {EntityId(Kind.TAG, t) for t in self.tag_tags.get(e.index, ())}
            out |= {EntityId(Kind.ITEM, i) for i in self.tag_items.get(e.index, ())}
            return out
        if not 0 <= e.index < self.n_items:
            raise KeyError(f"unknown entity {e}")
        return set()

    def tags_of_user(self, u: int) -> np.ndarray:
        return self.user_tag_arr.get(u, _EMPTY)

    def tag_neighbors(self, t: int) -> np.ndarray:
        return self.tag_tag_arr.get(t, _EMPTY)

    def items_of_tag(self, t: int) -> np.ndarray:
        return self.tag_item_arr.get(t, _EMPTY)


_EMPTY = np.zeros(0, dtype=np.int64)


def build_graph(interactions: Iterable[tuple[int, int, int]],
                item_tag_pairs: Iterable[tuple[int, int]],
                n_users: int, n_items: int, n_tags: int,
                cooccur_threshold: int = DEFAULT_COOCCUR_THRESHOLD) -> SemanticGraph:
    """Build the graph from TRAINING interactions and interned item-tag pairs."""
    if cooccur_threshold < 1:
        raise ValueError("cooccur_threshold must be a positive integer")
    item_tags: dict[int, set[int]] = defaultdict(set)
    tag_items: dict[int, set[int]] = defaultdict(set)
    for i, t in sorted(set(item_tag_pairs)):
        item_tags[i].add(t)
        tag_items[t].add(i)

    user_tags: dict[int, set[int]] = {u: set() for u in range(n_users)}
    for u, i, _ in sorted(interactions):
        user_tags[u] |= item_tags.get(i, set())

    pair_counts: Counter = Counter()
    for i in sorted(item_tags):
        for a, b in combinations(sorted(item_tags[i]), 2):
            pair_counts[a, b] += 1
    tag_tags: dict[int, set[int]] = defaultdict(set)
    for (a, b), c in sorted(pair_counts.items()):
        if c >= cooccur_threshold:
            tag_tags[a].add(b)
            tag_tags[b].add(a)

    zero_tag_users = [u for u in range(n_users) if not user_tags[u]]
    report = {
        "users": n_users,
        "items": n_items,
        "tags": n_tags,
        "zero_tag_users": len(zero_tag_users),
        "zero_tag_user_ids": zero_tag_users,
        "edges": {
            "user_tag": sum(len(v) for v in user_tags.values()),
            "tag_tag": sum(len(v) for v in tag_tags.values()) // 2,
            "tag_item": sum(len(v) for v in tag_items.values()),
        },
        "cooccur_threshold": cooccur_threshold,
    }
    g = SemanticGraph(
        n_users, n_items, n_tags,
        user_tags={u: frozenset(v) for u, v in user_tags.items()},
        tag_tags={t: frozenset(v) for t, v in tag_tags.items()},
        tag_items={t: frozenset(v) for t, v in tag_items.items()},
        item_tags={i: frozenset(v) for i, v in item_tags.items()},
        cooccur_threshold=cooccur_threshold,
        report=report,
    )
    g.check()
    return g
