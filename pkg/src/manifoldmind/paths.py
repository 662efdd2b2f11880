"""Beam search over user -> tag+ -> item paths and max-product path scoring.

Scores are accumulated as sums of log-kernels. A path's score is the product
of its edge kernels; an item's score is the best score over its paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .graph import SemanticGraph
from .spheres import (DEFAULT_KERNEL, EntityId, Kind, KernelSettings, ModelParams,
                      log_kernel_edges, pair_distance)

NEG_INF = -math.inf
_FEW = 4


@dataclass(frozen=True)
class BeamConfig:
    width: int = 5
    max_hops: int = 3

    def __post_init__(self):
        if self.width < 1 or self.max_hops < 1:
            raise ValueError("beam width and max_hops must be >= 1")


@dataclass
class ReasoningPath:
    entities: list[EntityId]
    edge_scores: list[float]
    log_score: float
    edge_logs: list[float] = field(default_factory=list, repr=False)

    @property
    def score(self) -> float:
        return math.exp(self.log_score)

    @property
    def tags(self) -> list[int]:
        return [e.index for e in self.entities if e.kind == Kind.TAG]


class KernelCache:
    """Per-snapshot cache of log-kernels along graph edges.

    Rows are always computed over a node's full (sorted) neighbor array, so a
    given edge value is bit-identical no matter which query triggered it.
    """

    def __init__(self, params: ModelParams, graph: SemanticGraph,
                 settings: KernelSettings = DEFAULT_KERNEL):
        self.params = params
        self.graph = graph
        self.settings = settings
        self._item0 = params.n_users
        self._tag0 = params.n_users + params.n_items
        self._user_rows: dict[int, np.ndarray] = {}
        self._tag_rows: dict[int, np.ndarray] = {}
        self._item_rows: dict[int, np.ndarray] = {}
        self._item_lookup: dict[int, dict[int, float]] = {}
        self._filled = False

    def _edges(self, src_gid: int, dst_gids: np.ndarray) -> np.ndarray:
        src = np.full(len(dst_gids), src_gid, dtype=np.int64)
        return log_kernel_edges(self.params, src, dst_gids, self.settings)

    def user_tags(self, u: int) -> np.ndarray:
        row = self._user_rows.get(u)
        if row is None:
            row = self._edges(u, self.graph.tags_of_user(u) + self._tag0)
            self._user_rows[u] = row
        return row

    def _fill_tags(self):
        # every tag-side edge in one vectorized call, then split into rows
        g = self.graph
        src, dst, is_item, bounds = g.tag_edge_layout()
        vals = log_kernel_edges(self.params, src + self._tag0,
                                dst + np.where(is_item, self._item0, self._tag0), self.settings)
        for t in range(g.n_tags):
            a, b, c = bounds[2 * t], bounds[2 * t + 1], bounds[2 * t + 2]
            self._tag_rows[t] = vals[a:b]
            self._item_rows[t] = vals[b:c]
            self._item_lookup[t] = dict(zip(dst[b:c].tolist(), vals[b:c].tolist()))
        self._filled = True

    def tag_tags(self, t: int) -> np.ndarray:
        if not self._filled:
            self._fill_tags()
        return self._tag_rows[t]

    def tag_items(self, t: int) -> np.ndarray:
        if not self._filled:
            self._fill_tags()
        return self._item_rows[t]

    def tag_item(self, t: int, i: int) -> float | None:
        """Log-kernel of edge ``tag t -> item i``, or None when there is no edge."""
        if not self._filled:
            self._fill_tags()
        return self._item_lookup[t].get(i)

    def edge_log(self, src: EntityId, dst: EntityId) -> float:
        """Cached log-kernel of one legal edge."""
        g = self.graph
        if src.kind == Kind.USER:
            arr, row = g.tags_of_user(src.index), self.user_tags(src.index)
        elif dst.kind == Kind.TAG:
            arr, row = g.tag_neighbors(src.index), self.tag_tags(src.index)
        else:
            arr, row = g.items_of_tag(src.index), self.tag_items(src.index)
        pos = int(np.searchsorted(arr, dst.index))
        if pos >= len(arr) or arr[pos] != dst.index:
            raise KeyError(f"no edge {src} -> {dst}")
        return float(row[pos])


# a partial path: (tag indices, accumulated log score)
Partial = tuple[tuple[int, ...], float]


def _top(cands: list[Partial], width: int) -> list[Partial]:
    # tag indices order like global ids, so the tag tuple is the tie-break key
    cands.sort(key=lambda p: (-p[1], p[0]))
    return cands[:width]


class PathScorer:
    """Path search over one parameter snapshot."""

    def __init__(self, params: ModelParams, graph: SemanticGraph,
                 cfg: BeamConfig = BeamConfig(), settings: KernelSettings = DEFAULT_KERNEL,
                 cache: KernelCache | None = None):
        self.params = params
        self.graph = graph
        self.cfg = cfg
        self.settings = settings
        self.cache = cache if cache is not None else KernelCache(params, graph, settings)
        self._beams: dict[int, list[list[Partial]]] = {}
        self.expanded = 0

    def _check_user(self, u: int):
        if not 0 <= u < self.graph.n_users:
            raise KeyError(f"unknown user {u}")

    def _check_item(self, i: int):
        if not 0 <= i < self.graph.n_items:
            raise KeyError(f"unknown item {i}")

    def beam_expand(self, u: int) -> list[list[Partial]]:
        """Per-depth beams ``B_0 .. B_k`` of partial paths for user ``u``."""
        self._check_user(u)
        beams = self._beams.get(u)
        if beams is not None:
            return beams
        g, cache, width = self.graph, self.cache, self.cfg.width
        tags = g.tags_of_user(u)
        row = cache.user_tags(u)
        first = [((int(t),), float(s)) for t, s in zip(tags, row)]
        self.expanded += len(first)
        beams = [[((), 0.0)], _top(first, width)]
        for _ in range(1, self.cfg.max_hops):
            cands: list[Partial] = []
            for seq, score in beams[-1]:
                last = seq[-1]
                nbrs = g.tag_neighbors(last)
                nrow = cache.tag_tags(last)
                for t, s in zip(nbrs.tolist(), nrow.tolist()):
                    if t not in seq:
                        cands.append((seq + (t,), score + s))
            self.expanded += len(cands)
            beams.append(_top(cands, width))
        self._beams[u] = beams
        return beams

    def _close(self, u: int, candidates: np.ndarray) -> dict[int, Partial]:
        """Best ``(tag sequence, log score)`` per reachable candidate item."""
        beams = self.beam_expand(u)
        if len(candidates) <= _FEW:
            return self._close_few(beams, candidates)
        mask = np.zeros(self.graph.n_items, dtype=bool)
        mask[candidates] = True
        best: dict[int, Partial] = {}
        for beam in beams[1:]:
            for seq, score in beam:
                last = seq[-1]
                items = self.graph.items_of_tag(last)
                if len(items) == 0:
                    continue
                sel = mask[items]
                if not sel.any():
                    continue
                vals = self.cache.tag_items(last)[sel]
                for i, s in zip(items[sel].tolist(), vals.tolist()):
                    total = score + s
                    cur = best.get(i)
                    if cur is None or total > cur[1] or (total == cur[1] and seq < cur[0]):
                        best[i] = (seq, total)
        return best

    def _close_few(self, beams, candidates) -> dict[int, Partial]:
        # same cached row entries as the mask route, looked up one item at a time
        best: dict[int, Partial] = {}
        for i in dict.fromkeys(int(c) for c in candidates):
            for beam in beams[1:]:
                for seq, score in beam:
                    s = self.cache.tag_item(seq[-1], i)
                    if s is None:
                        continue
                    total = score + s
                    cur = best.get(i)
                    if cur is None or total > cur[1] or (total == cur[1] and seq < cur[0]):
                        best[i] = (seq, total)
        return best

    def _path(self, u: int, i: int, seq: tuple[int, ...], total: float) -> ReasoningPath:
        ents = ([EntityId(Kind.USER, u)] + [EntityId(Kind.TAG, t) for t in seq]
                + [EntityId(Kind.ITEM, i)])
        logs = [self.cache.edge_log(a, b) for a, b in zip(ents[:-1], ents[1:])]
        return ReasoningPath(ents, [math.exp(x) for x in logs], total, logs)

    def best_pair(self, u: int, i: int) -> tuple[float, tuple[int, ...] | None]:
        """``(log score, tag sequence)`` of the best path, without building it.

        Same values as :meth:`score_pair`; unreachable pairs give ``(-inf, None)``.
        """
        self._check_user(u)
        self._check_item(i)
        hit = self._close_few(self.beam_expand(u), (i,)).get(i)
        return (hit[1], hit[0]) if hit else (NEG_INF, None)

    def score_pair(self, u: int, i: int) -> tuple[float, ReasoningPath | None]:
        self._check_item(i)
        ranked = self.recommend(u, [i], 1)
        _, score, path = ranked[0]
        return score, path

    def recommend(self, u: int, candidates, topn: int | None = None):
        """Rank ``candidates`` for ``u``: list of ``(item, score, best_path)``.

        Unreachable items get score 0 and no path. Ties (including all
        unreachable items) are broken by ascending item index.
        """
        self._check_user(u)
        cand = np.asarray(sorted(set(int(c) for c in candidates)), dtype=np.int64)
        if len(cand) == 0:
            raise ValueError("candidates must be non-empty")
        if cand[0] < 0 or cand[-1] >= self.graph.n_items:
            raise KeyError("unknown candidate item")
        best = self._close(u, cand)
        rows = []
        for i in cand.tolist():
            hit = best.get(i)
            rows.append((i, hit[1] if hit else NEG_INF, hit[0] if hit else None))
        rows.sort(key=lambda r: (-r[1], r[0]))
        if topn is not None:
            rows = rows[:topn]
        out = []
        for i, log_s, seq in rows:
            if seq is None:
                out.append((i, 0.0, None))
            else:
                out.append((i, math.exp(log_s), self._path(u, i, seq, log_s)))
        return out

    def explain(self, u: int, i: int, model_hash: str | None = None) -> "ExplanationTrace":
        score, path = self.score_pair(u, i)
        return ExplanationTrace.build(self, u, i, score, path, model_hash)


@dataclass
class ExplanationTrace:
    user: int
    item: int
    score: float
    path: list[EntityId]
    edges: list[dict]
    config: dict
    model_hash: str | None

    @classmethod
    def build(cls, scorer: PathScorer, u: int, i: int, score: float,
              path: ReasoningPath | None, model_hash: str | None) -> "ExplanationTrace":
        cfg = {"b": scorer.cfg.width, "k": scorer.cfg.max_hops}
        if path is None:
            return cls(u, i, 0.0, [], [], cfg, model_hash)
        params = scorer.params
        edges = []
        for (a, b), lk in zip(zip(path.entities[:-1], path.entities[1:]), path.edge_logs):
            sa, sb = params.sphere(a), params.sphere(b)
            dist, k = pair_distance(sa, sb, scorer.settings)
            share = lk / path.log_score if path.log_score < 0 else 0.0
            edges.append({"from": str(a), "to": str(b), "kernel": math.exp(lk),
                          "distance": float(dist), "eff_curvature": float(k),
                          "r_from": sa.radius, "r_to": sb.radius, "share": share})
        return cls(u, i, score, list(path.entities), edges, cfg, model_hash)

    def to_json(self) -> dict:
        return {
            "user": self.user,
            "item": self.item,
            "score": self.score,
            "path": [{"kind": e.kind.name.lower(), "id": e.index} for e in self.path],
            "edges": self.edges,
            "config": self.config,
            "model_hash": self.model_hash,
        }


def beam_expand(params, graph, u, cfg=BeamConfig(), settings=DEFAULT_KERNEL):
    return PathScorer(params, graph, cfg, settings).beam_expand(u)


def score_pair(params, graph, u, i, cfg=BeamConfig(), settings=DEFAULT_KERNEL):
    return PathScorer(params, graph, cfg, settings).score_pair(u, i)


def recommend(params, graph, u, candidates, topn, cfg=BeamConfig(), settings=DEFAULT_KERNEL):
    return PathScorer(params, graph, cfg, settings).recommend(u, candidates, topn)


def explain(params, graph, u, i, cfg=BeamConfig(), settings=DEFAULT_KERNEL):
    return PathScorer(params, graph, cfg, settings).explain(u, i, params.model_hash())
