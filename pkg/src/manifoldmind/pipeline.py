"""Log -> splits -> training graph -> evaluation instances, as one pure function."""

from __future__ import annotations

from dataclasses import dataclass

from .data import EvalInstance, InteractionLog, Splits, SplitSpec, build_eval_instances, chronological_split
from .graph import DEFAULT_COOCCUR_THRESHOLD, SemanticGraph, build_graph


@dataclass
class Prepared:
    log: InteractionLog
    splits: Splits
    graph: SemanticGraph
    val: list[EvalInstance]
    test: list[EvalInstance]

    @property
    def item_tags(self):
        return self.graph.item_tags


def prepare(log: InteractionLog, seed: int = 0, split: SplitSpec = SplitSpec(),
            cooccur_threshold: int = DEFAULT_COOCCUR_THRESHOLD, n_neg: int = 100) -> Prepared:
    """Split ``log``, build the graph from train rows only, and sample negatives.

    Test negatives use ``seed``; validation negatives use ``seed + 1``.
    """
    splits = chronological_split(log, split)
    graph = build_graph(splits.train.tolist(), log.item_tag_pairs, log.n_users, log.n_items,
                        log.n_tags, cooccur_threshold)
    seen = splits.all_items_by_user()
    val = build_eval_instances(splits.val, seen, log.n_items, n_neg, seed + 1)
    test = build_eval_instances(splits.test, seen, log.n_items, n_neg, seed)
    return Prepared(log, splits, graph, val, test)
