"""Evaluation harness: ranks each instance's candidates and aggregates metrics."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import metrics
from .data import EvalInstance
from .graph import SemanticGraph
from .paths import BeamConfig, PathScorer
from .spheres import DEFAULT_KERNEL, KernelSettings, ModelParams


@dataclass
class InstanceResult:
    user: int
    positive: int
    positive_score: float
    positive_tags: list[int] | None
    top_item: int
    top_score: float
    ranked: list[int]
    scores: list[float]
    ndcg: float
    recall: float
    diversity: float
    tils: float


@dataclass
class EvalReport:
    ndcg_at_10: float
    recall_at_10: float
    ece: float
    diversity_at_10: float
    tils_at_10: float
    alignment_pct: float
    coverage_pct: float
    mean_confidence: float
    n_instances: int
    per_user: dict
    flags: dict
    config_hash: str | None = None
    model_hash: str | None = None
    instances: list[InstanceResult] = field(default_factory=list, repr=False)

    def to_json(self, with_instances: bool = False) -> dict:
        doc = asdict(self)
        doc.pop("instances")
        if with_instances:
            doc["instances"] = [asdict(r) for r in self.instances]
        return doc


def _rank_chunk(params, graph, cfg, settings, item_tags, k, normalize, chunk):
    scorer = PathScorer(params, graph, cfg, settings)
    out = []
    for inst in chunk:
        cands = inst.candidates
        ranking = scorer.recommend(inst.user, cands)
        ranked = [i for i, _, _ in ranking]
        scores = [s for _, s, _ in ranking]
        pos_row = next(r for r in ranking if r[0] == inst.positive)
        ndcg, recall = metrics.ndcg_recall_at_k(ranked, inst.positive, k)
        out.append(InstanceResult(
            user=inst.user,
            positive=inst.positive,
            positive_score=pos_row[1],
            positive_tags=pos_row[2].tags if pos_row[2] is not None else None,
            top_item=ranked[0],
            top_score=scores[0],
            ranked=ranked,
            scores=scores,
            ndcg=ndcg,
            recall=recall,
            diversity=metrics.diversity_at_k(ranked[:k], cands, item_tags, k, normalize),
            tils=metrics.tils_at_k(ranked[:k], item_tags, k) if len(ranked) >= 2 else float("nan"),
        ))
    return out


def evaluate(params: ModelParams, graph: SemanticGraph, instances: list[EvalInstance],
             item_tags: Mapping[int, frozenset[int]], cfg: BeamConfig = BeamConfig(),
             settings: KernelSettings = DEFAULT_KERNEL, k: int = 10,
             ece_mode: str = "top1", threads: int = 1, diversity: str = "normalized",
             config_hash: str | None = None) -> EvalReport:
    """Score every instance and aggregate ranking, calibration and diversity metrics.

    ``ece_mode`` is ``"top1"`` (top-ranked item's score vs whether it is the
    positive) or ``"per_candidate"`` (every candidate's score vs its label).
    ``diversity`` is ``"normalized"`` (share of the candidate tag union) or
    ``"absolute"`` (distinct tag count).
    """
    if not instances:
        raise metrics.ProtocolError("no evaluation instances")
    if ece_mode not in ("top1", "per_candidate"):
        raise ValueError(f"unknown ece_mode {ece_mode!r}")
    if diversity not in ("normalized", "absolute"):
        raise ValueError(f"unknown diversity mode {diversity!r}")
    normalize = diversity == "normalized"
    # group by user so each worker expands a user's beam once
    order = sorted(range(len(instances)), key=lambda n: instances[n].user)
    users = sorted({instances[n].user for n in order})
    n_chunks = max(1, min(threads, len(users)))
    chunk_of = {u: c for c, part in enumerate(np.array_split(np.array(users), n_chunks))
                for u in part.tolist()}
    chunks: list[list[EvalInstance]] = [[] for _ in range(n_chunks)]
    for n in order:
        chunks[chunk_of[instances[n].user]].append(instances[n])
    if n_chunks == 1:
        parts = [_rank_chunk(params, graph, cfg, settings, item_tags, k, normalize, chunks[0])]
    else:
        with ThreadPoolExecutor(n_chunks) as pool:
            parts = list(pool.map(
                lambda c: _rank_chunk(params, graph, cfg, settings, item_tags, k, normalize, c), chunks))
    by_pos = {}
    for chunk, res in zip(chunks, parts):
        for inst, r in zip(chunk, res):
            by_pos[id(inst)] = r
    results = [by_pos[id(inst)] for inst in instances]

    if ece_mode == "top1":
        conf = [r.top_score for r in results]
        hits = [int(r.top_item == r.positive) for r in results]
    else:
        conf = [s for r in results for s in r.scores]
        hits = [int(i == r.positive) for r in results for i in r.ranked]
    stats = metrics.trace_stats(
        ((r.positive, r.positive_score, r.positive_tags) for r in results), item_tags)

    per_user: dict[int, list[float]] = {}
    for r in results:
        per_user.setdefault(r.user, []).append(r.ndcg)
    user_ndcg = np.array([np.mean(v) for _, v in sorted(per_user.items())])
    summary = {
        "users": int(len(user_ndcg)),
        "ndcg_p10": float(np.percentile(user_ndcg, 10)),
        "ndcg_p50": float(np.percentile(user_ndcg, 50)),
        "ndcg_p90": float(np.percentile(user_ndcg, 90)),
    }
    return EvalReport(
        ndcg_at_10=float(np.mean([r.ndcg for r in results])),
        recall_at_10=float(np.mean([r.recall for r in results])),
        ece=metrics.ece(conf, hits),
        diversity_at_10=float(np.mean([r.diversity for r in results])),
        tils_at_10=float(np.nanmean([r.tils for r in results])),
        alignment_pct=stats["alignment_pct"],
        coverage_pct=stats["coverage_pct"],
        mean_confidence=stats["mean_confidence"],
        n_instances=len(results),
        per_user=summary,
        flags={"k": k, "ece_mode": ece_mode, "ece_bins": 10, "diversity": diversity,
               "tils": "mean_pairwise_jaccard", "beam_width": cfg.width,
               "max_hops": cfg.max_hops, "kernel_variant": settings.variant,
               "euclidean": settings.euclidean},
        config_hash=config_hash,
        model_hash=params.model_hash(),
        instances=results,
    )
