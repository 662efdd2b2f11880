"""Margin-loss training with analytic gradients and Riemannian Adam."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import geometry as geo
from .data import EvalInstance
from .graph import SemanticGraph
from .paths import BeamConfig, PathScorer
from .spheres import (KernelSettings, ModelParams, inv_softplus, log_kernel_edges_grad)

_log = logging.getLogger(__name__)

ABLATIONS = ("full", "fixed_radius", "fixed_curvature", "no_transitivity", "euclidean")
ABLATION_LABELS = {
    "full": "Full model",
    "fixed_radius": "Fixed r_i",
    "fixed_curvature": "Fixed kappa",
    "no_transitivity": "No transitivity",
    "euclidean": "Euclidean geometry",
}
FIXED_RADIUS = 1.0
FIXED_CURVATURE = -1.0


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good: ModelParams | None = None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class TrainConfig:
    margin: float = 1.0
    reg_weight: float = 0.1
    curv_margin: float = 0.1
    lr: float = 1e-3
    batch_size: int = 1024
    dim: int = 20
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    ablation: str = "full"
    kernel_variant: str = "as_printed"
    beam_width: int = 5
    max_hops: int = 3
    check_invariants: bool = False

    def __post_init__(self):
        for name in ("margin", "curv_margin", "lr", "batch_size", "dim", "patience",
                     "max_epochs", "beam_width", "max_hops"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be nonnegative")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Ablation:
    """Behavioral overrides implied by an ablation mode."""

    freeze_radius: bool = False
    freeze_curvature: bool = False
    euclidean: bool = False
    beam: BeamConfig = BeamConfig()
    settings: KernelSettings = KernelSettings()


def apply_ablation(cfg: TrainConfig) -> Ablation:
    mode = cfg.ablation
    hops = 1 if mode == "no_transitivity" else cfg.max_hops
    euclid = mode == "euclidean"
    return Ablation(
        freeze_radius=mode == "fixed_radius",
        # curvature is inert under Euclidean distance
        freeze_curvature=mode in ("fixed_curvature", "euclidean"),
        euclidean=euclid,
        beam=BeamConfig(cfg.beam_width, hops),
        settings=KernelSettings(cfg.kernel_variant, euclidean=euclid),
    )


def prepare_params(params: ModelParams, ab: Ablation) -> ModelParams:
    """Pin frozen parameters to their fixed values (returns a copy)."""
    p = params.copy()
    if ab.freeze_radius:
        p.raw_radius[:] = float(inv_softplus(FIXED_RADIUS))
    if ab.freeze_curvature and not ab.euclidean:
        p.raw_curvature[:] = FIXED_CURVATURE
        p.centers = geo.project_to_ball(p.centers, p.curvatures)
    return p


def rank_loss(score_pos: float, score_neg: float, margin: float) -> float:
    v = margin - score_pos + score_neg
    # NaN must propagate so divergence is detected
    return 0.0 if v <= 0 else v


def curvature_reg(curvatures, curv_margin: float) -> float:
    k = np.asarray(curvatures, dtype=np.float64)
    return float(np.sum(np.maximum(0.0, k + curv_margin) ** 2))


def curvature_reg_grad(curvatures, curv_margin: float) -> np.ndarray:
    k = np.asarray(curvatures, dtype=np.float64)
    return 2.0 * np.maximum(0.0, k + curv_margin)


@dataclass
class Grads:
    centers: np.ndarray
    raw_radius: np.ndarray
    raw_curvature: np.ndarray

    @classmethod
    def zeros_like(cls, p: ModelParams) -> "Grads":
        return cls(np.zeros_like(p.centers), np.zeros_like(p.raw_radius),
                   np.zeros_like(p.raw_curvature))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (self.centers, self.raw_radius,
                                                      self.raw_curvature))


@dataclass
class BatchResult:
    loss: float
    rank_loss: float
    reg: float
    grads: Grads | None
    # per triple: (active hinge, pos path key, neg path key); used to detect kinks
    keys: list = field(default_factory=list)


def loss_and_grad(params: ModelParams, graph: SemanticGraph, batch, cfg: TrainConfig,
                  ab: Ablation | None = None, with_grad: bool = True) -> BatchResult:
    """Total loss of ``batch`` (triples ``(u, pos, neg)``) and its gradient.

    The path max is differentiated through its argmax path only.
    """
    ab = ab or apply_ablation(cfg)
    scorer = PathScorer(params, graph, ab.beam, ab.settings)
    tag0 = params.n_users + params.n_items
    item0 = params.n_users
    src, dst, coef = [], [], []
    total_rank = 0.0
    keys = []
    for u, pos, neg in batch:
        lp, pp = scorer.best_pair(u, pos)
        ln, pn = scorer.best_pair(u, neg)
        sp, sn = math.exp(lp), math.exp(ln)
        loss = rank_loss(sp, sn, cfg.margin)
        total_rank += loss
        keys.append((loss > 0, pp, pn))
        if loss <= 0 or not with_grad:
            continue
        for seq, item, sign, s in ((pp, pos, -1.0, sp), (pn, neg, 1.0, sn)):
            if seq is None:
                continue
            gids = [u] + [tag0 + t for t in seq] + [item0 + item]
            for a, b in zip(gids[:-1], gids[1:]):
                src.append(a)
                dst.append(b)
                coef.append(sign * s)
    kap = params.curvatures
    reg = curvature_reg(kap, cfg.curv_margin)
    total = total_rank + cfg.reg_weight * reg
    if not with_grad:
        return BatchResult(total, total_rank, reg, None, keys)

    g = Grads.zeros_like(params)
    if src:
        s_arr, d_arr = np.array(src), np.array(dst)
        c = np.array(coef)
        eg = log_kernel_edges_grad(params, s_arr, d_arr, ab.settings)
        np.add.at(g.centers, s_arr, c[:, None] * eg.d_center_src)
        np.add.at(g.centers, d_arr, c[:, None] * eg.d_center_dst)
        np.add.at(g.raw_radius, s_arr, c * eg.d_raw_radius_src)
        np.add.at(g.raw_radius, d_arr, c * eg.d_raw_radius_dst)
        np.add.at(g.raw_curvature, s_arr, c * eg.d_raw_curv_src)
        np.add.at(g.raw_curvature, d_arr, c * eg.d_raw_curv_dst)
    raw_k = params.raw_curvature
    inside = (raw_k >= geo.KAPPA_MIN) & (raw_k <= geo.KAPPA_MAX)
    g.raw_curvature += cfg.reg_weight * curvature_reg_grad(kap, cfg.curv_margin) * inside
    if ab.freeze_radius:
        g.raw_radius[:] = 0.0
    if ab.freeze_curvature:
        g.raw_curvature[:] = 0.0
    return BatchResult(total, total_rank, reg, g, keys)


def backward(params, batch, graph, cfg, ab=None) -> Grads:
    res = loss_and_grad(params, graph, batch, cfg, ab)
    if not math.isfinite(res.loss) or not res.grads.all_finite():
        raise TrainingDiverged("non-finite loss or gradient")
    return res.grads


@dataclass
class AdamState:
    m_centers: np.ndarray
    v_centers: np.ndarray
    m_radius: np.ndarray
    v_radius: np.ndarray
    m_curv: np.ndarray
    v_curv: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, p: ModelParams) -> "AdamState":
        z = np.zeros_like
        return cls(z(p.centers), z(p.centers), z(p.raw_radius), z(p.raw_radius),
                   z(p.raw_curvature), z(p.raw_curvature))


def _adam_direction(m, v, g, st: AdamState):
    m *= st.beta1
    m += (1 - st.beta1) * g
    v *= st.beta2
    v += (1 - st.beta2) * g * g
    mhat = m / (1 - st.beta1 ** st.step)
    vhat = v / (1 - st.beta2 ** st.step)
    return mhat / (np.sqrt(vhat) + st.eps)


def riemannian_step(params: ModelParams, grads: Grads, adam: AdamState, cfg: TrainConfig,
                    ab: Ablation | None = None) -> ModelParams:
    """One optimizer step, in place; returns ``params``.

    Centers take a tangent-space Adam step through the exponential map of their
    own curvature; radius and curvature take Euclidean Adam steps. Rows whose
    gradient is exactly zero keep their value (their moments still decay).
    """
    ab = ab or apply_ablation(cfg)
    adam.step += 1
    kap = params.curvatures
    if ab.euclidean:
        rgrad = grads.centers
    else:
        rgrad = geo.conformal_factor(params.centers, kap)[:, None] * grads.centers
    step_c = _adam_direction(adam.m_centers, adam.v_centers, rgrad, adam)
    touched = np.any(grads.centers != 0, axis=1)
    if touched.any():
        if ab.euclidean:
            params.centers[touched] -= cfg.lr * step_c[touched]
        else:
            params.centers[touched] = geo.exp_map(
                params.centers[touched], -cfg.lr * step_c[touched], kap[touched])

    if not ab.freeze_radius:
        step_r = _adam_direction(adam.m_radius, adam.v_radius, grads.raw_radius, adam)
        nz = grads.raw_radius != 0
        params.raw_radius[nz] -= cfg.lr * step_r[nz]
    if not ab.freeze_curvature:
        step_k = _adam_direction(adam.m_curv, adam.v_curv, grads.raw_curvature, adam)
        nz = grads.raw_curvature != 0
        params.raw_curvature[nz] -= cfg.lr * step_k[nz]
        params.raw_curvature[:] = np.clip(params.raw_curvature, geo.KAPPA_MIN, geo.KAPPA_MAX)
        if not ab.euclidean:
            # a curvature change can shrink the ball under an existing center
            params.centers = geo.project_to_ball(params.centers, params.curvatures)
    return params


def invariant_violations(params: ModelParams, euclidean: bool = False) -> int:
    bad = 0
    r = params.radii
    k = params.curvatures
    bad += int(np.sum(~(r > 0)))
    bad += int(np.sum((params.raw_curvature < geo.KAPPA_MIN) | (params.raw_curvature > geo.KAPPA_MAX)))
    if not euclidean:
        sq = np.sum(params.centers ** 2, axis=1)
        bad += int(np.sum(~(sq < -1.0 / k)))
    bad += int(np.sum(~np.isfinite(params.centers)))
    return bad


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict]
    best_epoch: int
    best_val_ndcg: float
    stopped_early: bool
    invariant_violations: int = 0


def sample_triples(train_rows: np.ndarray, train_items: dict[int, set[int]], n_items: int,
                   rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """Shuffled ``(u, pos, neg)`` triples; one uniform negative per positive."""
    order = rng.permutation(len(train_rows))
    out = []
    for n in order.tolist():
        u, pos = int(train_rows[n, 0]), int(train_rows[n, 1])
        seen = train_items.get(u, ())
        if len(seen) >= n_items:
            continue
        while True:
            neg = int(rng.integers(n_items))
            if neg not in seen:
                break
        out.append((u, pos, neg))
    return out


def train(params: ModelParams, graph: SemanticGraph, train_rows: np.ndarray,
          val_instances: list[EvalInstance], item_tags, cfg: TrainConfig,
          evaluate_fn: Callable | None = None,
          on_step: Callable[[ModelParams, int], None] | None = None) -> TrainResult:
    """Epoch loop with per-epoch validation NDCG@10 and early stopping.

    Returns the checkpoint with the best validation NDCG@10, not the last one.
    """
    from .evaluation import evaluate

    evaluate_fn = evaluate_fn or evaluate
    ab = apply_ablation(cfg)
    params = prepare_params(params, ab)
    adam = AdamState.for_params(params)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    train_items: dict[int, set[int]] = {}
    for u, i, _ in train_rows.tolist():
        train_items.setdefault(u, set()).add(i)

    history: list[dict] = []
    best = params.copy()
    best_ndcg, best_epoch, stale = -math.inf, 0, 0
    violations = 0
    stopped = False
    for epoch in range(1, cfg.max_epochs + 1):
        triples = sample_triples(train_rows, train_items, params.n_items, rng)
        ep_loss = ep_rank = ep_reg = 0.0
        n_batches = 0
        for start in range(0, len(triples), cfg.batch_size):
            batch = triples[start:start + cfg.batch_size]
            res = loss_and_grad(params, graph, batch, cfg, ab)
            if not math.isfinite(res.loss) or not res.grads.all_finite():
                raise TrainingDiverged(f"non-finite loss/gradient at epoch {epoch}", best)
            riemannian_step(params, res.grads, adam, cfg, ab)
            if cfg.check_invariants:
                violations += invariant_violations(params, ab.euclidean)
            if on_step is not None:
                on_step(params, adam.step)
            ep_loss += res.loss
            ep_rank += res.rank_loss
            ep_reg += res.reg
            n_batches += 1
        report = evaluate_fn(params, graph, val_instances, item_tags, ab.beam, ab.settings)
        row = {"epoch": epoch, "loss": ep_loss / max(n_batches, 1),
               "rank_loss": ep_rank / max(len(triples), 1), "reg": ep_reg / max(n_batches, 1),
               "val_ndcg_at_10": report.ndcg_at_10, "val_recall_at_10": report.recall_at_10,
               "steps": adam.step}
        history.append(row)
        _log.info("epoch %d loss %.5f val ndcg %.4f", epoch, row["loss"], report.ndcg_at_10)
        if report.ndcg_at_10 > best_ndcg:
            best_ndcg, best_epoch, stale = report.ndcg_at_10, epoch, 0
            best = params.copy()
        else:
            stale += 1
            if stale >= cfg.patience:
                stopped = True
                break
    return TrainResult(best, history, best_epoch, best_ndcg, stopped, violations)


def config_for(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(cfg, **changes)
