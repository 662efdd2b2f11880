import math
from types import SimpleNamespace

import numpy as np
import pytest

from manifoldmind import geometry as geo
from manifoldmind import training as T
from manifoldmind.data import ingest, synth_hierarchy
from manifoldmind.paths import PathScorer
from manifoldmind.pipeline import prepare
from manifoldmind.spheres import ModelParams, init_model, inv_softplus, log_kernel_edges


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    ds = synth_hierarchy(40, 60, 14, 3, 0.1, seed=5)
    return prepare(ingest(*ds.write(tmp_path_factory.mktemp("synth"))), seed=0)


def run(prep, epochs=3, **kw):
    cfg = T.TrainConfig(max_epochs=epochs, batch_size=64, lr=0.01, dim=8, **kw)
    p = init_model(prep.log.n_users, prep.log.n_items, prep.log.n_tags, cfg.dim, cfg.seed)
    return T.train(p, prep.graph, prep.splits.train, prep.val, prep.item_tags, cfg), cfg


class TestLossTerms:
    def test_margin_satisfied(self):
        assert T.rank_loss(1.0, 0.0, 0.5) == 0.0

    def test_arithmetic(self):
        assert T.rank_loss(0.2, 0.9, 0.5) == pytest.approx(1.2, abs=1e-15)

    @pytest.mark.parametrize("s", [0.0, 0.3, 1.0])
    def test_equal_scores(self, s):
        assert T.rank_loss(s, s, 0.7) == 0.7

    def test_reg_inactive(self):
        assert T.curvature_reg([-1.0, -0.1, -5.0], 0.1) == 0.0

    def test_reg_half_margin(self):
        assert T.curvature_reg([-0.05], 0.1) == pytest.approx(0.05 ** 2, rel=1e-12)

    def test_reg_grad(self):
        g = T.curvature_reg_grad([-0.05, -0.5], 0.1)
        assert g[0] == pytest.approx(0.1)
        assert g[1] == 0.0


def tiny(center=None, kappa=-1.0):
    c = np.zeros((3, 2)) if center is None else center
    return ModelParams(1, 1, 1, c, np.full(3, float(inv_softplus(1.0))), np.full(3, kappa))


class TestStep:
    def test_zero_grads_leave_params(self):
        p = tiny(np.array([[0.1, 0.2], [0.0, -0.3], [0.4, 0.0]]), -0.7)
        before = p.copy()
        adam = T.AdamState.for_params(p)
        adam.m_centers[:] = 1.0
        T.riemannian_step(p, T.Grads.zeros_like(p), adam, T.TrainConfig())
        assert np.array_equal(p.centers, before.centers)
        assert np.array_equal(p.raw_radius, before.raw_radius)
        assert np.array_equal(p.raw_curvature, before.raw_curvature)
        assert np.all(adam.m_centers == 0.9)

    def test_first_step_from_origin(self):
        kappa = -0.6
        p = tiny(kappa=kappa)
        g = T.Grads.zeros_like(p)
        g.centers[0] = [0.8, -0.2]
        cfg = T.TrainConfig(lr=0.05)
        T.riemannian_step(p, g, T.AdamState.for_params(p), cfg)
        # first Adam step is rgrad / (|rgrad| + eps) elementwise, rgrad = 0.25 g at the origin
        rg = 0.25 * np.array([0.8, -0.2])
        v = -cfg.lr * rg / (np.abs(rg) + 1e-8)
        sc = math.sqrt(-kappa)
        expected = np.tanh(sc * np.linalg.norm(v)) * v / (sc * np.linalg.norm(v))
        np.testing.assert_allclose(p.centers[0], expected, rtol=1e-12)
        assert np.all(p.centers[1:] == 0)

    def test_curvature_clamped(self):
        p = tiny(kappa=-0.005)
        g = T.Grads.zeros_like(p)
        g.raw_curvature[:] = -1.0
        T.riemannian_step(p, g, T.AdamState.for_params(p), T.TrainConfig(lr=1e-3))
        assert np.all(p.raw_curvature == geo.KAPPA_MAX)

    def test_centers_stay_in_ball(self):
        rng = np.random.default_rng(0)
        p = tiny(np.array([[0.99, 0.0], [0.0, 0.5], [0.3, 0.3]]), -1.0)
        adam = T.AdamState.for_params(p)
        for _ in range(50):
            g = T.Grads(rng.normal(size=(3, 2)), rng.normal(size=3), rng.normal(size=3))
            T.riemannian_step(p, g, adam, T.TrainConfig(lr=0.5))
            assert T.invariant_violations(p) == 0


class TestBackward:
    def test_satisfied_margin_has_no_rank_gradient(self, synth):
        cfg = T.TrainConfig(dim=8, margin=1e-9, reg_weight=0.0)
        p = init_model(synth.log.n_users, synth.log.n_items, synth.log.n_tags, 8, 0)
        scorer = PathScorer(p, synth.graph)
        u = 0
        ranked = scorer.recommend(u, range(synth.log.n_items))
        pos, neg = ranked[0][0], ranked[-1][0]
        res = T.loss_and_grad(p, synth.graph, [(u, pos, neg)], cfg)
        assert res.loss == 0.0
        assert not res.grads.centers.any()
        assert not res.grads.raw_radius.any()

    def test_fixed_curvature_has_zero_kappa_grad(self, synth):
        cfg = T.TrainConfig(dim=8, ablation="fixed_curvature")
        ab = T.apply_ablation(cfg)
        p = T.prepare_params(init_model(synth.log.n_users, synth.log.n_items,
                                        synth.log.n_tags, 8, 0), ab)
        batch = [(int(u), int(i), int((i + 7) % synth.log.n_items))
                 for u, i, _ in synth.splits.train[:40]]
        res = T.loss_and_grad(p, synth.graph, batch, cfg, ab)
        assert res.grads.centers.any()
        assert not res.grads.raw_curvature.any()

    def test_backward_rejects_nonfinite(self, synth):
        p = init_model(synth.log.n_users, synth.log.n_items, synth.log.n_tags, 4, 0)
        p.centers[:] = np.nan
        with pytest.raises(T.TrainingDiverged):
            T.backward(p, [(0, 0, 1)], synth.graph, T.TrainConfig(dim=4))


class TestAblations:
    def test_euclidean_distance_is_plain_norm(self):
        ab = T.apply_ablation(T.TrainConfig(ablation="euclidean"))
        p = tiny(np.array([[0.3, 0.4], [0.0, 0.0], [-0.2, 0.1]]))
        lk = log_kernel_edges(p, np.array([0]), np.array([1]), ab.settings)[0]
        assert lk == pytest.approx(-0.25 / (2 + 1e-6), rel=1e-14)

    def test_no_transitivity_paths_have_two_edges(self, synth):
        ab = T.apply_ablation(T.TrainConfig(ablation="no_transitivity"))
        p = init_model(synth.log.n_users, synth.log.n_items, synth.log.n_tags, 8, 0)
        scorer = PathScorer(p, synth.graph, ab.beam, ab.settings)
        for u in range(10):
            for _, _, path in scorer.recommend(u, range(synth.log.n_items)):
                assert path is None or len(path.edge_scores) == 2

    @pytest.mark.parametrize("mode,attr,value", [
        ("fixed_radius", "radii", 1.0), ("fixed_curvature", "curvatures", -1.0)])
    def test_frozen_parameters_stay_fixed(self, synth, mode, attr, value):
        res, _ = run(synth, epochs=1, ablation=mode)
        np.testing.assert_allclose(getattr(res.params, attr), value, rtol=1e-12)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            T.TrainConfig(ablation="nope")


class TestTrain:
    def test_patience_one_stops_after_two_evaluations(self, synth):
        calls, snapshots = [], []

        def worsening(params, *args, **kw):
            calls.append(1)
            snapshots.append(params.copy())
            return SimpleNamespace(ndcg_at_10=1.0 / len(calls), recall_at_10=0.0)

        cfg = T.TrainConfig(max_epochs=10, patience=1, batch_size=128, dim=4)
        p = init_model(synth.log.n_users, synth.log.n_items, synth.log.n_tags, 4, 0)
        res = T.train(p, synth.graph, synth.splits.train, synth.val, synth.item_tags, cfg,
                      evaluate_fn=worsening)
        assert len(calls) == 2
        assert res.stopped_early and res.best_epoch == 1
        # the best checkpoint is returned, not the last one
        assert np.array_equal(res.params.centers, snapshots[0].centers)
        assert not np.array_equal(res.params.centers, snapshots[1].centers)

    def test_deterministic_history(self, synth):
        a, _ = run(synth, epochs=2)
        b, _ = run(synth, epochs=2)
        assert a.history == b.history
        assert a.params.model_hash() == b.params.model_hash()

    def test_loss_decreases_first_five_epochs(self, synth):
        res, _ = run(synth, epochs=5, patience=10)
        losses = [h["loss"] for h in res.history]
        assert len(losses) == 5
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    @pytest.mark.parametrize("mode", T.ABLATIONS)
    def test_invariants_hold_every_step(self, synth, mode):
        res, _ = run(synth, epochs=1, ablation=mode, check_invariants=True)
        assert res.invariant_violations == 0
