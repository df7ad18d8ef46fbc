import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from magmine.evaluation import evaluate_frames
from magmine.mil_trainer import (
    MilConfig,
    batch_loss,
    batch_loss_and_grad,
    magnitude_loss,
    score_video,
    smoothness_loss,
    sparsity_loss,
    topk_select,
    train_mil,
)
from magmine.nn_core import Model, finite_diff_check, forward, init_model, l2_magnitudes, sigmoid


def full_sort_topk(v, k):
    order = sorted(range(len(v)), key=lambda i: (-v[i], i))[:k]
    return order, float(np.mean([v[i] for i in order]))


def _model(cfg, dim=6, seed=0):
    m = init_model(cfg.model_spec(dim), seed)
    rng = np.random.default_rng(seed + 1)
    for v in m.params.values():
        v += rng.normal(0, 0.3, v.shape)
    return m


class TestTopK:
    @pytest.mark.parametrize("v, k, idx", [
        ([4, 4, 1], 1, [0]),
        ([1, 5, 5, 5], 2, [1, 2]),
        ([0.1, 0.9, 0.5], 3, [1, 2, 0]),
    ])
    def test_examples(self, v, k, idx):
        got, mean = topk_select(v, k)
        assert got.tolist() == idx
        assert mean == pytest.approx(np.mean(np.array(v, float)[idx]))

    @given(st.lists(st.integers(0, 5).map(float), min_size=1, max_size=40), st.data())
    def test_matches_full_sort(self, v, data):
        k = data.draw(st.integers(1, len(v)))
        idx, mean = topk_select(v, k)
        ref_idx, ref_mean = full_sort_topk(v, k)
        assert idx.tolist() == ref_idx and mean == pytest.approx(ref_mean)

    @pytest.mark.parametrize("k", [0, 4])
    def test_bad_k(self, k):
        with pytest.raises(ValueError):
            topk_select([1.0, 2.0, 3.0], k)


class TestTerms:
    @pytest.mark.parametrize("a, n, yi, yj, m, out", [
        (150.0, 20.0, 1, 0, 100.0, 0.0),
        (50.0, 20.0, 1, 0, 100.0, 70.0),
        (0.0, 0.0, 1, 0, 100.0, 100.0),
        (50.0, 20.0, 0, 0, 100.0, 0.0),
        (50.0, 20.0, 1, 1, 100.0, 0.0),
    ])
    def test_magnitude_hinge(self, a, n, yi, yj, m, out):
        assert magnitude_loss(a, n, yi, yj, m) == out

    def test_smooth_and_sparse(self):
        assert smoothness_loss([0.1, 0.4, 0.2]) == pytest.approx(0.09 + 0.04)
        assert sparsity_loss([0.2, 0.4]) == pytest.approx(0.3)
        assert smoothness_loss([0.5]) == 0.0

    def test_config_validation(self):
        for bad in (dict(k=40), dict(margin=0), dict(lambda_smooth=-1), dict(dropout=1.0), dict(lr=0)):
            with pytest.raises(ValueError):
                MilConfig(**bad).validate()
        with pytest.raises(ValueError, match="marginn"):
            MilConfig.from_dict({"marginn": 5})


class TestBatchLoss:
    def test_reduces_to_plain_bce_plus_hinge(self):
        cfg = MilConfig(k=5, num_segments=5, lambda_smooth=0.0, lambda_sparse=0.0, dropout=0.0, hidden=(8, 4))
        m = _model(cfg)
        rng = np.random.default_rng(3)
        abn, nrm = rng.normal(1, 1, (3, 5, 6)), rng.normal(0, 1, (3, 5, 6))
        total, terms = batch_loss(abn, nrm, m, cfg)
        # independent implementation
        c = forward(m, np.concatenate([abn, nrm]))
        s = 1.0 / (1.0 + np.exp(-c.logits))
        bce = -np.mean(np.concatenate([np.log(s[:3]).ravel(), np.log(1 - s[3:]).ravel()]))
        mag = l2_magnitudes(c.out).mean(axis=1)
        hinge = np.mean(np.maximum(0.0, 100.0 - (mag[:3] - mag[3:])))
        assert terms["bce"] == pytest.approx(bce, rel=1e-10)
        assert terms["magnitude"] == pytest.approx(hinge, rel=1e-10)
        assert total == pytest.approx(bce + hinge, rel=1e-10)

    def test_pair_permutation_invariance(self):
        cfg = MilConfig(dropout=0.0, hidden=(8, 4), num_segments=8)
        m = _model(cfg)
        rng = np.random.default_rng(4)
        abn, nrm = rng.normal(1, 1, (4, 8, 6)), rng.normal(0, 1, (4, 8, 6))
        perm = rng.permutation(4)
        t1, _ = batch_loss(abn, nrm, m, cfg)
        t2, _ = batch_loss(abn[perm], nrm[perm], m, cfg)
        assert t1 == pytest.approx(t2, rel=1e-12)

    def test_shape_mismatch(self):
        cfg = MilConfig(dropout=0.0, hidden=(8, 4))
        with pytest.raises(ValueError):
            batch_loss(np.zeros((2, 4, 6)), np.zeros((3, 4, 6)), _model(cfg), cfg)

    @pytest.mark.parametrize("attention", [True, False])
    def test_gradient_small(self, attention):
        cfg = MilConfig(dropout=0.0, hidden=(10, 6), num_segments=12, margin=5.0,
                        lambda_smooth=0.3, lambda_sparse=0.2, neck_attention=attention)
        m = _model(cfg, dim=5)
        rng = np.random.default_rng(5)
        abn, nrm = rng.normal(0.5, 1, (2, 12, 5)), rng.normal(0, 1, (2, 12, 5))

        def lg(p):
            t, _, g = batch_loss_and_grad(Model(m.spec, p), abn, nrm, cfg)
            return t, g

        assert finite_diff_check(lg, m.params, num_params=250) < 1e-6

    @given(arrays(np.float64, (2, 6, 4), elements=st.floats(-3, 3)))
    def test_terms_finite_and_nonnegative(self, abn):
        cfg = MilConfig(dropout=0.0, hidden=(8, 4), num_segments=6)
        m = _model(cfg, dim=4)
        total, terms = batch_loss(abn, abn[::-1] * 0.5, m, cfg)
        assert np.isfinite(total)
        assert all(v >= 0 for v in terms.values())


class TestTraining:
    CFG = dict(epochs=6, batch_pairs=4, hidden=(32, 16), lr=3e-3)

    def test_deterministic(self, tiny_corpus):
        _, man = tiny_corpus
        a = train_mil(man, MilConfig(**self.CFG))
        b = train_mil(man, MilConfig(**self.CFG))
        assert a.epoch_records == b.epoch_records
        assert all(np.array_equal(a.best_model.params[k], b.best_model.params[k]) for k in a.best_model.params)

    def test_learns_and_keeps_best(self, tiny_corpus):
        _, man = tiny_corpus
        records = []
        st_ = train_mil(man, MilConfig(**{**self.CFG, "epochs": 15}), on_epoch=records.append)
        assert len(records) == 15 and records[-1]["step"] == 15 * 3
        best = max(r["val_frame_auc"] for r in records)
        assert st_.best_val_auc == best
        assert evaluate_frames(man, "val", st_.best_model).frame_auc == pytest.approx(best)
        assert evaluate_frames(man, "test", st_.best_model).frame_auc > 0.8

    def test_batch_shrinks_with_warning(self, tiny_corpus):
        _, man = tiny_corpus
        st_ = train_mil(man, MilConfig(**{**self.CFG, "epochs": 1, "batch_pairs": 16}))
        assert st_.warnings and "reduced" in st_.warnings[0]

    def test_score_video(self):
        cfg = MilConfig(hidden=(8, 4))
        m = _model(cfg)
        s = score_video(np.zeros((5, 6)), m)
        assert s.shape == (5,) and np.all((s > 0) & (s < 1))
        with pytest.raises(ValueError):
            score_video(np.zeros((5, 3)), m)
        assert np.allclose(s, sigmoid(forward(m, np.zeros((1, 5, 6))).logits[0]))
