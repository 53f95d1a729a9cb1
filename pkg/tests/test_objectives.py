import math

import numpy as np
import pytest

from vsum import diffcore as dc
from vsum import objectives as obj
from vsum.errors import ShapeError, UsageError
from vsum.summarize import ShotSegmentation, segment_uniform


class TestClassify:
    def test_zero_params_give_half(self):
        p = obj.ClassifierParams(w=dc.zeros(4, 1, requires_grad=True),
                                 b=dc.zeros(1, 1, requires_grad=True))
        scores = obj.classify(dc.Tensor(np.random.default_rng(0).normal(size=(5, 4))), p)
        assert np.array_equal(scores.data, np.full((5, 1), 0.5))

    def test_monotone_in_logit(self):
        rng = np.random.default_rng(1)
        p = obj.init_classifier(3, rng)
        base = rng.normal(size=(1, 3))
        w = p.w.data[:, 0]
        lo = obj.classify(dc.Tensor(base), p).item()
        hi = obj.classify(dc.Tensor(base + 0.5 * w), p).item()
        assert hi > lo

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(2)
        p = obj.init_classifier(3, rng)
        z = rng.normal(size=(4, 3))
        scores = obj.classify(dc.Tensor(z), p)
        for t in range(4):
            logit = sum(z[t, j] * p.w.data[j, 0] for j in range(3)) + p.b.data[0, 0]
            assert abs(scores.data[t, 0] - 1.0 / (1.0 + math.exp(-logit))) < 1e-12

    def test_width_mismatch(self):
        p = obj.init_classifier(3, np.random.default_rng(3))
        with pytest.raises(ShapeError):
            obj.classify(dc.Tensor(np.ones((2, 4))), p)


class TestClsLoss:
    def test_uninformative_scores(self):
        y_hat = dc.Tensor(np.full((6, 1), 0.5))
        labels = obj.LabelSet.of([1, 0, 1, 1, 0, 0])
        assert obj.cls_loss(y_hat, labels).item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_perfect_clamped_prediction(self):
        y = np.array([1, 0, 1, 0])
        y_hat = np.where(y == 1, 1.0, 0.0).reshape(-1, 1)
        loss = obj.cls_loss(dc.Tensor(y_hat), obj.LabelSet.of(y)).item()
        assert loss <= 1.2e-7

    def test_hand_evaluated_case(self):
        y_hat = dc.Tensor([[0.8], [0.3]])
        loss = obj.cls_loss(y_hat, obj.LabelSet.of([1, 0])).item()
        expected = -(math.log(0.8) + math.log(0.7)) / 2.0
        assert loss == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.28990, abs=1e-5)

    def test_unlabeled_rejected(self):
        with pytest.raises(UsageError):
            obj.cls_loss(dc.Tensor(np.full((2, 1), 0.5)), obj.LabelSet.absent())

    def test_nonbinary_labels_rejected(self):
        with pytest.raises(UsageError):
            obj.LabelSet.of([0.0, 0.5, 1.0])

    def test_minimized_at_labels_and_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(25):
            t = int(rng.integers(1, 12))
            y = rng.integers(0, 2, size=t)
            labels = obj.LabelSet.of(y)
            probs = rng.uniform(0.01, 0.99, size=(t, 1))
            loss = obj.cls_loss(dc.Tensor(probs), labels).item()
            perfect = obj.cls_loss(dc.Tensor(y.reshape(-1, 1).astype(float)), labels).item()
            assert loss >= 0.0
            assert perfect <= loss + 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(5)
        p = obj.init_classifier(3, rng)
        z = rng.normal(size=(5, 3))
        labels = obj.LabelSet.of(rng.integers(0, 2, size=5))

        def f():
            return obj.cls_loss(obj.classify(dc.Tensor(z), p), labels)

        assert dc.grad_check(f, p.tensors(), eps=1e-6) < 1e-4


class TestDivLoss:
    def test_single_frame_segments_zero(self):
        x = np.random.default_rng(6).normal(size=(4, 3))
        seg = segment_uniform(4, 1)
        scores = dc.Tensor(np.full((4, 1), 0.8))
        assert obj.div_loss(x, scores, seg).item() == 0.0

    def test_identical_unit_frames_ordered_pairs(self):
        v = np.array([1.0, 0.0, 0.0])
        x = np.stack([v, v])
        seg = segment_uniform(2, 2)
        scores = dc.Tensor(np.ones((2, 1)))
        assert obj.div_loss(x, scores, seg).item() == pytest.approx(2.0, abs=1e-12)

    def test_orthogonal_frames_zero(self):
        x = np.eye(3)
        seg = segment_uniform(3, 3)
        scores = dc.Tensor(np.random.default_rng(7).uniform(size=(3, 1)))
        assert obj.div_loss(x, scores, seg).item() == pytest.approx(0.0, abs=1e-12)

    def test_zero_norm_frames_contribute_nothing(self):
        x = np.array([[0.0, 0.0], [1.0, 0.0]])
        seg = segment_uniform(2, 2)
        scores = dc.Tensor(np.ones((2, 1)))
        assert obj.div_loss(x, scores, seg).item() == 0.0

    def test_scale_invariance_of_features(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(6, 4))
        seg = segment_uniform(6, 3)
        scores = dc.Tensor(rng.uniform(size=(6, 1)))
        base = obj.div_loss(x, scores, seg).item()
        rescaled = x * rng.uniform(0.1, 7.0, size=(6, 1))
        assert obj.div_loss(rescaled, scores, seg).item() == pytest.approx(base, abs=1e-10)

    def test_matches_direct_double_sum(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(7, 3))
        seg = ShotSegmentation((0, 3, 5), 7)
        w = rng.uniform(size=7)
        scores = dc.Tensor(w.reshape(-1, 1))
        expected = 0.0
        for a, b in seg.shots():
            for t in range(a, b):
                for t2 in range(a, b):
                    if t != t2:
                        cos = x[t] @ x[t2] / (np.linalg.norm(x[t]) * np.linalg.norm(x[t2]))
                        expected += w[t] * w[t2] * cos
        assert obj.div_loss(x, scores, seg).item() == pytest.approx(expected, abs=1e-10)

    def test_hard_top_k_variant(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(6, 3))
        seg = segment_uniform(6, 3)
        w = np.array([0.9, 0.1, 0.5, 0.2, 0.8, 0.7])
        scores = dc.Tensor(w.reshape(-1, 1))
        got = obj.div_loss(x, scores, seg, hard_top_k=2).item()
        expected = 0.0
        for a, b in seg.shots():
            keep = a + np.argsort(w[a:b])[::-1][:2]
            for t in keep:
                for t2 in keep:
                    if t != t2:
                        cos = x[t] @ x[t2] / (np.linalg.norm(x[t]) * np.linalg.norm(x[t2]))
                        expected += cos
        assert got == pytest.approx(expected, abs=1e-12)

    def test_gradient_through_scores(self):
        rng = np.random.default_rng(11)
        p = obj.init_classifier(3, rng)
        z = rng.normal(size=(6, 3))
        x = rng.normal(size=(6, 3))
        seg = segment_uniform(6, 2)

        def f():
            return obj.div_loss(x, obj.classify(dc.Tensor(z), p), seg)

        assert dc.grad_check(f, p.tensors(), eps=1e-6) < 1e-4


class TestTotalLoss:
    def test_supervised_additive(self):
        report = obj.total_loss("supervised", cls=1.0, rec=2.0, con=3.0)
        assert report.total == 6.0
        assert report.mode == "supervised"
        assert report.div is None

    def test_semi_unlabeled_batch(self):
        report = obj.total_loss("semi", cls=None, rec=2.0, con=3.0)
        assert report.total == 5.0
        assert report.cls is None

    def test_unsupervised_additive(self):
        report = obj.total_loss("unsupervised", rec=2.0, con=3.0, div=0.5)
        assert report.total == 5.5
        assert report.div == 0.5

    def test_supervised_without_labels_fails(self):
        with pytest.raises(UsageError):
            obj.total_loss("supervised", cls=None, rec=1.0, con=1.0)

    def test_unsupervised_requires_div(self):
        with pytest.raises(UsageError):
            obj.total_loss("unsupervised", rec=1.0, con=1.0)

    def test_report_matches_combination_invariant(self):
        rng = np.random.default_rng(12)
        for _ in range(30):
            cls, rec, con, div = rng.uniform(0, 5, size=4)
            r = obj.total_loss("semi", cls=cls, rec=rec, con=con)
            assert abs(r.total - (r.cls + r.rec + r.con)) < 1e-12
            r = obj.total_loss("unsupervised", rec=rec, con=con, div=div)
            assert abs(r.total - (r.rec + r.con + r.div)) < 1e-12

    def test_component_scaling_is_linear(self):
        base = obj.total_loss("supervised", cls=1.5, rec=2.0, con=0.5).total
        doubled = obj.total_loss("supervised", cls=3.0, rec=2.0, con=0.5).total
        assert doubled - base == pytest.approx(1.5)

    def test_weights_drop_terms(self):
        t = obj.combine_total("semi", cls=1.0, rec=2.0, con=3.0,
                              weights={"rec": 0.0, "con": 0.0})
        assert t == 1.0

    def test_tensor_inputs(self):
        rec = dc.Tensor([[2.0]])
        con = dc.Tensor([[3.0]])
        report = obj.total_loss("semi", rec=rec, con=con)
        assert report.total == 5.0
        total_t = obj.combine_total("semi", rec=rec, con=con)
        assert isinstance(total_t, dc.Tensor) and total_t.item() == 5.0

    def test_unlabeled_classifier_gets_no_gradient(self):
        rng = np.random.default_rng(13)
        p = obj.init_classifier(3, rng)
        z = dc.Tensor(rng.normal(size=(4, 3)))
        scores = obj.classify(z, p)   # built but unused by the loss
        rec = dc.sum_all(dc.square(dc.Tensor(rng.normal(size=(4, 3)), requires_grad=True)))
        con = dc.Tensor([[0.5]])
        total = obj.combine_total("semi", cls=None, rec=rec, con=con)
        dc.backward(total)
        assert p.w.grad is None and p.b.grad is None
        assert scores is not None
