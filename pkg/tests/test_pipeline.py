import json
import math

import numpy as np
import pytest

from vsum import dataio as dio
from vsum import diffcore as dc
from vsum import pipeline as pl
from vsum import recurrent
from vsum.errors import DataError, FormatError, NumericError, UsageError


def tiny_cfg(**kw):
    defaults = dict(mode="supervised", lr=1e-3, epochs=2, seed=3, n_heads=2,
                    n_layers=1, d=8, subspace_dims=[2, 2], lstm_units=4,
                    budget_fraction=0.2)
    defaults.update(kw)
    return pl.TrainConfig(**defaults)


def tiny_dataset(tmp_path, seed=11, n_videos=6):
    spec = dio.SyntheticSpec(seed=seed, n_videos=n_videos, t_min=12, t_max=18, d=8,
                             n_concepts=3, shots_per_video=4, highlight_fraction=0.2,
                             noise_sigma=0.05, n_annotators=2)
    return dio.generate_synthetic(spec, tmp_path / "data")


class TestAdam:
    def run_steps(self, grads_fn, lr, steps, clip=5.0):
        cfg = tiny_cfg(lr=lr, grad_clip=clip)
        w = dc.Tensor(np.array([[1.0, 1.0]]), requires_grad=True)
        named = [("w", w)]
        moments = {"step": 0, "m": {"w": np.zeros((1, 2))}, "v": {"w": np.zeros((1, 2))}}
        norms = [float(np.linalg.norm(w.data))]
        for _ in range(steps):
            pl.adam_step(named, {"w": grads_fn(w.data)}, moments, cfg)
            norms.append(float(np.linalg.norm(w.data)))
        return w, norms

    def test_zero_gradient_no_change(self):
        w, _ = self.run_steps(lambda d: np.zeros_like(d), lr=0.1, steps=5)
        assert np.array_equal(w.data, [[1.0, 1.0]])

    def test_first_step_magnitude_near_lr(self):
        w, _ = self.run_steps(lambda d: np.ones_like(d), lr=0.01, steps=1)
        assert np.max(np.abs(np.abs(w.data - 1.0) - 0.01)) < 1e-6

    def test_quadratic_descent_matches_scalar_oracle(self):
        # independent scalar simulation of the same update rule
        lr, b1, b2, eps = 0.015, 0.9, 0.999, 1e-8
        ow = np.array([1.0, 1.0])
        m = np.zeros(2)
        v = np.zeros(2)
        oracle_norms = [float(np.linalg.norm(ow))]
        for t in range(1, 101):
            g = 2.0 * ow
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            ow = ow - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            oracle_norms.append(float(np.linalg.norm(ow)))

        w, norms = self.run_steps(lambda d: 2.0 * d, lr=lr, steps=100)
        assert np.allclose(norms, oracle_norms, atol=1e-12)
        assert all(b < a for a, b in zip(norms[5:-1], norms[6:]))  # monotone after step 5
        assert norms[-1] < 0.1

    def test_global_norm_clip_applied_before_update(self):
        cfg = tiny_cfg(lr=0.1, grad_clip=5.0)
        w = dc.Tensor(np.zeros((1, 2)), requires_grad=True)
        named = [("w", w)]
        moments = {"step": 0, "m": {"w": np.zeros((1, 2))}, "v": {"w": np.zeros((1, 2))}}
        g = np.array([[6.0, 8.0]])   # norm 10, clipped to 5
        pl.adam_step(named, {"w": g}, moments, cfg)
        assert np.allclose(moments["m"]["w"], 0.1 * g * 0.5, atol=1e-14)

    def test_nan_gradient_aborts_with_diagnostics(self):
        cfg = tiny_cfg()
        w = dc.Tensor(np.zeros((1, 2)), requires_grad=True)
        moments = {"step": 0, "m": {"w": np.zeros((1, 2))}, "v": {"w": np.zeros((1, 2))}}
        with pytest.raises(NumericError, match="w"):
            pl.adam_step([("w", w)], {"w": np.array([[np.nan, 0.0]])}, moments, cfg)

    def test_missing_grad_treated_as_zero(self):
        cfg = tiny_cfg(lr=0.1)
        w = dc.Tensor(np.ones((1, 2)), requires_grad=True)
        moments = {"step": 0, "m": {"w": np.zeros((1, 2))}, "v": {"w": np.zeros((1, 2))}}
        pl.adam_step([("w", w)], {}, moments, cfg)
        assert np.array_equal(w.data, np.ones((1, 2)))


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        cfg = tiny_cfg()
        params = pl.init_model(cfg, np.random.default_rng(cfg.seed))
        moments = pl.init_moments(params)
        moments["m"]["clf/w"] += 0.25
        p1 = tmp_path / "a.mcvc"
        p2 = tmp_path / "b.mcvc"
        pl.save_checkpoint(p1, params, moments, step=17, cfg=cfg)
        params2, moments2, step2, cfg2 = pl.load_checkpoint(p1)
        assert step2 == 17 and cfg2 == cfg
        pl.save_checkpoint(p2, params2, moments2, step2, cfg2)
        assert p1.read_bytes() == p2.read_bytes()
        for (n1, t1), (n2, t2) in zip(params.named_tensors(), params2.named_tensors()):
            assert n1 == n2
            assert np.array_equal(t1.data, t2.data)

    def test_truncated_checkpoint(self, tmp_path):
        cfg = tiny_cfg()
        params = pl.init_model(cfg, np.random.default_rng(0))
        path = tmp_path / "c.mcvc"
        pl.save_checkpoint(path, params, pl.init_moments(params), 0, cfg)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(FormatError):
            pl.load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "c.mcvc"
        path.write_bytes(b"JUNKJUNKJUNKJUNK")
        with pytest.raises(FormatError, match="magic"):
            pl.load_checkpoint(path)


class TestTrain:
    def test_deterministic_given_seed(self, tmp_path):
        manifest = tiny_dataset(tmp_path)
        r1 = pl.train(manifest, tiny_cfg(), out_dir=tmp_path / "run1")
        r2 = pl.train(manifest, tiny_cfg(), out_dir=tmp_path / "run2")
        assert r1.history == r2.history
        assert r1.checkpoint_path.read_bytes() == r2.checkpoint_path.read_bytes()

    def test_loss_decreases_on_tiny_set(self, tmp_path):
        manifest = tiny_dataset(tmp_path)
        result = pl.train(manifest, tiny_cfg(epochs=8, lr=3e-3), out_dir=None)
        assert result.history[-1]["mean_total"] < result.history[0]["mean_total"]

    def test_log_structure(self, tmp_path):
        manifest = tiny_dataset(tmp_path)
        result = pl.train(manifest, tiny_cfg(epochs=1), out_dir=tmp_path / "run")
        lines = [json.loads(l) for l in result.log_path.read_text().splitlines()]
        steps = [l for l in lines if "video_id" in l and not l.get("skipped")]
        epochs = [l for l in lines if "epoch_mean_total" in l]
        assert len(epochs) == 1
        assert all({"cls", "rec", "con", "div", "total", "mode"} <= set(l) for l in steps)
        assert all(l["div"] is None for l in steps)   # not an unsupervised run
        assert epochs[0]["epoch_mean_total"] == pytest.approx(
            np.mean([l["total"] for l in steps]))

    def test_semi_zero_labels_equals_rec_con_only(self, tmp_path):
        manifest = tiny_dataset(tmp_path)
        masked = pl.train(manifest, tiny_cfg(mode="semi", labels_fraction=0.0, epochs=2),
                          out_dir=tmp_path / "masked")
        recon = pl.train(manifest, tiny_cfg(mode="semi", cls_weight=0.0, epochs=2),
                         out_dir=tmp_path / "reconly")
        for (n1, t1), (n2, t2) in zip(masked.params.named_tensors(),
                                      recon.params.named_tensors()):
            assert n1 == n2 and np.array_equal(t1.data, t2.data)
        lines = [json.loads(l) for l in masked.log_path.read_text().splitlines()]
        assert all(l["cls"] is None for l in lines if "video_id" in l)

    def test_labels_fraction_masks_cls_term(self, tmp_path):
        manifest = tiny_dataset(tmp_path, n_videos=10)
        result = pl.train(manifest, tiny_cfg(mode="semi", labels_fraction=0.25, epochs=1),
                          out_dir=tmp_path / "run")
        lines = [json.loads(l) for l in result.log_path.read_text().splitlines()]
        steps = [l for l in lines if "video_id" in l]
        with_cls = {l["video_id"] for l in steps if l.get("cls") is not None}
        n_train = len(steps)
        assert len(with_cls) == round(0.25 * n_train)

    def test_supervised_requires_labels(self, tmp_path):
        manifest = tiny_dataset(tmp_path)
        entries = dio.load_manifest(manifest)
        for e in entries:
            e.labeled = False
        dio.save_manifest(entries, manifest)
        with pytest.raises(UsageError, match="labeled"):
            pl.train(manifest, tiny_cfg())

    def test_unsupervised_trains_without_any_label_access(self, tmp_path):
        manifest = tiny_dataset(tmp_path)
        entries = dio.load_manifest(manifest)
        for e in entries:
            e.labeled = False   # labels unreachable by construction
        dio.save_manifest(entries, manifest)
        result = pl.train(manifest, tiny_cfg(mode="unsupervised", epochs=1),
                          out_dir=tmp_path / "run")
        lines = [json.loads(l) for l in result.log_path.read_text().splitlines()]
        steps = [l for l in lines if "video_id" in l]
        assert steps and all(l["cls"] is None for l in steps)
        assert all(l["div"] is not None for l in steps)

    def test_feature_width_mismatch(self, tmp_path):
        manifest = tiny_dataset(tmp_path)
        with pytest.raises(DataError, match="width"):
            pl.train(manifest, tiny_cfg(d=16, subspace_dims=[4, 4]))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("eval")
    manifest = tiny_dataset(tmp_path)
    result = pl.train(manifest, tiny_cfg(epochs=2), out_dir=tmp_path / "run")
    return manifest, result


class TestEvaluate:
    def test_repeat_evaluation_identical(self, trained):
        manifest, result = trained
        r1 = pl.evaluate(result.params, result.cfg, manifest)
        r2 = pl.evaluate(result.params, result.cfg, manifest)
        assert r1 == r2

    def test_report_structure(self, trained):
        manifest, result = trained
        report = pl.evaluate(result.params, result.cfg, manifest, aggregation="max")
        assert set(report) == {"per_video", "aggregate", "protocol"}
        assert report["protocol"]["aggregation"] == "max"
        assert 0.0 <= report["aggregate"]["mean_f1"] <= 1.0
        for entry in report["per_video"].values():
            assert -1.0 <= entry["tau"] <= 1.0
            assert -1.0 <= entry["rho"] <= 1.0

    def test_uniform_scorer_matches_direct_overlap(self, trained):
        from vsum import metrics as mx
        from vsum import summarize as sm

        manifest, result = trained
        report = pl.evaluate(None, result.cfg, manifest, scorer="uniform")
        ds = dio.load_dataset(manifest)
        for video in ds.subset("test"):
            seg = video.boundaries
            mask = sm.make_summary(np.full(video.n_frames, 0.5), seg,
                                   result.cfg.budget_fraction)
            expected = mx.fscore_multi(mask, video.annotations, "mean")
            assert report["per_video"][video.video_id]["f1"] == pytest.approx(expected)

    def test_random_scorer_seeded(self, trained):
        manifest, result = trained
        a = pl.evaluate(None, result.cfg, manifest, scorer="random", scorer_seed=5)
        b = pl.evaluate(None, result.cfg, manifest, scorer="random", scorer_seed=5)
        c = pl.evaluate(None, result.cfg, manifest, scorer="random", scorer_seed=6)
        assert a == b
        assert a != c

    def test_unknown_scorer(self, trained):
        manifest, result = trained
        with pytest.raises(UsageError):
            pl.evaluate(result.params, result.cfg, manifest, scorer="oracle")

    def test_missing_split(self, tmp_path, trained):
        manifest, result = trained
        entries = dio.load_manifest(manifest)
        for e in entries:
            e.split = "train"
        second = tmp_path / "all_train.json"
        dio.save_manifest(entries, second)
        with pytest.raises(DataError, match="test"):
            pl.evaluate(result.params, result.cfg, second)


class TestInspect:
    def test_emits_layer_times_head_matrices(self, tmp_path):
        manifest = tiny_dataset(tmp_path)
        cfg = tiny_cfg(n_layers=3, n_heads=2, subspace_dims=[2, 2], epochs=1)
        result = pl.train(manifest, cfg, out_dir=tmp_path / "run")
        entries = dio.load_manifest(manifest)
        feat_path = manifest.parent / entries[0].feature_path
        index_path = pl.inspect(result.params, result.cfg, feat_path, tmp_path / "maps")
        index = json.loads(index_path.read_text())
        assert len(index["maps"]) == 3 * 2
        t_len = dio.read_features(feat_path).shape[0]
        for entry in index["maps"]:
            mat = np.loadtxt(tmp_path / "maps" / entry["file"], delimiter=",")
            assert mat.shape == (t_len, t_len)
            assert np.max(np.abs(mat.sum(axis=1) - 1.0)) < 1e-6
            assert mat.mean(axis=0).shape == (t_len,)   # frame-level weight track


class TestOverfitOneSequence:
    def test_reconstruction_collapses_on_one_sample(self):
        # decoder + shared encoder memorize a single short sequence
        rng = np.random.default_rng(30)
        ae = recurrent.init_autoencoder(4, 6, rng)
        seq = rng.normal(size=(5, 4))
        cfg = tiny_cfg(lr=1e-2, grad_clip=5.0)
        named = [("ae/enc/w", ae.encoder.w_gates), ("ae/enc/b", ae.encoder.b_gates),
                 ("ae/dec/w", ae.decoder.w_gates), ("ae/dec/b", ae.decoder.b_gates),
                 ("ae/out_proj", ae.out_proj)]
        moments = {"step": 0,
                   "m": {n: np.zeros_like(t.data) for n, t in named},
                   "v": {n: np.zeros_like(t.data) for n, t in named}}

        def loss_tensor():
            x = dc.Tensor(seq)
            e = recurrent.encode_sequence(x, ae.encoder)
            x_hat = recurrent.decode_sequence(e, 5, ae.decoder, ae.out_proj)
            return recurrent.rec_loss(x_hat, x)

        initial = loss_tensor().item()
        for _ in range(500):
            dc.zero_grads(t for _, t in named)
            loss = loss_tensor()
            dc.backward(loss)
            pl.adam_step(named, {n: t.grad for n, t in named}, moments, cfg)
        final = loss_tensor().item()
        assert final < 0.01 * initial
