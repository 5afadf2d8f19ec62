import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sumo import metrics, model, synth, train, verify
from sumo.errors import ConfigError, TrainingDivergedError
from sumo.postproc import SpindleEvent, extract_events

TINY = model.ArchConfig(levels=2, pool_widths=(4,), channels=(2, 4), dilations=(1, 1))


def probs_from_mask(mask):
    m = np.asarray(mask, dtype=float)
    return np.stack([m, 1 - m])


@pytest.fixture(scope="module")
def small_data():
    cfg = synth.SynthConfig(segment_s=30.0, snr=8.0, rate_per_min=8.0)
    segs = [synth.gen_segment(cfg, [3, i]) for i in range(30)]
    x = np.stack([s.segment.samples for s in segs]).astype(np.float32)
    masks = np.stack([train.rasterize(s.truth, 100, x.shape[1]) for s in segs])
    return x, masks, [s.truth for s in segs]


class TestRasterize:
    def test_example(self):
        m = train.rasterize([SpindleEvent(1.0, 0.5)], 100, 300)
        assert m.shape == (300,) and m.sum() == 50 and m[100] == 1 and m[149] == 1 and m[150] == 0

    def test_empty(self):
        assert train.rasterize([], 100, 50).sum() == 0

    def test_roundtrip_with_extraction(self):
        events = [SpindleEvent(0.5, 0.73), SpindleEvent(2.0, 1.0), SpindleEvent(4.11, 0.5)]
        mask = train.rasterize(events, 100, 600)
        back = extract_events(probs_from_mask(mask), 1, 100)
        assert len(back) == 3
        for a, b in zip(events, back):
            assert a.onset_s == pytest.approx(b.onset_s) and a.duration_s == pytest.approx(b.duration_s)

    def test_past_end(self):
        with pytest.raises(ValueError):
            train.rasterize([SpindleEvent(2.5, 1.0)], 100, 300)

    def test_one_hot(self):
        oh = train.one_hot(np.array([[1, 0, 1]]))
        np.testing.assert_array_equal(oh[0], [[1, 0, 1], [0, 1, 0]])


class TestDiceLoss:
    def masks(self, rng, B=2, T=200):
        m = (rng.random((B, T)) < 0.3).astype(np.float64)
        m[:, 0], m[:, 1] = 1, 0
        return train.one_hot(m).astype(np.float64)

    def test_perfect(self, rng):
        r = self.masks(rng)
        loss, _ = train.generalized_dice_loss(r.copy(), r)
        assert abs(loss) < 1e-7

    def test_perfect_float32(self, rng):
        r = self.masks(rng).astype(np.float32)
        assert abs(train.generalized_dice_loss(r.copy(), r)[0]) < 1e-7

    def test_complete_mismatch(self, rng):
        r = self.masks(rng)
        loss, _ = train.generalized_dice_loss(1 - r, r)
        assert abs(loss - 1) < 1e-6

    def test_gradient(self, rng):
        assert verify.check_dice(rng, tol=1e-5).passed

    def test_no_spindle_batch_is_finite(self, rng):
        r = train.one_hot(np.zeros((3, 100)))
        p = rng.uniform(0.01, 0.99, (3, 1, 100))
        p = np.concatenate([p, 1 - p], axis=1)
        loss, grad = train.generalized_dice_loss(p, r)
        assert np.isfinite(loss) and np.all(np.isfinite(grad))
        assert 0 <= loss <= 1

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0, 1))
    def test_bounded(self, seed, frac):
        rng = np.random.default_rng(seed)
        r = train.one_hot((rng.random((2, 40)) < frac).astype(float)).astype(np.float64)
        p = rng.random((2, 1, 40))
        p = np.concatenate([p, 1 - p], axis=1)
        loss, _ = train.generalized_dice_loss(p, r)
        assert -1e-12 <= loss <= 1 + 1e-12

    def test_class_weights(self):
        # a sample of the rare class weighs more than one of the common class
        r = train.one_hot(np.array([[1] + [0] * 9], dtype=float)).astype(np.float64)
        p = r.copy()
        p_rare = p.copy()
        p_rare[0, :, 0] = [0.5, 0.5]
        p_common = p.copy()
        p_common[0, :, 5] = [0.5, 0.5]
        rare = train.generalized_dice_loss(p_rare, r)[0]
        common = train.generalized_dice_loss(p_common, r)[0]
        assert rare > common > 0


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        st_ = train.AdamState()
        for _ in range(5):
            train.adam_step(p, {"w": np.zeros(2)}, st_, train.TrainConfig())
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_size(self):
        cfg = train.TrainConfig()
        for g in (1.0, 1e-3, 250.0):
            p = {"w": np.array([0.0])}
            train.adam_step(p, {"w": np.array([g])}, train.AdamState(), cfg)
            assert -p["w"][0] == pytest.approx(cfg.learning_rate * g / (g + cfg.eps_adam), rel=1e-12)
        assert -p["w"][0] == pytest.approx(0.005, rel=1e-9)

    def test_scale_invariant_first_step(self):
        cfg = train.TrainConfig()
        a, b = {"w": np.array([0.0])}, {"w": np.array([0.0])}
        train.adam_step(a, {"w": np.array([0.3])}, train.AdamState(), cfg)
        train.adam_step(b, {"w": np.array([30.0])}, train.AdamState(), cfg)
        assert a["w"][0] == pytest.approx(b["w"][0], rel=1e-6)

    def test_quadratic_converges(self):
        # learning rate raised from the training default: 200 steps of 0.005 move at most ~1
        cfg = train.TrainConfig(learning_rate=0.02)
        p, st_ = {"x": np.array([1.0])}, train.AdamState()
        for _ in range(200):
            train.adam_step(p, {"x": 2 * p["x"]}, st_, cfg)
        assert abs(p["x"][0]) < 0.05

    def test_non_finite_gradient(self):
        p = {"w": np.array([1.0])}
        st_ = train.AdamState()
        with pytest.raises(FloatingPointError):
            train.adam_step(p, {"w": np.array([np.nan])}, st_, train.TrainConfig())
        assert p["w"][0] == 1.0 and st_.t == 0


class TestConfig:
    def test_defaults(self):
        c = train.TrainConfig()
        assert (c.learning_rate, c.beta1, c.beta2, c.eps_adam) == (0.005, 0.9, 0.999, 1e-8)
        assert (c.batch_size, c.patience_epochs, c.max_epochs, c.folds) == (12, 300, 800, 6)

    @pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(batch_size=0),
                                    dict(patience_epochs=900), dict(beta1=1.0), dict(lr=1)])
    def test_invalid(self, kw):
        with pytest.raises((ConfigError, TypeError)):
            train.TrainConfig.from_dict(kw)


def subjects(n_heavy, n_light, cohort_split=None):
    out = [train.SubjectInfo(f"h{i:02d}", "younger" if i % 2 else "older", 10) for i in range(n_heavy)]
    out += [train.SubjectInfo(f"l{i:03d}", "younger" if i % 2 else "older", 3) for i in range(n_light)]
    return out


class TestFolds:
    def test_training_pool_shape(self):
        pool = subjects(30, 114)
        folds = train.make_folds(pool, 6, seed=0)
        for f in range(6):
            members = [s for s in pool if folds[s.subject_id] == f]
            assert sum(s.n_segments == 10 for s in members) == 5
            assert sum(s.n_segments == 3 for s in members) == 19

    def test_single_fold(self):
        assert set(train.make_folds(subjects(2, 5), 1).values()) == {0}

    def test_deterministic(self):
        pool = subjects(7, 40)
        assert train.make_folds(pool, 6, seed=3) == train.make_folds(pool, 6, seed=3)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 20), st.integers(0, 80), st.integers(1, 8), st.integers(0, 100))
    def test_partition_and_balance(self, heavy, light, k, seed):
        pool = subjects(heavy, light)
        if len(pool) < k:
            with pytest.raises(ConfigError):
                train.make_folds(pool, k, seed)
            return
        folds = train.make_folds(pool, k, seed)
        assert set(folds) == {s.subject_id for s in pool}
        assert set(folds.values()) <= set(range(k))
        heavy_counts = [sum(1 for s in pool if s.n_segments == 10 and folds[s.subject_id] == f)
                        for f in range(k)]
        assert max(heavy_counts) - min(heavy_counts) <= 1
        segs = [sum(s.n_segments for s in pool if folds[s.subject_id] == f) for f in range(k)]
        if 3 * light >= 10 * k:
            # enough light subjects to even out the heavy ones; one subject is the granularity
            tol = max(np.ceil(sum(segs) / k) * 0.1 + 1, 3)
            assert max(segs) - min(segs) <= tol


def moda_pool():
    out = []
    for i in range(100):
        out.append(train.SubjectInfo(f"y{i:03d}", "younger", 10 if i < 15 else 3))
    for i in range(80):
        out.append(train.SubjectInfo(f"o{i:03d}", "older", 10 if i < 15 else 3))
    return out


class TestMedianSplit:
    def check_candidate(self, pool, cand):
        info = {s.subject_id: s for s in pool}
        for cohort in ("younger", "older"):
            members = [info[s] for s in cand if info[s].cohort == cohort]
            assert len(members) == 18 and sum(m.n_segments for m in members) == 54
            assert all(m.n_segments < 10 for m in members)

    def test_index_scorer_picks_rank_13(self):
        pool = moda_pool()
        calls = []

        def scorer(c):
            calls.append(c)
            return float(len(calls) - 1)

        res = train.select_median_split(pool, scorer, 25, seed=1)
        assert res.chosen == 12 and res.scores == list(map(float, range(25)))
        assert res.test == sorted(res.candidates[12])
        assert sorted(res.train + res.test) == sorted(s.subject_id for s in pool)
        assert len(res.train) == 144

    def test_constant_scorer(self):
        res = train.select_median_split(moda_pool(), lambda c: 0.5, 25, seed=2)
        assert set(res.scores) == {0.5}
        self.check_candidate(moda_pool(), res.test)

    def test_density_scorer_constraints(self):
        pool = moda_pool()
        rng = np.random.default_rng(0)
        density = {s.subject_id: rng.normal(4, 1) for s in pool}
        res = train.select_median_split(pool, lambda c: float(np.mean([density[s] for s in c])),
                                        25, seed=4)
        for cand in res.candidates:
            self.check_candidate(pool, cand)
        ranked = sorted(range(25), key=lambda i: res.scores[i])
        assert res.chosen == ranked[12]

    def test_deterministic(self):
        a = train.select_median_split(moda_pool(), lambda c: len(c[0]), 5, seed=9)
        b = train.select_median_split(moda_pool(), lambda c: len(c[0]), 5, seed=9)
        assert a.candidates == b.candidates and a.test == b.test

    def test_unsatisfiable(self):
        with pytest.raises(ConfigError):
            train.select_median_split(subjects(30, 20), lambda c: 0.0, 3)


class TestTrainFold:
    def test_epoch_accounting(self):
        batches = train.epoch_batches(535, 12, seed=0, epoch=0)
        assert len(batches) == 45 and len(batches[-1]) == 535 - 44 * 12
        assert sorted(np.concatenate(batches)) == list(range(535))
        assert not np.array_equal(batches[0], train.epoch_batches(535, 12, 0, 1)[0])

    def test_learns_tiny_model(self, small_data):
        x, masks, truth = small_data
        cfg = train.TrainConfig(max_epochs=50, patience_epochs=50)
        best, history = train.train_fold(x[:24], masks[:24], x[24:], truth[24:], TINY, cfg)
        scores = [h["val_f1_bar"] for h in history]
        assert all(b > a for a, b in zip(scores[:4], scores[1:5]))
        assert max(scores) > 0.5
        assert best.meta["best_f1_bar"] == max(scores)
        assert best.meta["epoch"] == 1 + int(np.argmax(scores))
        # the kept parameters reproduce the best validation score
        assert train.validation_f1_bar(best, x[24:], truth[24:], 100) == pytest.approx(max(scores))

    def test_patience_zero(self, small_data):
        x, masks, truth = small_data
        cfg = train.TrainConfig(max_epochs=30, patience_epochs=0, learning_rate=0.05)
        _, history = train.train_fold(x[:12], masks[:12], x[24:27], truth[24:27], TINY, cfg)
        scores = [h["val_f1_bar"] for h in history]
        assert all(b > a for a, b in zip(scores[:-2], scores[1:-1]))
        assert len(history) == 30 or scores[-1] <= max(scores[:-1])

    def test_deterministic_and_resumable(self, small_data):
        x, masks, truth = small_data
        cfg = train.TrainConfig(max_epochs=3, patience_epochs=3)
        _, h1 = train.train_fold(x[:12], masks[:12], x[24:], truth[24:], TINY, cfg)
        _, h2 = train.train_fold(x[:12], masks[:12], x[24:], truth[24:], TINY, cfg)
        assert h1 == h2
        saved = []
        short = train.TrainConfig(max_epochs=2, patience_epochs=2)
        train.train_fold(x[:12], masks[:12], x[24:], truth[24:], TINY, short,
                         on_epoch=lambda s: saved.append(s))
        _, h3 = train.train_fold(x[:12], masks[:12], x[24:], truth[24:], TINY, cfg, state=saved[-1])
        assert h3 == h1

    def test_divergence(self, small_data):
        x, masks, truth = small_data
        bad = x[:12].copy()
        bad[3, 100] = np.nan
        with pytest.raises(TrainingDivergedError) as info:
            train.train_fold(bad, masks[:12], x[24:], truth[24:], TINY,
                             train.TrainConfig(max_epochs=2, patience_epochs=1))
        assert info.value.history == []

    def test_empty_sets(self, small_data):
        x, masks, truth = small_data
        with pytest.raises(ValueError):
            train.train_fold(x[:0], masks[:0], x[24:], truth[24:], TINY, train.TrainConfig())

    def test_validation_metric_is_f1_bar(self, small_data):
        x, _, truth = small_data
        params = model.build(TINY, seed=0)
        det = train.predict_events(params, x[24:], 100)
        curve = metrics.pooled_curve(zip(truth[24:], det))
        expected = metrics.f1_bar(metrics.THRESHOLD_GRID, [p.f1 for p in curve])
        assert train.validation_f1_bar(params, x[24:], truth[24:], 100) == expected
