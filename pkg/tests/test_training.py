import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semsphere.embed import TINY_CONFIG, embed_place, init_vlad_from_data, load_checkpoint, model_init
from semsphere.errors import EmptySet, InvalidConfig, NoNegatives, NoPositives
from semsphere.pipeline import random_local_map, random_tuple_dataset
from semsphere.projection import project_stack
from semsphere.training import (
    BRANCH_PAIRS,
    N_ROTATIONS,
    DatasetIndex,
    LossConfig,
    TrainingSample,
    divergence_loss,
    grad_check,
    lazy_rot_loss,
    lazy_trip_loss,
    loss_config_from_mapping,
    mine_tuple,
    train,
    tuple_loss,
    viewpoint_free_loss,
)


def points_at(sq_dists):
    """1-d embeddings whose squared distances to the origin are ``sq_dists``."""
    return np.sqrt(np.asarray(sq_dists, float))[:, None]


def toy_dataset(seed=0, places=8):
    """Pairs of places 5 m apart, pairs 100 m apart; random maps."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(places):
        local = random_local_map(rng)
        pos = np.array([100.0 * (i // 2) + 5.0 * (i % 2), 0.0])
        samples.append(TrainingSample(local, project_stack(local, 8, 5), pos, i))
    return DatasetIndex(tuple(samples), 8, 5)


def brute_lazy_rot(rot, pos, neg, margin):
    best = 0.0
    for r, p, q in itertools.product(rot, pos, neg):
        best = max(best, margin + np.sum((r - p) ** 2) - np.sum((r - q) ** 2))
    return best


class TestConfig:
    def test_defaults(self):
        cfg = LossConfig()
        assert (cfg.rot_margin, cfg.trip_margin, cfg.div_weight, cfg.div_margin) == (0.5, 0.5, 0.1, 0.5)
        assert (cfg.lr, cfg.momentum, cfg.batch_size) == (1e-2, 0.9, 2)

    def test_invalid(self):
        with pytest.raises(InvalidConfig):
            LossConfig(rot_margin=0).validate()
        with pytest.raises(InvalidConfig):
            LossConfig(div_weight=-1).validate()
        with pytest.raises(InvalidConfig):
            loss_config_from_mapping({"bogus": "1"})
        assert loss_config_from_mapping({"lr": "0.5"}).lr == 0.5


class TestMining:
    def test_distance_filter(self):
        ds = random_tuple_dataset(0, n_neg=1)
        tup = mine_tuple(ds, 0, np.random.default_rng(0))
        assert tup.positives[0] is ds.samples[1].stack
        assert tup.negatives[0] is ds.samples[2].stack

    def test_rotation_set(self):
        ds = random_tuple_dataset(0)
        tup = mine_tuple(ds, 0, np.random.default_rng(0))
        assert len(tup.rotated) == N_ROTATIONS
        assert [math.degrees(tup.rotated.angle(j)) for j in range(12)] == pytest.approx(list(range(0, 360, 30)))
        assert tup.rotated[0] == ds.samples[0].stack

    def test_no_negatives(self):
        ds = random_tuple_dataset(0)
        close = DatasetIndex(ds.samples[:2], ds.n, ds.k)
        with pytest.raises(NoNegatives):
            mine_tuple(close, 0, np.random.default_rng(0))

    def test_no_positives(self):
        ds = random_tuple_dataset(0)
        with pytest.raises(NoPositives):
            mine_tuple(ds, 2, np.random.default_rng(0))


class TestLazyRot:
    def test_inactive(self):
        assert lazy_rot_loss(np.zeros((1, 1)), points_at([0.2]), points_at([1.0]), 0.5) == 0.0

    def test_active(self):
        assert lazy_rot_loss(np.zeros((1, 1)), points_at([0.2]), points_at([0.4]), 0.5) == pytest.approx(0.3, abs=1e-12)

    def test_boundary(self):
        assert lazy_rot_loss(np.zeros((1, 1)), np.zeros((1, 1)), points_at([0.5]), 0.5) == pytest.approx(0.0, abs=1e-12)

    def test_empty(self):
        with pytest.raises(EmptySet):
            lazy_rot_loss(np.zeros((0, 2)), np.zeros((1, 2)), np.zeros((1, 2)), 0.5)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_brute_force_and_order(self, seed):
        r = np.random.default_rng(seed)
        rot, pos, neg = r.normal(size=(3, 2)), r.normal(size=(2, 2)), r.normal(size=(4, 2))
        val = lazy_rot_loss(rot, pos, neg, 0.5)
        assert val == pytest.approx(brute_lazy_rot(rot, pos, neg, 0.5), abs=1e-12)
        assert val >= 0
        shuffled = lazy_rot_loss(rot[::-1], pos[::-1], neg[r.permutation(4)], 0.5)
        assert shuffled == pytest.approx(val, abs=1e-12)


class TestLazyTrip:
    def test_hand(self):
        assert lazy_trip_loss(np.zeros(1), points_at([0.2]), points_at([1.0, 0.6]), 0.5) == pytest.approx(0.1, abs=1e-12)

    def test_inactive(self):
        assert lazy_trip_loss(np.zeros(1), points_at([0.2]), points_at([0.7, 2.0]), 0.5) == 0.0

    def test_min_positive(self):
        pos = points_at([0.2, 0.9])
        assert lazy_trip_loss(np.zeros(1), pos, points_at([0.4]), 0.5) == pytest.approx(0.3, abs=1e-12)
        assert lazy_trip_loss(np.zeros(1), pos[::-1], points_at([0.4]), 0.5) == pytest.approx(0.3, abs=1e-12)

    def test_empty(self):
        with pytest.raises(EmptySet):
            lazy_trip_loss(np.zeros(2), np.zeros((0, 2)), np.zeros((1, 2)), 0.5)


class TestDivergence:
    def slices(self, rng, bd=4):
        anchor = rng.normal(size=3 * bd)
        return anchor, rng.normal(size=(2, 3 * bd)), rng.normal(size=(2, 3 * bd)), rng.normal(size=(3, 3 * bd))

    def test_free_additivity(self, rng):
        cfg = LossConfig()
        a, rot, pos, neg = self.slices(rng)
        sl = slice(0, 4)
        expected = lazy_rot_loss(rot[:, sl], pos[:, sl], neg[:, sl], 0.5) + lazy_trip_loss(a[sl], pos[:, sl], neg[:, sl], 0.5)
        assert viewpoint_free_loss(a[sl], rot[:, sl], pos[:, sl], neg[:, sl], cfg) == pytest.approx(expected, abs=1e-12)
        report, _ = tuple_loss(a, rot, pos, neg, 4, cfg, need_grad=False)
        assert report.free[0] == pytest.approx(expected, abs=1e-12)

    def test_lambda_zero(self, rng):
        report, _ = tuple_loss(*self.slices(rng), 4, LossConfig(div_weight=0.0), need_grad=False)
        assert report.total == pytest.approx(report.free.sum(), abs=1e-12)

    def test_decomposition(self, rng):
        cfg = LossConfig(div_weight=0.3)
        report, _ = tuple_loss(*self.slices(rng), 4, cfg, need_grad=False)
        assert report.total == pytest.approx(report.free.sum() + 0.3 * report.regularizer, abs=1e-9)

    def regularizer_case(self, distance):
        # branch slices: two orthogonal-free unit vectors at the requested distance, third far away
        theta = 2 * math.asin(distance / 2)
        u0 = np.array([1.0, 0.0, 0.0])
        u1 = np.array([math.cos(theta), math.sin(theta), 0.0])
        u2 = np.array([-1.0, 0.0, 0.0]) if distance < 1.5 else np.array([0.0, 0.0, 1.0])
        anchor = np.concatenate([u0, u1, u2])
        far = np.tile(anchor, (1, 1))
        return anchor, far, far, far + 10.0

    def test_regularizer_inactive(self):
        anchor, rot, pos, neg = self.regularizer_case(1.0)
        report, _ = tuple_loss(anchor, rot, pos, neg, 3, LossConfig(div_weight=0.1), need_grad=False)
        # pair (0, 1) at D = 1 is inactive; the others are at D^2 >= 2
        assert report.regularizer == 0.0

    def test_regularizer_hand(self):
        anchor, rot, pos, neg = self.regularizer_case(0.4)
        report, _ = tuple_loss(anchor, rot, pos, neg, 3, LossConfig(div_weight=0.1), need_grad=False)
        assert report.active_pairs == 1
        assert report.total - report.free.sum() == pytest.approx(0.1 * (0.5 - 0.16), abs=1e-12)
        assert 0.1 * report.regularizer == pytest.approx(0.034, abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_descriptor_gradients(self, seed):
        r = np.random.default_rng(seed)
        cfg = LossConfig(div_weight=0.7)
        parts = [r.normal(size=6), r.normal(size=(2, 6)), r.normal(size=(2, 6)), r.normal(size=(3, 6))]
        _, grads = tuple_loss(*parts, 2, cfg)
        base, _ = tuple_loss(*parts, 2, cfg, need_grad=False)
        for p, g in zip(parts, grads):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + 1e-6
                hi = tuple_loss(*parts, 2, cfg, need_grad=False)[0].total
                p[idx] = old - 1e-6
                lo = tuple_loss(*parts, 2, cfg, need_grad=False)[0].total
                p[idx] = old
                fd = (hi - lo) / 2e-6
                if abs(hi + lo - 2 * base.total) > 1e-8:
                    continue  # straddles a hinge kink
                assert fd == pytest.approx(g[idx], abs=1e-5)

    def test_model_loss_nonnegative(self):
        ds = random_tuple_dataset(0, TINY_CONFIG.n)
        tup = mine_tuple(ds, 0, np.random.default_rng(1), LossConfig(n_neg=3))
        report = divergence_loss(tup, model_init(TINY_CONFIG), LossConfig(), rot_ids=[0, 5])
        assert report.total >= 0 and np.all(report.free >= 0)


class TestGradCheck:
    def test_tiny_model(self):
        ds = random_tuple_dataset(0, TINY_CONFIG.n)
        cfg = LossConfig(n_neg=3)
        tup = mine_tuple(ds, 0, np.random.default_rng(0), cfg)
        report = grad_check(model_init(TINY_CONFIG, 0), tup, cfg)
        assert report.passed(1e-4), report.max_rel_error
        assert set(report.max_rel_error) >= {"conv0.h", "conv1.bias", "vlad.centers", "vlad.w", "vlad.b", "proj"}
        assert report.checked > 0 and all(v >= 0 for v in report.skipped.values())

    def test_all_inactive_zero_gradient(self):
        ds = random_tuple_dataset(0, TINY_CONFIG.n)
        cfg = LossConfig(n_neg=3, rot_margin=1e-9, trip_margin=1e-9, div_weight=0.0)
        tup = mine_tuple(ds, 0, np.random.default_rng(0), cfg)
        model = model_init(TINY_CONFIG, 0)
        report, grads = divergence_loss(tup, model, cfg, rot_ids=[0], need_grad=True)
        if report.total == 0.0:
            assert all(not np.any(g) for g in grads.values())


class TestTrain:
    def test_deterministic(self, tmp_path):
        ds = toy_dataset()
        cfg = LossConfig(epochs=2, n_neg=3, n_rot=2)
        a = train(ds, TINY_CONFIG, cfg, checkpoint_dir=tmp_path / "a")
        b = train(ds, TINY_CONFIG, cfg, checkpoint_dir=tmp_path / "b")
        for ca, cb in zip(a.checkpoints, b.checkpoints):
            assert ca.read_text() == cb.read_text()
            assert ca.with_suffix(".bin").read_bytes() == cb.with_suffix(".bin").read_bytes()
        np.testing.assert_array_equal(load_checkpoint(a.checkpoints[-1]).to_vector(), a.model.to_vector())

    @pytest.mark.slow
    def test_smoke_run_halves_loss(self):
        ds = toy_dataset()
        model = init_vlad_from_data(model_init(TINY_CONFIG), [s.stack for s in ds.samples], sharpness=3.0)
        res = train(ds, TINY_CONFIG, LossConfig(epochs=50, lr=1e-2, n_neg=3), model=model)
        assert res.log[-1]["total"] <= 0.5 * res.log[0]["total"]

    @pytest.mark.slow
    def test_large_lambda_separates_branches(self):
        ds = toy_dataset()
        model = init_vlad_from_data(model_init(TINY_CONFIG), [s.stack for s in ds.samples], sharpness=3.0)
        cfg = LossConfig(epochs=50, lr=1e-2, n_neg=3, div_weight=10.0)
        res = train(ds, TINY_CONFIG, cfg, model=model)
        d2 = []
        for s in ds.samples:
            v = embed_place(s.stack, res.model)
            units = [v.branch(a) / np.linalg.norm(v.branch(a)) for a in range(3)]
            d2 += [float(np.sum((units[a] - units[b]) ** 2)) for a, b in BRANCH_PAIRS]
        assert np.mean(d2) >= cfg.div_margin / 2
