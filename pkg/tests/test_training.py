import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histocaps.capsnet import CLASS_NAMES, NetworkConfig, build_network
from histocaps.checkpoint import load_checkpoint
from histocaps.preprocess import DatasetManifest, build_manifest, synthesize_dataset
from histocaps.tensor import make_rng
from histocaps.training import (
    AdamState,
    adam_step,
    confusion_and_metrics,
    cross_validate,
    metrics_from_percentages,
    predict_image,
    read_matrix_csv,
    split_folds,
    train,
    vote,
)

SMALL = NetworkConfig(input_side=16, conv=((8, 3, 2), (8, 3, 2)), primary_capsule_dim=4, class_capsule_dim=6)


@pytest.fixture(scope="module")
def small_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    return build_manifest(synthesize_dataset(5, 32, seed=1), out, size=16, patches_per_image=2, seed=1)


class TestFolds:
    def test_published_protocol(self):
        ids = [f"{c}_{i}" for c in CLASS_NAMES for i in range(100)]
        labels = [c for c in CLASS_NAMES for _ in range(100)]
        plan = split_folds(ids, labels, 5, seed=0)
        assert [len(f) for f in plan.folds] == [80] * 5
        for fold in plan.folds:
            for c in CLASS_NAMES:
                assert sum(1 for im in fold if im.startswith(c)) == 20

    def test_leave_one_out(self):
        ids = [f"x{i}" for i in range(7)]
        plan = split_folds(ids, ["normal"] * 7, 7, seed=3)
        assert sorted(len(f) for f in plan.folds) == [1] * 7

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 5), st.lists(st.integers(5, 12), min_size=1, max_size=4), st.integers(0, 2**32 - 1))
    def test_partition(self, k, sizes, seed):
        ids, labels = [], []
        for c, n in zip(CLASS_NAMES, sizes):
            ids += [f"{c}{i}" for i in range(n)]
            labels += [c] * n
        plan = split_folds(ids, labels, k, seed)
        flat = [im for f in plan.folds for im in f]
        assert sorted(flat) == sorted(ids)
        for a, b in itertools.combinations(plan.folds, 2):
            assert not set(a) & set(b)
        sizes_ = [len(f) for f in plan.folds]
        assert max(sizes_) - min(sizes_) <= 1

    def test_deterministic(self):
        ids = [f"i{n}" for n in range(20)]
        labels = [CLASS_NAMES[n % 4] for n in range(20)]
        assert split_folds(ids, labels, 5, 9).folds == split_folds(ids, labels, 5, 9).folds

    def test_too_few_images(self):
        with pytest.raises(ValueError, match="fewer than k"):
            split_folds(["a", "b", "c"], ["normal", "normal", "benign"], 2, 0)

    def test_k_too_small(self):
        with pytest.raises(ValueError):
            split_folds(["a", "b"], ["normal"] * 2, 1, 0)


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        p = {"w": np.array([1.0, -2.0])}
        st_ = AdamState()
        for _ in range(50):
            adam_step(p, {"w": np.zeros(2)}, st_)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        p = {"w": np.array([0.0, 0.0, 0.0])}
        adam_step(p, {"w": np.array([3.0, -0.5, 100.0])}, AdamState(lr=1e-4))
        np.testing.assert_allclose(p["w"], [-1e-4, 1e-4, -1e-4], rtol=1e-6)

    def test_matches_hand_update(self):
        g1, g2 = 0.4, -0.2
        m1, v1 = 0.1 * g1, 0.001 * g1**2
        m2, v2 = 0.9 * m1 + 0.1 * g2, 0.999 * v1 + 0.001 * g2**2
        w = 1.0 - 0.01 * (m1 / 0.1) / (np.sqrt(v1 / 0.001) + 1e-8)
        w = w - 0.01 * (m2 / (1 - 0.9**2)) / (np.sqrt(v2 / (1 - 0.999**2)) + 1e-8)
        p = {"w": np.array([1.0])}
        st_ = AdamState(lr=0.01)
        adam_step(p, {"w": np.array([g1])}, st_)
        adam_step(p, {"w": np.array([g2])}, st_)
        assert p["w"][0] == pytest.approx(w, rel=1e-14)
        assert st_.t == 2

    def test_quadratic_converges(self):
        # minimize (w - 0.3)^2 from w = 1; closed-form minimizer 0.3
        p = {"w": np.array([1.0])}
        st_ = AdamState(lr=0.05)
        for _ in range(200):
            adam_step(p, {"w": 2 * (p["w"] - 0.3)}, st_)
        assert abs(p["w"][0] - 0.3) < 1e-3

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


class TestTrain:
    def test_threshold_disabled_runs_max_steps(self, small_manifest):
        net = build_network(SMALL, make_rng(0))
        _, report = train(net, small_manifest, stop_loss=None, max_steps=7, batch_size=4, window=3)
        assert report.stop_reason == "max_steps" and report.stop_step == 7 and len(report.losses) == 7

    def test_zero_threshold_never_binds(self, small_manifest):
        net = build_network(SMALL, make_rng(0))
        _, report = train(net, small_manifest, stop_loss=0.0, max_steps=5, batch_size=4, window=2)
        assert report.stop_step == 5

    def test_deterministic(self, small_manifest):
        a = train(build_network(SMALL, make_rng(1)), small_manifest, stop_loss=None, max_steps=6, batch_size=8, seed=4)[1]
        b = train(build_network(SMALL, make_rng(1)), small_manifest, stop_loss=None, max_steps=6, batch_size=8, seed=4)[1]
        assert a.losses == b.losses

    def test_reaches_threshold(self, small_manifest):
        net = build_network(SMALL, make_rng(2))
        _, report = train(net, small_manifest, stop_loss=0.1, max_steps=3000, batch_size=16, window=20, lr=3e-3)
        assert report.stop_reason == "threshold"
        assert np.mean(report.losses[-20:]) < 0.1
        assert report.window_loss < 0.1

    def test_loss_decreases(self, small_manifest):
        net = build_network(SMALL, make_rng(3))
        _, report = train(net, small_manifest, stop_loss=None, max_steps=150, batch_size=16, lr=3e-3)
        assert np.mean(report.losses[-20:]) < np.mean(report.losses[:20])

    def test_report_csv(self, small_manifest, tmp_path):
        _, report = train(build_network(SMALL, make_rng(0)), small_manifest, stop_loss=None, max_steps=3, batch_size=2)
        report.write_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "step,loss" and len(lines) == 4
        assert float(lines[1].split(",")[1]) == report.losses[0]

    def test_empty_manifest(self):
        with pytest.raises(ValueError, match="empty"):
            train(build_network(SMALL, make_rng(0)), DatasetManifest([]))

    def test_unreadable_patch(self, small_manifest, tmp_path):
        broken = DatasetManifest(small_manifest.records[:3], root=tmp_path)
        with pytest.raises(OSError):
            train(build_network(SMALL, make_rng(0)), broken, max_steps=1)


class TestVote:
    def _norms(self, votes, favored=None):
        rows = []
        for cls, n in enumerate(votes):
            for _ in range(n):
                row = np.full(4, 0.1)
                row[cls] = 0.9 if favored == cls else 0.5
                rows.append(row)
        return np.array(rows)

    def test_plurality(self):
        cls, votes = vote(self._norms((60, 40, 0, 0)))
        assert cls == 0 and list(votes) == [60, 40, 0, 0]

    def test_single_patch(self):
        assert vote(np.array([[0.1, 0.2, 0.7, 0.3]]))[0] == 2

    def test_tie_broken_by_summed_norm(self):
        assert vote(self._norms((50, 50, 0, 0), favored=1))[0] == 1

    def test_full_tie_lowest_index(self):
        assert vote(np.array([[0.5, 0.1, 0.1, 0.1], [0.1, 0.1, 0.1, 0.5]]))[0] == 0

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.lists(st.floats(0, 0.99), min_size=4, max_size=4), min_size=1, max_size=12), st.randoms())
    def test_permutation_invariant(self, rows, rnd):
        norms = np.array(rows)
        perm = list(range(len(rows)))
        rnd.shuffle(perm)
        a, va = vote(norms)
        b, vb = vote(norms[perm])
        assert a == b and np.array_equal(va, vb)

    def test_empty(self):
        with pytest.raises(ValueError):
            vote(np.zeros((0, 4)))

    def test_predict_image_on_network(self, rng):
        net = build_network(SMALL, make_rng(0))
        cls, votes = predict_image(net, rng.uniform(size=(5, 3, 16, 16)).astype(np.float32))
        assert 0 <= cls < 4 and votes.sum() == 5
        with pytest.raises(ValueError):
            predict_image(net, np.zeros((0, 3, 16, 16)))


# published mean percentages, reordered to (normal, benign, insitu, invasive);
# the source table orders classes benign, in situ, invasive, normal
TABLE2 = np.array(
    [
        [90, 2, 5, 4],
        [6, 87, 6, 4],
        [3, 6, 84, 5],
        [1, 5, 5, 88],
    ],
    dtype=float,
)


class TestMetrics:
    def test_published_macro_accuracy(self):
        sens, macro = metrics_from_percentages(TABLE2)
        np.testing.assert_array_equal(sens, [90, 87, 84, 88])
        assert macro == 87.25
        assert round(macro) == 87

    def test_published_percentages(self):
        cm, pct, sens, macro = confusion_and_metrics(percentages=TABLE2)
        assert cm is None and macro == 87.25
        with pytest.raises(ValueError):
            confusion_and_metrics(percentages=TABLE2[:3])

    def test_perfect(self):
        truths = [0, 1, 2, 3, 0, 1]
        cm, pct, sens, macro = confusion_and_metrics(truths, truths)
        assert macro == 100.0
        np.testing.assert_array_equal(pct, np.diag([100.0] * 4))

    def test_all_class_zero(self):
        truths = [0, 1, 2, 3] * 5
        _, _, sens, macro = confusion_and_metrics([0] * 20, truths)
        np.testing.assert_array_equal(sens, [100, 0, 0, 0])
        assert macro == 25.0

    def test_row_sums(self, rng):
        truths = rng.integers(0, 4, 50)
        preds = rng.integers(0, 4, 50)
        cm, pct, _, _ = confusion_and_metrics(preds, truths)
        np.testing.assert_array_equal(cm.counts.sum(axis=1), np.bincount(truths, minlength=4))
        np.testing.assert_allclose(pct.sum(axis=1), 100.0, atol=1e-9)

    def test_csv(self, tmp_path):
        cm, pct, _, _ = confusion_and_metrics([0, 1, 1, 3], [0, 1, 2, 3])
        cm.write_csv(tmp_path / "m.csv")
        back = read_matrix_csv(tmp_path / "m.csv")
        np.testing.assert_array_equal(back["count"], cm.counts)
        np.testing.assert_allclose(back["percent"], pct, atol=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            confusion_and_metrics([0, 1], [0])

    def test_empty(self):
        with pytest.raises(ValueError):
            confusion_and_metrics([], [])


def test_cross_validate_outputs(small_manifest, tmp_path):
    result = cross_validate(small_manifest, SMALL, tmp_path, k=5, seed=0, stop_loss=None, max_steps=5, batch_size=8)
    assert len(result.checkpoints) == 5 and len(result.matrices) == 5
    assert sorted(p.name for p in tmp_path.glob("fold*_confusion.csv")) == [f"fold{i}_confusion.csv" for i in range(5)]
    assert (tmp_path / "mean_confusion.csv").exists() and (tmp_path / "folds.csv").exists()
    for ckpt in result.checkpoints:
        load_checkpoint(ckpt)
    np.testing.assert_allclose(result.mean_percentages.sum(axis=1), 100.0, atol=0.01)
    fold_of = result.plan.fold_of()
    images = small_manifest.images()
    for i, test_ids in enumerate(result.plan.folds):
        assert result.leakage[i] == set()
        train_sources = {r.source_image for r in small_manifest.records if fold_of[r.source_image] != i}
        assert not train_sources & set(test_ids)
        assert sum(m.counts.sum() for m in result.matrices) == len(images)
