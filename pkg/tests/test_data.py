from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ricasso.data import (
    ClassProfile,
    anti_longtail_sampler,
    build_training_batch,
    compute_prior,
    cutmix,
    make_longtail_profile,
    mixup,
)


class TestProfile:
    def test_cifar10_lt_ir100(self):
        p = make_longtail_profile(10, 5000, 100)
        assert p.counts[0] == 5000
        assert p.counts[9] == round(5000 * 100**-1) == 50
        assert all(a >= b for a, b in zip(p.counts, p.counts[1:]))
        assert p.imbalance_ratio == 100

    def test_balanced(self):
        assert make_longtail_profile(10, 100, 1).counts == (100,) * 10

    def test_two_classes(self):
        assert make_longtail_profile(2, 100, 4).counts == (100, 25)

    def test_tail_rounds_to_zero(self):
        with pytest.raises(ValueError):
            make_longtail_profile(10, 10, 100)

    @pytest.mark.parametrize("args", [(1, 10, 2), (3, 0, 2), (3, 10, 0.5)])
    def test_bad_arguments(self, args):
        with pytest.raises(ValueError):
            make_longtail_profile(*args)

    def test_priors_exact_rationals(self):
        p = make_longtail_profile(10, 5000, 100)
        total = sum(p.counts)
        for c, n in enumerate(p.counts):
            assert p.priors[c] == float(Fraction(n, total))
        assert abs(sum(p.priors) - 1) < 1e-9

    def test_manifest_roundtrip(self):
        p = make_longtail_profile(5, 300, 10)
        assert ClassProfile.from_manifest(p.to_manifest(seed=3)) == p


class TestPrior:
    def test_symmetric(self):
        np.testing.assert_array_equal(compute_prior([50, 50]), [0.5, 0.5])

    def test_head_tail(self):
        np.testing.assert_allclose(compute_prior([5000, 50]), [5000 / 5050, 50 / 5050], rtol=0, atol=1e-15)

    def test_small(self):
        np.testing.assert_array_equal(compute_prior([1, 1, 2]), [0.25, 0.25, 0.5])

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_prior([])

    def test_nonpositive(self):
        with pytest.raises(ValueError):
            compute_prior([3, 0])


class TestAntiSampler:
    def test_balanced_profile_uniform(self):
        s = anti_longtail_sampler(ClassProfile.from_counts([7, 7, 7, 7]), seed=0)
        np.testing.assert_allclose(s.class_probs, [0.25] * 4)

    def test_two_class_probs(self):
        s = anti_longtail_sampler(ClassProfile.from_counts([100, 25]), seed=0)
        np.testing.assert_allclose(s.class_probs, [0.2, 0.8])

    def test_empirical_frequencies(self):
        prof = ClassProfile.from_counts([5000, 500, 50])
        s = anti_longtail_sampler(prof, seed=1)
        idx = s.draw(100_000)
        labels = prof.labels()[idx]
        freq = np.bincount(labels, minlength=3) / len(labels)
        np.testing.assert_allclose(freq, [1 / 111, 10 / 111, 100 / 111], atol=0.01)

    def test_uniform_within_class(self):
        prof = ClassProfile.from_counts([4, 2])
        idx = anti_longtail_sampler(prof, seed=2).draw(60_000)
        head = idx[idx < 4]
        np.testing.assert_allclose(np.bincount(head, minlength=4) / len(head), [0.25] * 4, atol=0.02)

    def test_deterministic_and_iterable(self):
        prof = ClassProfile.from_counts([30, 10, 3])
        a = anti_longtail_sampler(prof, seed=5).draw(50)
        b = anti_longtail_sampler(prof, seed=5).draw(50)
        np.testing.assert_array_equal(a, b)
        it = iter(anti_longtail_sampler(prof, seed=9))
        first = [next(it) for _ in range(5)]
        assert all(0 <= i < prof.total for i in first)

    def test_explicit_labels(self):
        labels = np.array([1, 0, 1, 1, 0, 1])
        prof = ClassProfile.from_counts([2, 4])
        idx = anti_longtail_sampler(prof, seed=0, labels=labels).draw(2000)
        assert set(np.unique(idx)) <= set(range(6))
        frac0 = np.mean(labels[idx] == 0)
        assert abs(frac0 - 2 / 3) < 0.04


class TestMixup:
    def test_identity(self):
        x_i, x_j = np.ones((2, 2)), np.zeros((2, 2))
        m = mixup(x_i, 0, x_j, 1, 1.0, num_classes=3)
        np.testing.assert_array_equal(m.input, x_i)
        np.testing.assert_array_equal(m.soft_label, [1, 0, 0])

    def test_half(self):
        m = mixup(np.zeros(3), 0, np.ones(3), 1, 0.5, num_classes=3)
        np.testing.assert_array_equal(m.soft_label, [0.5, 0.5, 0])
        np.testing.assert_allclose(m.input, [0.5] * 3)

    def test_same_class_collapses(self):
        m = mixup(np.zeros(3), 2, np.ones(3), 2, 0.3, num_classes=3)
        np.testing.assert_allclose(m.soft_label, [0, 0, 1])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mixup(np.zeros(3), 0, np.zeros(4), 1, 0.5, num_classes=2)

    def test_lam_range(self):
        with pytest.raises(ValueError):
            mixup(np.zeros(3), 0, np.zeros(3), 1, 1.5, num_classes=2)


class TestCutmix:
    def test_no_patch(self):
        x_i, x_j = np.zeros((3, 32, 32)), np.ones((3, 32, 32))
        m = cutmix(x_i, 0, x_j, 1, 1.0, num_classes=2, seed=0)
        np.testing.assert_array_equal(m.input, x_i)
        assert m.lam == 1.0

    def test_unclipped_quarter(self):
        x_i, x_j = np.zeros((32, 32)), np.ones((32, 32))
        m = cutmix(x_i, 0, x_j, 1, 0.75, num_classes=2, center=(16, 16))
        assert m.input.sum() == 256
        assert m.lam == 1 - 256 / 1024 == 0.75

    def test_clipped_at_border(self):
        # 16x16 box centred at (row 2, col 4) is clipped to rows 0..10, cols 0..12
        x_i, x_j = np.zeros((32, 32)), np.ones((32, 32))
        m = cutmix(x_i, 0, x_j, 1, 0.75, num_classes=2, center=(2, 4))
        replaced = int((m.input != x_i).sum())
        assert replaced == 120
        assert m.lam == pytest.approx(1 - 120 / 1024)
        assert m.lam == pytest.approx(0.8828, abs=1e-4)
        np.testing.assert_allclose(m.soft_label, [m.lam, 1 - m.lam])

    def test_rejects_flat_input(self):
        with pytest.raises(ValueError):
            cutmix(np.zeros(8), 0, np.ones(8), 1, 0.5, num_classes=2, seed=0)

    @settings(max_examples=60, deadline=None)
    @given(lam=st.floats(0, 1), seed=st.integers(0, 10_000), h=st.integers(2, 12), w=st.integers(2, 12))
    def test_mask_matches_lam(self, lam, seed, h, w):
        x_i, x_j = np.zeros((2, h, w)), np.ones((2, h, w))
        m = cutmix(x_i, 0, x_j, 1, lam, num_classes=2, seed=seed)
        mask = m.input[0] == 1
        assert m.lam == 1 - mask.sum() / (h * w)
        assert abs(m.soft_label.sum() - 1) < 1e-9


def _batch(b=4, seed=0, classes=3, alpha=1.0):
    rng = np.random.default_rng(100)
    xi = rng.standard_normal((b, 1, 4, 4))
    xa = rng.standard_normal((b, 1, 4, 4))
    yi = rng.integers(classes, size=b)
    ya = rng.integers(classes, size=b)
    return build_training_batch((xi, yi), (xa, ya), alpha, seed, classes)


class TestTrainingBatch:
    def test_positional_pairing(self):
        tb = _batch(4)
        assert len(tb.mixed_mixup) == len(tb.mixed_cutmix) == 4
        assert tb.pairing == [(0, 0), (1, 1), (2, 2), (3, 3)]
        for p in range(4):
            assert (tb.mixed_mixup[p].src_i, tb.mixed_mixup[p].src_j) == (tb.mixed_cutmix[p].src_i, tb.mixed_cutmix[p].src_j)

    def test_large_alpha_concentrates(self):
        tb = _batch(16, alpha=1e6)
        for m in tb.mixed_mixup:
            assert abs(m.lam - 0.5) < 0.01

    def test_deterministic(self):
        a, b = _batch(8, seed=42), _batch(8, seed=42)
        assert a.stacked_inputs().tobytes() == b.stacked_inputs().tobytes()
        assert a.stacked_targets().tobytes() == b.stacked_targets().tobytes()

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            build_training_batch((np.zeros((3, 2, 2)), np.zeros(3)), (np.zeros((2, 2, 2)), np.zeros(2)), 1.0, 0, 2)

    def test_sources_present(self):
        tb = _batch(6)
        for m in tb.mixed_mixup:
            np.testing.assert_allclose(m.input, m.lam * tb.id_inputs[m.src_i] + (1 - m.lam) * tb.anti_inputs[m.src_j])

    def test_label_mass(self):
        tb = _batch(32, classes=5)
        np.testing.assert_allclose(tb.stacked_targets().sum(1), 1, atol=1e-9)
        for m in tb.mixed_mixup + tb.mixed_cutmix:
            assert np.count_nonzero(m.soft_label) <= 2


@settings(max_examples=100, deadline=None)
@given(lam=st.floats(0, 1), yi=st.integers(0, 4), yj=st.integers(0, 4))
def test_soft_label_mass_conserved(lam, yi, yj):
    for m in (
        mixup(np.zeros((4, 4)), yi, np.ones((4, 4)), yj, lam, num_classes=5),
        cutmix(np.zeros((4, 4)), yi, np.ones((4, 4)), yj, lam, num_classes=5, seed=0),
    ):
        assert abs(m.soft_label.sum() - 1) < 1e-9
        if yi != yj:
            assert m.soft_label[yi] == pytest.approx(m.lam)
            assert m.soft_label[yj] == pytest.approx(1 - m.lam)


def test_head_tail_pairs_dominate():
    prof = make_longtail_profile(10, 5000, 100)
    labels = prof.labels()
    rng = np.random.default_rng(0)
    n = 20_000
    id_cls = labels[rng.integers(len(labels), size=n)]
    anti_cls = labels[anti_longtail_sampler(prof, seed=3).draw(n)]
    head, tail = set(range(0, 3)), set(range(7, 10))
    ht = np.mean([(a in head and b in tail) or (a in tail and b in head) for a, b in zip(id_cls, anti_cls)])
    hh = np.mean([a in head and b in head for a, b in zip(id_cls, anti_cls)])
    assert ht > hh
