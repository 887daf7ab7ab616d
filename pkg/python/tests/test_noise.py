import numpy as np
import pytest
from scipy import stats

from library.core import LabelSet
from library.errors import InputError
from service.noise import (NoiseSpec, corrupted_count, cyclic_permutation, inject_symmetric, inject_asymmetric,
                           inject_noise, noise_transition_matrix, observed_transition_matrix)


def balanced_labels(total, num_classes):
    return LabelSet(np.arange(total) % num_classes, num_classes)


@pytest.mark.parametrize("p, total, expected", [
    (0.4, 1000, 400),
    (0.25, 10, 3),      # 2.5 rounds up
    (0.0, 50, 0),
    (1.0, 7, 7),
])
def test_corrupted_count_rounds_half_up(p, total, expected):
    assert corrupted_count(p, total) == expected


def test_symmetric_noise_exact_count_and_never_keeps_label():
    clean = balanced_labels(1000, 10)
    noisy, mask = inject_symmetric(clean, 0.4, seed=3)
    changed = noisy.labels != clean.labels
    assert changed.sum() == 400
    np.testing.assert_array_equal(changed, mask)


def test_symmetric_replacement_is_uniform():
    total, num_classes = 100_000, 10
    clean = balanced_labels(total, num_classes)
    noisy, mask = inject_symmetric(clean, 0.4, seed=17)
    offsets = (noisy.labels[mask] - clean.labels[mask]) % num_classes
    observed = np.bincount(offsets, minlength=num_classes)[1:]
    assert stats.chisquare(observed).pvalue > 0.01


def test_noise_is_reproducible():
    clean = balanced_labels(500, 5)
    first, _ = inject_symmetric(clean, 0.3, seed=9)
    second, _ = inject_symmetric(clean, 0.3, seed=9)
    other, _ = inject_symmetric(clean, 0.3, seed=10)
    np.testing.assert_array_equal(first.labels, second.labels)
    assert not np.array_equal(first.labels, other.labels)


def test_zero_fraction_is_identity():
    clean = balanced_labels(100, 4)
    noisy, mask = inject_symmetric(clean, 0.0, seed=1)
    np.testing.assert_array_equal(noisy.labels, clean.labels)
    assert not mask.any()


def test_full_symmetric_noise_on_two_classes_flips_every_label():
    clean = balanced_labels(40, 2)
    noisy, mask = inject_symmetric(clean, 1.0, seed=6)
    assert mask.all()
    np.testing.assert_array_equal(noisy.labels, 1 - clean.labels)


def test_asymmetric_noise_follows_permutation():
    clean = balanced_labels(1000, 4)
    noisy, mask = inject_asymmetric(clean, 0.2, seed=4)
    assert mask.sum() == 200
    np.testing.assert_array_equal(noisy.labels[mask], (clean.labels[mask] + 1) % 4)
    np.testing.assert_array_equal(noisy.labels[~mask], clean.labels[~mask])

    custom, mask = inject_asymmetric(clean, 1.0, permutation=(2, 3, 0, 1), seed=4)
    np.testing.assert_array_equal(custom.labels, np.array([2, 3, 0, 1])[clean.labels])


@pytest.mark.parametrize("permutation", [(0, 2, 1), (1, 1, 0), (1, 2)])
def test_bad_permutations_rejected(permutation):
    with pytest.raises(InputError):
        inject_asymmetric(balanced_labels(9, 3), 0.5, permutation=permutation)


def test_symmetric_noise_needs_two_classes():
    with pytest.raises(InputError):
        inject_symmetric(LabelSet([0, 0], 1), 0.5, seed=0)


def test_fraction_bounds():
    with pytest.raises(InputError):
        inject_symmetric(balanced_labels(10, 2), 1.5, seed=0)
    with pytest.raises(InputError):
        NoiseSpec("symmetric", -0.1)
    with pytest.raises(InputError):
        NoiseSpec("gaussian", 0.1)
    with pytest.raises(InputError):
        NoiseSpec("symmetric", 0.1, permutation=(1, 0))


@pytest.mark.parametrize("permutation", [(0, 2, 1), (1, 1, 0), (0,), (1, 3, 0)])
def test_spec_rejects_bad_permutation_at_construction(permutation):
    with pytest.raises(InputError):
        NoiseSpec("asymmetric", 0.1, permutation=permutation)
    with pytest.raises(InputError):
        NoiseSpec.from_dict({"kind": "asymmetric", "fraction": 0.1, "permutation": list(permutation), "seed": 0})


def test_spec_dispatch_and_dict_form():
    spec = NoiseSpec("asymmetric", 0.5, (1, 2, 0), seed=2)
    assert NoiseSpec.from_dict(spec.to_dict()) == spec
    clean = balanced_labels(30, 3)
    via_spec, _ = inject_noise(clean, spec)
    direct, _ = inject_asymmetric(clean, 0.5, (1, 2, 0), seed=2)
    np.testing.assert_array_equal(via_spec.labels, direct.labels)
    with pytest.raises(InputError):
        NoiseSpec.from_dict({"kind": "symmetric", "rate": 0.1})


def test_cyclic_permutation():
    assert cyclic_permutation(4) == (1, 2, 3, 0)


def test_transition_matrices():
    symmetric = noise_transition_matrix(NoiseSpec("symmetric", 0.3), 4)
    np.testing.assert_allclose(symmetric.sum(axis=1), 1.0)
    np.testing.assert_allclose(np.diag(symmetric), 0.7)
    assert symmetric[0, 1] == pytest.approx(0.1)

    asymmetric = noise_transition_matrix(NoiseSpec("asymmetric", 0.3), 3)
    np.testing.assert_allclose(asymmetric, [[0.7, 0.3, 0.0], [0.0, 0.7, 0.3], [0.3, 0.0, 0.7]])

    clean = balanced_labels(30_000, 3)
    noisy, _ = inject_asymmetric(clean, 0.3, seed=8)
    np.testing.assert_allclose(observed_transition_matrix(clean, noisy), asymmetric, atol=0.02)
