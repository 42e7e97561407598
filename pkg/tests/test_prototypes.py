import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import project as project_naive
from protoreid.evaluation import distance_matrix
from protoreid.nets import ConfigError
from protoreid.prototypes import PrototypeBank, init_prototypes, project, subset, top_prototypes


def test_init_shape_seed_and_bias():
    a = init_prototypes(4, 8, torch.Generator().manual_seed(3))
    b = init_prototypes(4, 8, torch.Generator().manual_seed(3))
    assert a.weight.shape == (4, 8)
    assert torch.equal(a.weight, b.weight)
    assert torch.equal(a.bias, torch.zeros(4))
    with pytest.raises(ConfigError):
        init_prototypes(1, 8)


def test_init_row_norms_concentrate_near_one():
    sq = []
    for seed in range(50):
        bank = init_prototypes(16, 64, torch.Generator().manual_seed(seed))
        sq.append((bank.weight.detach().double() ** 2).sum(1).numpy())
    sq = np.concatenate(sq)
    # E|w|^2 = dim * (1/dim) = 1; std of the mean is sqrt(2/64/800)
    assert abs(sq.mean() - 1.0) < 0.02
    assert abs(np.sqrt(sq).mean() - 1.0) < 0.02


def test_project_identity_and_hand_example():
    f = torch.tensor([[0.3, -1.2, 2.0]], dtype=torch.float64)
    assert torch.equal(project(f, torch.eye(3, dtype=torch.float64)), f)
    w = torch.tensor([[2.0, 0.0], [0.0, 3.0], [1.0, 1.0]])
    assert project(torch.tensor([[1.0, 0.0]]), w).tolist() == [[2.0, 0.0, 1.0]]


def test_project_dimension_mismatch():
    with pytest.raises(ValueError):
        project(torch.zeros(1, 3), torch.zeros(4, 2))


@pytest.mark.parametrize("seed", range(5))
def test_project_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(3, 7))
    w = rng.normal(size=(11, 7))
    got = project(torch.from_numpy(f), torch.from_numpy(w)).numpy()
    ref = [project_naive(list(row), [list(r) for r in w]) for row in f]
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 10_000))
def test_projection_linearity(a, b, seed):
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(6, 4, generator=g, dtype=torch.float64)
    f1, f2 = torch.randn(2, 4, generator=g, dtype=torch.float64)
    lhs = project(a * f1 + b * f2, w)
    rhs = a * project(f1, w) + b * project(f2, w)
    assert torch.allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(c=st.floats(0.01, 100.0), seed=st.integers(0, 10_000))
def test_scale_equivariance_keeps_cosine_ranking(c, seed):
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(10, 5, generator=g, dtype=torch.float64)
    q, gal = torch.randn(4, 5, generator=g, dtype=torch.float64), torch.randn(9, 5, generator=g, dtype=torch.float64)
    assert torch.allclose(project(c * q, w), c * project(q, w), rtol=1e-12)
    d1 = distance_matrix(project(q, w).numpy(), project(gal, w).numpy())
    d2 = distance_matrix(project(c * q, w).numpy(), project(c * gal, w).numpy())
    np.testing.assert_allclose(d1, d2, atol=1e-12)
    for r1, r2 in zip(d1, d2):
        # exact ties are practically impossible with continuous draws
        gaps = np.diff(np.sort(r1))
        if gaps.min() > 1e-9:
            assert np.array_equal(np.argsort(r1), np.argsort(r2))


def _bank(n=100, d=4):
    return PrototypeBank(torch.randn(n, d, generator=torch.Generator().manual_seed(0)))


def test_subset_full_and_fraction():
    bank = _bank()
    full, idx = subset(bank, 1.0, np.random.default_rng(0))
    assert torch.equal(full.weight, bank.weight) and list(idx) == list(range(100))
    part, idx = subset(bank, 0.2, np.random.default_rng(0))
    assert part.num_prototypes == 20 and len(set(idx.tolist())) == 20
    assert torch.equal(part.weight, bank.weight[torch.as_tensor(idx)])


def test_subset_seeding_and_original_untouched():
    bank = _bank()
    before = bank.weight.detach().clone()
    a = subset(bank, 0.5, np.random.default_rng(1))[1]
    b = subset(bank, 0.5, np.random.default_rng(1))[1]
    c = subset(bank, 0.5, np.random.default_rng(2))[1]
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert torch.equal(bank.weight, before)


@pytest.mark.parametrize("fraction", [0.0, -0.5, 1.5])
def test_subset_rejects_bad_fraction(fraction):
    with pytest.raises(ConfigError):
        subset(_bank(), fraction, np.random.default_rng(0))


def test_top_prototypes_uniform_and_dominant():
    top = top_prototypes([0.0, 0.0, 0.0], 2)
    assert [j for j, _ in top] == [0, 1]
    assert [s for _, s in top] == pytest.approx([1 / 3, 1 / 3])
    j, s = top_prototypes([10.0, 0.0, -10.0], 1)[0]
    assert j == 0 and s == pytest.approx(1.0, abs=1e-4)
    with pytest.raises(ValueError):
        top_prototypes([1.0, 2.0], 3)


@pytest.mark.parametrize("seed", range(5))
def test_top_prototypes_scores_sum_to_one(seed):
    fs = np.random.default_rng(seed).normal(size=30) * 5
    top = top_prototypes(fs, 30)
    ref = np.exp(fs) / np.exp(fs).sum()
    assert sum(s for _, s in top) == pytest.approx(1.0, abs=1e-9)
    assert [j for j, _ in top] == list(np.argsort(-ref, kind="stable"))
    np.testing.assert_allclose([s for _, s in top], np.sort(ref)[::-1], rtol=1e-12)
