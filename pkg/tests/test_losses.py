import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dcseg import losses as L
from dcseg.losses import ContrastiveConfig, PairBatch

import oracles


def _grid(n, m, shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn((n, m) + shape, generator=g, dtype=torch.float64)


# ---------------------------------------------------------------- SSIM

def test_ssim_identical_is_one(double):
    a = _grid(1, 1, (3, 4, 4, 4))[0, 0]
    assert L.ssim_channel_mean(a, a).item() == 1.0


def test_ssim_negated_map():
    a = torch.tensor([[1.0, -1.0, 2.0, -2.0]], dtype=torch.float64)
    a = a / a.pow(2).mean().sqrt()
    got = L.ssim_channel_mean(a, -a, 1e-4, 1e-4).item()
    assert got == pytest.approx(-0.99990000499975, abs=1e-12)


def test_ssim_constant_maps():
    a = torch.ones(1, 2, 2, 2, dtype=torch.float64)
    got = L.ssim_channel_mean(a, torch.zeros_like(a), 1e-4, 1e-4).item()
    assert got == pytest.approx(9.999000099990002e-05, rel=1e-12)


def test_ssim_matches_scalar_oracle():
    a, b = _grid(1, 2, (2, 3, 3, 3), seed=3)[0]
    expected = oracles.ssim_scalar(a.reshape(2, -1).tolist(), b.reshape(2, -1).tolist(), 1e-4, 9e-4)
    assert L.ssim_channel_mean(a, b).item() == pytest.approx(expected, abs=1e-12)


def test_ssim_symmetric():
    a, b = _grid(1, 2, (2, 3, 3, 3), seed=4)[0]
    assert L.ssim_channel_mean(a, b).item() == L.ssim_channel_mean(b, a).item()


def test_pairwise_ssim_agrees_with_single(double):
    feats = _grid(1, 5, (2, 3, 3, 3), seed=5)[0]
    mat = L.pairwise_ssim(feats)
    for p in range(5):
        for q in range(5):
            assert mat[p, q].item() == pytest.approx(L.ssim_channel_mean(feats[p], feats[q]).item(), abs=1e-12)


@pytest.mark.parametrize("bad", ["shape", "nan", "const"])
def test_ssim_contract(bad):
    a = torch.randn(2, 3, 3, 3)
    if bad == "shape":
        with pytest.raises(ValueError):
            L.ssim_channel_mean(a, torch.randn(2, 3, 3, 4))
    elif bad == "nan":
        b = a.clone()
        b[0, 0, 0, 0] = float("nan")
        with pytest.raises(ValueError):
            L.ssim_channel_mean(a, b)
    else:
        with pytest.raises(ValueError):
            L.ssim_channel_mean(a, a, c1=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 100.0))
def test_ssim_self_is_exactly_one(seed, scale):
    a = torch.randn(2, 3, 3, 3, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * scale
    assert L.ssim_channel_mean(a, a).item() == 1.0


# ---------------------------------------------------------------- pair indicator

@pytest.mark.parametrize("u,v,expected", [(3, 3, 1), (3, 5, -1), (1, 1, 1)])
def test_pair_indicator(u, v, expected):
    assert L.pair_indicator(u, v) == expected


# ---------------------------------------------------------------- contrastive losses

def test_anatomical_single_item_closed_form(double):
    batch = PairBatch.from_grid(_grid(1, 1, (2, 3, 3, 3)))
    for t in (10.0, 1.0):
        got = L.anatomical_contrastive_loss(batch, ContrastiveConfig(temperature=t)).item()
        assert got == pytest.approx(math.log1p(math.exp(-t)), abs=1e-12)
    got = L.anatomical_contrastive_loss(batch, ContrastiveConfig(temperature=10.0)).item()
    assert got == pytest.approx(4.5399e-5, rel=1e-4)


def test_anatomical_two_identical_subjects(double):
    one = _grid(1, 1, (2, 3, 3, 3), seed=7)
    batch = PairBatch.from_grid(torch.cat([one, one]))
    got = L.anatomical_contrastive_loss(batch, ContrastiveConfig(temperature=1.0)).item()
    assert got == pytest.approx(0.8132616875182228, abs=1e-9)


def test_anatomical_brute_force(double):
    grid = _grid(2, 2, (2, 3, 3, 3), seed=11)
    items = [(i, j, grid[i, j].reshape(2, -1).tolist()) for i in range(2) for j in range(2)]
    cfg = ContrastiveConfig(temperature=3.0)
    sim = lambda x, y: oracles.ssim_scalar(x, y, cfg.ssim_c1, cfg.ssim_c2)
    for include_self in (True, False):
        c = ContrastiveConfig(temperature=3.0, include_self_pairs=include_self)
        got = L.anatomical_contrastive_loss(PairBatch.from_grid(grid), c).item()
        assert got == pytest.approx(oracles.contrastive_brute(items, sim, 3.0, 0, include_self), abs=1e-10)


def test_modality_examples(double):
    v = torch.tensor([1.0, 2.0, 3.0])
    batch = PairBatch.from_grid(torch.stack([v, v])[:, None])
    assert L.modality_contrastive_loss(batch, ContrastiveConfig(temperature=1.0)).item() == \
        pytest.approx(0.3132616875182228, abs=1e-9)
    ortho = PairBatch.from_grid(torch.eye(2)[None])
    assert L.modality_contrastive_loss(ortho, ContrastiveConfig(temperature=1.0)).item() == \
        pytest.approx(0.503204434039084, abs=1e-9)
    single = PairBatch.from_grid(torch.tensor([[[0.2, -0.7, 0.1]]]))
    assert L.modality_contrastive_loss(single, ContrastiveConfig(temperature=10.0)).item() == \
        pytest.approx(math.log1p(math.exp(-10)), abs=1e-12)


def test_modality_brute_force(double):
    grid = _grid(3, 2, (8,), seed=2)
    items = [(i, j, grid[i, j].tolist()) for i in range(3) for j in range(2)]
    got = L.modality_contrastive_loss(PairBatch.from_grid(grid), ContrastiveConfig(temperature=5.0)).item()
    assert got == pytest.approx(oracles.contrastive_brute(items, oracles.cosine, 5.0, 1), abs=1e-10)


def test_modality_zero_vector_rejected():
    grid = torch.randn(2, 2, 8)
    grid[1, 0] = 0
    with pytest.raises(ValueError, match="zero-norm"):
        L.modality_contrastive_loss(PairBatch.from_grid(grid))


def test_pair_batch_validation():
    with pytest.raises(ValueError):
        PairBatch(torch.zeros(0, 3), torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long))
    with pytest.raises(ValueError, match="duplicate"):
        PairBatch(torch.randn(2, 3), torch.tensor([0, 0]), torch.tensor([1, 1]))
    with pytest.raises(ValueError, match="grid"):
        PairBatch(torch.randn(3, 3), torch.tensor([0, 0, 1]), torch.tensor([0, 1, 0]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_contrastive_permutation_invariance(seed):
    g = torch.Generator().manual_seed(seed)
    anat = PairBatch.from_grid(torch.randn(2, 3, 2, 3, 3, 3, generator=g, dtype=torch.float64))
    mod = PairBatch.from_grid(torch.randn(2, 3, 8, generator=g, dtype=torch.float64))
    perm = torch.randperm(6, generator=g)
    cfg = ContrastiveConfig(temperature=4.0)
    assert L.anatomical_contrastive_loss(anat.permuted(perm), cfg).item() == \
        pytest.approx(L.anatomical_contrastive_loss(anat, cfg).item(), abs=1e-12)
    assert L.modality_contrastive_loss(mod.permuted(perm), cfg).item() == \
        pytest.approx(L.modality_contrastive_loss(mod, cfg).item(), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0), st.floats(0.01, 100.0))
def test_modality_loss_scale_invariant(seed, lam, mu):
    grid = torch.randn(2, 2, 8, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    scaled = grid.clone()
    scaled[0, 1] *= lam
    scaled[1, 0] *= mu
    a = L.modality_contrastive_loss(PairBatch.from_grid(grid)).item()
    b = L.modality_contrastive_loss(PairBatch.from_grid(scaled)).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_sigmoid_pair_loss_monotone(double):
    signs = L.pair_indicator_matrix(torch.tensor([0, 0, 1]))
    base = torch.tensor([[1.0, 0.3, 0.2], [0.3, 1.0, 0.1], [0.2, 0.1, 1.0]])
    l0 = L.sigmoid_pair_loss(base, signs, 5.0).item()
    pos = base.clone()
    pos[0, 1] = pos[1, 0] = 0.5          # positive pair more similar
    neg = base.clone()
    neg[0, 2] = neg[2, 0] = 0.4          # negative pair more similar
    assert L.sigmoid_pair_loss(pos, signs, 5.0).item() < l0
    assert L.sigmoid_pair_loss(neg, signs, 5.0).item() > l0


def test_contrastive_loss_positive():
    batch = PairBatch.from_grid(torch.randn(2, 2, 2, 3, 3, 3))
    assert L.anatomical_contrastive_loss(batch).item() > 0


# ---------------------------------------------------------------- reconstruction

def test_reconstruction_examples():
    x = torch.randn(4, 5, 5, 5)
    assert L.reconstruction_loss(x, x).item() == 0.0
    assert L.reconstruction_loss(torch.zeros(1, 4, 4, 4), torch.ones(1, 4, 4, 4)).item() == 1.0
    two = L.reconstruction_loss([torch.zeros(3, 3, 3), torch.zeros(3, 3, 3)],
                                [torch.full((3, 3, 3), 0.5), torch.full((3, 3, 3), -0.5)])
    assert two.item() == pytest.approx(1.0)


def test_reconstruction_batch_mean():
    r = torch.zeros(2, 2, 3, 3, 3)
    x = torch.ones(2, 2, 3, 3, 3)
    x[1] = 3.0
    # per subject: 2 modalities x mean error (1 and 3) -> 2 and 6, mean 4
    assert L.reconstruction_loss(r, x).item() == pytest.approx(4.0)


def test_reconstruction_shape_mismatch():
    with pytest.raises(ValueError):
        L.reconstruction_loss(torch.zeros(2, 3, 3, 3), torch.zeros(2, 3, 3, 4))


# ---------------------------------------------------------------- segmentation losses

def test_wce_uniform_logits():
    labels = torch.randint(0, 2, (4, 4, 4))
    assert L.weighted_cross_entropy(torch.zeros(2, 4, 4, 4), labels, [1, 1]).item() == \
        pytest.approx(math.log(2), abs=1e-6)
    labels = torch.randint(0, 4, (4, 4, 4))
    assert L.weighted_cross_entropy(torch.zeros(4, 4, 4, 4), labels, [1, 1, 1, 1]).item() == \
        pytest.approx(math.log(4), abs=1e-6)


def _confident(labels, k, scale=50.0):
    return torch.nn.functional.one_hot(labels, k).permute(3, 0, 1, 2).double() * scale


def test_wce_and_dice_vanish_for_correct_prediction(double):
    labels = torch.randint(0, 3, (5, 5, 5))
    logits = _confident(labels, 3)
    assert L.weighted_cross_entropy(logits, labels, [1.0, 2.0, 3.0]).item() < 1e-15
    assert L.soft_dice_loss(logits, labels).item() < 1e-12


def test_wce_matches_per_voxel_oracle(double):
    g = torch.Generator().manual_seed(8)
    logits = torch.randn(3, 2, 2, 2, generator=g, dtype=torch.float64)
    labels = torch.randint(0, 3, (2, 2, 2), generator=g)
    w = [0.5, 1.5, 2.0]
    terms = []
    for idx in np.ndindex(2, 2, 2):
        p = oracles.softmax(logits[(slice(None),) + idx].tolist())
        y = int(labels[idx])
        terms.append(-w[y] * math.log(p[y]))
    assert L.weighted_cross_entropy(logits, labels, w).item() == pytest.approx(oracles.mean(terms), abs=1e-12)


def test_dice_all_foreground_half_truth(double):
    labels = torch.zeros(4, 4, 4, dtype=torch.long)
    labels[:2] = 1
    logits = torch.zeros(2, 4, 4, 4)
    logits[1] = 60.0
    assert L.soft_dice_loss(logits, labels).item() == pytest.approx(1 / 3, abs=1e-6)


def test_dice_zero_overlap(double):
    labels = torch.zeros(4, 4, 4, dtype=torch.long)
    labels[:2] = 1
    logits = _confident(1 - labels, 2)
    assert L.soft_dice_loss(logits, labels).item() == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_segmentation_loss_ranges(seed, k):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(k, 3, 3, 3, generator=g) * 3
    labels = torch.randint(0, k, (3, 3, 3), generator=g)
    d = L.soft_dice_loss(logits, labels).item()
    assert 0.0 <= d <= 1.0
    assert L.weighted_cross_entropy(logits, labels, L.class_weights(labels, k)).item() >= 0
    assert L.reconstruction_loss(torch.randn(2, 3, 3, 3, generator=g),
                                 torch.randn(2, 3, 3, 3, generator=g)).item() >= 0


def test_label_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        L.weighted_cross_entropy(torch.zeros(2, 2, 2, 2), torch.full((2, 2, 2), 2))
    with pytest.raises(ValueError):
        L.soft_dice_loss(torch.zeros(2, 2, 2, 2), torch.full((2, 2, 2), -1))


def test_class_weights():
    labels = torch.zeros(100, dtype=torch.long)
    labels[:10] = 1
    w = L.class_weights(labels, 3)
    # inverse freqs 1/0.9, 1/0.1 -> normalised to mean 1 over the two present classes
    raw = torch.tensor([1 / 0.9, 10.0])
    assert torch.allclose(w[:2], raw / raw.mean())
    assert w[2].item() == 50.0
    rare = torch.zeros(1000, dtype=torch.long)
    rare[0] = 1
    w = L.class_weights(rare, 2)
    assert w[1] / w[0] == pytest.approx(50.0 * 0.999, rel=1e-6)   # 1/0.001 clipped at 50


# ---------------------------------------------------------------- total

def test_total_loss_examples():
    assert L.total_loss(1.0, 1.0, 1.0, 0.4) == pytest.approx(2.4)
    assert L.total_loss(0.7, 1.3, 0.0, 0.9) == pytest.approx(2.0)
    assert L.total_loss(0.0, 0.0, 5.0, 0.0) == 0.0
    assert L.disentangle_loss(0.1, 0.2, 0.3) == pytest.approx(0.6)
    with pytest.raises(ValueError):
        L.total_loss(1.0, 1.0, 1.0, -0.1)


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 5))
def test_total_loss_linear_in_disentangle(seg, reg, dis, alpha):
    slope = L.total_loss(seg, reg, dis + 1.0, alpha) - L.total_loss(seg, reg, dis, alpha)
    assert slope == pytest.approx(alpha, abs=1e-9)
