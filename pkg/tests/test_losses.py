import itertools

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from prior_attunet import losses as L
from prior_attunet.diffcore import check_gradients


def one_hot(gt, k, dtype=torch.float64):
    return torch.nn.functional.one_hot(gt, k).permute(0, 3, 1, 2).to(dtype)


# ---------------------------------------------------------------- dice

def test_dice_perfect_prediction_is_zero():
    gt = torch.ones(1, 2, 2, dtype=torch.long)
    assert L.dice_loss(torch.ones(1, 1, 2, 2, dtype=torch.float64), gt, eps=1.0).item() == 0.0
    bg = torch.zeros(1, 2, 2, dtype=torch.long)
    assert L.dice_loss(one_hot(bg, 2), bg).item() == 0.0


def test_dice_all_zero_prediction_four_positives():
    gt = torch.ones(1, 2, 2, dtype=torch.long)
    pred = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
    assert L.dice_loss(pred, gt, eps=1.0).item() == pytest.approx(0.8, abs=1e-12)


def test_dice_half_overlap_without_smoothing():
    gt = torch.ones(1, 1, 2, dtype=torch.long)
    pred = torch.tensor([[[[1.0, 0.0]]]], dtype=torch.float64)
    assert L.dice_loss(pred, gt, eps=0.0).item() == pytest.approx(1 / 3, abs=1e-12)


def test_dice_is_mean_of_per_class_terms():
    g = torch.Generator().manual_seed(3)
    pred = torch.softmax(torch.randn(2, 4, 5, 5, generator=g, dtype=torch.float64), 1)
    gt = torch.randint(0, 4, (2, 5, 5), generator=g)
    per = L.dice_loss_per_class(pred, gt)
    assert per.shape == (4,)
    assert L.dice_loss(pred, gt).item() == pytest.approx(per.mean().item(), abs=1e-15)


@given(st.integers(0, 10_000))
def test_dice_in_unit_interval_without_smoothing(seed):
    g = torch.Generator().manual_seed(seed)
    pred = torch.softmax(torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64), 1)
    gt = torch.randint(0, 3, (1, 4, 4), generator=g)
    per = L.dice_loss_per_class(pred, gt, eps=0.0)
    assert ((per >= -1e-12) & (per <= 1 + 1e-12)).all()


def test_dice_perfect_tends_to_zero_as_eps_shrinks():
    gt = torch.tensor([[[0, 1], [1, 1]]])
    pred = one_hot(gt, 2) * 0.999 + 0.0005
    vals = [L.dice_loss(pred, gt, eps=e).item() for e in (1.0, 1e-3, 1e-6)]
    assert vals[0] >= 0 and vals[-1] < 2e-3


def test_loss_rejects_inconsistent_shapes():
    with pytest.raises(ValueError, match="inconsistent"):
        L.dice_loss(torch.zeros(1, 4, 4, 4), torch.zeros(1, 4, 5, dtype=torch.long))


# ---------------------------------------------------------------- lovasz

def test_lovasz_perfect_prediction_is_zero():
    gt = torch.tensor([[[0, 1, 2], [3, 1, 0]]])
    assert L.lovasz_loss(one_hot(gt, 4), gt).item() == 0.0


def test_lovasz_single_pixel():
    gt = torch.ones(1, 1, 1, dtype=torch.long)
    pred = torch.tensor([0.4, 0.6], dtype=torch.float64).view(1, 2, 1, 1)
    per, present = L.lovasz_per_class(pred, gt)
    assert per[1].item() == pytest.approx(0.4, abs=1e-15)
    assert present.tolist() == [False, True]


def test_lovasz_grad_increments():
    fg = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    # J(k) for top-k errors: 1/2, 2/3, 1, 1
    assert L.lovasz_grad(fg).tolist() == pytest.approx([0.5, 1 / 6, 1 / 3, 0.0])


def _iou_loss(pred_bits, gt_bits):
    inter = np.logical_and(pred_bits, gt_bits).sum()
    union = np.logical_or(pred_bits, gt_bits).sum()
    return 0.0 if union == 0 else 1.0 - inter / union


def test_lovasz_equals_jaccard_loss_at_every_binary_vertex():
    """All 2x3 ground truths against all 2x3 binary predictions, both classes."""
    worst = 0.0
    for gt_bits in itertools.product((0, 1), repeat=6):
        gt = torch.tensor(gt_bits).view(1, 2, 3)
        gt_np = np.array(gt_bits)
        for p_bits in itertools.product((0, 1), repeat=6):
            p1 = torch.tensor(p_bits, dtype=torch.float64).view(1, 1, 2, 3)
            pred = torch.cat([1 - p1, p1], 1)
            per, _ = L.lovasz_per_class(pred, gt)
            p_np = np.array(p_bits)
            for c in (0, 1):
                ref = _iou_loss(p_np == c, gt_np == c)
                worst = max(worst, abs(per[c].item() - ref))
    assert worst <= 1e-12


@given(st.integers(0, 10_000), st.integers(0, 15), st.floats(1e-3, 0.5))
def test_lovasz_monotone_in_each_error(seed, idx, delta):
    g = torch.Generator().manual_seed(seed)
    pred = torch.rand(1, 2, 4, 4, generator=g, dtype=torch.float64)
    gt = torch.randint(0, 2, (1, 4, 4), generator=g)
    i, j = divmod(idx, 4)
    for c in (0, 1):
        base = L.lovasz_per_class(pred, gt)[0][c].item()
        bumped = pred.clone()
        # raising the error of pixel (i, j) for class c
        if gt[0, i, j] == c:
            bumped[0, c, i, j] = max(0.0, bumped[0, c, i, j].item() - delta)
        else:
            bumped[0, c, i, j] = min(1.0, bumped[0, c, i, j].item() + delta)
        assert L.lovasz_per_class(bumped, gt)[0][c].item() >= base - 1e-12


def test_lovasz_class_modes():
    gt = torch.zeros(1, 2, 2, dtype=torch.long)
    pred = torch.full((1, 3, 2, 2), 1 / 3, dtype=torch.float64)
    per, present = L.lovasz_per_class(pred, gt)
    assert present.tolist() == [True, False, False]
    assert L.lovasz_loss(pred, gt, "all").item() == pytest.approx(per.mean().item())
    assert L.lovasz_loss(pred, gt, "present").item() == pytest.approx(per[0].item())
    with pytest.raises(ValueError):
        L.lovasz_loss(pred, gt, "bogus")


def test_lovasz_absent_class_without_mass_contributes_zero():
    gt = torch.zeros(1, 2, 2, dtype=torch.long)
    pred = torch.cat([torch.ones(1, 1, 2, 2), torch.zeros(1, 1, 2, 2)], 1).double()
    assert L.lovasz_per_class(pred, gt)[0][1].item() == 0.0


def test_lovasz_empty_image_is_zero():
    assert L.lovasz_loss(torch.zeros(0, 4, 8, 8), torch.zeros(0, 8, 8, dtype=torch.long)).item() == 0.0
    assert L.lovasz_loss(torch.zeros(1, 4, 0, 0), torch.zeros(1, 0, 0, dtype=torch.long)).item() == 0.0


# ---------------------------------------------------------------- combined

def test_combined_perfect_prediction():
    gt = torch.tensor([[[0, 1], [2, 3]]])
    assert L.combined_loss(one_hot(gt, 4), gt).item() == pytest.approx(0.0, abs=1e-12)


def test_combined_without_lovasz_is_dice():
    g = torch.Generator().manual_seed(0)
    pred = torch.softmax(torch.randn(2, 4, 6, 6, generator=g), 1)
    gt = torch.randint(0, 4, (2, 6, 6), generator=g)
    assert torch.equal(L.combined_loss(pred, gt, w_lovasz=0.0), L.dice_loss(pred, gt))


def test_combined_rejects_negative_weights():
    with pytest.raises(ValueError):
        L.combined_loss(torch.zeros(1, 2, 2, 2), torch.zeros(1, 2, 2, dtype=torch.long), w_dice=-1)


def test_combined_gradient_check():
    # per-class probabilities spaced 0.4/64 apart inside (0.05, 0.45): no error ties within a
    # class, and fg errors (> 0.55) never meet bg errors (< 0.45), so the sort stays fixed
    rng = np.random.default_rng(7)
    planes = [rng.permutation(np.linspace(0.05, 0.45, 64)).reshape(8, 8) for _ in range(4)]
    pred = torch.tensor(np.stack(planes)[None], dtype=torch.float64, requires_grad=True)
    gt = torch.from_numpy(rng.integers(0, 4, (1, 8, 8)))
    rep = check_gradients(lambda: L.combined_loss(pred, gt), [pred], step=1e-4, tol=1e-4)
    assert rep.passed, rep.failures[:3]
    assert rep.n_checked == 256


# ---------------------------------------------------------------- metrics

def test_dsc_examples():
    a = np.array([[1, 1], [0, 0]])
    assert L.dsc(a, a, 1) == 1.0
    assert L.dsc(a, 1 - a, 1) == 0.0
    assert L.dsc(np.array([1, 1, 0]), np.array([0, 1, 1]), 1) == 0.5
    assert L.dsc(np.zeros(4), np.zeros(4), 2) == 1.0


def test_dsc_shape_mismatch():
    with pytest.raises(ValueError):
        L.dsc(np.zeros(3), np.zeros(4), 0)


@given(st.lists(st.integers(0, 3), min_size=1, max_size=30), st.integers(0, 10_000), st.integers(0, 3))
def test_dsc_symmetric_and_bounded(a, seed, c):
    a = np.array(a)
    b = np.random.default_rng(seed).integers(0, 4, a.shape)
    v = L.dsc(a, b, c)
    assert v == L.dsc(b, a, c)
    assert 0.0 <= v <= 1.0


def test_mdsc_mean_of_two():
    assert L.MetricsRecord.from_per_class([1.0, 0.5]).mdsc == 0.75


def test_mdsc_table_row_consistency():
    rec = L.MetricsRecord.from_per_class([0.9989, 0.9607, 0.9729, 0.8927])
    assert rec.mdsc == pytest.approx(0.9563, abs=5e-5)


def test_mdsc_perfect_and_background_flag():
    gt = np.array([[0, 1], [2, 3]])
    assert L.mdsc(gt, gt).mdsc == 1.0
    pred = np.array([[0, 1], [0, 3]])
    full = L.mdsc(pred, gt)
    fg = L.mdsc(pred, gt, include_background=False)
    assert full.class_ids == (0, 1, 2, 3) and fg.class_ids == (1, 2, 3)
    assert full.mdsc == pytest.approx(np.mean(full.per_class_dsc))
    assert fg.dsc_of(2) == 0.0 and full.dsc_of(0) == pytest.approx(2 / 3)


@given(st.integers(0, 10_000))
def test_mdsc_equals_mean_exactly(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 4, (2, 6, 6))
    rec = L.mdsc(a, b)
    assert rec.mdsc == float(np.mean(rec.per_class_dsc))


def test_csv_row_format():
    rec = L.MetricsRecord.from_per_class([1.0, 0.5, 0.25], class_ids=[1, 2, 3])
    assert L.CSV_HEADER == "split,epoch,dsc_bg,dsc_irf,dsc_srf,dsc_ped,mdsc"
    assert rec.csv_row("test", 3) == "test,3,,1.000000,0.500000,0.250000,0.583333"
