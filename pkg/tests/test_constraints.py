import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gct import constraints as C
from gct.errors import ConfigError, InvalidInputError

from oracles import batch_mean, central_difference, dc_loop, fc_loop, fd_loop, mse_sup_loop

D = torch.float64


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


# -- clamp and masks


def test_clamp_flaw_strict_threshold():
    f = t([[[[0.7, 0.6, 0.2]]]])
    np.testing.assert_array_equal(C.clamp_flaw(f, 0.6).numpy().ravel(), [1.0, 0.6, 0.2])


def test_clamp_flaw_xi_one_is_identity_and_idempotent():
    f = torch.rand(3, 1, 5, 5, dtype=D)
    assert torch.equal(C.clamp_flaw(f, 1.0), f)
    once = C.clamp_flaw(f, 0.4)
    assert torch.equal(C.clamp_flaw(once, 0.4), once)


@pytest.mark.parametrize("xi", [-0.1, 1.5])
def test_clamp_flaw_rejects_xi(xi):
    with pytest.raises(ConfigError):
        C.clamp_flaw(torch.zeros(1, 1, 2, 2), xi)


def test_dc_masks_hand_example():
    # xi = 0.6: f1 = [0.2, 0.9] -> [0.2, 1]; f2 = [0.5, 0.8] -> [0.5, 1]
    f1 = C.clamp_flaw(t([[[[0.2, 0.9]]]]), 0.6)
    f2 = C.clamp_flaw(t([[[[0.5, 0.8]]]]), 0.6)
    m1, m2 = C.dc_masks(f1, f2)
    np.testing.assert_array_equal(m1.numpy().ravel(), [0, 0])
    np.testing.assert_array_equal(m2.numpy().ravel(), [1, 0])
    np.testing.assert_array_equal(C.fc_mask(f1, f2, 0.6).numpy().ravel(), [0, 1])


def test_dc_masks_equal_maps_are_empty():
    f = torch.rand(2, 1, 4, 4, dtype=D)
    m1, m2 = C.dc_masks(f, f.clone())
    assert m1.sum() == 0 and m2.sum() == 0


def test_dc_masks_disjoint_on_random_pairs():
    g = torch.Generator().manual_seed(0)
    f1 = torch.rand(1000, 1, 4, 4, generator=g, dtype=D)
    f2 = torch.rand(1000, 1, 4, 4, generator=g, dtype=D)
    m1, m2 = C.dc_masks(f1, f2)
    assert torch.all(m1 * m2 == 0)


def test_dc_masks_shape_mismatch():
    with pytest.raises(InvalidInputError):
        C.dc_masks(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3))


def test_fc_mask_edge_cases():
    f = torch.rand(2, 1, 4, 4, dtype=D)
    assert C.fc_mask(C.clamp_flaw(f, 1.0), C.clamp_flaw(f, 1.0), 1.0).sum() == 0
    ones = torch.ones(2, 1, 3, 3, dtype=D)
    for xi in (0.0, 0.3, 0.99):
        assert torch.all(C.fc_mask(ones, ones, xi) == 1)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([0.0, 0.2, 0.4, 0.6, 0.8, 1.0]), st.integers(0, 2**31 - 1))
def test_gates_never_cofire(xi, seed):
    g = torch.Generator().manual_seed(seed)
    f1, f2 = torch.rand(2, 1, 6, 6, generator=g, dtype=D), torch.rand(2, 1, 6, 6, generator=g, dtype=D)
    m1, m2, mfc = C.gct_masks(f1, f2, xi, normalize=False)
    assert torch.all(m1 + m2 + mfc <= 1)


def test_normalize_flaw_per_sample():
    f = t(np.stack([np.linspace(2, 4, 9).reshape(1, 3, 3), np.full((1, 3, 3), 0.3)]))
    out = C.normalize_flaw(f)
    assert out[0].min() == 0 and out[0].max() == 1
    assert torch.all(out[1] == 0)


# -- losses


def test_loss_sup_mse_values():
    x = torch.rand(2, 3, 4, 4, dtype=D)
    assert C.loss_sup(x, x.clone(), "mse") == 0
    pred = t([[[[1.0, 0.0], [0.0, 0.0]]]])
    assert C.loss_sup(pred, torch.zeros_like(pred), "mse").item() == pytest.approx(0.5)


def test_loss_sup_ce_margin_limit_and_range_check():
    label = torch.tensor([[[0, 1], [1, 0]]])
    logits = torch.zeros(1, 2, 2, 2, dtype=D)
    logits[0, 0][label[0] == 0] = 50.0
    logits[0, 1][label[0] == 1] = 50.0
    assert C.loss_sup(logits, label, "ce").item() < 1e-15
    assert C.loss_sup(torch.zeros_like(logits), label, "ce").item() == pytest.approx(4 * math.log(2))
    with pytest.raises(InvalidInputError):
        C.loss_sup(logits, label + 1, "ce")
    with pytest.raises(ConfigError):
        C.loss_sup(logits, label, "l1")


def test_loss_dc_hand_example_and_empty_mask():
    pk = t([[[[0.0, 1.0]]]])
    po = t([[[[1.0, 1.0]]]])
    assert C.loss_dc(pk, po, t([[[[1.0, 0.0]]]])).item() == pytest.approx(0.5)
    assert C.loss_dc(torch.rand(2, 3, 4, 4), torch.rand(2, 3, 4, 4), torch.zeros(2, 1, 4, 4)) == 0


def test_loss_fc_and_flaw_detector_hand_values():
    assert C.loss_fc(torch.zeros(1, 1, 3, 3), torch.ones(1, 1, 3, 3)) == 0
    assert C.loss_fc(t([[[[1.0]]]]), t([[[[1.0]]]])).item() == pytest.approx(0.5)
    assert C.loss_flaw_detector(t([[[[0.3]]]]), t([[[[0.7]]]])).item() == pytest.approx(0.08)
    f = torch.rand(2, 1, 4, 4)
    assert C.loss_flaw_detector(f, f.clone()) == 0


@pytest.mark.parametrize("seed", range(5))
def test_losses_match_loop_oracles(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 3, 8, 8)), rng.random((2, 3, 8, 8))
    mask = (rng.random((2, 1, 8, 8)) > 0.5).astype(np.float64)
    fl, gt = rng.random((2, 1, 8, 8)), rng.random((2, 1, 8, 8))
    assert C.loss_sup(t(a), t(b), "mse").item() == pytest.approx(batch_mean(mse_sup_loop, a, b), abs=1e-9)
    assert C.loss_dc(t(a), t(b), t(mask)).item() == pytest.approx(batch_mean(dc_loop, a, b, mask), abs=1e-9)
    assert C.loss_fc(t(fl), t(mask)).item() == pytest.approx(batch_mean(fc_loop, fl, mask), abs=1e-9)
    assert C.loss_flaw_detector(t(fl), t(gt)).item() == pytest.approx(batch_mean(fd_loop, fl, gt), abs=1e-9)


def test_losses_invariant_to_spatial_permutation():
    rng = np.random.default_rng(7)
    a, b = rng.random((1, 3, 5, 5)), rng.random((1, 3, 5, 5))
    mask = (rng.random((1, 1, 5, 5)) > 0.5).astype(np.float64)
    perm = rng.permutation(25)

    def shuffle(x):
        return t(x.reshape(x.shape[0], x.shape[1], 25)[..., perm].reshape(x.shape))

    assert C.loss_dc(shuffle(a), shuffle(b), shuffle(mask)).item() == pytest.approx(
        C.loss_dc(t(a), t(b), t(mask)).item(), abs=1e-12)
    assert C.loss_fc(shuffle(a[:, :1]), shuffle(mask)).item() == pytest.approx(
        C.loss_fc(t(a[:, :1]), t(mask)).item(), abs=1e-12)


def _grad_check(fn, x0):
    x = t(x0).requires_grad_(True)
    fn(x).backward()
    numeric = central_difference(lambda v: fn(t(v)).item(), x0)
    rel = np.abs(x.grad.numpy() - numeric).max() / max(np.abs(numeric).max(), 1e-12)
    return rel


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((1, 2, 3, 3)), rng.random((1, 2, 3, 3))
    mask = (rng.random((1, 1, 3, 3)) > 0.4).astype(np.float64)
    assert _grad_check(lambda x: C.loss_sup(x, t(b), "mse"), a) < 1e-4
    assert _grad_check(lambda x: C.loss_dc(x, t(b), t(mask)), a) < 1e-4
    assert _grad_check(lambda x: C.loss_fc(x, t(mask)), a[:, :1]) < 1e-4


def test_pseudo_label_branch_gets_no_gradient():
    a = torch.rand(1, 2, 3, 3, dtype=D, requires_grad=True)
    b = torch.rand(1, 2, 3, 3, dtype=D, requires_grad=True)
    C.loss_dc(a, b, torch.ones(1, 1, 3, 3, dtype=D)).backward()
    assert b.grad is None or torch.all(b.grad == 0)
    assert a.grad.abs().sum() > 0


def test_total_task_loss():
    w = C.SslWeights(lambda_dc=2.0, lambda_fc=1.0, xi=0.6, eta=3)
    assert C.total_task_loss(1.0, 0.5, 0.2, w, 1.0) == pytest.approx(2.2)
    assert C.total_task_loss(1.0, 0.5, 0.2, w, 0.0) == pytest.approx(1.2)


def test_ssl_weights_validation():
    with pytest.raises(ConfigError):
        C.SslWeights(1.0, 1.0, 1.5, 3)
    with pytest.raises(ConfigError):
        C.SslWeights(-1.0, 1.0, 0.5, 3)


def test_cosine_rampup_values():
    assert C.cosine_rampup(0, 0) == 1.0
    assert C.cosine_rampup(7.5, 0) == 1.0
    assert C.cosine_rampup(2, 4) == pytest.approx(0.5)
    assert C.cosine_rampup(0, 3) == 0.0
    assert C.cosine_rampup(3, 3) == 1.0
    assert C.cosine_rampup(10, 3) == 1.0
    with pytest.raises(InvalidInputError):
        C.cosine_rampup(-1, 3)


@given(st.floats(0, 20), st.floats(0, 20), st.integers(0, 10))
def test_cosine_rampup_monotone_bounded(e1, e2, eta):
    lo, hi = sorted((e1, e2))
    w_lo, w_hi = C.cosine_rampup(lo, eta), C.cosine_rampup(hi, eta)
    assert 0 <= w_lo <= w_hi <= 1
