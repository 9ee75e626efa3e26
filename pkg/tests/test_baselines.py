import copy

import pytest
import torch

from gct.baselines import consistency_loss, ema_update, flaw_gate, flaw_gated_mt_fit, init_mt, mt_fit, mt_step
from gct.config import build_config
from gct.errors import ConfigError, InvalidInputError
from gct.models import param_checksum
from gct.trainer import load_task_data, ssl_batch_stream

TINY = dict(n_train=32, n_val=8, image_size=16, epochs_full=1, batch_size=8, labeled_per_batch=4, ratio="1/4")


def closed_form_teacher(theta0, students, alpha):
    """alpha^n * theta0 + sum_k (1 - alpha) * alpha^(n - k) * student_k, written out term by term."""
    n = len(students)
    out = (alpha ** n) * theta0
    for k, s in enumerate(students, start=1):
        out = out + (1 - alpha) * (alpha ** (n - k)) * s
    return out


@pytest.mark.parametrize("alpha", [0.0, 0.5, 0.99])
def test_ema_matches_closed_form(alpha):
    g = torch.Generator().manual_seed(0)
    theta0 = torch.randn(5, 3, generator=g, dtype=torch.float64)
    students = [torch.randn(5, 3, generator=g, dtype=torch.float64) for _ in range(20)]
    teacher = theta0.clone()
    for s in students:
        ema_update([s], [teacher], alpha)
    assert torch.max(torch.abs(teacher - closed_form_teacher(theta0, students, alpha))) < 1e-9


def test_ema_fixed_point_and_validation():
    p = torch.randn(4, dtype=torch.float64)
    t = p.clone()
    ema_update([p], [t], 0.9)
    assert torch.equal(t, p)
    with pytest.raises(ConfigError):
        ema_update([p], [t], 1.0)
    with pytest.raises(InvalidInputError):
        ema_update([p], [torch.zeros(3)], 0.5)


def test_flaw_gate_tie_and_direction():
    ft = torch.tensor([[[[0.2, 0.5, 0.9]]]])
    fs = torch.tensor([[[[0.4, 0.5, 0.1]]]])
    assert flaw_gate(ft, fs, normalize=False).view(-1).tolist() == [1.0, 1.0, 0.0]


def test_consistency_loss_ungated_equals_full_mask():
    a, b = torch.rand(2, 3, 4, 4), torch.rand(2, 3, 4, 4)
    expected = 0.5 * ((a - b) ** 2).sum() / 2
    assert consistency_loss(a, b).item() == pytest.approx(expected.item(), rel=1e-6)


@pytest.fixture(scope="module")
def cache(tmp_path_factory):
    return tmp_path_factory.mktemp("cache")


def test_teacher_only_moves_by_ema(cache):
    cfg = build_config("synth_seg", {**TINY, "method": "mt"})
    data = load_task_data(cfg, cache)
    state = init_mt(cfg, data, with_flaw=False)
    student, teacher = state.models["student"], state.models["teacher"]
    assert param_checksum(student) == param_checksum(teacher)
    lab, unl = next(ssl_batch_stream(cfg, data))
    before = [p.detach().clone() for p in teacher.parameters()]
    mt_step(state, data.gather(lab, unl), cfg, data, rampup=1.0, gated=False)
    expected = [cfg.alpha_mt * b + (1 - cfg.alpha_mt) * s for b, s in zip(before, student.parameters())]
    for got, exp in zip(teacher.parameters(), expected):
        assert torch.allclose(got, exp, atol=1e-7)
    assert all(not p.requires_grad for p in teacher.parameters())


def test_gated_step_trains_detector_not_teacher_grads(cache):
    cfg = build_config("synth_seg", {**TINY, "method": "mt_flawgated"})
    data = load_task_data(cfg, cache)
    state = init_mt(cfg, data, with_flaw=True)
    lab, unl = next(ssl_batch_stream(cfg, data))
    f0 = param_checksum(state.models["flaw"])
    stats = mt_step(state, data.gather(lab, unl), cfg, data, rampup=1.0, gated=True)
    assert 0.0 <= stats["frac_gate"] <= 1.0
    assert param_checksum(state.models["flaw"]) != f0
    assert "loss_flaw" in stats


def test_mt_fits_run(cache):
    for method, fn in (("mt", mt_fit), ("mt_flawgated", flaw_gated_mt_fit)):
        cfg = build_config("synth_seg", {**TINY, "method": method})
        _, records, rep = fn(cfg, cache_dir=cache)
        assert rep.method == method and len(records) == rep.series.__len__() >= 1
    with pytest.raises(ConfigError):
        mt_fit(build_config("synth_seg", {**TINY, "method": "gct"}), cache_dir=cache)


def test_deepcopy_teacher_is_independent():
    cfg = build_config("synth_seg", {**TINY, "method": "mt"})
    assert copy.deepcopy(cfg) == cfg
