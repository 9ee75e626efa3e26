"""Comparison methods on the same data/trainer stack: SupOnly, Mean Teacher
and Mean Teacher whose consistency is gated by a flaw detector."""
from __future__ import annotations

import copy

import torch

from . import constraints as C
from .config import ExperimentConfig
from .errors import ConfigError, InvalidInputError
from .models import build_task_model
from .trainer import (
    Batch,
    TaskData,
    TrainState,
    check_finite,
    flaw_detector_for,
    load_task_data,
    run_training,
    set_deterministic,
    train_step_flaw,
    write_report,
)


@torch.no_grad()
def ema_update(student_params, teacher_params, alpha: float):
    """In place: teacher <- alpha * teacher + (1 - alpha) * student."""
    if not 0.0 <= alpha < 1.0:
        raise ConfigError(f"alpha must lie in [0, 1), got {alpha}")
    student_params, teacher_params = list(student_params), list(teacher_params)
    if len(student_params) != len(teacher_params):
        raise InvalidInputError("student and teacher have different numbers of parameters")
    for s, t in zip(student_params, teacher_params):
        if s.shape != t.shape:
            raise InvalidInputError(f"parameter shape mismatch {tuple(s.shape)} vs {tuple(t.shape)}")
        t.mul_(alpha).add_(s, alpha=1 - alpha)
    return teacher_params


def supervised_step(model, optimizer, batch: Batch, criterion: str) -> dict:
    model.train()
    loss = C.loss_sup(model(batch.x_l), batch.y_l, criterion)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return {"loss_sup": loss.item()}


def consistency_loss(student_pred, teacher_pred, gate=None):
    """1/2 squared difference summed over pixels and channels; teacher side is detached."""
    if gate is None:
        gate = torch.ones_like(student_pred[:, :1])
    return C.loss_dc(student_pred, teacher_pred, gate)


def flaw_gate(flaw_teacher, flaw_student, normalize=True):
    """1 where the teacher's flaw probability does not exceed the student's (ties keep the pixel)."""
    if flaw_teacher.shape != flaw_student.shape:
        raise InvalidInputError("flaw maps must share a shape")
    if normalize:
        flaw_teacher, flaw_student = C.normalize_flaw(flaw_teacher), C.normalize_flaw(flaw_student)
    return (flaw_teacher <= flaw_student).to(flaw_teacher.dtype)


def _prepare(cfg: ExperimentConfig, method: str, run_dir, cache_dir, data):
    if cfg.method != method:
        raise ConfigError(f"config method is {cfg.method!r}, expected {method!r}")
    cfg.validate()
    if cfg.deterministic:
        set_deterministic()
    return data or load_task_data(cfg, cache_dir, None if run_dir is None else f"{run_dir}/split.json")


def suponly_fit(cfg: ExperimentConfig, run_dir=None, cache_dir=None, data: TaskData | None = None):
    data = _prepare(cfg, "suponly", run_dir, cache_dir, data)
    model = build_task_model(data.spec, cfg.seed_for("model1"))
    state = TrainState({"t1": model}, {"t1": torch.optim.Adam(model.parameters(), lr=cfg.lr_task)})

    def step(st, batch, rampup, dump_dir):
        stats = supervised_step(st.models["t1"], st.optimizers["t1"], batch, data.spec.criterion)
        check_finite(stats, batch, dump_dir, st.step)
        return stats

    state, records, sched = run_training(cfg, data, state, step, lambda st: st.models["t1"], False, run_dir)
    return state, records, write_report(run_dir, cfg, state, records, sched)


def init_mt(cfg: ExperimentConfig, data: TaskData, with_flaw: bool) -> TrainState:
    student = build_task_model(data.spec, cfg.seed_for("model1"))
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    models = {"student": student, "teacher": teacher}
    opts = {"student": torch.optim.Adam(student.parameters(), lr=cfg.lr_task)}
    if with_flaw:
        fd = flaw_detector_for(cfg, data.spec, cfg.seed_for("flaw"))
        models["flaw"] = fd
        opts["flaw"] = torch.optim.Adam(fd.parameters(), lr=cfg.lr_flaw)
    return TrainState(models, opts)


def mt_step(state: TrainState, batch: Batch, cfg: ExperimentConfig, data: TaskData, rampup: float,
            gated: bool, dump_dir=None) -> dict:
    student, teacher = state.models["student"], state.models["teacher"]
    student.train()
    teacher.eval()
    raw_l = student(batch.x_l)
    raw_u = student(batch.x_u)
    s_pred = student.activate(torch.cat([raw_l, raw_u]))
    with torch.no_grad():
        t_pred = teacher.predict(batch.x)
    gate = None
    stats = {}
    if gated:
        fd = state.models["flaw"]
        fd.eval()
        with torch.no_grad():
            if cfg.flaw_norm == "minmax":
                gate = flaw_gate(fd.forward_raw(batch.x, t_pred), fd.forward_raw(batch.x, s_pred.detach()))
            else:
                gate = flaw_gate(fd(batch.x, t_pred), fd(batch.x, s_pred.detach()), normalize=False)
        stats["frac_gate"] = gate.mean().item()
    sup = C.loss_sup(raw_l, batch.y_l, data.spec.criterion)
    cons = consistency_loss(s_pred, t_pred, gate)
    loss = sup + rampup * cfg.lambda_mt * cons
    stats.update({"loss_sup": sup.item(), "loss_cons": cons.item(), "loss_task": loss.item()})
    check_finite(stats, batch, dump_dir, state.step)
    opt = state.optimizers["student"]
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    ema_update(student.parameters(), teacher.parameters(), cfg.alpha_mt)
    if gated:
        stats.update(train_step_flaw(state, batch, cfg, data, model_names=("student", "teacher"), dump_dir=dump_dir))
    return stats


def _mt_eval_name(cfg):
    return "student" if str(cfg.eval_model) == "student" else "teacher"


def mt_fit(cfg: ExperimentConfig, run_dir=None, cache_dir=None, data: TaskData | None = None):
    data = _prepare(cfg, "mt", run_dir, cache_dir, data)
    state = init_mt(cfg, data, with_flaw=False)
    name = _mt_eval_name(cfg)

    def step(st, batch, rampup, dump_dir):
        return mt_step(st, batch, cfg, data, rampup, False, dump_dir)

    state, records, sched = run_training(cfg, data, state, step, lambda st: st.models[name], True, run_dir)
    return state, records, write_report(run_dir, cfg, state, records, sched)


def flaw_gated_mt_fit(cfg: ExperimentConfig, run_dir=None, cache_dir=None, data: TaskData | None = None):
    data = _prepare(cfg, "mt_flawgated", run_dir, cache_dir, data)
    state = init_mt(cfg, data, with_flaw=True)
    name = _mt_eval_name(cfg)

    def step(st, batch, rampup, dump_dir):
        return mt_step(st, batch, cfg, data, rampup, True, dump_dir)

    state, records, sched = run_training(cfg, data, state, step, lambda st: st.models[name], True, run_dir)
    return state, records, write_report(run_dir, cfg, state, records, sched)
