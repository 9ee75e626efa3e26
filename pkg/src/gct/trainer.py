"""Alternating two-step training of two task models and a flaw detector.

Step 1 updates both task models with the flaw detector frozen; step 2
updates the flaw detector on the labeled part of the same batch. The
generic epoch loop in :func:`run_training` is shared with the baselines.
"""
from __future__ import annotations

import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import constraints as C
from .config import DESK_FLAW_STRIDES, DESK_FLAW_WIDTHS, ExperimentConfig
from .data import (
    PixelDataset,
    SplitManifest,
    cached_dataset,
    compose_batches,
    labeled_batches,
    make_split,
    sample_budget,
)
from .errors import ConfigError, NonFiniteLossError
from .flawmap import PipelineParams, pipeline_c_batch
from .metrics import confusion_matrix, miou, psnr
from .models import (
    DENOISING_SPEC,
    FLAW_DETECTOR_STRIDES,
    FLAW_DETECTOR_WIDTHS,
    SEGMENTATION_SPEC,
    TaskSpec,
    build_flaw_detector,
    build_task_model,
    save_checkpoint,
)

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ data plumbing


@dataclass
class Batch:
    x_l: torch.Tensor
    y_l: torch.Tensor
    x_u: torch.Tensor
    labeled_ids: list
    unlabeled_ids: list

    @property
    def x(self):
        return torch.cat([self.x_l, self.x_u])


@dataclass
class TaskData:
    spec: TaskSpec
    train: PixelDataset
    val: PixelDataset
    manifest: SplitManifest

    def gather(self, labeled_ids, unlabeled_ids=(), flip_seed=None):
        x_l = self.train.images[labeled_ids]
        y_l = self.train.labels[labeled_ids]
        x_u = self.train.images[list(unlabeled_ids)] if len(unlabeled_ids) else self.train.images[:0]
        if flip_seed is not None:
            rng = np.random.default_rng(flip_seed)
            fl = rng.random(len(labeled_ids)) < 0.5
            fu = rng.random(len(unlabeled_ids)) < 0.5
            x_l, y_l, x_u = x_l.copy(), y_l.copy(), x_u.copy()
            x_l[fl] = x_l[fl][..., ::-1]
            y_l[fl] = y_l[fl][..., ::-1]
            x_u[fu] = x_u[fu][..., ::-1]
        return Batch(torch.from_numpy(np.ascontiguousarray(x_l)), torch.from_numpy(np.ascontiguousarray(y_l)),
                     torch.from_numpy(np.ascontiguousarray(x_u)), list(labeled_ids), list(unlabeled_ids))

    def target_map(self, y):
        """Label as a dense map comparable with activated predictions."""
        if self.spec.kind == "classification":
            return F.one_hot(y.long(), self.spec.out_channels).permute(0, 3, 1, 2).to(torch.float32)
        return y


def task_spec_for(cfg: ExperimentConfig) -> TaskSpec:
    if cfg.task == "synth_seg":
        return TaskSpec.from_dict({**SEGMENTATION_SPEC.to_dict(), "out_channels": cfg.classes})
    return DENOISING_SPEC


def load_task_data(cfg: ExperimentConfig, cache_dir=None, manifest_out=None) -> TaskData:
    total = cfg.n_train + cfg.n_val
    if cfg.task == "synth_seg":
        full = cached_dataset(cache_dir, "synth_segmentation", count=total, size=cfg.image_size,
                              classes=cfg.classes, seed=cfg.data_seed)
    else:
        full = cached_dataset(cache_dir, "synth_denoising", count=total, size=cfg.image_size,
                              noise_sigma=cfg.noise_sigma, seed=cfg.data_seed)
    train = full.subset(range(cfg.n_train))
    val = full.subset(range(cfg.n_train, total))
    if cfg.split_manifest:
        manifest = SplitManifest.load(cfg.split_manifest)
        if len(manifest.labeled_ids) + len(manifest.unlabeled_ids) != cfg.n_train:
            raise ConfigError(f"split manifest {cfg.split_manifest} does not cover {cfg.n_train} samples")
    else:
        manifest = make_split(cfg.n_train, cfg.ratio, cfg.split_seed, dataset_id=f"{cfg.task}-{cfg.data_seed}")
    if manifest_out is not None:
        manifest.save(manifest_out)
    return TaskData(task_spec_for(cfg), train, val, manifest)


# ------------------------------------------------------------------ state


@dataclass
class TrainState:
    models: dict
    optimizers: dict
    epoch: int = 0
    step: int = 0
    n_samples: int = 0
    history: list = field(default_factory=list)
    best_metric: float = -math.inf
    best_epoch: int = -1


def flaw_detector_for(cfg: ExperimentConfig, spec: TaskSpec, seed: int):
    if cfg.flaw_arch == "reference":
        widths, strides = FLAW_DETECTOR_WIDTHS, FLAW_DETECTOR_STRIDES
    else:
        widths, strides = DESK_FLAW_WIDTHS, DESK_FLAW_STRIDES
    return build_flaw_detector(spec.in_channels + spec.out_channels, seed, widths, strides)


def init_gct(cfg: ExperimentConfig, data: TaskData) -> TrainState:
    t1 = build_task_model(data.spec, cfg.seed_for("model1"))
    t2 = build_task_model(data.spec, cfg.seed_for("model2"))
    fd = flaw_detector_for(cfg, data.spec, cfg.seed_for("flaw"))
    return TrainState(
        models={"t1": t1, "t2": t2, "flaw": fd},
        optimizers={
            "t1": torch.optim.Adam(t1.parameters(), lr=cfg.lr_task),
            "t2": torch.optim.Adam(t2.parameters(), lr=cfg.lr_task),
            "flaw": torch.optim.Adam(fd.parameters(), lr=cfg.lr_flaw),
        },
    )


def _freeze(module, frozen: bool):
    for p in module.parameters():
        p.requires_grad_(not frozen)


def check_finite(stats: dict, batch: Batch, dump_dir, step):
    bad = [k for k, v in stats.items() if not math.isfinite(v)]
    if not bad:
        return
    path = None
    if dump_dir is not None:
        path = Path(dump_dir) / f"nonfinite_step{step}.npz"
        np.savez(path, x_l=batch.x_l.numpy(), y_l=batch.y_l.numpy(), x_u=batch.x_u.numpy(),
                 labeled_ids=np.asarray(batch.labeled_ids), unlabeled_ids=np.asarray(batch.unlabeled_ids))
    raise NonFiniteLossError(f"non-finite loss terms {bad} at step {step}; batch dumped to {path}", path)


def ssl_weights(cfg: ExperimentConfig) -> C.SslWeights:
    return C.SslWeights(cfg.lambda_dc, cfg.lambda_fc, cfg.xi, cfg.eta_dc)


def train_step_tasks(state: TrainState, batch: Batch, cfg: ExperimentConfig, spec: TaskSpec, rampup: float,
                     dump_dir=None) -> dict:
    """Update both task models with the flaw detector frozen."""
    t1, t2, fd = state.models["t1"], state.models["t2"], state.models["flaw"]
    weights = ssl_weights(cfg)
    fd.eval()
    _freeze(fd, True)
    t1.train()
    t2.train()
    x = batch.x
    raws, preds = [], []
    for t in (t1, t2):
        # Labeled and unlabeled halves go through separate forward passes so the
        # supervised path does not depend on the unlabeled inputs.
        raw_l = t(batch.x_l)
        raw_u = t(batch.x_u)
        raws.append(raw_l)
        preds.append(t.activate(torch.cat([raw_l, raw_u])))
    raw_flaws = [fd.forward_raw(x, p) for p in preds]
    flaws = [torch.sigmoid(r) for r in raw_flaws]
    # Masks threshold the per-image min-max of the raw detector output; the
    # fc loss itself acts on the sigmoid output.
    gate_in = raw_flaws if cfg.flaw_norm == "minmax" else flaws
    m1, m2, mfc = C.gct_masks(gate_in[0].detach(), gate_in[1].detach(), cfg.xi, normalize=cfg.flaw_norm == "minmax")
    stats = {}
    total = 0
    for k, (mask, other) in enumerate(((m1, 1), (m2, 0)), start=1):
        i = k - 1
        sup = C.loss_sup(raws[i], batch.y_l, spec.criterion)
        dc = C.loss_dc(preds[i], preds[other], mask)
        fc = C.loss_fc(flaws[i], mfc)
        loss = C.total_task_loss(sup, dc, fc, weights, rampup)
        total = total + loss
        stats.update({f"loss_sup{k}": sup.item(), f"loss_dc{k}": dc.item(), f"loss_fc{k}": fc.item(),
                      f"loss_task{k}": loss.item()})
    check_finite(stats, batch, dump_dir, state.step)
    for name in ("t1", "t2"):
        state.optimizers[name].zero_grad(set_to_none=True)
    total.backward()
    state.optimizers["t1"].step()
    state.optimizers["t2"].step()
    _freeze(fd, False)
    n = mfc.numel()
    stats.update({"frac_dc1": m1.sum().item() / n, "frac_dc2": m2.sum().item() / n, "frac_fc": mfc.sum().item() / n})
    return stats


def flaw_targets(preds, y_map, params: PipelineParams):
    return torch.from_numpy(pipeline_c_batch(preds.numpy(), y_map.numpy(), params)).to(preds.dtype)


def train_step_flaw(state: TrainState, batch: Batch, cfg: ExperimentConfig, data: TaskData,
                    model_names=("t1", "t2"), dump_dir=None) -> dict:
    """Update the flaw detector on labeled samples; task models stay frozen."""
    fd = state.models["flaw"]
    params = PipelineParams(cfg.pipeline_mu(data.spec.out_channels), cfg.nu)
    y_map = data.target_map(batch.y_l)
    preds, targets = [], []
    with torch.no_grad():
        for name in model_names:
            t = state.models[name]
            t.eval()
            p = t.predict(batch.x_l)
            preds.append(p)
            targets.append(flaw_targets(p, y_map, params))
    fd.train()
    b = batch.x_l.shape[0]
    out = fd(batch.x_l.repeat(len(preds), 1, 1, 1), torch.cat(preds))
    loss = sum(C.loss_flaw_detector(out[i * b:(i + 1) * b], targets[i]) for i in range(len(preds)))
    stats = {"loss_flaw": loss.item()}
    check_finite(stats, batch, dump_dir, state.step)
    opt = state.optimizers["flaw"]
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return stats


def gct_step(state, batch, cfg, data, rampup, dump_dir=None):
    stats = train_step_tasks(state, batch, cfg, data.spec, rampup, dump_dir)
    stats.update(train_step_flaw(state, batch, cfg, data, dump_dir=dump_dir))
    return stats


# ------------------------------------------------------------------ evaluation


@torch.no_grad()
def predict_dataset(model, dataset: PixelDataset, batch_size=64):
    model.eval()
    outs = []
    for s in range(0, len(dataset), batch_size):
        outs.append(model.predict(torch.from_numpy(dataset.images[s:s + batch_size])))
    return torch.cat(outs)


def evaluate(model, dataset: PixelDataset, metric_id: str) -> float:
    """mIoU from one confusion matrix over the whole set, or PSNR averaged over images."""
    if len(dataset) == 0:
        raise ConfigError("validation set is empty")
    pred = predict_dataset(model, dataset)
    if metric_id == "miou":
        k = pred.shape[1]
        cm = confusion_matrix(pred.argmax(dim=1).numpy(), dataset.labels, k)
        return miou(cm)
    if metric_id == "psnr":
        p = pred.clamp(0, 1).numpy()
        return float(np.mean([psnr(p[i], dataset.labels[i], 1.0) for i in range(len(p))]))
    raise ConfigError(f"unknown metric {metric_id!r}")


# ------------------------------------------------------------------ schedule


@dataclass
class Schedule:
    total_steps: int
    steps_per_epoch: int
    batch_size: int
    n_reference: int  # sample budget N of the fully supervised reference run


def make_schedule(cfg: ExperimentConfig, data: TaskData, ssl: bool) -> Schedule:
    """Step budget per the sample-count rules.

    The fully supervised reference trains ``epochs_full`` epochs over the whole
    training set, N = S * T * b. SSL runs train exactly N samples (an epoch is
    one pass over the unlabeled subset). SupOnly keeps S under the "epochs"
    budget, so N shrinks with the labeled ratio; under "matched" it trains the
    same N as the SSL runs.
    """
    b = cfg.batch_size
    n_ref = sample_budget(cfg.epochs_full, math.ceil(cfg.n_train / b), b)
    n_lab = len(data.manifest.labeled_ids)
    n_unl = len(data.manifest.unlabeled_ids)
    b_u = b - cfg.labeled_per_batch
    if ssl:
        if n_unl == 0:
            raise ConfigError("SSL methods need a labeled ratio below 1")
        return Schedule(n_ref // b, math.ceil(n_unl / b_u), b, n_ref)
    per_epoch = math.ceil(n_lab / b)
    if cfg.budget == "epochs" or n_unl == 0:
        return Schedule(cfg.epochs_full * per_epoch, per_epoch if n_unl == 0 else math.ceil(n_unl / b_u), b, n_ref)
    return Schedule(n_ref // b, math.ceil(n_unl / b_u), b, n_ref)


def ssl_batch_stream(cfg, data: TaskData):
    seed = cfg.seed_for("batches")
    b_l, b_u = cfg.labeled_per_batch, cfg.batch_size - cfg.labeled_per_batch
    epoch = 0
    while True:
        for sb in compose_batches(data.manifest, b_l, b_u, seed + epoch):
            yield sb.labeled_ids, sb.unlabeled_ids
        epoch += 1


def labeled_batch_stream(cfg, data: TaskData):
    seed = cfg.seed_for("batches")
    epoch = 0
    while True:
        for ids in labeled_batches(data.manifest.labeled_ids, cfg.batch_size, seed + epoch):
            yield ids, []
        epoch += 1


# ------------------------------------------------------------------ run loop


def run_id_for(cfg: ExperimentConfig) -> str:
    return cfg.run_id or f"{cfg.method}_{cfg.task}_r{cfg.ratio.replace('/', '-')}_s{cfg.seed}"


def _mean_stats(rows):
    keys = sorted({k for r in rows for k in r})
    return {k: float(np.mean([r[k] for r in rows if k in r])) for k in keys}


def run_training(cfg: ExperimentConfig, data: TaskData, state: TrainState, step_fn, eval_model_fn,
                 ssl: bool, run_dir=None, on_epoch=None):
    """Shared loop: batches, ramp-up, per-epoch validation, logging, checkpoints.

    ``step_fn(state, batch, rampup, dump_dir) -> dict`` performs one update;
    ``eval_model_fn(state)`` returns the model whose metric is reported.
    Returns the state and the list of per-epoch log records.
    """
    sched = make_schedule(cfg, data, ssl)
    stream = ssl_batch_stream(cfg, data) if ssl else labeled_batch_stream(cfg, data)
    run_dir = Path(run_dir) if run_dir is not None else None
    eta = cfg.eta_mt if cfg.method in ("mt", "mt_flawgated") else cfg.eta_dc
    metric_id = data.spec.metric
    aug_seed = cfg.seed_for("augment")
    records, rows = [], []
    while state.step < sched.total_steps:
        labeled_ids, unlabeled_ids = next(stream)
        flip = aug_seed + state.step if "hflip" in cfg.augment else None
        batch = data.gather(labeled_ids, unlabeled_ids, flip_seed=flip)
        rampup = C.cosine_rampup(state.step / sched.steps_per_epoch, eta)
        stats = step_fn(state, batch, rampup, run_dir)
        stats["rampup"] = rampup
        rows.append(stats)
        state.step += 1
        state.n_samples += sched.batch_size
        if state.step % sched.steps_per_epoch == 0 or state.step == sched.total_steps:
            state.epoch += 1
            metric = evaluate(eval_model_fn(state), data.val, metric_id)
            rec = {"epoch": state.epoch, "step": state.step, **_mean_stats(rows),
                   "val_metric": metric, "metric_id": metric_id, "n_samples": state.n_samples}
            rows = []
            records.append(rec)
            state.history.append(rec)
            improved = metric > state.best_metric
            if improved:
                state.best_metric, state.best_epoch = metric, state.epoch
            log.info("epoch %d step %d %s=%.4f", state.epoch, state.step, metric_id, metric)
            if run_dir is not None:
                with open(run_dir / "metrics.jsonl", "a") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                last = state.step == sched.total_steps
                if last or (cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0):
                    write_checkpoint(run_dir / f"epoch_{state.epoch}.ckpt", state, cfg)
                if improved:
                    write_checkpoint(run_dir / "best.ckpt", state, cfg)
            if on_epoch is not None:
                on_epoch(state, rec)
    return state, records, sched


def write_checkpoint(path, state: TrainState, cfg: ExperimentConfig):
    save_checkpoint(path, state.models, config=cfg.to_dict(), epoch=state.epoch, step=state.step,
                    spec=task_spec_for(cfg).to_dict(), best_metric=state.best_metric)


def prepare_run_dir(cfg: ExperimentConfig):
    run_dir = Path(cfg.output_dir) / run_id_for(cfg)
    if run_dir.exists():
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True)
    cfg.save(run_dir / "config.snapshot")
    return run_dir


def write_report(run_dir, cfg: ExperimentConfig, state: TrainState, records, sched: Schedule):
    from .reporting import RunReport

    rep = RunReport(
        run_id=run_id_for(cfg), method=cfg.method, task=cfg.task, ratio=cfg.ratio, seed=cfg.seed,
        metric_id=records[-1]["metric_id"] if records else "",
        series=[r["val_metric"] for r in records],
        best_metric=state.best_metric, final_metric=records[-1]["val_metric"] if records else float("nan"),
        n_samples=state.n_samples, n_reference=sched.n_reference,
    )
    if run_dir is not None:
        rep.save(Path(run_dir) / "report.json")
    return rep


def fit(cfg: ExperimentConfig, run_dir=None, cache_dir=None, data: TaskData | None = None):
    """Train GCT end to end. Returns ``(state, records, report)``."""
    if cfg.method != "gct":
        raise ConfigError(f"fit() trains GCT; use baselines for method {cfg.method!r}")
    cfg.validate()
    if cfg.deterministic:
        set_deterministic()
    data = data or load_task_data(cfg, cache_dir, None if run_dir is None else Path(run_dir) / "split.json")
    state = init_gct(cfg, data)
    eval_name = "t2" if str(cfg.eval_model) == "2" else "t1"

    def step(st, batch, rampup, dump_dir):
        return gct_step(st, batch, cfg, data, rampup, dump_dir)

    state, records, sched = run_training(cfg, data, state, step, lambda st: st.models[eval_name], True, run_dir)
    return state, records, write_report(run_dir, cfg, state, records, sched)


def set_deterministic():
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
